//! Command-line driver for the restoration pipeline.
//!
//! Every subcommand is re-runnable from its persisted artifacts alone
//! (configs, checkpoints, manifests); there is no hidden state.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use diffrestore_core::codec::{compute_qc_stats, CodecConfig, CodecTrainConfig, ManifoldCodec, QcStats};
use diffrestore_core::config::{Stage2Source, TrainConfig};
use diffrestore_core::degrade::{degrade, read_manifest, sample_params, write_manifest, ManifestEntry};
use diffrestore_core::error::Error;
use diffrestore_core::fixtures;
use diffrestore_core::identity::{read_override_file, IdentityEmbedder};
use diffrestore_core::image::{load_dir, Image};
use diffrestore_core::metrics::evaluate_pairs;
use diffrestore_core::mib::Compensation;
use diffrestore_core::rng::Rng;
use diffrestore_core::trainer::{
    load_stage, restore, save_stage, synthesize_stage1, train_stage1, train_stage2,
    write_training_log,
};

const USAGE: &str = "\
usage: diffrestore <command> [flags]

commands:
  make-fixtures  --out DIR [--count N] [--seed S] [--resolution R]
  train-codec    --data DIR --out CKPT [--config F] [--iterations N] [--seed S]
  stats          --data DIR --codec CKPT --out FILE
  degrade        --data DIR --out DIR --manifest FILE [--seed S]
  train-stage1   --data DIR --codec CKPT --stats FILE --out CKPT
                 [--config F] [--iterations N] [--seed S]
  synth-stage1   --lq DIR --ckpt1 CKPT --codec CKPT --stats FILE --out DIR
                 [--steps N] [--seed S]
  train-stage2   --hq DIR --d1 DIR --codec CKPT --stats FILE --out CKPT
                 [--ckpt1 CKPT] [--config F] [--iterations N] [--seed S]
  restore        --input DIR|FILE --ckpt1 CKPT --ckpt2 CKPT --codec CKPT
                 --stats FILE --out DIR [--steps N] [--seed S]
                 [--id-override FILE]
  eval           --restored DIR --reference DIR --out FILE
  ablate         --hq DIR --source DIR --codec CKPT --stats FILE --out CKPT
                 --variant 2adain|no-stage1|noise-inject|no-inject
                 [--beta V] [--ckpt1 CKPT] [--config F] [--iterations N]
                 [--seed S]

--data (and --hq) fall back to $DIFFRESTORE_DATA_ROOT when omitted.
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}\n");
            }
            eprint!("{USAGE}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

enum CliError {
    /// Bad invocation: usage text, exit 2.
    Usage(String),
    /// Runtime failure: diagnostic, exit 1.
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult = Result<(), CliError>;

struct Flags {
    values: BTreeMap<String, String>,
}

impl Flags {
    fn parse(args: &[String], allowed: &[&str]) -> Result<Flags, CliError> {
        let mut values = BTreeMap::new();
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let Some(name) = arg.strip_prefix("--") else {
                return Err(CliError::Usage(format!("unexpected argument {arg:?}")));
            };
            if !allowed.contains(&name) {
                return Err(CliError::Usage(format!("unknown flag --{name}")));
            }
            let value = it
                .next()
                .ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?;
            values.insert(name.to_string(), value.clone());
        }
        Ok(Flags { values })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|s| s.as_str())
    }

    fn require(&self, name: &str) -> Result<&str, CliError> {
        self.get(name)
            .ok_or_else(|| CliError::Usage(format!("missing required flag --{name}")))
    }

    /// Required path flag with the data-root environment fallback.
    fn data_dir(&self, name: &str) -> Result<PathBuf, CliError> {
        if let Some(v) = self.get(name) {
            return Ok(PathBuf::from(v));
        }
        if let Ok(root) = std::env::var("DIFFRESTORE_DATA_ROOT") {
            return Ok(PathBuf::from(root));
        }
        Err(CliError::Usage(format!(
            "missing --{name} (and DIFFRESTORE_DATA_ROOT is not set)"
        )))
    }

    fn parse_num<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>, CliError> {
        match self.get(name) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("--{name}: cannot parse {v:?}"))),
        }
    }
}

/// Load the config file (or defaults) and apply common CLI overrides.
fn load_config(flags: &Flags) -> Result<TrainConfig, CliError> {
    let mut cfg = match flags.get("config") {
        Some(path) => TrainConfig::parse_file(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = flags.parse_num::<u64>("seed")? {
        cfg.seed = seed;
    }
    if let Some(iters) = flags.parse_num::<usize>("iterations")? {
        cfg.iterations = iters;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &[String]) -> CliResult {
    let Some(command) = args.first() else {
        return Err(CliError::Usage(String::new()));
    };
    let rest = &args[1..];
    match command.as_str() {
        "make-fixtures" => cmd_make_fixtures(rest),
        "train-codec" => cmd_train_codec(rest),
        "stats" => cmd_stats(rest),
        "degrade" => cmd_degrade(rest),
        "train-stage1" => cmd_train_stage1(rest),
        "synth-stage1" => cmd_synth_stage1(rest),
        "train-stage2" => cmd_train_stage2(rest),
        "restore" => cmd_restore(rest),
        "eval" => cmd_eval(rest),
        "ablate" => cmd_ablate(rest),
        other => Err(CliError::Usage(format!("unknown command {other:?}"))),
    }
}

fn cmd_make_fixtures(args: &[String]) -> CliResult {
    let flags = Flags::parse(args, &["out", "count", "seed", "resolution"])?;
    let out = flags.require("out")?;
    let count = flags.parse_num::<usize>("count")?.unwrap_or(16);
    let seed = flags.parse_num::<u64>("seed")?.unwrap_or(0);
    let resolution = flags.parse_num::<usize>("resolution")?.unwrap_or(64);
    let names = fixtures::write_corpus(out, count, seed, resolution)?;
    println!("wrote {} fixture faces to {out}", names.len());
    Ok(())
}

fn cmd_train_codec(args: &[String]) -> CliResult {
    let flags = Flags::parse(args, &["data", "out", "config", "iterations", "seed"])?;
    let data = flags.data_dir("data")?;
    let out = flags.require("out")?;
    let cfg = load_config(&flags)?;
    let images: Vec<Image> = load_dir(&data)?.into_iter().map(|(_, i)| i).collect();
    let mut codec = ManifoldCodec::new(&CodecConfig { resolution: cfg.resolution, seed: cfg.seed })?;
    let train_cfg = CodecTrainConfig {
        iterations: cfg.iterations,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        kl_weight: cfg.kl_weight,
        seed: cfg.seed,
    };
    let losses = codec.train(&images, &train_cfg)?;
    codec.save(out, cfg.iterations)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("codec trained for {} steps: loss {first:.5} -> {last:.5}", losses.len());
    }
    println!("saved codec checkpoint to {out}");
    Ok(())
}

fn cmd_stats(args: &[String]) -> CliResult {
    let flags = Flags::parse(args, &["data", "codec", "out"])?;
    let data = flags.data_dir("data")?;
    let codec = ManifoldCodec::load(flags.require("codec")?)?;
    let out = flags.require("out")?;
    let images: Vec<Image> = load_dir(&data)?.into_iter().map(|(_, i)| i).collect();
    let stats = compute_qc_stats(&codec, &images)?;
    stats.write(out)?;
    println!("wrote qc stats over {} images to {out}", stats.count);
    Ok(())
}

fn cmd_degrade(args: &[String]) -> CliResult {
    let flags = Flags::parse(args, &["data", "out", "manifest", "seed"])?;
    let data = flags.data_dir("data")?;
    let out = PathBuf::from(flags.require("out")?);
    let manifest_path = PathBuf::from(flags.require("manifest")?);

    let entries: Vec<ManifestEntry> = if manifest_path.exists() {
        // Replay an existing manifest bit for bit.
        read_manifest(&manifest_path)?
    } else {
        let seed = flags.parse_num::<u64>("seed")?.unwrap_or(0);
        let mut rng = Rng::seed_from(seed);
        let entries: Vec<ManifestEntry> = load_dir(&data)?
            .into_iter()
            .map(|(name, _)| ManifestEntry { source: name, params: sample_params(rng.next_u64()) })
            .collect();
        write_manifest(&manifest_path, &entries)?;
        entries
    };

    std::fs::create_dir_all(&out).map_err(Error::from)?;
    for entry in &entries {
        let img = Image::load_png(data.join(&entry.source))?;
        let lq = degrade(&img, &entry.params)?;
        lq.save_png(out.join(&entry.source))?;
    }
    println!("degraded {} images into {}", entries.len(), out.display());
    Ok(())
}

fn cmd_train_stage1(args: &[String]) -> CliResult {
    let flags = Flags::parse(args, &["data", "codec", "stats", "out", "config", "iterations", "seed"])?;
    let data = flags.data_dir("data")?;
    let codec = ManifoldCodec::load(flags.require("codec")?)?;
    let stats = QcStats::read(flags.require("stats")?)?;
    let out = flags.require("out")?;
    let mut cfg = load_config(&flags)?;
    cfg.stage = 1;
    cfg.resolution = codec.resolution();
    let images = load_dir(&data)?;
    let (model, log) = train_stage1(&images, &codec, &stats, &cfg)?;
    save_stage(out, &model, &cfg, cfg.iterations, codec.content_hash(), "stage1")?;
    write_training_log(format!("{out}.log.tsv"), &log)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!("stage 1 trained for {} steps: ldm {:.5} -> {:.5}", log.len(), first.ldm, last.ldm);
    }
    println!("saved stage-1 checkpoint to {out}");
    Ok(())
}

fn cmd_synth_stage1(args: &[String]) -> CliResult {
    let flags = Flags::parse(args, &["lq", "ckpt1", "codec", "stats", "out", "steps", "seed"])?;
    let lq_dir = flags.data_dir("lq")?;
    let stage1 = load_stage(flags.require("ckpt1")?)?;
    let codec = ManifoldCodec::load(flags.require("codec")?)?;
    let stats = QcStats::read(flags.require("stats")?)?;
    let out = PathBuf::from(flags.require("out")?);
    let steps = flags.parse_num::<usize>("steps")?.unwrap_or(stage1.cfg.sampler_steps);
    let seed = flags.parse_num::<u64>("seed")?.unwrap_or(stage1.cfg.seed);
    if stage1.codec_hash != codec.content_hash() {
        return Err(Error::config("stage-1 checkpoint was trained against a different codec").into());
    }
    let lq = load_dir(&lq_dir)?;
    let outputs = synthesize_stage1(&stage1.model, &stage1.cfg, &codec, &stats, &lq, steps, seed)?;
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    let mut manifest = String::new();
    for (name, img) in &outputs {
        img.save_png(out.join(name))?;
        manifest.push_str(&format!("{name}\tsteps={steps}\tseed={seed}\n"));
    }
    std::fs::write(out.join("manifest.tsv"), manifest).map_err(Error::from)?;
    println!("synthesized {} stage-1 outputs into {}", outputs.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_stage2(
    hq_dir: &Path,
    source_dir: &Path,
    codec_path: &str,
    stats_path: &str,
    out: &str,
    ckpt1: Option<&str>,
    cfg: &mut TrainConfig,
) -> CliResult {
    let codec = ManifoldCodec::load(codec_path)?;
    let stats = QcStats::read(stats_path)?;
    cfg.stage = 2;
    cfg.resolution = codec.resolution();
    let hq = load_dir(hq_dir)?;
    let source = load_dir(source_dir)?;
    let embedder = IdentityEmbedder::new(codec.resolution());
    let warm_map = match ckpt1 {
        Some(path) if cfg.warm_start => {
            let stage1 = load_stage(path)?;
            if stage1.codec_hash != codec.content_hash() {
                return Err(
                    Error::config("stage-1 checkpoint was trained against a different codec").into()
                );
            }
            Some(stage1.model.store.to_tensor_map())
        }
        _ => None,
    };
    let (model, log) = train_stage2(&hq, &source, warm_map.as_ref(), &codec, &stats, &embedder, cfg)?;
    save_stage(out, &model, cfg, cfg.iterations, codec.content_hash(), "stage2")?;
    write_training_log(format!("{out}.log.tsv"), &log)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "stage 2 trained for {} steps: total {:.5} -> {:.5}",
            log.len(),
            first.total,
            last.total
        );
    }
    println!("saved stage-2 checkpoint to {out}");
    Ok(())
}

fn cmd_train_stage2(args: &[String]) -> CliResult {
    let flags = Flags::parse(
        args,
        &["hq", "d1", "codec", "stats", "out", "ckpt1", "config", "iterations", "seed"],
    )?;
    let hq = flags.data_dir("hq")?;
    let d1 = PathBuf::from(flags.require("d1")?);
    let mut cfg = load_config(&flags)?;
    run_stage2(
        &hq,
        &d1,
        flags.require("codec")?,
        flags.require("stats")?,
        flags.require("out")?,
        flags.get("ckpt1"),
        &mut cfg,
    )
}

fn cmd_ablate(args: &[String]) -> CliResult {
    let flags = Flags::parse(
        args,
        &["hq", "source", "codec", "stats", "out", "variant", "beta", "ckpt1", "config", "iterations", "seed"],
    )?;
    let hq = flags.data_dir("hq")?;
    let source = PathBuf::from(flags.require("source")?);
    let mut cfg = load_config(&flags)?;
    match flags.require("variant")? {
        "2adain" => cfg.mib_enabled = false,
        "no-stage1" => cfg.stage2_source = Stage2Source::Lq,
        "noise-inject" => cfg.compensation = Compensation::Noise,
        "no-inject" => cfg.compensation = Compensation::None,
        other => return Err(CliError::Usage(format!("unknown ablation variant {other:?}"))),
    }
    if let Some(beta) = flags.parse_num::<f64>("beta")? {
        cfg.lambda_info = beta;
    }
    run_stage2(
        &hq,
        &source,
        flags.require("codec")?,
        flags.require("stats")?,
        flags.require("out")?,
        flags.get("ckpt1"),
        &mut cfg,
    )
}

fn cmd_restore(args: &[String]) -> CliResult {
    let flags = Flags::parse(
        args,
        &["input", "ckpt1", "ckpt2", "codec", "stats", "out", "steps", "seed", "id-override"],
    )?;
    let input = PathBuf::from(flags.require("input")?);
    let stage1 = load_stage(flags.require("ckpt1")?)?;
    let stage2 = load_stage(flags.require("ckpt2")?)?;
    let codec = ManifoldCodec::load(flags.require("codec")?)?;
    let stats = QcStats::read(flags.require("stats")?)?;
    let out = PathBuf::from(flags.require("out")?);
    let steps = flags.parse_num::<usize>("steps")?.unwrap_or(stage2.cfg.sampler_steps);
    let seed = flags.parse_num::<u64>("seed")?.unwrap_or(0);
    let overrides = match flags.get("id-override") {
        Some(path) => read_override_file(path)?,
        None => BTreeMap::new(),
    };

    let inputs: Vec<(String, Image)> = if input.is_dir() {
        load_dir(&input)?
    } else {
        let name = input
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::config("input path has no file name"))?;
        vec![(name, Image::load_png(&input)?)]
    };

    let embedder = IdentityEmbedder::new(codec.resolution());
    std::fs::create_dir_all(out.join("stage1")).map_err(Error::from)?;
    let mut master = Rng::seed_from(seed);
    for (name, lq) in &inputs {
        let img_seed = master.next_u64();
        let id_override = overrides.get(name);
        let result = restore(
            lq, &codec, &stats, &stage1, &stage2, &embedder, steps, img_seed, id_override,
        )?;
        result.d2.save_png(out.join(name))?;
        result.d1.save_png(out.join("stage1").join(name))?;
    }
    println!("restored {} images into {}", inputs.len(), out.display());
    Ok(())
}

fn cmd_eval(args: &[String]) -> CliResult {
    let flags = Flags::parse(args, &["restored", "reference", "out"])?;
    let restored_dir = PathBuf::from(flags.require("restored")?);
    let reference_dir = PathBuf::from(flags.require("reference")?);
    let out = flags.require("out")?;
    let restored = load_dir(&restored_dir)?;
    let reference: BTreeMap<String, Image> = load_dir(&reference_dir)?.into_iter().collect();
    let mut pairs = Vec::new();
    for (name, img) in restored {
        let reference_img = reference
            .get(&name)
            .ok_or_else(|| Error::config(format!("no reference image for {name:?}")))?;
        pairs.push((name, img, reference_img.clone()));
    }
    let (h, _) = pairs
        .first()
        .map(|(_, img, _)| img.dims())
        .ok_or_else(|| Error::config("no restored images found"))?;
    let embedder = IdentityEmbedder::new(h);
    let report = evaluate_pairs(&embedder, &pairs)?;
    report.write(out)?;
    println!(
        "evaluated {} pairs: mean psnr {:.3} dB, ssim {:.4}, id_sim {:.4} -> {out}",
        report.rows.len(),
        report.mean_psnr(),
        report.mean_ssim(),
        report.mean_id_sim()
    );
    Ok(())
}
