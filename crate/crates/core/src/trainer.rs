//! Two-stage training and restoration orchestration.
//!
//! Stage I trains the denoiser plus control branch on freshly degraded LQ
//! images, conditioned on the LQ manifold. Stage-I outputs are synthesized
//! once and cached; Stage II finetunes the same weights conditioned on the
//! MIB-fused manifold of those outputs, with the joint loss
//! `ldm + lambda_info * info + lambda_rec * rec`. The codec and identity
//! embedder stay frozen throughout.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autograd::Graph;
use crate::codec::{ManifoldCodec, QcStats, LATENT_CHANNELS, MOMENT_CHANNELS};
use crate::config::TrainConfig;
use crate::control::{predict_controlled, ControlBranch};
use crate::degrade::{degrade, sample_params};
use crate::diffusion::{ddpm_sample, make_schedule, q_sample, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::identity::{IdentityEmbedder, IdentityEmbedding};
use crate::image::Image;
use crate::autograd::Value;
use crate::mib::{
    dataset_noise, fuse, inject, normalize_manifold, normalize_manifold_instance,
    normalize_tensor, Compensation, MibModule, NormSource,
};
use crate::nn::{AdamW, ParamStore, TensorArchive};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Static-thresholding bound for sampled latent estimates, in scaled
/// latent units (the trainer scales latents to roughly unit std).
const Z0_CLAMP: f64 = 4.0;

/// Cosine decay from `lr` to `lr * final_frac` over `total` steps.
fn lr_at(lr: f64, final_frac: f64, step: usize, total: usize) -> f64 {
    if final_frac >= 1.0 || total <= 1 {
        return lr;
    }
    let progress = (step - 1) as f64 / (total - 1) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    lr * (final_frac + (1.0 - final_frac) * cos)
}

/// One training-log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub ldm: f64,
    pub info: f64,
    pub rec: f64,
    pub total: f64,
}

pub fn write_training_log(path: impl AsRef<Path>, records: &[LogRecord]) -> Result<()> {
    let mut out = String::from("iteration\tldm\tinfo\trec\ttotal\n");
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.iteration, r.ldm, r.info, r.rec, r.total
        ));
    }
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path.as_ref(), out)?;
    Ok(())
}

/// Denoiser + control branch (+ MIB for Stage II) sharing one parameter
/// store, so a single optimizer covers everything trainable in a stage.
pub struct StageModel {
    pub store: ParamStore,
    pub denoiser: Denoiser,
    pub control: ControlBranch,
    pub mib: Option<MibModule>,
}

impl StageModel {
    pub fn new(cfg: &TrainConfig, with_mib: bool) -> StageModel {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from(cfg.seed ^ 0x57A6_E5EE_D0_u64);
        let dcfg = DenoiserConfig::default();
        let denoiser = Denoiser::new(&mut store, "denoiser", &dcfg, &mut rng);
        let control = ControlBranch::new(&mut store, "control", MOMENT_CHANNELS, &dcfg, &mut rng);
        let mib = with_mib.then(|| MibModule::new(&mut store, "mib", &mut rng));
        StageModel { store, denoiser, control, mib }
    }
}

/// A stage checkpoint loaded back from disk.
pub struct LoadedStage {
    pub model: StageModel,
    pub cfg: TrainConfig,
    pub iteration: usize,
    pub codec_hash: u64,
    pub kind: String,
}

pub fn save_stage(
    path: impl AsRef<Path>,
    model: &StageModel,
    cfg: &TrainConfig,
    iteration: usize,
    codec_hash: u64,
    kind: &str,
) -> Result<()> {
    let mut archive = TensorArchive {
        meta: Default::default(),
        tensors: model.store.to_tensor_map(),
    };
    archive.meta.insert("schema".into(), "1".into());
    archive.meta.insert("kind".into(), kind.into());
    archive.meta.insert("iteration".into(), iteration.to_string());
    archive.meta.insert("codec_hash".into(), codec_hash.to_string());
    archive.meta.insert("config".into(), cfg.to_config_string());
    archive.write(path)
}

pub fn load_stage(path: impl AsRef<Path>) -> Result<LoadedStage> {
    let archive = TensorArchive::read(&path)?;
    let kind = archive.meta_get("kind")?.to_string();
    if kind != "stage1" && kind != "stage2" {
        return Err(Error::Checkpoint(format!("unexpected checkpoint kind {kind:?}")));
    }
    let cfg = TrainConfig::parse_str(archive.meta_get("config")?)?;
    let iteration: usize = archive
        .meta_get("iteration")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad iteration".into()))?;
    let codec_hash: u64 = archive
        .meta_get("codec_hash")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad codec_hash".into()))?;
    let with_mib = kind == "stage2" && cfg.mib_enabled;
    let mut model = StageModel::new(&cfg, with_mib);
    model.store.load_tensor_map(&archive.tensors)?;
    Ok(LoadedStage { model, cfg, iteration, codec_hash, kind })
}

fn check_codec_pairing(codec: &ManifoldCodec, stats: &QcStats) -> Result<()> {
    if stats.codec_hash != codec.content_hash() {
        return Err(Error::config(
            "stats file was computed with a different codec (hash mismatch)",
        ));
    }
    Ok(())
}

fn check_resolution(images: &[(String, Image)], resolution: usize) -> Result<()> {
    for (name, img) in images {
        if img.dims() != (resolution, resolution) {
            return Err(Error::shape(format!(
                "{name}: image is {:?}, expected {resolution}x{resolution}",
                img.dims()
            )));
        }
    }
    Ok(())
}

/// Standardize a conditioning manifold on the graph with the dataset QC
/// statistics (per-channel affine; gradients pass through).
fn normalize_conditioning(g: &Graph, stats: &QcStats, v: Value) -> Value {
    let neg_mu = Tensor::from_vec(
        vec![MOMENT_CHANNELS],
        stats.mean.iter().map(|m| -m).collect::<Vec<f64>>(),
    );
    let inv = Tensor::from_vec(
        vec![MOMENT_CHANNELS],
        stats.std.iter().map(|s| 1.0 / s.max(stats.floor)).collect::<Vec<f64>>(),
    );
    g.mul_channel(g.add_channel(v, g.leaf(neg_mu)), g.leaf(inv))
}

/// Diffusion targets: mode of each HQ image's moments, standardized per
/// channel.
fn encode_hq(codec: &ManifoldCodec, images: &[(String, Image)], stats: &QcStats) -> Result<Vec<Tensor>> {
    images
        .iter()
        .map(|(_, img)| Ok(stats.normalize_latent(&codec.encode(img)?.mean_channels())))
        .collect()
}

/// Stage-I training: per step, degrade a fresh LQ from a random HQ, encode
/// it, condition the denoiser on that manifold through the control branch,
/// and minimize the epsilon-prediction loss. Codec stays frozen.
pub fn train_stage1(
    images: &[(String, Image)],
    codec: &ManifoldCodec,
    stats: &QcStats,
    cfg: &TrainConfig,
) -> Result<(StageModel, Vec<LogRecord>)> {
    if images.is_empty() {
        return Err(Error::config("stage 1 needs a non-empty HQ dataset"));
    }
    check_codec_pairing(codec, stats)?;
    check_resolution(images, codec.resolution())?;
    let codec_hash_before = codec.content_hash();

    let hq = encode_hq(codec, images, stats)?;
    let sched = make_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end)?;
    let mut model = StageModel::new(cfg, false);
    let use_ema = cfg.ema_decay > 0.0 && cfg.iterations > 0;
    if use_ema {
        model.store.enable_ema();
    }
    let hp = AdamW { weight_decay: cfg.weight_decay, ..AdamW::with_lr(cfg.learning_rate) };
    let (lh, lw) = codec.latent_dims();
    let mut rng = Rng::seed_from(cfg.seed);
    let mut log = Vec::with_capacity(cfg.iterations);

    for step in 1..=cfg.iterations {
        let g = Graph::new();
        let bound = model.store.bind(&g);
        let mut acc = None;
        for _ in 0..cfg.batch_size {
            let idx = rng.index(images.len());
            let params = sample_params(rng.next_u64());
            let lq = degrade(&images[idx].1, &params)?;
            let manifold = codec.encode(&lq)?;
            let t = rng.uniform_int(1, cfg.t_max as i64) as usize;
            let eps = Tensor::randn(vec![LATENT_CHANNELS, lh, lw], &mut rng);
            let z_t = q_sample(&hq[idx], t, &eps, &sched)?;

            let m_leaf = g.leaf(normalize_tensor(manifold.tensor(), stats));
            let feats = model.control.features(&g, &bound, m_leaf);
            let mods = model.control.modulations(&g, &bound, &feats);
            let eps_pred = model.denoiser.forward(&g, &bound, g.leaf(z_t), t, Some(&mods));
            let loss = g.mse(eps_pred, g.leaf(eps));
            acc = Some(match acc {
                Some(prev) => g.add(prev, loss),
                None => loss,
            });
        }
        let ldm = g.scale(acc.expect("batch_size >= 1"), 1.0 / cfg.batch_size as f64);
        let grads = g.backward(ldm);
        let lr = lr_at(hp.lr, cfg.lr_final_frac, step, cfg.iterations);
        model.store.adamw_step_with(&bound, &grads, &hp, step, |name| {
            if name.starts_with("control.") { lr * cfg.control_lr_mult } else { lr }
        });
        model.store.ema_update(cfg.ema_decay);
        let v = g.value(ldm).item();
        log.push(LogRecord { iteration: step, ldm: v, info: 0.0, rec: 0.0, total: v });
    }
    if use_ema {
        model.store.swap_in_ema();
    }

    debug_assert_eq!(codec.content_hash(), codec_hash_before);
    Ok((model, log))
}

/// Run spaced DDPM sampling conditioned on a manifold and decode the result.
fn sample_restoration(
    model: &StageModel,
    codec: &ManifoldCodec,
    stats: &QcStats,
    conditioning: &Tensor,
    cfg: &TrainConfig,
    steps: usize,
    rng: &mut Rng,
) -> Result<Image> {
    let cond = normalize_tensor(conditioning, stats);
    let sched = make_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end)?;
    let (lh, lw) = codec.latent_dims();
    let mut denoise = |z_t: &Tensor, t: usize| {
        Ok(predict_controlled(
            &model.store,
            &model.denoiser,
            &model.control,
            &cond,
            z_t,
            t,
        ))
    };
    let z = ddpm_sample(&mut denoise, &sched, steps, &[LATENT_CHANNELS, lh, lw], rng, Some(Z0_CLAMP))?;
    codec.decode(&stats.denormalize_latent(&z))
}

/// Synthesize Stage-I restorations for a set of LQ images. Deterministic
/// given the seed; each image gets its own derived noise stream.
pub fn synthesize_stage1(
    stage1: &StageModel,
    stage1_cfg: &TrainConfig,
    codec: &ManifoldCodec,
    stats: &QcStats,
    lq_images: &[(String, Image)],
    steps: usize,
    seed: u64,
) -> Result<Vec<(String, Image)>> {
    check_codec_pairing(codec, stats)?;
    check_resolution(lq_images, codec.resolution())?;
    let mut master = Rng::seed_from(seed);
    let mut out = Vec::with_capacity(lq_images.len());
    for (name, lq) in lq_images {
        let mut rng = master.split();
        let manifold = codec.encode(lq)?;
        let img = sample_restoration(
            stage1,
            codec,
            stats,
            manifold.tensor(),
            stage1_cfg,
            steps,
            &mut rng,
        )?;
        out.push((name.clone(), img));
    }
    Ok(out)
}

/// Per-pair cached tensors for Stage-II training.
struct Stage2Item {
    r: Tensor,
    f_r: Tensor,
    inject_base: Tensor,
    emb: Tensor,
    z_hq_mode: Tensor,
    z_diff: Tensor,
}

/// Stage-II training: joint loss over denoiser, control branch, and MIB
/// weights, conditioned on the MIB-fused manifold of the cached Stage-I
/// outputs (or LQ images for the no-Stage-I ablation).
pub fn train_stage2(
    hq: &[(String, Image)],
    source: &[(String, Image)],
    warm_start_from: Option<&BTreeMap<String, Tensor>>,
    codec: &ManifoldCodec,
    stats: &QcStats,
    embedder: &IdentityEmbedder,
    cfg: &TrainConfig,
) -> Result<(StageModel, Vec<LogRecord>)> {
    if hq.is_empty() {
        return Err(Error::config("stage 2 needs a non-empty HQ dataset"));
    }
    check_codec_pairing(codec, stats)?;
    check_resolution(hq, codec.resolution())?;
    check_resolution(source, codec.resolution())?;
    let by_name: BTreeMap<&str, &Image> =
        source.iter().map(|(n, i)| (n.as_str(), i)).collect();

    let mut items = Vec::with_capacity(hq.len());
    for (name, hq_img) in hq {
        let src = by_name.get(name.as_str()).ok_or_else(|| {
            Error::config(format!("missing Stage-I output for {name:?}"))
        })?;
        let r = codec.encode(src)?;
        let f_r = normalize_manifold(&r, stats);
        let inject_base = match cfg.identity_norm {
            NormSource::Dataset => f_r.clone(),
            NormSource::Instance => normalize_manifold_instance(&r, stats.floor),
        };
        let emb = embedder.embed(src)?.as_tensor();
        let m_hq = codec.encode(hq_img)?;
        let mode = m_hq.mean_channels();
        items.push(Stage2Item {
            r: r.tensor().clone(),
            f_r,
            inject_base,
            emb,
            z_hq_mode: mode.clone(),
            z_diff: stats.normalize_latent(&mode),
        });
    }

    let with_mib = cfg.mib_enabled;
    let mut model = StageModel::new(cfg, with_mib);
    if let Some(map) = warm_start_from {
        let loaded = model.store.load_matching(map)?;
        if loaded != map.len() {
            return Err(Error::Checkpoint(format!(
                "warm start loaded {loaded} of {} stage-1 tensors",
                map.len()
            )));
        }
    }
    let use_ema = cfg.ema_decay > 0.0 && cfg.iterations > 0;
    if use_ema {
        model.store.enable_ema();
    }

    let sched = make_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end)?;
    let hp = AdamW { weight_decay: cfg.weight_decay, ..AdamW::with_lr(cfg.learning_rate) };
    let (lh, lw) = codec.latent_dims();
    let mut rng = Rng::seed_from(cfg.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(cfg.iterations);

    for step in 1..=cfg.iterations {
        let g = Graph::new();
        let bound = model.store.bind(&g);
        let mut ldm_acc = None;
        let mut info_acc = None;
        let mut rec_acc = None;
        for _ in 0..cfg.batch_size {
            let idx = rng.index(items.len());
            let item = &items[idx];
            let noise = matches!(cfg.compensation, Compensation::Noise)
                .then(|| dataset_noise(stats, lh, lw, &mut rng));
            let t = rng.uniform_int(1, cfg.t_max as i64) as usize;
            let eps = Tensor::randn(vec![LATENT_CHANNELS, lh, lw], &mut rng);
            let z_t = q_sample(&item.z_diff, t, &eps, &sched)?;

            let conditioning;
            let mut losses = None;
            match &model.mib {
                Some(mib) => {
                    let f_r = g.leaf(item.f_r.clone());
                    let out = mib.forward(
                        &g,
                        &bound,
                        g.leaf(item.r.clone()),
                        f_r,
                        g.leaf(item.inject_base.clone()),
                        g.leaf(item.emb.clone()),
                        g.leaf(item.z_hq_mode.clone()),
                        cfg.compensation,
                        noise,
                    );
                    conditioning = out.fused;
                    losses = Some((out.info, out.rec));
                }
                None => {
                    // Plain second AdaIN pass: condition directly on R.
                    conditioning = g.leaf(item.r.clone());
                }
            }
            let cond = normalize_conditioning(&g, stats, conditioning);
            let feats = model.control.features(&g, &bound, cond);
            let mods = model.control.modulations(&g, &bound, &feats);
            let eps_pred = model.denoiser.forward(&g, &bound, g.leaf(z_t), t, Some(&mods));
            let ldm = g.mse(eps_pred, g.leaf(eps));
            ldm_acc = Some(match ldm_acc {
                Some(prev) => g.add(prev, ldm),
                None => ldm,
            });
            if let Some((info, rec)) = losses {
                info_acc = Some(match info_acc {
                    Some(prev) => g.add(prev, info),
                    None => info,
                });
                rec_acc = Some(match rec_acc {
                    Some(prev) => g.add(prev, rec),
                    None => rec,
                });
            }
        }
        let inv_b = 1.0 / cfg.batch_size as f64;
        let ldm = g.scale(ldm_acc.expect("batch_size >= 1"), inv_b);
        let mut total = ldm;
        let (mut info_v, mut rec_v) = (0.0, 0.0);
        if let (Some(ia), Some(ra)) = (info_acc, rec_acc) {
            let info = g.scale(ia, inv_b);
            let rec = g.scale(ra, inv_b);
            total = g.add(g.add(ldm, g.scale(info, cfg.lambda_info)), g.scale(rec, cfg.lambda_rec));
            info_v = g.value(info).item();
            rec_v = g.value(rec).item();
        }
        let grads = g.backward(total);
        let lr = lr_at(hp.lr, cfg.lr_final_frac, step, cfg.iterations);
        model.store.adamw_step_with(&bound, &grads, &hp, step, |name| {
            if name.starts_with("control.") { lr * cfg.control_lr_mult } else { lr }
        });
        model.store.ema_update(cfg.ema_decay);
        log.push(LogRecord {
            iteration: step,
            ldm: g.value(ldm).item(),
            info: info_v,
            rec: rec_v,
            total: g.value(total).item(),
        });
    }

    if use_ema {
        model.store.swap_in_ema();
    }
    Ok((model, log))
}

/// Build the Stage-II conditioning manifold for one restored image at
/// inference time.
fn stage2_conditioning(
    stage2: &LoadedStage,
    codec: &ManifoldCodec,
    stats: &QcStats,
    embedder: &IdentityEmbedder,
    d1: &Image,
    id_override: Option<&IdentityEmbedding>,
    rng: &mut Rng,
) -> Result<Tensor> {
    let r = codec.encode(d1)?;
    let Some(mib) = &stage2.model.mib else {
        return Ok(r.tensor().clone());
    };
    let cfg = &stage2.cfg;
    let f_r = normalize_manifold(&r, stats);
    let lambda = mib.infer_lambda(&stage2.model.store, &f_r);
    let (h, w) = r.spatial_dims();
    let compensation = match cfg.compensation {
        Compensation::Identity => {
            let base = match cfg.identity_norm {
                NormSource::Dataset => f_r.clone(),
                NormSource::Instance => normalize_manifold_instance(&r, stats.floor),
            };
            let emb = match id_override {
                Some(e) => e.clone(),
                None => embedder.embed(d1)?,
            };
            let (sigma, mu) = mib.infer_affine(&stage2.model.store, &emb.as_tensor());
            inject(&base, &sigma, &mu)
        }
        Compensation::Noise => dataset_noise(stats, h, w, rng),
        Compensation::None => Tensor::zeros(vec![MOMENT_CHANNELS, h, w]),
    };
    fuse(r.tensor(), &compensation, &lambda)
}

pub struct RestoreOutput {
    pub d1: Image,
    pub d2: Image,
}

/// End-to-end restoration: Stage-I sampling, MIB conditioning from the
/// Stage-I output (identity from that output unless overridden), Stage-II
/// sampling. Deterministic given the seed.
#[allow(clippy::too_many_arguments)]
pub fn restore(
    lq: &Image,
    codec: &ManifoldCodec,
    stats: &QcStats,
    stage1: &LoadedStage,
    stage2: &LoadedStage,
    embedder: &IdentityEmbedder,
    steps: usize,
    seed: u64,
    id_override: Option<&IdentityEmbedding>,
) -> Result<RestoreOutput> {
    let res = codec.resolution();
    if lq.dims() != (res, res) {
        return Err(Error::shape(format!(
            "input is {:?}, pipeline expects {res}x{res}",
            lq.dims()
        )));
    }
    check_codec_pairing(codec, stats)?;
    for (stage, name) in [(stage1, "stage 1"), (stage2, "stage 2")] {
        if stage.codec_hash != codec.content_hash() {
            return Err(Error::config(format!(
                "{name} checkpoint was trained against a different codec"
            )));
        }
    }
    let mut master = Rng::seed_from(seed);
    let mut rng1 = master.split();
    let mut rng2 = master.split();

    let r_lq = codec.encode(lq)?;
    let d1 = sample_restoration(
        &stage1.model,
        codec,
        stats,
        r_lq.tensor(),
        &stage1.cfg,
        steps,
        &mut rng1,
    )?;

    let conditioning =
        stage2_conditioning(stage2, codec, stats, embedder, &d1, id_override, &mut rng2)?;
    let d2 = sample_restoration(
        &stage2.model,
        codec,
        stats,
        &conditioning,
        &stage2.cfg,
        steps,
        &mut rng2,
    )?;
    Ok(RestoreOutput { d1, d2 })
}

/// Re-encode and MIB-process a manifold exactly as Stage-II training sees
/// it; exposed for tests that probe the conditioning path.
pub fn stage2_condition_for_test(
    stage2: &LoadedStage,
    codec: &ManifoldCodec,
    stats: &QcStats,
    embedder: &IdentityEmbedder,
    d1: &Image,
    id_override: Option<&IdentityEmbedding>,
    rng: &mut Rng,
) -> Result<Tensor> {
    stage2_conditioning(stage2, codec, stats, embedder, d1, id_override, rng)
}
