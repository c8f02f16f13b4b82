//! The manifold codec: a small variational image codec.
//!
//! `encode` maps a `[3, R, R]` image to an 8-channel moments tensor at
//! `R/8` resolution (4 mean channels, 4 log-variance channels) through a
//! strided encoder and a 1x1 quant conv; `decode` maps a 4-channel latent
//! back to an image. Both diffusion stages share one frozen codec.

use std::path::Path;

use crate::autograd::{Graph, Value};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{AdamW, BoundParams, Conv2d, GroupNorm, Init, ParamStore, TensorArchive};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LATENT_CHANNELS: usize = 4;
pub const MOMENT_CHANNELS: usize = 8;
pub const SPATIAL_FACTOR: usize = 8;
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Default per-channel std floor `o` for manifold normalization.
pub const STD_FLOOR: f64 = 0.01;

/// Encoder moments: `[8, h, w]` with log-variance channels clamped.
#[derive(Clone, Debug)]
pub struct Moments {
    tensor: Tensor,
}

impl Moments {
    pub fn from_tensor(t: Tensor) -> Result<Moments> {
        let shape = t.shape();
        if shape.len() != 3 || shape[0] != MOMENT_CHANNELS {
            return Err(Error::shape(format!(
                "moments must be [{MOMENT_CHANNELS},h,w], got {shape:?}"
            )));
        }
        if !t.is_finite() {
            return Err(Error::Domain("moments contain non-finite values".into()));
        }
        let (_, h, w) = t.chw();
        let mut data = t.data().to_vec();
        for v in &mut data[LATENT_CHANNELS * h * w..] {
            *v = v.clamp(LOGVAR_MIN, LOGVAR_MAX);
        }
        Ok(Moments { tensor: Tensor::from_vec(vec![MOMENT_CHANNELS, h, w], data) })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        let (_, h, w) = self.tensor.chw();
        (h, w)
    }

    pub fn mean_channels(&self) -> Tensor {
        self.tensor.slice_channels(0, LATENT_CHANNELS)
    }

    pub fn logvar_channels(&self) -> Tensor {
        self.tensor.slice_channels(LATENT_CHANNELS, MOMENT_CHANNELS)
    }
}

/// Per-element diagonal Gaussian over the latent channels.
#[derive(Clone, Debug)]
pub struct DiagonalGaussian {
    mean: Tensor,
    logvar: Tensor,
}

impl DiagonalGaussian {
    pub fn from_moments(m: &Moments) -> DiagonalGaussian {
        DiagonalGaussian { mean: m.mean_channels(), logvar: m.logvar_channels() }
    }

    /// The distribution mode, which for a Gaussian is the mean.
    pub fn mode(&self) -> Tensor {
        self.mean.clone()
    }

    pub fn sample(&self, rng: &mut Rng) -> Tensor {
        let eps = Tensor::randn(self.mean.shape().to_vec(), rng);
        let std = self.logvar.map(|lv| (0.5 * lv).exp());
        self.mean.add(&std.mul(&eps))
    }

    /// KL divergence to the standard normal, averaged over elements.
    pub fn kl_to_standard(&self) -> f64 {
        let n = self.mean.numel() as f64;
        let mut acc = 0.0;
        for (&mu, &lv) in self.mean.data().iter().zip(self.logvar.data()) {
            acc += 0.5 * (mu * mu + lv.exp() - 1.0 - lv);
        }
        acc / n
    }
}

/// Dataset-level per-channel moments of encoded manifolds.
#[derive(Clone, Debug, PartialEq)]
pub struct QcStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Number of images accumulated.
    pub count: usize,
    /// Std floor `o` used wherever these stats divide something.
    pub floor: f64,
    /// Hash of the codec the stats were computed with.
    pub codec_hash: u64,
}

impl QcStats {
    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != MOMENT_CHANNELS || self.std.len() != MOMENT_CHANNELS {
            return Err(Error::shape("qc stats must cover 8 channels"));
        }
        if self.count < 1 {
            return Err(Error::config("qc stats need at least one image"));
        }
        if self.std.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(Error::Domain("qc stats std must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Standardize a `[4, h, w]` latent per channel with the mean-channel
    /// statistics, so the diffusion stages see roughly unit-scale data.
    pub fn normalize_latent(&self, z: &Tensor) -> Tensor {
        let (c, h, w) = z.chw();
        assert_eq!(c, LATENT_CHANNELS);
        let mut out = z.data().to_vec();
        for ch in 0..c {
            let mu = self.mean[ch];
            let inv = 1.0 / self.std[ch].max(self.floor);
            for v in &mut out[ch * h * w..(ch + 1) * h * w] {
                *v = (*v - mu) * inv;
            }
        }
        Tensor::from_vec(vec![c, h, w], out)
    }

    /// Inverse of [`QcStats::normalize_latent`].
    pub fn denormalize_latent(&self, z: &Tensor) -> Tensor {
        let (c, h, w) = z.chw();
        assert_eq!(c, LATENT_CHANNELS);
        let mut out = z.data().to_vec();
        for ch in 0..c {
            let mu = self.mean[ch];
            let sd = self.std[ch].max(self.floor);
            for v in &mut out[ch * h * w..(ch + 1) * h * w] {
                *v = *v * sd + mu;
            }
        }
        Tensor::from_vec(vec![c, h, w], out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("codec_hash={}\n", self.codec_hash));
        out.push_str(&format!("count={}\n", self.count));
        out.push_str(&format!("floor={}\n", self.floor));
        for c in 0..MOMENT_CHANNELS {
            out.push_str(&format!("{c}\t{}\t{}\n", self.mean[c], self.std[c]));
        }
        std::fs::write(path.as_ref(), out)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<QcStats> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut stats = QcStats {
            mean: vec![f64::NAN; MOMENT_CHANNELS],
            std: vec![f64::NAN; MOMENT_CHANNELS],
            count: 0,
            floor: STD_FLOOR,
            codec_hash: 0,
        };
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                match k {
                    "codec_hash" => {
                        stats.codec_hash =
                            v.parse().map_err(|_| Error::config("bad codec_hash"))?
                    }
                    "count" => stats.count = v.parse().map_err(|_| Error::config("bad count"))?,
                    "floor" => stats.floor = v.parse().map_err(|_| Error::config("bad floor"))?,
                    other => return Err(Error::config(format!("unknown stats key {other:?}"))),
                }
            } else {
                let mut it = line.split('\t');
                let bad = || Error::config("bad stats row");
                let c: usize = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                if c >= MOMENT_CHANNELS {
                    return Err(Error::config(format!("stats channel {c} out of range")));
                }
                stats.mean[c] = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                stats.std[c] = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            }
        }
        if stats.mean.iter().chain(&stats.std).any(|v| v.is_nan()) {
            return Err(Error::config("stats file missing channel rows"));
        }
        stats.validate()?;
        Ok(stats)
    }
}

struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvBlock {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> ConvBlock {
        ConvBlock {
            conv: Conv2d::new(ps, &format!("{name}.conv"), cin, cout, 3, stride, 1, Init::Kaiming(1.0), rng),
            norm: GroupNorm::new(ps, &format!("{name}.norm"), cout, 8),
        }
    }

    fn forward(&self, g: &Graph, bound: &BoundParams, x: Value) -> Value {
        let x = self.conv.forward(g, bound, x);
        let x = self.norm.forward(g, bound, x);
        g.silu(x)
    }
}

struct EncoderNet {
    conv_in: Conv2d,
    down1: ConvBlock,
    down2: ConvBlock,
    down3: ConvBlock,
    mid: ConvBlock,
    conv_out: Conv2d,
    quant_conv: Conv2d,
}

struct DecoderNet {
    post_quant: Conv2d,
    conv_in: Conv2d,
    mid: ConvBlock,
    up1: ConvBlock,
    up2: ConvBlock,
    up3: ConvBlock,
    conv_out: Conv2d,
}

pub struct CodecConfig {
    pub resolution: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { resolution: 64, seed: 0 }
    }
}

pub struct ManifoldCodec {
    resolution: usize,
    init_seed: u64,
    params: ParamStore,
    enc: EncoderNet,
    dec: DecoderNet,
}

impl ManifoldCodec {
    pub fn new(cfg: &CodecConfig) -> Result<ManifoldCodec> {
        if cfg.resolution % SPATIAL_FACTOR != 0 || cfg.resolution < 2 * SPATIAL_FACTOR {
            return Err(Error::config(format!(
                "codec resolution {} must be a multiple of {SPATIAL_FACTOR} and at least {}",
                cfg.resolution,
                2 * SPATIAL_FACTOR
            )));
        }
        let mut ps = ParamStore::new();
        let mut rng = Rng::seed_from(cfg.seed ^ 0xC0DE_C0DE);
        let enc = EncoderNet {
            conv_in: Conv2d::new(&mut ps, "enc.conv_in", 3, 16, 3, 1, 1, Init::Kaiming(1.0), &mut rng),
            down1: ConvBlock::new(&mut ps, "enc.down1", 16, 32, 2, &mut rng),
            down2: ConvBlock::new(&mut ps, "enc.down2", 32, 48, 2, &mut rng),
            down3: ConvBlock::new(&mut ps, "enc.down3", 48, 64, 2, &mut rng),
            mid: ConvBlock::new(&mut ps, "enc.mid", 64, 64, 1, &mut rng),
            conv_out: Conv2d::new(&mut ps, "enc.conv_out", 64, LATENT_CHANNELS, 3, 1, 1, Init::Kaiming(1.0), &mut rng),
            quant_conv: Conv2d::new(&mut ps, "enc.quant_conv", LATENT_CHANNELS, MOMENT_CHANNELS, 1, 1, 0, Init::Kaiming(1.0), &mut rng),
        };
        let dec = DecoderNet {
            post_quant: Conv2d::new(&mut ps, "dec.post_quant", LATENT_CHANNELS, LATENT_CHANNELS, 1, 1, 0, Init::Kaiming(1.0), &mut rng),
            conv_in: Conv2d::new(&mut ps, "dec.conv_in", LATENT_CHANNELS, 64, 3, 1, 1, Init::Kaiming(1.0), &mut rng),
            mid: ConvBlock::new(&mut ps, "dec.mid", 64, 64, 1, &mut rng),
            up1: ConvBlock::new(&mut ps, "dec.up1", 64, 32, 1, &mut rng),
            up2: ConvBlock::new(&mut ps, "dec.up2", 32, 24, 1, &mut rng),
            up3: ConvBlock::new(&mut ps, "dec.up3", 24, 16, 1, &mut rng),
            conv_out: Conv2d::new(&mut ps, "dec.conv_out", 16, 3, 3, 1, 1, Init::Kaiming(1.0), &mut rng),
        };
        Ok(ManifoldCodec { resolution: cfg.resolution, init_seed: cfg.seed, params: ps, enc, dec })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn latent_dims(&self) -> (usize, usize) {
        (self.resolution / SPATIAL_FACTOR, self.resolution / SPATIAL_FACTOR)
    }

    pub fn content_hash(&self) -> u64 {
        self.params.content_hash()
    }

    /// Encoder forward on a graph; output is the clamped `[8,h,w]` moments.
    fn forward_encode(&self, g: &Graph, bound: &BoundParams, x: Value) -> Value {
        let x = self.enc.conv_in.forward(g, bound, x);
        let x = self.enc.down1.forward(g, bound, x);
        let x = self.enc.down2.forward(g, bound, x);
        let x = self.enc.down3.forward(g, bound, x);
        let x = self.enc.mid.forward(g, bound, x);
        let x = self.enc.conv_out.forward(g, bound, x);
        let m = self.enc.quant_conv.forward(g, bound, x);
        let mean = g.slice_channels(m, 0, LATENT_CHANNELS);
        let logvar = g.slice_channels(m, LATENT_CHANNELS, MOMENT_CHANNELS);
        let logvar = g.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX);
        g.concat_channels(mean, logvar)
    }

    /// Decoder forward on a graph; output is the raw (unclipped) image tensor.
    fn forward_decode(&self, g: &Graph, bound: &BoundParams, z: Value) -> Value {
        let x = self.dec.post_quant.forward(g, bound, z);
        let x = self.dec.conv_in.forward(g, bound, x);
        let x = self.dec.mid.forward(g, bound, x);
        let x = g.upsample_nearest_2x(x);
        let x = self.dec.up1.forward(g, bound, x);
        let x = g.upsample_nearest_2x(x);
        let x = self.dec.up2.forward(g, bound, x);
        let x = g.upsample_nearest_2x(x);
        let x = self.dec.up3.forward(g, bound, x);
        self.dec.conv_out.forward(g, bound, x)
    }

    /// Deterministic encode of an image into moments.
    pub fn encode(&self, img: &Image) -> Result<Moments> {
        let (h, w) = img.dims();
        if h != self.resolution || w != self.resolution {
            return Err(Error::shape(format!(
                "codec expects {0}x{0} images, got {h}x{w}",
                self.resolution
            )));
        }
        let g = Graph::new();
        let bound = self.params.bind(&g);
        let x = g.leaf(img.tensor().clone());
        let m = self.forward_encode(&g, &bound, x);
        Moments::from_tensor(g.value(m))
    }

    /// Deterministic decode of a `[4, h, w]` latent into an image.
    pub fn decode(&self, z: &Tensor) -> Result<Image> {
        let (lh, lw) = self.latent_dims();
        if z.shape() != [LATENT_CHANNELS, lh, lw] {
            return Err(Error::shape(format!(
                "latent must be [{LATENT_CHANNELS},{lh},{lw}], got {:?}",
                z.shape()
            )));
        }
        let g = Graph::new();
        let bound = self.params.bind(&g);
        let zv = g.leaf(z.clone());
        let out = self.forward_decode(&g, &bound, zv);
        Image::from_tensor(g.value(out))
    }

    /// Train encoder, quant conv, and decoder with a reconstruction loss and
    /// a small KL regularizer. Returns the per-step total losses.
    pub fn train(&mut self, images: &[Image], cfg: &CodecTrainConfig) -> Result<Vec<f64>> {
        if images.is_empty() {
            return Err(Error::config("codec training needs at least one image"));
        }
        for img in images {
            if img.dims() != (self.resolution, self.resolution) {
                return Err(Error::shape(format!(
                    "training image is {:?}, codec expects {}",
                    img.dims(),
                    self.resolution
                )));
            }
        }
        let hp = AdamW { weight_decay: cfg.weight_decay, ..AdamW::with_lr(cfg.learning_rate) };
        let mut rng = Rng::seed_from(cfg.seed);
        let mut losses = Vec::with_capacity(cfg.iterations);
        for step in 1..=cfg.iterations {
            let g = Graph::new();
            let bound = self.params.bind(&g);
            let mut batch_loss: Option<Value> = None;
            for _ in 0..cfg.batch_size {
                let img = &images[rng.index(images.len())];
                let x = g.leaf(img.tensor().clone());
                let m = self.forward_encode(&g, &bound, x);
                let mean = g.slice_channels(m, 0, LATENT_CHANNELS);
                let logvar = g.slice_channels(m, LATENT_CHANNELS, MOMENT_CHANNELS);
                // Reparameterized sample.
                let (lh, lw) = self.latent_dims();
                let eps = g.leaf(Tensor::randn(vec![LATENT_CHANNELS, lh, lw], &mut rng));
                let std = g.exp(g.scale(logvar, 0.5));
                let z = g.add(mean, g.mul(std, eps));
                let recon = self.forward_decode(&g, &bound, z);
                let rec_loss = g.mse(recon, x);
                // KL(N(mu, sigma^2) || N(0, 1)), mean over elements.
                let mu2 = g.mul(mean, mean);
                let elv = g.exp(logvar);
                let kl_elem = g.sub(g.add_scalar(g.add(mu2, elv), -1.0), logvar);
                let kl = g.scale(g.mean_all(kl_elem), 0.5);
                let sample_loss = g.add(rec_loss, g.scale(kl, cfg.kl_weight));
                batch_loss = Some(match batch_loss {
                    Some(acc) => g.add(acc, sample_loss),
                    None => sample_loss,
                });
            }
            let loss = g.scale(batch_loss.expect("batch_size >= 1"), 1.0 / cfg.batch_size as f64);
            let grads = g.backward(loss);
            self.params.adamw_step(&bound, &grads, &hp, step);
            losses.push(g.value(loss).item());
        }
        Ok(losses)
    }

    pub fn save(&self, path: impl AsRef<Path>, iteration: usize) -> Result<()> {
        let mut archive = TensorArchive {
            meta: Default::default(),
            tensors: self.params.to_tensor_map(),
        };
        archive.meta.insert("schema".into(), "1".into());
        archive.meta.insert("kind".into(), "codec".into());
        archive.meta.insert("resolution".into(), self.resolution.to_string());
        archive.meta.insert("init_seed".into(), self.init_seed.to_string());
        archive.meta.insert("iteration".into(), iteration.to_string());
        archive.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ManifoldCodec> {
        let archive = TensorArchive::read(path)?;
        if archive.meta_get("kind")? != "codec" {
            return Err(Error::Checkpoint("archive is not a codec checkpoint".into()));
        }
        let resolution: usize = archive
            .meta_get("resolution")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad resolution in codec checkpoint".into()))?;
        let init_seed: u64 = archive
            .meta_get("init_seed")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad init_seed in codec checkpoint".into()))?;
        let mut codec = ManifoldCodec::new(&CodecConfig { resolution, seed: init_seed })?;
        codec.params.load_tensor_map(&archive.tensors)?;
        Ok(codec)
    }
}

#[derive(Clone, Debug)]
pub struct CodecTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            iterations: 2000,
            batch_size: 2,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            kl_weight: 1e-6,
            seed: 0,
        }
    }
}

/// Per-channel mean and std over all spatial positions of all encoded
/// training images (single pass, sum and sum-of-squares).
pub fn compute_qc_stats(codec: &ManifoldCodec, images: &[Image]) -> Result<QcStats> {
    if images.is_empty() {
        return Err(Error::config("qc stats need at least one image"));
    }
    let mut sum = vec![0.0; MOMENT_CHANNELS];
    let mut sum_sq = vec![0.0; MOMENT_CHANNELS];
    let mut n = 0usize;
    for img in images {
        let m = codec.encode(img)?;
        let (h, w) = m.spatial_dims();
        for c in 0..MOMENT_CHANNELS {
            for &v in m.tensor().channel(c) {
                sum[c] += v;
                sum_sq[c] += v * v;
            }
        }
        n += h * w;
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let std: Vec<f64> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| (sq / nf - m * m).max(0.0).sqrt())
        .collect();
    Ok(QcStats { mean, std, count: images.len(), floor: STD_FLOOR, codec_hash: codec.content_hash() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn tiny_codec() -> ManifoldCodec {
        ManifoldCodec::new(&CodecConfig { resolution: 32, seed: 1 }).unwrap()
    }

    #[test]
    fn encode_shape_and_determinism() {
        let codec = ManifoldCodec::new(&CodecConfig { resolution: 64, seed: 0 }).unwrap();
        let img = fixtures::face(1, 0, 64);
        let m = codec.encode(&img).unwrap();
        assert_eq!(m.tensor().shape(), &[8, 8, 8]);
        let m2 = codec.encode(&img).unwrap();
        assert_eq!(m.tensor().data(), m2.tensor().data());
    }

    #[test]
    fn encode_rejects_wrong_resolution() {
        let codec = tiny_codec();
        let img = fixtures::face(1, 0, 64);
        assert!(matches!(codec.encode(&img), Err(Error::Shape(_))));
    }

    #[test]
    fn decode_shape_determinism_and_finiteness() {
        let codec = tiny_codec();
        let z = Tensor::zeros(vec![4, 4, 4]);
        let img = codec.decode(&z).unwrap();
        assert_eq!(img.dims(), (32, 32));
        assert!(img.tensor().is_finite());
        let img2 = codec.decode(&z).unwrap();
        assert_eq!(img.tensor().data(), img2.tensor().data());
        assert!(matches!(codec.decode(&Tensor::zeros(vec![4, 8, 8])), Err(Error::Shape(_))));
    }

    #[test]
    fn diagonal_gaussian_mode_kl_and_sampling() {
        let m = Moments::from_tensor(Tensor::zeros(vec![8, 2, 2])).unwrap();
        let dist = DiagonalGaussian::from_moments(&m);
        assert_eq!(dist.mode().data(), m.mean_channels().data());
        assert_eq!(dist.kl_to_standard(), 0.0);

        // Statistical oracle: logvar 0 -> per-element sample std within a
        // 3-sigma band of 1 over 10^4 draws.
        let mut rng = Rng::seed_from(5);
        let n_draws = 10_000;
        let numel = dist.mode().numel();
        let mut acc = vec![0.0; numel];
        let mut acc_sq = vec![0.0; numel];
        for _ in 0..n_draws {
            let s = dist.sample(&mut rng);
            for (i, &v) in s.data().iter().enumerate() {
                acc[i] += v;
                acc_sq[i] += v * v;
            }
        }
        let band = 3.0 / (2.0 * n_draws as f64).sqrt();
        for i in 0..numel {
            let mean = acc[i] / n_draws as f64;
            let std = (acc_sq[i] / n_draws as f64 - mean * mean).sqrt();
            assert!((std - 1.0).abs() < band, "element {i}: std {std:.4}");
        }
    }

    #[test]
    fn sample_with_floored_logvar_is_mode() {
        let mut data = vec![0.5; 8 * 2 * 2];
        for v in &mut data[4 * 4..] {
            *v = -40.0; // clamps to -30
        }
        let m = Moments::from_tensor(Tensor::from_vec(vec![8, 2, 2], data)).unwrap();
        assert_eq!(m.logvar_channels().data()[0], -30.0);
        let dist = DiagonalGaussian::from_moments(&m);
        let mut rng = Rng::seed_from(1);
        let s = dist.sample(&mut rng);
        assert!(s.max_abs_diff(&dist.mode()) < 1e-3);
    }

    #[test]
    fn kl_is_nonnegative_on_random_moments() {
        let mut rng = Rng::seed_from(7);
        for _ in 0..1000 {
            let t = Tensor::randn(vec![8, 2, 2], &mut rng).scale(2.0);
            let m = Moments::from_tensor(t).unwrap();
            assert!(DiagonalGaussian::from_moments(&m).kl_to_standard() >= 0.0);
        }
    }

    #[test]
    fn moments_reject_bad_input() {
        assert!(Moments::from_tensor(Tensor::zeros(vec![4, 2, 2])).is_err());
        assert!(Moments::from_tensor(Tensor::full(vec![8, 2, 2], f64::NAN)).is_err());
    }

    #[test]
    fn train_zero_steps_keeps_initialization() {
        let mut codec = tiny_codec();
        let before = codec.content_hash();
        let images = vec![fixtures::face(1, 0, 32)];
        let cfg = CodecTrainConfig { iterations: 0, ..Default::default() };
        codec.train(&images, &cfg).unwrap();
        assert_eq!(codec.content_hash(), before);
    }

    #[test]
    fn train_reduces_loss_and_is_seed_deterministic() {
        let images: Vec<Image> = (0..4).map(|i| fixtures::face(2, i, 32)).collect();
        let cfg = CodecTrainConfig {
            iterations: 60,
            learning_rate: 1e-3,
            seed: 3,
            ..Default::default()
        };
        let mut a = tiny_codec();
        let losses_a = a.train(&images, &cfg).unwrap();
        assert!(
            losses_a.last().unwrap() < losses_a.first().unwrap(),
            "loss did not decrease: {:?} -> {:?}",
            losses_a.first(),
            losses_a.last()
        );
        let mut b = tiny_codec();
        let losses_b = b.train(&images, &cfg).unwrap();
        assert_eq!(losses_a, losses_b);
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn train_rejects_empty_dataset() {
        let mut codec = tiny_codec();
        let cfg = CodecTrainConfig::default();
        assert!(matches!(codec.train(&[], &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut codec = tiny_codec();
        let images = vec![fixtures::face(0, 0, 32)];
        let cfg = CodecTrainConfig { iterations: 3, ..Default::default() };
        codec.train(&images, &cfg).unwrap();
        let path = dir.path().join("codec.ckpt");
        codec.save(&path, 3).unwrap();
        let loaded = ManifoldCodec::load(&path).unwrap();
        assert_eq!(loaded.content_hash(), codec.content_hash());
        let img = fixtures::face(0, 0, 32);
        assert_eq!(
            loaded.encode(&img).unwrap().tensor().data(),
            codec.encode(&img).unwrap().tensor().data()
        );
    }

    #[test]
    fn qc_stats_oracle_and_invariances() {
        let codec = tiny_codec();
        let images: Vec<Image> = (0..3).map(|i| fixtures::face(4, i, 32)).collect();
        let stats = compute_qc_stats(&codec, &images).unwrap();
        stats.validate().unwrap();

        // Independent two-pass accumulation oracle.
        let mut all: Vec<Vec<f64>> = vec![Vec::new(); MOMENT_CHANNELS];
        for img in &images {
            let m = codec.encode(img).unwrap();
            for c in 0..MOMENT_CHANNELS {
                all[c].extend_from_slice(m.tensor().channel(c));
            }
        }
        for c in 0..MOMENT_CHANNELS {
            let n = all[c].len() as f64;
            let mean = all[c].iter().sum::<f64>() / n;
            let var = all[c].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!((stats.mean[c] - mean).abs() < 1e-6, "channel {c} mean");
            assert!((stats.std[c] - var.sqrt()).abs() < 1e-6, "channel {c} std");
        }

        // Duplicating the dataset leaves mean/std unchanged.
        let mut doubled = images.clone();
        doubled.extend(images.iter().cloned());
        let stats2 = compute_qc_stats(&codec, &doubled).unwrap();
        for c in 0..MOMENT_CHANNELS {
            assert!((stats.mean[c] - stats2.mean[c]).abs() < 1e-9);
            assert!((stats.std[c] - stats2.std[c]).abs() < 1e-9);
        }

        // Permutation invariance.
        let permuted: Vec<Image> = vec![images[2].clone(), images[0].clone(), images[1].clone()];
        let stats3 = compute_qc_stats(&codec, &permuted).unwrap();
        for c in 0..MOMENT_CHANNELS {
            assert!((stats.mean[c] - stats3.mean[c]).abs() < 1e-6);
            assert!((stats.std[c] - stats3.std[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn qc_stats_single_constant_image() {
        // One image: per-channel sigma of a constant channel is 0 and the
        // mean equals that constant.
        let codec = tiny_codec();
        let img = fixtures::face(9, 0, 32);
        let stats = compute_qc_stats(&codec, &[img.clone()]).unwrap();
        let m = codec.encode(&img).unwrap();
        // Verify against direct per-channel stats of the single encoding.
        for c in 0..MOMENT_CHANNELS {
            let ch = m.tensor().channel(c);
            let n = ch.len() as f64;
            let mean = ch.iter().sum::<f64>() / n;
            assert!((stats.mean[c] - mean).abs() < 1e-9);
        }
        assert_eq!(stats.count, 1);
    }

    #[test]
    fn qc_stats_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let codec = tiny_codec();
        let stats = compute_qc_stats(&codec, &[fixtures::face(0, 0, 32)]).unwrap();
        let path = dir.path().join("stats.tsv");
        stats.write(&path).unwrap();
        let back = QcStats::read(&path).unwrap();
        assert_eq!(back.count, stats.count);
        assert_eq!(back.codec_hash, stats.codec_hash);
        assert_eq!(back.floor, stats.floor);
        for c in 0..MOMENT_CHANNELS {
            assert!((back.mean[c] - stats.mean[c]).abs() < 1e-12);
            assert!((back.std[c] - stats.std[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_stats_dataset_is_config_error() {
        let codec = tiny_codec();
        assert!(matches!(compute_qc_stats(&codec, &[]), Err(Error::Config(_))));
    }
}
