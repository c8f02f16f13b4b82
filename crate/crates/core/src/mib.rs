//! Manifold information bottleneck.
//!
//! The Stage-I manifold `R` is normalized against dataset QC statistics,
//! a learned sigmoid filter `lambda` decides per element how much of `R`
//! survives, and an identity-modulated compensation `eps_id` fills in what
//! was compressed: `Z = lambda * R + (1 - lambda) * eps_id`. Training
//! balances a KL-style compression penalty against a manifold
//! reconstruction loss.

use crate::autograd::{Graph, Value};
use crate::codec::{Moments, QcStats, LATENT_CHANNELS, MOMENT_CHANNELS};
use crate::error::{Error, Result};
use crate::identity::EMBED_DIM;
use crate::nn::{BoundParams, Conv2d, Init, Linear, ParamStore};
use crate::ops;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Elementwise information-compression penalty:
/// `-log((1-l)^2) + 1/2 [(1-l)^2 + (l f)^2 - 1]`.
pub fn info_loss_scalar(lambda: f64, f_r: f64) -> f64 {
    let om = 1.0 - lambda;
    -(om * om).ln() + 0.5 * (om * om + (lambda * f_r) * (lambda * f_r) - 1.0)
}

/// Analytic `d info_loss_scalar / d lambda`.
pub fn info_loss_dlambda(lambda: f64, f_r: f64) -> f64 {
    2.0 / (1.0 - lambda) - (1.0 - lambda) + lambda * f_r * f_r
}

fn check_lambda_domain(lambda: &Tensor) -> Result<()> {
    if lambda.min() < 0.0 || lambda.max() >= 1.0 {
        return Err(Error::Domain(format!(
            "information filter must lie in [0, 1), got [{}, {}]",
            lambda.min(),
            lambda.max()
        )));
    }
    Ok(())
}

/// Mean of [`info_loss_scalar`] over all elements.
pub fn info_loss(lambda: &Tensor, f_r: &Tensor) -> Result<f64> {
    lambda.check_same_shape(f_r, "info_loss")?;
    check_lambda_domain(lambda)?;
    let n = lambda.numel() as f64;
    let mut acc = 0.0;
    for (&l, &f) in lambda.data().iter().zip(f_r.data()) {
        acc += info_loss_scalar(l, f);
    }
    Ok(acc / n)
}

/// Manifold reconstruction loss: MSE between the mode (mean-channel)
/// tensors of the fused manifold and the HQ moments.
pub fn rec_loss(z: &Tensor, z_hq: &Moments) -> Result<f64> {
    z_hq.tensor().check_same_shape(z, "rec_loss")?;
    let mode = z.slice_channels(0, LATENT_CHANNELS);
    Ok(mode.mse(&z_hq.mean_channels()))
}

/// Per-channel normalization of any 8-channel manifold tensor against
/// dataset statistics: `(t - mu_QC) / max(sigma_QC, o)`.
pub fn normalize_tensor(t: &Tensor, stats: &QcStats) -> Tensor {
    let (c, h, w) = t.chw();
    assert_eq!(c, MOMENT_CHANNELS);
    let mut out = t.data().to_vec();
    for ch in 0..c {
        let mu = stats.mean[ch];
        let denom = stats.std[ch].max(stats.floor);
        for v in &mut out[ch * h * w..(ch + 1) * h * w] {
            *v = (*v - mu) / denom;
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

/// Per-channel normalization against dataset statistics:
/// `(R - mu_QC) / max(sigma_QC, o)`.
pub fn normalize_manifold(r: &Moments, stats: &QcStats) -> Tensor {
    normalize_tensor(r.tensor(), stats)
}

/// Per-channel affine injection: `f_r * sigma_id + mu_id` broadcast over space.
pub fn inject(f_r: &Tensor, sigma_id: &[f64], mu_id: &[f64]) -> Tensor {
    let (c, h, w) = f_r.chw();
    assert_eq!(sigma_id.len(), c);
    assert_eq!(mu_id.len(), c);
    let mut out = f_r.data().to_vec();
    for ch in 0..c {
        for v in &mut out[ch * h * w..(ch + 1) * h * w] {
            *v = *v * sigma_id[ch] + mu_id[ch];
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

/// Elementwise convex combination `Z = lambda R + (1 - lambda) eps_id`.
pub fn fuse(r: &Tensor, eps_id: &Tensor, lambda: &Tensor) -> Result<Tensor> {
    r.check_same_shape(eps_id, "fuse")?;
    r.check_same_shape(lambda, "fuse")?;
    let mut out = vec![0.0; r.numel()];
    let (rd, ed, ld) = (r.data(), eps_id.data(), lambda.data());
    for i in 0..out.len() {
        out[i] = ld[i] * rd[i] + (1.0 - ld[i]) * ed[i];
    }
    Ok(Tensor::from_vec(r.shape().to_vec(), out))
}

/// Which statistics normalize `R` before the identity affine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormSource {
    /// Dataset QC statistics (the executable algorithm description).
    #[default]
    Dataset,
    /// Per-manifold instance statistics (the formula variant).
    Instance,
}

/// What compensates the compressed part of the manifold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Compensation {
    /// Identity-modulated normalized manifold (the full method).
    #[default]
    Identity,
    /// A fresh draw from the dataset moments per step (noise-injection
    /// ablation).
    Noise,
    /// Zero compensation: `Z = lambda R` (compression-only ablation).
    None,
}

/// Trainable MIB weights: the sigmoid filter conv and the two identity
/// affine maps.
pub struct MibModule {
    pub filter_conv: Conv2d,
    pub sigma_fc: Linear,
    pub mu_fc: Linear,
}

pub struct MibGraph {
    pub lambda: Value,
    pub compensation: Value,
    pub fused: Value,
    /// Scalar compression loss node.
    pub info: Value,
    /// Scalar manifold reconstruction loss node.
    pub rec: Value,
}

/// Initial filter-conv bias. Starts the filter near `lambda = 0.88`, so the
/// fused manifold begins close to `R` and Stage-II finetuning sees a small
/// distribution shift relative to Stage I.
const FILTER_BIAS_INIT: f64 = 2.0;

impl MibModule {
    /// Zero-initialized heads with a positive filter bias: the filter
    /// starts near `lambda = sigmoid(2)` everywhere and the identity affine
    /// starts at `sigma = 1, mu = 0`.
    pub fn new(ps: &mut ParamStore, prefix: &str, rng: &mut Rng) -> MibModule {
        let p = |s: &str| format!("{prefix}.{s}");
        let module = MibModule {
            filter_conv: Conv2d::new(ps, &p("filter"), MOMENT_CHANNELS, MOMENT_CHANNELS, 3, 1, 1, Init::Zero, rng),
            sigma_fc: Linear::new(ps, &p("sigma_fc"), EMBED_DIM, MOMENT_CHANNELS, Init::Zero, rng),
            mu_fc: Linear::new(ps, &p("mu_fc"), EMBED_DIM, MOMENT_CHANNELS, Init::Zero, rng),
        };
        ps.set(module.filter_conv.b, Tensor::full(vec![MOMENT_CHANNELS], FILTER_BIAS_INIT));
        module
    }

    /// `lambda = sigmoid(conv(F_R))` on a graph.
    pub fn filter(&self, g: &Graph, bound: &BoundParams, f_r: Value) -> Value {
        g.sigmoid(self.filter_conv.forward(g, bound, f_r))
    }

    /// Per-channel `(sigma_id, mu_id)` from an identity embedding. The
    /// sigma head is offset by one so a zero-initialized map starts as the
    /// identity scale.
    pub fn identity_affine(&self, g: &Graph, bound: &BoundParams, emb: Value) -> (Value, Value) {
        let sigma = g.add_scalar(self.sigma_fc.forward(g, bound, emb), 1.0);
        let mu = self.mu_fc.forward(g, bound, emb);
        (sigma, mu)
    }

    /// Full MIB block on a graph. `r`, `f_r`, `inject_base`, `emb`, and
    /// `z_hq_mode` are constant leaves (the encoder and embedder are
    /// frozen); gradients flow into the filter conv and the identity affine
    /// maps, and onward through `fused` into whatever consumes it.
    /// `inject_base` is the normalized manifold the identity affine
    /// re-modulates; the default route passes `f_r` itself.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &Graph,
        bound: &BoundParams,
        r: Value,
        f_r: Value,
        inject_base: Value,
        emb: Value,
        z_hq_mode: Value,
        compensation: Compensation,
        noise: Option<Tensor>,
    ) -> MibGraph {
        let lambda = self.filter(g, bound, f_r);
        let compensation = match compensation {
            Compensation::Identity => {
                let (sigma, mu) = self.identity_affine(g, bound, emb);
                g.add_channel(g.mul_channel(inject_base, sigma), mu)
            }
            Compensation::Noise => {
                g.leaf(noise.expect("noise compensation needs a drawn tensor"))
            }
            Compensation::None => g.leaf(Tensor::zeros(g.value(r).shape().to_vec())),
        };
        let one_minus = g.sub_from_scalar(1.0, lambda);
        let fused = g.add(g.mul(lambda, r), g.mul(one_minus, compensation));

        // -log((1-l)^2) + 1/2 [(1-l)^2 + (l f)^2 - 1], averaged.
        let log_term = g.scale(g.ln(one_minus), -2.0);
        let sq1 = g.mul(one_minus, one_minus);
        let lf = g.mul(lambda, f_r);
        let sq2 = g.mul(lf, lf);
        let inner = g.add_scalar(g.add(sq1, sq2), -1.0);
        let info = g.mean_all(g.add(log_term, g.scale(inner, 0.5)));

        let fused_mode = g.slice_channels(fused, 0, LATENT_CHANNELS);
        let rec = g.mse(fused_mode, z_hq_mode);

        MibGraph { lambda, compensation, fused, info, rec }
    }
}

impl MibModule {
    /// Inference-path filter on plain tensors.
    pub fn infer_lambda(&self, store: &ParamStore, f_r: &Tensor) -> Tensor {
        let pre = ops::conv2d(f_r, store.get(self.filter_conv.w), store.get(self.filter_conv.b), 1, 1);
        pre.map(|v| 1.0 / (1.0 + (-v).exp()))
    }

    /// Inference-path identity affine on plain tensors.
    pub fn infer_affine(&self, store: &ParamStore, emb: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let sigma = ops::linear(emb, store.get(self.sigma_fc.w), store.get(self.sigma_fc.b));
        let mu = ops::linear(emb, store.get(self.mu_fc.w), store.get(self.mu_fc.b));
        (sigma.data().iter().map(|v| v + 1.0).collect(), mu.data().to_vec())
    }
}

/// Draw a dataset-moment noise field `N(mu_QC, sigma_QC^2)` per element.
pub fn dataset_noise(stats: &QcStats, h: usize, w: usize, rng: &mut Rng) -> Tensor {
    let mut data = vec![0.0; MOMENT_CHANNELS * h * w];
    for c in 0..MOMENT_CHANNELS {
        for v in &mut data[c * h * w..(c + 1) * h * w] {
            *v = stats.mean[c] + stats.std[c] * rng.normal();
        }
    }
    Tensor::from_vec(vec![MOMENT_CHANNELS, h, w], data)
}

/// Instance-statistics normalization of `R` (the Eq. variant of the
/// identity path), with the same std floor as the dataset route.
pub fn normalize_manifold_instance(r: &Moments, floor: f64) -> Tensor {
    let t = r.tensor();
    let (means, stds) = ops::instance_stats(t);
    let (c, h, w) = t.chw();
    let mut out = t.data().to_vec();
    for ch in 0..c {
        let denom = stds[ch].max(floor);
        for v in &mut out[ch * h * w..(ch + 1) * h * w] {
            *v = (*v - means[ch]) / denom;
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::STD_FLOOR;

    fn stats_with(mean: f64, std: f64) -> QcStats {
        QcStats {
            mean: vec![mean; MOMENT_CHANNELS],
            std: vec![std; MOMENT_CHANNELS],
            count: 1,
            floor: STD_FLOOR,
            codec_hash: 0,
        }
    }

    fn random_moments(rng: &mut Rng) -> Moments {
        Moments::from_tensor(Tensor::randn(vec![8, 2, 2], rng).scale(0.9)).unwrap()
    }

    #[test]
    fn normalize_manifold_cases() {
        let mut rng = Rng::seed_from(1);
        // R equal to mu_QC everywhere -> zero.
        let stats = stats_with(0.7, 2.0);
        let r = Moments::from_tensor(Tensor::full(vec![8, 2, 2], 0.7)).unwrap();
        let f = normalize_manifold(&r, &stats);
        assert!(f.map(f64::abs).max() < 1e-12);

        // sigma = 0 channel -> divisor is the floor 0.01.
        let stats0 = stats_with(0.0, 0.0);
        let r = Moments::from_tensor(Tensor::full(vec![8, 2, 2], 0.02)).unwrap();
        let f = normalize_manifold(&r, &stats0);
        assert!((f.data()[0] - 2.0).abs() < 1e-12, "0.02 / 0.01 = 2");

        // Random moments match the scalar oracle.
        let stats = stats_with(0.3, 1.7);
        let r = random_moments(&mut rng);
        let f = normalize_manifold(&r, &stats);
        for (i, &v) in f.data().iter().enumerate() {
            let want = (r.tensor().data()[i] - 0.3) / 1.7f64.max(STD_FLOOR);
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn inject_cases() {
        let mut rng = Rng::seed_from(2);
        let f_r = Tensor::randn(vec![8, 2, 2], &mut rng);
        // sigma = 1, mu = 0 -> identity.
        let out = inject(&f_r, &[1.0; 8], &[0.0; 8]);
        assert_eq!(out.data(), f_r.data());
        // sigma = 0 -> constant per channel, equal to mu.
        let mu: Vec<f64> = (0..8).map(|c| c as f64 * 0.5).collect();
        let out = inject(&f_r, &[0.0; 8], &mu);
        for c in 0..8 {
            assert!(out.channel(c).iter().all(|&v| (v - mu[c]).abs() < 1e-12));
        }
        // Random case against the broadcast oracle.
        let sigma: Vec<f64> = (0..8).map(|c| 0.1 * c as f64 - 0.3).collect();
        let out = inject(&f_r, &sigma, &mu);
        let (_, h, w) = f_r.chw();
        for c in 0..8 {
            for i in 0..h * w {
                let want = f_r.channel(c)[i] * sigma[c] + mu[c];
                assert!((out.channel(c)[i] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn filter_zero_conv_gives_half_and_saturates_with_large_bias() {
        let mut ps = ParamStore::new();
        let mut rng = Rng::seed_from(3);
        let mib = MibModule::new(&mut ps, "mib", &mut rng);
        let f_r = Tensor::randn(vec![8, 4, 4], &mut Rng::seed_from(4));

        // Fully zeroed conv (weights and bias): sigmoid(0) = 1/2 everywhere.
        ps.set(mib.filter_conv.b, Tensor::zeros(vec![8]));
        let g = Graph::new();
        let bound = ps.bind(&g);
        let lam = mib.filter(&g, &bound, g.leaf(f_r.clone()));
        let lam_t = g.value(lam);
        assert!(lam_t.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(lam_t.min() > 0.0 && lam_t.max() < 1.0);

        // Sigmoid saturation oracle: bias 20 pushes lambda above 0.999.
        ps.set(mib.filter_conv.b, Tensor::full(vec![8], 20.0));
        let g = Graph::new();
        let bound = ps.bind(&g);
        let lam = g.value(mib.filter(&g, &bound, g.leaf(f_r)));
        assert!(lam.min() > 0.999);
        assert!(lam.max() < 1.0);
    }

    #[test]
    fn fresh_filter_starts_near_passthrough() {
        let mut ps = ParamStore::new();
        let mut rng = Rng::seed_from(3);
        let mib = MibModule::new(&mut ps, "mib", &mut rng);
        let f_r = Tensor::randn(vec![8, 4, 4], &mut Rng::seed_from(4));
        let g = Graph::new();
        let bound = ps.bind(&g);
        let lam = g.value(mib.filter(&g, &bound, g.leaf(f_r)));
        let expect = 1.0 / (1.0 + (-FILTER_BIAS_INIT as f64).exp());
        assert!(lam.data().iter().all(|&v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn fuse_cases_and_bounds() {
        let mut rng = Rng::seed_from(5);
        let r = Tensor::randn(vec![8, 2, 2], &mut rng);
        let e = Tensor::randn(vec![8, 2, 2], &mut rng);
        let z = fuse(&r, &e, &Tensor::full(vec![8, 2, 2], 1.0)).unwrap();
        assert_eq!(z.data(), r.data());
        let z = fuse(&r, &e, &Tensor::zeros(vec![8, 2, 2])).unwrap();
        assert_eq!(z.data(), e.data());
        let z = fuse(
            &Tensor::full(vec![8, 2, 2], 2.0),
            &Tensor::zeros(vec![8, 2, 2]),
            &Tensor::full(vec![8, 2, 2], 0.5),
        )
        .unwrap();
        assert!(z.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        // Convex bound: min(R, e) <= Z <= max(R, e) elementwise.
        for trial in 0..50 {
            let lam = Tensor::randn(vec![8, 2, 2], &mut rng).map(|v| 1.0 / (1.0 + (-v).exp()));
            let z = fuse(&r, &e, &lam).unwrap();
            for i in 0..z.numel() {
                let (lo, hi) = (r.data()[i].min(e.data()[i]), r.data()[i].max(e.data()[i]));
                assert!(z.data()[i] >= lo - 1e-12 && z.data()[i] <= hi + 1e-12, "trial {trial}");
            }
        }
        assert!(fuse(&r, &Tensor::zeros(vec![4, 2, 2]), &Tensor::zeros(vec![8, 2, 2])).is_err());
    }

    #[test]
    fn info_loss_limit_and_frozen_values() {
        // lambda -> 0 gives exactly zero.
        assert_eq!(info_loss_scalar(0.0, 3.7), 0.0);
        let z = Tensor::zeros(vec![8, 2, 2]);
        assert_eq!(info_loss(&z, &z).unwrap(), 0.0);

        // Frozen scalar oracle: -ln(0.25) + (0.25 - 1)/2 = 1.0112943611198906.
        let v = info_loss_scalar(0.5, 0.0);
        assert!((v - 1.011_294_361_119_890_6).abs() < 1e-12);
        let lam = Tensor::full(vec![8, 2, 2], 0.5);
        assert!((info_loss(&lam, &z).unwrap() - 1.011_294_361_119_890_6).abs() < 1e-12);

        // Log-term divergence near lambda = 1.
        assert!(info_loss_scalar(1.0 - 1e-6, 0.5) > 20.0);

        // Domain errors.
        assert!(info_loss(&Tensor::full(vec![2], 1.0), &Tensor::zeros(vec![2])).is_err());
        assert!(info_loss(&Tensor::full(vec![2], -0.1), &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn info_loss_nonnegative_and_monotone_grid() {
        for li in 1..100 {
            let lam = li as f64 / 100.0;
            let mut f = -5.0;
            while f <= 5.0 {
                assert!(info_loss_scalar(lam, f) >= -1e-12, "lambda {lam} f {f}");
                f += 0.25;
            }
        }
        // Strictly increasing in lambda at F_R = 0.
        let mut prev = 0.0;
        for li in 1..100 {
            let v = info_loss_scalar(li as f64 / 100.0, 0.0);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn info_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::seed_from(6);
        let h = 1e-6;
        for i in 0..100 {
            let lam = rng.uniform(0.02, 0.95);
            let f = rng.uniform(-4.0, 4.0);
            let analytic = info_loss_dlambda(lam, f);
            let fd = (info_loss_scalar(lam + h, f) - info_loss_scalar(lam - h, f)) / (2.0 * h);
            let rel = (analytic - fd).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-4, "point {i}: lambda {lam:.4} f {f:.4} rel {rel:.2e}");
        }
    }

    #[test]
    fn graph_info_loss_agrees_with_scalar_route() {
        // The training-path composition must match the scalar formula and
        // its analytic gradient.
        let mut ps = ParamStore::new();
        let mut rng = Rng::seed_from(7);
        let mib = MibModule::new(&mut ps, "mib", &mut rng);
        ps.set(mib.filter_conv.b, Tensor::from_vec(vec![8], (0..8).map(|i| 0.2 * i as f64 - 0.7).collect()));
        let f_r = Tensor::randn(vec![8, 3, 3], &mut rng);
        let r = Tensor::randn(vec![8, 3, 3], &mut rng);
        let emb = Tensor::randn(vec![EMBED_DIM], &mut rng);
        let z_hq = Tensor::randn(vec![4, 3, 3], &mut rng);

        let g = Graph::new();
        let bound = ps.bind(&g);
        let f_r_leaf = g.leaf(f_r.clone());
        let out = mib.forward(
            &g,
            &bound,
            g.leaf(r.clone()),
            f_r_leaf,
            f_r_leaf,
            g.leaf(emb),
            g.leaf(z_hq),
            Compensation::Identity,
            None,
        );
        let lam = g.value(out.lambda);
        let info_graph = g.value(out.info).item();
        let info_scalar = info_loss(&lam, &f_r).unwrap();
        assert!((info_graph - info_scalar).abs() < 1e-10);

        // Fused tensor equals the plain fuse of the same pieces.
        let comp = g.value(out.compensation);
        let fused = g.value(out.fused);
        let plain = fuse(&r, &comp, &lam).unwrap();
        assert!(fused.max_abs_diff(&plain) < 1e-12);
    }

    #[test]
    fn rec_loss_cases() {
        let mut rng = Rng::seed_from(8);
        let z_hq = random_moments(&mut rng);
        assert_eq!(rec_loss(z_hq.tensor(), &z_hq).unwrap(), 0.0);
        let shifted = z_hq.tensor().map(|v| v + 0.2);
        assert!((rec_loss(&shifted, &z_hq).unwrap() - 0.04).abs() < 1e-12);
        let other = Tensor::randn(vec![8, 2, 2], &mut rng);
        let oracle = other.slice_channels(0, 4).mse(&z_hq.mean_channels());
        assert!((rec_loss(&other, &z_hq).unwrap() - oracle).abs() < 1e-6);
        assert!(rec_loss(&Tensor::zeros(vec![8, 3, 3]), &z_hq).is_err());
    }

    #[test]
    fn bottleneck_tradeoff_is_monotone_in_beta() {
        // Brute-force 1-element instance: argmin over a lambda grid of
        // beta * info + rec must not increase as beta grows.
        let (r, eps_id, z_hq, f_r) = (2.0, 0.8, 1.76, 1.5);
        let argmin = |beta: f64| {
            let mut best = (f64::INFINITY, 0.0);
            for i in 1..1000 {
                let lam = i as f64 / 1000.0;
                let rec = (lam * r + (1.0 - lam) * eps_id - z_hq).powi(2);
                let obj = beta * info_loss_scalar(lam, f_r) + rec;
                if obj < best.0 {
                    best = (obj, lam);
                }
            }
            best.1
        };
        let stars: Vec<f64> = [0.001, 0.01, 0.1].iter().map(|&b| argmin(b)).collect();
        assert!(stars[0] >= stars[1] && stars[1] >= stars[2], "lambda* {stars:?}");
        assert!(stars[0] > stars[2], "compression must actually bite");
    }

    #[test]
    fn dataset_noise_follows_stats() {
        let stats = stats_with(1.5, 0.5);
        let mut rng = Rng::seed_from(9);
        let mut acc = 0.0;
        let mut acc_sq = 0.0;
        let n = 50;
        for _ in 0..n {
            let t = dataset_noise(&stats, 4, 4, &mut rng);
            for &v in t.data() {
                acc += v;
                acc_sq += v * v;
            }
        }
        let count = (n * 8 * 16) as f64;
        let mean = acc / count;
        let std = (acc_sq / count - mean * mean).sqrt();
        assert!((mean - 1.5).abs() < 0.02);
        assert!((std - 0.5).abs() < 0.02);
    }

    #[test]
    fn instance_normalization_variant() {
        let mut rng = Rng::seed_from(10);
        let r = random_moments(&mut rng);
        let f = normalize_manifold_instance(&r, STD_FLOOR);
        let (means, stds) = ops::instance_stats(&f);
        for c in 0..8 {
            assert!(means[c].abs() < 1e-10);
            assert!((stds[c] - 1.0).abs() < 1e-6);
        }
    }
}
