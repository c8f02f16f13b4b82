//! Latent diffusion: noise schedule, forward noising, epsilon-prediction
//! UNet, one-step latent estimate, and spaced ancestral DDPM sampling.

use crate::autograd::{Graph, Value};
use crate::control::{adain_modulate, AdainModulation};
use crate::error::{Error, Result};
use crate::nn::{BoundParams, Conv2d, GroupNorm, Init, Linear, ParamStore};
use crate::ops::sinusoidal_embedding;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Linear-beta noise schedule over timesteps `1..=t_max`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Build a linear beta schedule. Timestep `t` runs from 1 to `t_max`.
pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::param("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::param(format!(
            "betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let mut betas = Vec::with_capacity(t_max);
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for i in 0..t_max {
        let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
        let beta = beta_start + (beta_end - beta_start) * frac;
        prod *= 1.0 - beta;
        betas.push(beta);
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max(), "timestep {t} outside 1..={}", self.t_max());
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max(), "timestep {t} outside 1..={}", self.t_max());
        self.alpha_bars[t - 1]
    }
}

/// `z_t = sqrt(abar) z + sqrt(1-abar) eps` for an explicit `abar`.
pub fn q_sample_with_alpha_bar(z: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    z.check_same_shape(eps, "q_sample")?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(z.zip_map(eps, |zv, ev| a * zv + b * ev))
}

/// Forward noising at schedule timestep `t`.
pub fn q_sample(z: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    q_sample_with_alpha_bar(z, eps, sched.alpha_bar(t))
}

/// Mean squared error between predicted and true noise.
pub fn ldm_loss(eps_pred: &Tensor, eps: &Tensor) -> Result<f64> {
    eps_pred.check_same_shape(eps, "ldm_loss")?;
    Ok(eps_pred.mse(eps))
}

/// One-step latent estimate for an explicit `abar`:
/// `z0 = z_t / sqrt(abar) - sqrt(1-abar) eps_pred / sqrt(abar)`.
pub fn predict_z0_with_alpha_bar(
    z_t: &Tensor,
    eps_pred: &Tensor,
    alpha_bar: f64,
) -> Result<Tensor> {
    z_t.check_same_shape(eps_pred, "predict_z0")?;
    if alpha_bar <= 0.0 {
        return Err(Error::Domain(format!(
            "predict_z0 is singular at alpha_bar = {alpha_bar}"
        )));
    }
    let inv = 1.0 / alpha_bar.sqrt();
    let k = (1.0 - alpha_bar).sqrt() * inv;
    Ok(z_t.zip_map(eps_pred, |z, e| inv * z - k * e))
}

pub fn predict_z0(
    z_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    predict_z0_with_alpha_bar(z_t, eps_pred, sched.alpha_bar(t))
}

/// `n` unique, strictly increasing timesteps ending at `t_max`:
/// `round(i * t_max / n)` for `i = 1..=n`.
pub fn spaced_timesteps(t_max: usize, n: usize) -> Result<Vec<usize>> {
    if n < 1 || n > t_max {
        return Err(Error::param(format!("step count {n} outside 1..={t_max}")));
    }
    Ok((1..=n).map(|i| (2 * i * t_max + n) / (2 * n)).collect())
}

/// Ancestral DDPM sampling over a spaced sub-schedule. `denoise(z_t, t)`
/// returns the predicted noise; the posterior variance is recomputed for the
/// sub-schedule (small-sigma choice), and the final step adds no noise.
///
/// `z0_clamp` bounds the per-step latent estimate (static thresholding).
/// Early in the reverse chain `predict_z0` multiplies prediction error by
/// `1/sqrt(alpha_bar)`, and without a bound those errors compound into
/// latents far outside the data range.
pub fn ddpm_sample(
    denoise: &mut dyn FnMut(&Tensor, usize) -> Result<Tensor>,
    sched: &NoiseSchedule,
    n_steps: usize,
    shape: &[usize],
    rng: &mut Rng,
    z0_clamp: Option<f64>,
) -> Result<Tensor> {
    let steps = spaced_timesteps(sched.t_max(), n_steps)?;
    let mut z = Tensor::randn(shape.to_vec(), rng);
    for i in (0..steps.len()).rev() {
        let t = steps[i];
        let abar = sched.alpha_bar(t);
        let abar_prev = if i > 0 { sched.alpha_bar(steps[i - 1]) } else { 1.0 };
        let beta_sub = 1.0 - abar / abar_prev;
        let alpha_sub = abar / abar_prev;
        let eps_pred = denoise(&z, t)?;
        let mut z0 = predict_z0_with_alpha_bar(&z, &eps_pred, abar)?;
        if let Some(c) = z0_clamp {
            z0 = z0.map(|v| v.clamp(-c, c));
        }
        let coef_z0 = abar_prev.sqrt() * beta_sub / (1.0 - abar);
        let coef_zt = alpha_sub.sqrt() * (1.0 - abar_prev) / (1.0 - abar);
        let mut next = z0.zip_map(&z, |a, b| coef_z0 * a + coef_zt * b);
        if i > 0 {
            let sigma = (beta_sub * (1.0 - abar_prev) / (1.0 - abar)).sqrt();
            let noise = Tensor::randn(shape.to_vec(), rng);
            next = next.zip_map(&noise, |m, n| m + sigma * n);
        }
        z = next;
    }
    Ok(z)
}

#[derive(Clone, Debug)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub widths: [usize; 3],
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { latent_channels: 4, widths: [32, 64, 128], time_dim: 128 }
    }
}

impl DenoiserConfig {
    /// Channel width at each AdaIN modulation point (three encoder block
    /// inputs plus the middle block input).
    pub fn modulation_channels(&self) -> [usize; 4] {
        [self.widths[0], self.widths[1], self.widths[2], self.widths[2]]
    }

    /// Spatial divisor (relative to the latent dims) at each modulation point.
    pub fn modulation_divisors(&self) -> [usize; 4] {
        [1, 2, 4, 4]
    }
}

const SINUSOID_DIM: usize = 32;

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: usize,
        rng: &mut Rng,
    ) -> ResBlock {
        ResBlock {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), cin, 8),
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, 1, Init::Kaiming(1.0), rng),
            emb: Linear::new(ps, &format!("{name}.emb"), time_dim, cout, Init::Kaiming(1.0), rng),
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), cout, 8),
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, 1, Init::Kaiming(0.2), rng),
            skip: if cin == cout {
                None
            } else {
                Some(Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, 0, Init::Kaiming(1.0), rng))
            },
        }
    }

    fn forward(&self, g: &Graph, bound: &BoundParams, x: Value, emb: Value) -> Value {
        let h = self.norm1.forward(g, bound, x);
        let h = self.conv1.forward(g, bound, g.silu(h));
        let e = self.emb.forward(g, bound, g.silu(emb));
        let h = g.add_channel(h, e);
        let h = self.norm2.forward(g, bound, h);
        let h = self.conv2.forward(g, bound, g.silu(h));
        let s = match &self.skip {
            Some(conv) => conv.forward(g, bound, x),
            None => x,
        };
        g.add(h, s)
    }
}

/// Three-level epsilon-prediction UNet with sinusoidal time embedding and
/// AdaIN modulation points at every encoder block input plus the middle
/// block input. Text conditioning is omitted: the prompt is a constant.
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    time_lin1: Linear,
    time_lin2: Linear,
    conv_in: Conv2d,
    enc1: ResBlock,
    down1: Conv2d,
    enc2: ResBlock,
    down2: Conv2d,
    enc3: ResBlock,
    mid: ResBlock,
    dec3: ResBlock,
    up2: Conv2d,
    dec2: ResBlock,
    up1: Conv2d,
    dec1: ResBlock,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl Denoiser {
    pub fn new(ps: &mut ParamStore, prefix: &str, cfg: &DenoiserConfig, rng: &mut Rng) -> Denoiser {
        let [w1, w2, w3] = cfg.widths;
        let td = cfg.time_dim;
        let p = |s: &str| format!("{prefix}.{s}");
        Denoiser {
            cfg: cfg.clone(),
            time_lin1: Linear::new(ps, &p("time1"), SINUSOID_DIM, td, Init::Kaiming(1.0), rng),
            time_lin2: Linear::new(ps, &p("time2"), td, td, Init::Kaiming(1.0), rng),
            conv_in: Conv2d::new(ps, &p("conv_in"), cfg.latent_channels, w1, 3, 1, 1, Init::Kaiming(1.0), rng),
            enc1: ResBlock::new(ps, &p("enc1"), w1, w1, td, rng),
            down1: Conv2d::new(ps, &p("down1"), w1, w2, 3, 2, 1, Init::Kaiming(1.0), rng),
            enc2: ResBlock::new(ps, &p("enc2"), w2, w2, td, rng),
            down2: Conv2d::new(ps, &p("down2"), w2, w3, 3, 2, 1, Init::Kaiming(1.0), rng),
            enc3: ResBlock::new(ps, &p("enc3"), w3, w3, td, rng),
            mid: ResBlock::new(ps, &p("mid"), w3, w3, td, rng),
            dec3: ResBlock::new(ps, &p("dec3"), 2 * w3, w3, td, rng),
            up2: Conv2d::new(ps, &p("up2"), w3, w2, 3, 1, 1, Init::Kaiming(1.0), rng),
            dec2: ResBlock::new(ps, &p("dec2"), 2 * w2, w2, td, rng),
            up1: Conv2d::new(ps, &p("up1"), w2, w1, 3, 1, 1, Init::Kaiming(1.0), rng),
            dec1: ResBlock::new(ps, &p("dec1"), 2 * w1, w1, td, rng),
            out_norm: GroupNorm::new(ps, &p("out_norm"), w1, 8),
            out_conv: Conv2d::new(ps, &p("out_conv"), w1, cfg.latent_channels, 3, 1, 1, Init::Kaiming(0.2), rng),
        }
    }

    /// Epsilon prediction. `mods`, when present, carries the four AdaIN
    /// modulations produced by a control branch.
    pub fn forward(
        &self,
        g: &Graph,
        bound: &BoundParams,
        z_t: Value,
        t: usize,
        mods: Option<&[AdainModulation; 4]>,
    ) -> Value {
        let sin = g.leaf(sinusoidal_embedding(t as f64, SINUSOID_DIM));
        let emb = self.time_lin1.forward(g, bound, sin);
        let emb = self.time_lin2.forward(g, bound, g.silu(emb));

        let mut x = self.conv_in.forward(g, bound, z_t);
        if let Some(m) = mods {
            x = adain_modulate(g, x, &m[0]);
        }
        let e1 = self.enc1.forward(g, bound, x, emb);
        let mut x = self.down1.forward(g, bound, e1);
        if let Some(m) = mods {
            x = adain_modulate(g, x, &m[1]);
        }
        let e2 = self.enc2.forward(g, bound, x, emb);
        let mut x = self.down2.forward(g, bound, e2);
        if let Some(m) = mods {
            x = adain_modulate(g, x, &m[2]);
        }
        let e3 = self.enc3.forward(g, bound, x, emb);
        let mut m_in = e3;
        if let Some(m) = mods {
            m_in = adain_modulate(g, m_in, &m[3]);
        }
        let m_out = self.mid.forward(g, bound, m_in, emb);

        let d3 = self.dec3.forward(g, bound, g.concat_channels(m_out, e3), emb);
        let x = self.up2.forward(g, bound, g.upsample_nearest_2x(d3));
        let d2 = self.dec2.forward(g, bound, g.concat_channels(x, e2), emb);
        let x = self.up1.forward(g, bound, g.upsample_nearest_2x(d2));
        let d1 = self.dec1.forward(g, bound, g.concat_channels(x, e1), emb);
        let out = self.out_norm.forward(g, bound, d1);
        self.out_conv.forward(g, bound, g.silu(out))
    }

    /// Inference without control conditioning on a throwaway graph.
    pub fn predict(&self, store: &ParamStore, z_t: &Tensor, t: usize) -> Tensor {
        let g = Graph::new();
        let bound = store.bind(&g);
        let z = g.leaf(z_t.clone());
        let out = self.forward(&g, &bound, z, t, None);
        g.value(out)
    }
}
