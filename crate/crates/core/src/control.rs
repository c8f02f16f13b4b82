//! AdaIN control branch.
//!
//! Multi-level spatial features are extracted from an 8-channel manifold
//! with strided SiLU convolutions; per level, two zero-initialized 3x3
//! convolutions produce full spatial `gamma`/`beta` maps that modulate the
//! instance-normalized input of the matching denoiser block, with a
//! residual add. Zero init makes the whole branch an exact no-op at the
//! start of finetuning.

use crate::autograd::{Graph, Value};
use crate::diffusion::DenoiserConfig;
use crate::error::{Error, Result};
use crate::nn::{BoundParams, Conv2d, Init, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Instance-norm std floor protecting constant feature maps.
pub const SIGMA_FLOOR: f64 = 1e-5;

/// Number of modulated denoiser blocks: three encoder levels plus middle.
pub const MODULATION_POINTS: usize = 4;

/// One AdaIN modulation: full spatial scale and shift maps on a graph.
pub struct AdainModulation {
    pub gamma: Value,
    pub beta: Value,
}

/// `H = gamma (*) IN(h) + beta + h` (Eq. instance-norm, affine, residual).
pub fn adain_modulate(g: &Graph, h: Value, m: &AdainModulation) -> Value {
    let normed = g.instance_norm_floored(h, SIGMA_FLOOR);
    let affine = g.add(g.mul(m.gamma, normed), m.beta);
    g.add(affine, h)
}

/// Control branch over a manifold: a three-level feature extractor and four
/// pairs of zero convolutions (one pair per modulated denoiser block).
pub struct ControlBranch {
    extract: [Conv2d; 6],
    zero_gamma: [Conv2d; 4],
    zero_beta: [Conv2d; 4],
    in_channels: usize,
}

impl ControlBranch {
    /// Construct with zero-initialized output convolutions and seeded random
    /// extractor weights.
    pub fn new(
        ps: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        denoiser_cfg: &DenoiserConfig,
        rng: &mut Rng,
    ) -> ControlBranch {
        let [w1, w2, w3] = denoiser_cfg.widths;
        let p = |s: &str| format!("{prefix}.{s}");
        let extract = [
            Conv2d::new(ps, &p("extract1a"), in_channels, w1, 3, 1, 1, Init::Kaiming(1.0), rng),
            Conv2d::new(ps, &p("extract1b"), w1, w1, 3, 1, 1, Init::Kaiming(1.0), rng),
            Conv2d::new(ps, &p("extract2a"), w1, w2, 3, 2, 1, Init::Kaiming(1.0), rng),
            Conv2d::new(ps, &p("extract2b"), w2, w2, 3, 1, 1, Init::Kaiming(1.0), rng),
            Conv2d::new(ps, &p("extract3a"), w2, w3, 3, 2, 1, Init::Kaiming(1.0), rng),
            Conv2d::new(ps, &p("extract3b"), w3, w3, 3, 1, 1, Init::Kaiming(1.0), rng),
        ];
        let mod_ch = denoiser_cfg.modulation_channels();
        // The middle block reads the deepest feature level.
        let feat_ch = [w1, w2, w3, w3];
        let mut zero_gamma = Vec::new();
        let mut zero_beta = Vec::new();
        for i in 0..MODULATION_POINTS {
            zero_gamma.push(Conv2d::new(
                ps,
                &p(&format!("gamma{i}")),
                feat_ch[i],
                mod_ch[i],
                3,
                1,
                1,
                Init::Zero,
                rng,
            ));
            zero_beta.push(Conv2d::new(
                ps,
                &p(&format!("beta{i}")),
                feat_ch[i],
                mod_ch[i],
                3,
                1,
                1,
                Init::Zero,
                rng,
            ));
        }
        ControlBranch {
            extract,
            zero_gamma: zero_gamma.try_into().ok().unwrap(),
            zero_beta: zero_beta.try_into().ok().unwrap(),
            in_channels,
        }
    }

    /// Feature pyramid on a graph: one level per denoiser encoder block,
    /// two SiLU convolutions per level, spatial dims halving per level.
    pub fn features(&self, g: &Graph, bound: &BoundParams, manifold: Value) -> [Value; 3] {
        let f1 = g.silu(self.extract[0].forward(g, bound, manifold));
        let f1 = g.silu(self.extract[1].forward(g, bound, f1));
        let f2 = g.silu(self.extract[2].forward(g, bound, f1));
        let f2 = g.silu(self.extract[3].forward(g, bound, f2));
        let f3 = g.silu(self.extract[4].forward(g, bound, f2));
        let f3 = g.silu(self.extract[5].forward(g, bound, f3));
        [f1, f2, f3]
    }

    /// AdaIN scale/shift maps for every modulated block. The middle block
    /// shares the deepest feature level.
    pub fn modulations(
        &self,
        g: &Graph,
        bound: &BoundParams,
        features: &[Value; 3],
    ) -> [AdainModulation; 4] {
        let feat = [features[0], features[1], features[2], features[2]];
        std::array::from_fn(|i| AdainModulation {
            gamma: self.zero_gamma[i].forward(g, bound, feat[i]),
            beta: self.zero_beta[i].forward(g, bound, feat[i]),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Inference-path feature extraction on plain tensors.
    pub fn extract_control_features(
        &self,
        store: &ParamStore,
        manifold: &Tensor,
    ) -> Result<Vec<Tensor>> {
        if manifold.shape().len() != 3 || manifold.channels() != self.in_channels {
            return Err(Error::shape(format!(
                "control branch expects [{},h,w] manifolds, got {:?}",
                self.in_channels,
                manifold.shape()
            )));
        }
        let g = Graph::new();
        let bound = store.bind(&g);
        let m = g.leaf(manifold.clone());
        Ok(self.features(&g, &bound, m).iter().map(|&v| g.value(v)).collect())
    }
}

/// Denoiser prediction conditioned on a manifold through the control
/// branch, on a throwaway graph. `store` must hold both the denoiser and
/// the branch.
pub fn predict_controlled(
    store: &ParamStore,
    denoiser: &crate::diffusion::Denoiser,
    branch: &ControlBranch,
    manifold: &Tensor,
    z_t: &Tensor,
    t: usize,
) -> Tensor {
    let g = Graph::new();
    let bound = store.bind(&g);
    let m = g.leaf(manifold.clone());
    let feats = branch.features(&g, &bound, m);
    let mods = branch.modulations(&g, &bound, &feats);
    let z = g.leaf(z_t.clone());
    let out = denoiser.forward(&g, &bound, z, t, Some(&mods));
    g.value(out)
}
