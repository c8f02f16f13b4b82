//! Face-identity embeddings.
//!
//! A small frozen convolutional network maps an image to a unit-norm
//! 128-vector. The weights are random but fixed by a built-in seed, which
//! gives a deterministic, image-dependent conditioning signal without
//! shipping a trained recognizer. Users with a real recognizer can supply
//! per-image embeddings through an override file.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::ops;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 128;

/// Seed for the frozen embedder weights. Changing it changes every
/// identity-conditioned checkpoint, so it is a constant, not a config knob.
const EMBEDDER_SEED: u64 = 0xFACE_1D;

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedding(Vec<f64>);

impl IdentityEmbedding {
    /// Build from raw values; normalizes to unit L2 norm.
    pub fn from_values(values: Vec<f64>) -> Result<IdentityEmbedding> {
        if values.len() != EMBED_DIM {
            return Err(Error::shape(format!(
                "identity embedding must have {EMBED_DIM} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("identity embedding has non-finite values".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Domain("identity embedding has zero norm".into()));
        }
        Ok(IdentityEmbedding(values.iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![EMBED_DIM], self.0.clone())
    }
}

/// Cosine similarity of two embeddings.
pub fn cosine_similarity(a: &IdentityEmbedding, b: &IdentityEmbedding) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

struct ConvSpec {
    w: Tensor,
    b: Tensor,
}

pub struct IdentityEmbedder {
    resolution: usize,
    convs: Vec<ConvSpec>, // stride-2 3x3 convs with SiLU
    fc_w: Tensor,
    fc_b: Tensor,
}

impl IdentityEmbedder {
    pub fn new(resolution: usize) -> IdentityEmbedder {
        let mut rng = Rng::seed_from(EMBEDDER_SEED);
        let widths = [3usize, 8, 16, 32];
        let mut convs = Vec::new();
        for k in 0..widths.len() - 1 {
            let (cin, cout) = (widths[k], widths[k + 1]);
            let fan_in = (cin * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            convs.push(ConvSpec {
                w: Tensor::randn(vec![cout, cin, 3, 3], &mut rng).scale(std),
                b: Tensor::zeros(vec![cout]),
            });
        }
        let fc_w = Tensor::randn(vec![EMBED_DIM, 32], &mut rng).scale((1.0 / 32.0f64).sqrt());
        let fc_b = Tensor::zeros(vec![EMBED_DIM]);
        IdentityEmbedder { resolution, convs, fc_w, fc_b }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn embed(&self, img: &Image) -> Result<IdentityEmbedding> {
        let (h, w) = img.dims();
        if h != self.resolution || w != self.resolution {
            return Err(Error::shape(format!(
                "embedder expects {0}x{0} images, got {h}x{w}",
                self.resolution
            )));
        }
        let mut x = img.tensor().clone();
        for conv in &self.convs {
            x = ops::conv2d(&x, &conv.w, &conv.b, 2, 1);
            x = x.map(|v| v / (1.0 + (-v).exp()));
        }
        // Global average pool to [C].
        let (c, hh, ww) = x.chw();
        let m = (hh * ww) as f64;
        let pooled: Vec<f64> = (0..c).map(|ch| x.channel(ch).iter().sum::<f64>() / m).collect();
        let feat = ops::linear(&Tensor::from_vec(vec![c], pooled), &self.fc_w, &self.fc_b);
        IdentityEmbedding::from_values(feat.data().to_vec())
    }
}

/// Per-image embedding overrides: one line per image,
/// `name<TAB>v0 v1 ... v127`.
pub fn read_override_file(path: impl AsRef<Path>) -> Result<BTreeMap<String, IdentityEmbedding>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, rest) = line.split_once('\t').ok_or_else(|| {
            Error::config(format!("embedding override line {}: missing tab", lineno + 1))
        })?;
        let values: Vec<f64> = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| {
                    Error::config(format!("embedding override line {}: bad float {t:?}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        map.insert(name.to_string(), IdentityEmbedding::from_values(values)?);
    }
    Ok(map)
}
