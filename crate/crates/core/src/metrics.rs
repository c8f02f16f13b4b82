//! Full-reference quality metrics: PSNR, SSIM, identity similarity.

use std::path::Path;

use crate::error::{Error, Result};
use crate::identity::{cosine_similarity, IdentityEmbedder};
use crate::image::Image;

/// PSNR cap reported for (near-)identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB. Inputs are `[-1, 1]` images; the MSE is
/// normalized to a peak-1 scale (dynamic range 2) before the log.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let mse = a.tensor().mse(b.tensor()) / 4.0;
    if mse <= 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Luminance plane on a `[0, 1]` scale.
fn luminance(img: &Image) -> Vec<f64> {
    let (h, w) = img.dims();
    let d = img.tensor().data();
    let mut out = vec![0.0; h * w];
    for i in 0..h * w {
        let r = (d[i] + 1.0) / 2.0;
        let g = (d[h * w + i] + 1.0) / 2.0;
        let b = (d[2 * h * w + i] + 1.0) / 2.0;
        out[i] = 0.299 * r + 0.587 * g + 0.114 * b;
    }
    out
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable valid-mode filtering with the SSIM window.
fn filter_valid(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let win = gaussian_window();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * x[i * w + j + k];
            }
            tmp[i * wo + j] = acc;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * tmp[(i + k) * wo + j];
            }
            out[i * wo + j] = acc;
        }
    }
    out
}

/// Structural similarity over an 11x11 Gaussian window (sigma 1.5) on the
/// luminance plane, averaged over all valid window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let x = luminance(a);
    let y = luminance(b);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();

    let mu_x = filter_valid(&x, h, w);
    let mu_y = filter_valid(&y, h, w);
    let e_xx = filter_valid(&xx, h, w);
    let e_yy = filter_valid(&yy, h, w);
    let e_xy = filter_valid(&xy, h, w);

    let mut acc = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2);
        acc += num / den;
    }
    Ok(acc / mu_x.len() as f64)
}

/// Cosine similarity of the identity embeddings of two images.
pub fn id_similarity(embedder: &IdentityEmbedder, a: &Image, b: &Image) -> Result<f64> {
    let ea = embedder.embed(a)?;
    let eb = embedder.embed(b)?;
    Ok(cosine_similarity(&ea, &eb))
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub id_sim: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_id_sim(&self) -> f64 {
        self.rows.iter().map(|r| r.id_sim).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Tab-separated table with a trailing corpus-mean row.
    pub fn to_table(&self) -> String {
        let mut out = String::from("image\tpsnr\tssim\tid_sim\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{:.4}\t{:.6}\t{:.6}\n", r.name, r.psnr, r.ssim, r.id_sim));
        }
        out.push_str(&format!(
            "mean\t{:.4}\t{:.6}\t{:.6}\n",
            self.mean_psnr(),
            self.mean_ssim(),
            self.mean_id_sim()
        ));
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_table())?;
        Ok(())
    }
}

/// Compare restored images against references by file name.
pub fn evaluate_pairs(
    embedder: &IdentityEmbedder,
    pairs: &[(String, Image, Image)],
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    for (name, restored, reference) in pairs {
        rows.push(EvalRow {
            name: name.clone(),
            psnr: psnr(restored, reference)?,
            ssim: ssim(restored, reference)?,
            id_sim: id_similarity(embedder, restored, reference)?,
        });
    }
    Ok(EvalReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    #[test]
    fn psnr_identical_hits_cap() {
        let img = fixtures::face(1, 0, 32);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_of_known_mse_is_exact() {
        // Constant offset of 0.2 on [-1,1] scale: peak-1 MSE = 0.04/4 = 0.01 -> 20 dB.
        let a = Image::constant(16, 16, 0.0);
        let b = Image::constant(16, 16, 0.2);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_scalar_formula_oracle() {
        let mut rng = Rng::seed_from(9);
        let a = Image::from_tensor(Tensor::randn(vec![3, 8, 8], &mut rng).scale(0.3)).unwrap();
        let b = Image::from_tensor(Tensor::randn(vec![3, 8, 8], &mut rng).scale(0.3)).unwrap();
        // Independent elementwise evaluation.
        let (ad, bd) = (a.tensor().data(), b.tensor().data());
        let mut se = 0.0;
        for i in 0..ad.len() {
            let d = (ad[i] - bd[i]) / 2.0;
            se += d * d;
        }
        let expect = 10.0 * (ad.len() as f64 / se).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn psnr_dim_mismatch_errors() {
        let a = Image::constant(8, 8, 0.0);
        let b = Image::constant(8, 9, 0.0);
        assert!(matches!(psnr(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_identical_is_one() {
        let img = fixtures::face(1, 1, 32);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-9);
        let z = Image::constant(16, 16, 0.0);
        assert!((ssim(&z, &z).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        let a = fixtures::face(1, 0, 32);
        let b = fixtures::face(1, 1, 32);
        let s1 = ssim(&a, &b).unwrap();
        let s2 = ssim(&b, &a).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!(s1 <= 1.0 && s1 >= -1.0);
        assert!(s1 < 1.0, "distinct images must not reach 1");
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        // Independent route: per-window weighted sums of centered products.
        let a = fixtures::face(4, 0, 24);
        let b = fixtures::face(4, 2, 24);
        let (h, w) = a.dims();
        let x = luminance(&a);
        let y = luminance(&b);
        let win = gaussian_window();
        let mut acc = 0.0;
        let mut count = 0usize;
        for i0 in 0..=(h - SSIM_WINDOW) {
            for j0 in 0..=(w - SSIM_WINDOW) {
                let (mut mx, mut my) = (0.0, 0.0);
                for u in 0..SSIM_WINDOW {
                    for v in 0..SSIM_WINDOW {
                        let wv = win[u] * win[v];
                        mx += wv * x[(i0 + u) * w + j0 + v];
                        my += wv * y[(i0 + u) * w + j0 + v];
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for u in 0..SSIM_WINDOW {
                    for v in 0..SSIM_WINDOW {
                        let wv = win[u] * win[v];
                        let dx = x[(i0 + u) * w + j0 + v] - mx;
                        let dy = y[(i0 + u) * w + j0 + v] - my;
                        vx += wv * dx * dx;
                        vy += wv * dy * dy;
                        cov += wv * dx * dy;
                    }
                }
                let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
                acc += num / den;
                count += 1;
            }
        }
        let oracle = acc / count as f64;
        let got = ssim(&a, &b).unwrap();
        assert!(
            (got - oracle).abs() < 1e-4,
            "ssim {got:.8} vs windowed oracle {oracle:.8}"
        );
    }

    #[test]
    fn ssim_too_small_image_errors() {
        let a = Image::constant(8, 8, 0.0);
        assert!(matches!(ssim(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn id_similarity_identities() {
        let embedder = IdentityEmbedder::new(64);
        let a = fixtures::face(2, 0, 64);
        let b = fixtures::face(2, 1, 64);
        assert!((id_similarity(&embedder, &a, &a).unwrap() - 1.0).abs() < 1e-9);
        let s_ab = id_similarity(&embedder, &a, &b).unwrap();
        let s_ba = id_similarity(&embedder, &b, &a).unwrap();
        assert!((s_ab - s_ba).abs() < 1e-12);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_image() -> impl Strategy<Value = Image> {
            (0u64..1 << 32).prop_map(|seed| {
                let mut rng = crate::rng::Rng::seed_from(seed);
                Image::from_tensor(
                    Tensor::randn(vec![3, 16, 16], &mut rng).map(|v| (v * 0.4).clamp(-1.0, 1.0)),
                )
                .unwrap()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

            #[test]
            fn psnr_and_ssim_are_symmetric_and_bounded(a in arb_image(), b in arb_image()) {
                prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
                let s_ab = ssim(&a, &b).unwrap();
                let s_ba = ssim(&b, &a).unwrap();
                prop_assert!((s_ab - s_ba).abs() < 1e-12);
                prop_assert!(s_ab <= 1.0 + 1e-12);
                prop_assert!(s_ab >= -1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn report_table_has_mean_row() {
        let report = EvalReport {
            rows: vec![
                EvalRow { name: "a.png".into(), psnr: 20.0, ssim: 0.5, id_sim: 0.9 },
                EvalRow { name: "b.png".into(), psnr: 30.0, ssim: 0.7, id_sim: 0.8 },
            ],
        };
        let table = report.to_table();
        assert!(table.contains("a.png\t20.0000"));
        assert!(table.lines().last().unwrap().starts_with("mean\t25.0000"));
    }
}
