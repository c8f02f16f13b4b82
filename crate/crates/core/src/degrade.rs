//! Synthetic degradation pipeline: blur, rescale, noise, JPEG.
//!
//! Low-quality training images are produced from high-quality ones by
//! `blur -> downsample -> noise -> JPEG -> upsample`, with parameters drawn
//! uniformly per image. Every step is a pure function of its inputs, so a
//! manifest of `(source, params)` records regenerates an LQ set bit for bit.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BLUR_SIGMA_RANGE: (f64, f64) = (1.0, 15.0);
pub const DOWN_SCALE_RANGE: (f64, f64) = (0.8, 8.0);
pub const NOISE_SIGMA_RANGE: (f64, f64) = (0.0, 20.0);
pub const JPEG_QUALITY_RANGE: (u8, u8) = (60, 100);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationParams {
    /// Gaussian blur standard deviation in pixels; 0 disables the blur.
    pub blur_sigma: f64,
    /// Down/upsampling scale factor r.
    pub down_scale: f64,
    /// Gaussian noise std in 8-bit intensity units.
    pub noise_sigma: f64,
    /// Baseline JPEG quality.
    pub jpeg_quality: u8,
    /// Seed for the noise draw.
    pub seed: u64,
}

impl DegradationParams {
    /// The identity-ish setting: no blur, unit scale, no noise, best JPEG.
    pub fn near_identity(seed: u64) -> DegradationParams {
        DegradationParams {
            blur_sigma: 0.0,
            down_scale: 1.0,
            noise_sigma: 0.0,
            jpeg_quality: 100,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma >= 0.0) {
            return Err(Error::param(format!("blur_sigma {} < 0", self.blur_sigma)));
        }
        if !(DOWN_SCALE_RANGE.0..=DOWN_SCALE_RANGE.1).contains(&self.down_scale) {
            return Err(Error::param(format!("down_scale {} outside [0.8, 8]", self.down_scale)));
        }
        if !(NOISE_SIGMA_RANGE.0..=NOISE_SIGMA_RANGE.1).contains(&self.noise_sigma) {
            return Err(Error::param(format!("noise_sigma {} outside [0, 20]", self.noise_sigma)));
        }
        if self.jpeg_quality < 1 || self.jpeg_quality > 100 {
            return Err(Error::param(format!("jpeg_quality {} outside [1, 100]", self.jpeg_quality)));
        }
        Ok(())
    }
}

/// Draw a parameter set uniformly from the training ranges. Deterministic
/// in `rng_seed`.
pub fn sample_params(rng_seed: u64) -> DegradationParams {
    let mut rng = Rng::seed_from(rng_seed);
    DegradationParams {
        blur_sigma: rng.uniform(BLUR_SIGMA_RANGE.0, BLUR_SIGMA_RANGE.1),
        down_scale: rng.uniform(DOWN_SCALE_RANGE.0, DOWN_SCALE_RANGE.1),
        noise_sigma: rng.uniform(NOISE_SIGMA_RANGE.0, NOISE_SIGMA_RANGE.1),
        jpeg_quality: rng.uniform_int(JPEG_QUALITY_RANGE.0 as i64, JPEG_QUALITY_RANGE.1 as i64)
            as u8,
        seed: rng.next_u64(),
    }
}

/// Symmetric reflection index (edge pixel not repeated).
#[inline]
fn reflect(i: i64, n: i64) -> usize {
    if i < 0 {
        (-i - 1) as usize
    } else if i >= n {
        (2 * n - 1 - i) as usize
    } else {
        i as usize
    }
}

fn gaussian_kernel(sigma: f64, max_halfwidth: usize) -> Vec<f64> {
    let halfwidth = ((3.0 * sigma).ceil() as usize).clamp(1, max_halfwidth);
    let mut k = Vec::with_capacity(2 * halfwidth + 1);
    for i in -(halfwidth as i64)..=(halfwidth as i64) {
        k.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur with reflect padding and a normalized kernel of
/// half-width `ceil(3 sigma)`, clipped to the image size. `sigma == 0`
/// returns the input unchanged.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if sigma < 0.0 {
        return Err(Error::param(format!("blur sigma {sigma} < 0")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let (h, w) = img.dims();
    let d = img.tensor().data();

    // Horizontal pass.
    let kx = gaussian_kernel(sigma, w - 1);
    let hw_x = kx.len() / 2;
    let mut tmp = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for i in 0..h {
            let row = &d[c * h * w + i * w..c * h * w + (i + 1) * w];
            for j in 0..w {
                let mut acc = 0.0;
                for (k, wk) in kx.iter().enumerate() {
                    let jj = reflect(j as i64 + k as i64 - hw_x as i64, w as i64);
                    acc += wk * row[jj];
                }
                tmp[c * h * w + i * w + j] = acc;
            }
        }
    }
    // Vertical pass.
    let ky = gaussian_kernel(sigma, h - 1);
    let hw_y = ky.len() / 2;
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for j in 0..w {
            for i in 0..h {
                let mut acc = 0.0;
                for (k, wk) in ky.iter().enumerate() {
                    let ii = reflect(i as i64 + k as i64 - hw_y as i64, h as i64);
                    acc += wk * tmp[c * h * w + ii * w + j];
                }
                out[c * h * w + i * w + j] = acc;
            }
        }
    }
    Image::from_tensor(Tensor::from_vec(vec![3, h, w], out))
}

/// Continuous box prefilter of the given width (in pixels), separable,
/// renormalized at the borders. Width <= 1 is the identity.
fn box_prefilter(img: &Image, width: f64) -> Image {
    if width <= 1.0 {
        return img.clone();
    }
    let (h, w) = img.dims();
    let d = img.tensor().data();
    let half = width / 2.0;

    let filter_line = |line: &[f64], out: &mut [f64]| {
        let n = line.len();
        for (j, o) in out.iter_mut().enumerate() {
            let lo = j as f64 + 0.5 - half;
            let hi = j as f64 + 0.5 + half;
            let k0 = lo.floor().max(0.0) as usize;
            let k1 = (hi.ceil() as usize).min(n);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for k in k0..k1 {
                let cover = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                acc += cover * line[k];
                wsum += cover;
            }
            *o = acc / wsum;
        }
    };

    let mut tmp = vec![0.0; 3 * h * w];
    let mut row_out = vec![0.0; w];
    for c in 0..3 {
        for i in 0..h {
            filter_line(&d[c * h * w + i * w..c * h * w + (i + 1) * w], &mut row_out);
            tmp[c * h * w + i * w..c * h * w + (i + 1) * w].copy_from_slice(&row_out);
        }
    }
    let mut out = vec![0.0; 3 * h * w];
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for c in 0..3 {
        for j in 0..w {
            for i in 0..h {
                col_in[i] = tmp[c * h * w + i * w + j];
            }
            filter_line(&col_in, &mut col_out);
            for i in 0..h {
                out[c * h * w + i * w + j] = col_out[i];
            }
        }
    }
    Image::from_tensor(Tensor::from_vec(vec![3, h, w], out)).expect("shape preserved")
}

/// Bilinear resize to explicit output dims (center-aligned sampling).
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::param("resize target must be at least 1x1"));
    }
    let (h, w) = img.dims();
    let d = img.tensor().data();
    let mut out = vec![0.0; 3 * out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for i in 0..out_h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for j in 0..out_w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            for c in 0..3 {
                let p = &d[c * h * w..(c + 1) * h * w];
                let top = p[y0 * w + x0] * (1.0 - tx) + p[y0 * w + x1] * tx;
                let bot = p[y1 * w + x0] * (1.0 - tx) + p[y1 * w + x1] * tx;
                out[c * out_h * out_w + i * out_w + j] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Image::from_tensor(Tensor::from_vec(vec![3, out_h, out_w], out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

/// Rescale by `scale`: `Down` divides the dims (with a box antialias
/// prefilter), `Up` multiplies them (plain bilinear).
pub fn resample(img: &Image, scale: f64, direction: Direction) -> Result<Image> {
    if !(scale >= DOWN_SCALE_RANGE.0) {
        return Err(Error::param(format!("scale {scale} < {}", DOWN_SCALE_RANGE.0)));
    }
    let (h, w) = img.dims();
    let (out_h, out_w) = match direction {
        Direction::Down => (
            (h as f64 / scale).round() as usize,
            (w as f64 / scale).round() as usize,
        ),
        Direction::Up => (
            (h as f64 * scale).round() as usize,
            (w as f64 * scale).round() as usize,
        ),
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::param(format!(
            "scale {scale} reduces {h}x{w} below 1x1"
        )));
    }
    let src = match direction {
        Direction::Down => box_prefilter(img, scale),
        Direction::Up => img.clone(),
    };
    resize_bilinear(&src, out_h, out_w)
}

/// Add i.i.d. zero-mean Gaussian noise of std `sigma_n` 8-bit units
/// (scaled by 1/127.5 for the `[-1, 1]` range), then clip.
pub fn add_gaussian_noise(img: &Image, sigma_n: f64, seed: u64) -> Image {
    if sigma_n == 0.0 {
        return img.clone();
    }
    let mut rng = Rng::seed_from(seed);
    let s = sigma_n / 127.5;
    let noisy = img.tensor().map(|v| v); // clone values
    let mut data = noisy.data().to_vec();
    for v in &mut data {
        *v = (*v + s * rng.normal()).clamp(-1.0, 1.0);
    }
    Image::from_tensor(Tensor::from_vec(img.tensor().shape().to_vec(), data))
        .expect("shape preserved")
}

/// Round-trip through baseline JPEG at the given quality (no chroma
/// subsampling). Output is back in `[-1, 1]`.
pub fn jpeg_compress(img: &Image, quality: u8) -> Result<Image> {
    if quality < 1 || quality > 100 {
        return Err(Error::param(format!("jpeg quality {quality} outside [1, 100]")));
    }
    let (h, w) = img.dims();
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    let mut encoder = jpeg_encoder::Encoder::new(&mut buf, quality);
    encoder.set_sampling_factor(jpeg_encoder::SamplingFactor::F_1_1);
    encoder
        .encode(&rgb, w as u16, h as u16, jpeg_encoder::ColorType::Rgb)
        .map_err(|e| Error::Image(format!("jpeg encode: {e}")))?;
    let mut decoder = jpeg_decoder::Decoder::new(buf.as_slice());
    let pixels = decoder.decode().map_err(|e| Error::Image(format!("jpeg decode: {e}")))?;
    let info = decoder.info().ok_or_else(|| Error::Image("jpeg decode: no info".into()))?;
    if info.width as usize != w || info.height as usize != h {
        return Err(Error::Image("jpeg round trip changed dimensions".into()));
    }
    if pixels.len() != w * h * 3 {
        return Err(Error::Image(format!("jpeg decode returned {} bytes", pixels.len())));
    }
    Image::from_rgb8(h, w, &pixels)
}

/// Full pipeline: blur -> downsample(r) -> noise -> JPEG(q) -> upsample back
/// to the input dims. Pure function of `(img, params)`.
pub fn degrade(img: &Image, params: &DegradationParams) -> Result<Image> {
    params.validate()?;
    let (h, w) = img.dims();
    let x = gaussian_blur(img, params.blur_sigma)?;
    let x = resample(&x, params.down_scale, Direction::Down)?;
    let x = add_gaussian_noise(&x, params.noise_sigma, params.seed);
    let x = jpeg_compress(&x, params.jpeg_quality)?;
    resize_bilinear(&x, h, w)
}

/// One manifest record: a source image and the parameters that degrade it.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub source: String,
    pub params: DegradationParams,
}

/// Serialize manifest entries, one per line:
/// `source<TAB>blur_sigma=..<TAB>down_scale=..<TAB>noise_sigma=..<TAB>jpeg_quality=..<TAB>seed=..`
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{}\tblur_sigma={}\tdown_scale={}\tnoise_sigma={}\tjpeg_quality={}\tseed={}\n",
            e.source,
            e.params.blur_sigma,
            e.params.down_scale,
            e.params.noise_sigma,
            e.params.jpeg_quality,
            e.params.seed
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

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let source = fields
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::config(format!("manifest line {}: empty source", lineno + 1)))?
            .to_string();
        let mut params = DegradationParams::near_identity(0);
        let mut seen = 0u32;
        for field in fields {
            let (key, value) = field.split_once('=').ok_or_else(|| {
                Error::config(format!("manifest line {}: bad field {field:?}", lineno + 1))
            })?;
            let parse_err =
                || Error::config(format!("manifest line {}: bad value for {key}", lineno + 1));
            match key {
                "blur_sigma" => params.blur_sigma = value.parse().map_err(|_| parse_err())?,
                "down_scale" => params.down_scale = value.parse().map_err(|_| parse_err())?,
                "noise_sigma" => params.noise_sigma = value.parse().map_err(|_| parse_err())?,
                "jpeg_quality" => params.jpeg_quality = value.parse().map_err(|_| parse_err())?,
                "seed" => params.seed = value.parse().map_err(|_| parse_err())?,
                other => {
                    return Err(Error::config(format!(
                        "manifest line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
            seen += 1;
        }
        if seen != 5 {
            return Err(Error::config(format!(
                "manifest line {}: expected 5 parameter fields, got {seen}",
                lineno + 1
            )));
        }
        params.validate()?;
        entries.push(ManifestEntry { source, params });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::metrics::psnr;

    #[test]
    fn sample_params_is_deterministic_per_seed() {
        assert_eq!(sample_params(42), sample_params(42));
    }

    #[test]
    fn sample_params_stays_in_and_covers_ranges() {
        // Statistical oracle: 10^4 uniform draws must stay inside the bounds
        // and come close to them.
        let mut min = sample_params(0);
        let mut max = min;
        for s in 0..10_000u64 {
            let p = sample_params(s);
            p.validate().unwrap();
            assert!(p.blur_sigma >= 1.0 && p.blur_sigma <= 15.0);
            assert!(p.jpeg_quality >= 60 && p.jpeg_quality <= 100);
            min.blur_sigma = min.blur_sigma.min(p.blur_sigma);
            max.blur_sigma = max.blur_sigma.max(p.blur_sigma);
            min.down_scale = min.down_scale.min(p.down_scale);
            max.down_scale = max.down_scale.max(p.down_scale);
            min.noise_sigma = min.noise_sigma.min(p.noise_sigma);
            max.noise_sigma = max.noise_sigma.max(p.noise_sigma);
            min.jpeg_quality = min.jpeg_quality.min(p.jpeg_quality);
            max.jpeg_quality = max.jpeg_quality.max(p.jpeg_quality);
        }
        assert!(min.blur_sigma < 1.0 + 1.4 && max.blur_sigma > 15.0 - 1.4);
        assert!(min.down_scale < 0.8 + 0.72 && max.down_scale > 8.0 - 0.72);
        assert!(min.noise_sigma < 2.0 && max.noise_sigma > 18.0);
        assert!(min.jpeg_quality <= 62 && max.jpeg_quality >= 98);
    }

    #[test]
    fn distinct_seeds_give_distinct_params() {
        // Collision check over 10^3 seed pairs.
        for s in 0..1000u64 {
            assert_ne!(sample_params(2 * s), sample_params(2 * s + 1), "seed pair {s}");
        }
    }

    #[test]
    fn blur_preserves_constants_and_identity_at_zero() {
        let img = Image::constant(16, 16, 0.25);
        let blurred = gaussian_blur(&img, 3.0).unwrap();
        assert!(blurred.tensor().max_abs_diff(img.tensor()) < 1e-12);

        let face = fixtures::face(1, 0, 32);
        let same = gaussian_blur(&face, 0.0).unwrap();
        assert_eq!(same.tensor().data(), face.tensor().data());
    }

    #[test]
    fn blur_rejects_negative_sigma() {
        let img = Image::constant(8, 8, 0.0);
        assert!(matches!(gaussian_blur(&img, -1.0), Err(Error::Param(_))));
    }

    #[test]
    fn blur_impulse_peak_matches_kernel() {
        // Analytic oracle: blurring a unit impulse leaves the 2-D kernel, so
        // the center pixel equals the squared center weight of the
        // normalized 1-D kernel.
        let sigma = 2.0;
        let halfwidth = (3.0_f64 * sigma).ceil() as i64; // 6
        let mut sum = 0.0;
        for i in -halfwidth..=halfwidth {
            sum += (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        }
        let w0 = 1.0 / sum;
        let expected = w0 * w0;

        let n = 32;
        let mut data = vec![0.0; 3 * n * n];
        for c in 0..3 {
            data[c * n * n + (n / 2) * n + n / 2] = 1.0;
        }
        let impulse = Image::from_tensor(Tensor::from_vec(vec![3, n, n], data)).unwrap();
        let blurred = gaussian_blur(&impulse, sigma).unwrap();
        let center = blurred.tensor().data()[(n / 2) * n + n / 2];
        assert!(
            (center - expected).abs() < 1e-12,
            "center {center:.3e} vs kernel peak {expected:.3e}"
        );
    }

    #[test]
    fn blur_commutes_with_horizontal_flip() {
        let img = fixtures::face(2, 1, 32);
        let a = gaussian_blur(&img.flip_horizontal(), 2.5).unwrap();
        let b = gaussian_blur(&img, 2.5).unwrap().flip_horizontal();
        assert!(a.tensor().max_abs_diff(b.tensor()) < 1e-6);
    }

    #[test]
    fn resample_unit_scale_is_near_identity() {
        let img = fixtures::face(1, 2, 32);
        let down = resample(&img, 1.0, Direction::Down).unwrap();
        let up = resample(&down, 1.0, Direction::Up).unwrap();
        assert!(psnr(&up, &img).unwrap() >= 50.0);
    }

    #[test]
    fn resample_preserves_constants() {
        let img = Image::constant(32, 32, -0.4);
        for scale in [0.8, 1.7, 4.0, 8.0] {
            let down = resample(&img, scale, Direction::Down).unwrap();
            assert!(down.tensor().map(|v| v + 0.4).max() < 1e-12, "scale {scale}");
        }
    }

    #[test]
    fn resample_shape_contract() {
        let img = Image::constant(64, 64, 0.0);
        let down = resample(&img, 8.0, Direction::Down).unwrap();
        assert_eq!(down.dims(), (8, 8));
        let up = resample(&down, 8.0, Direction::Up).unwrap();
        assert_eq!(up.dims(), (64, 64));
    }

    #[test]
    fn resample_rejects_bad_scales() {
        let img = Image::constant(3, 3, 0.0);
        assert!(matches!(resample(&img, 0.5, Direction::Down), Err(Error::Param(_))));
        assert!(matches!(resample(&img, 8.0, Direction::Down), Err(Error::Param(_))));
    }

    #[test]
    fn noise_zero_sigma_is_identity_and_seeded() {
        let img = fixtures::face(1, 3, 32);
        let same = add_gaussian_noise(&img, 0.0, 7);
        assert_eq!(same.tensor().data(), img.tensor().data());
        let a = add_gaussian_noise(&img, 10.0, 7);
        let b = add_gaussian_noise(&img, 10.0, 7);
        assert_eq!(a.tensor().data(), b.tensor().data());
        let c = add_gaussian_noise(&img, 10.0, 8);
        assert_ne!(a.tensor().data(), c.tensor().data());
    }

    #[test]
    fn noise_std_matches_statistical_oracle() {
        // Mid-gray 64x64, sigma 20: sample std within 5% of 20/127.5.
        let img = Image::constant(64, 64, 0.0);
        let noisy = add_gaussian_noise(&img, 20.0, 123);
        let diff: Vec<f64> = noisy
            .tensor()
            .data()
            .iter()
            .zip(img.tensor().data())
            .map(|(a, b)| a - b)
            .collect();
        let n = diff.len() as f64;
        let mean = diff.iter().sum::<f64>() / n;
        let std = (diff.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n).sqrt();
        let expected = 20.0 / 127.5;
        assert!(
            (std - expected).abs() < 0.05 * expected,
            "std {std:.5} vs expected {expected:.5}"
        );
    }

    #[test]
    fn jpeg_oracles() {
        let img = fixtures::face(6, 0, 64);
        // Round-trip oracle at top quality.
        let q100 = jpeg_compress(&img, 100).unwrap();
        assert!(psnr(&q100, &img).unwrap() >= 40.0);
        // Monotonic quality oracle.
        let q60 = jpeg_compress(&img, 60).unwrap();
        assert!(psnr(&q60, &img).unwrap() < psnr(&q100, &img).unwrap());
        // Constant blocks are near-lossless.
        let gray = Image::constant(64, 64, 0.0);
        let q90 = jpeg_compress(&gray, 90).unwrap();
        assert!(psnr(&q90, &gray).unwrap() >= 50.0);
        // Range check.
        assert!(matches!(jpeg_compress(&img, 0), Err(Error::Param(_))));
        assert!(matches!(jpeg_compress(&img, 101), Err(Error::Param(_))));
    }

    #[test]
    fn degrade_near_identity_params() {
        let img = fixtures::face(3, 1, 64);
        let out = degrade(&img, &DegradationParams::near_identity(1)).unwrap();
        assert_eq!(out.dims(), img.dims());
        assert!(psnr(&out, &img).unwrap() >= 40.0);
    }

    #[test]
    fn degrade_is_pure_and_shape_preserving() {
        let img = fixtures::face(3, 2, 64);
        let params = sample_params(99);
        let a = degrade(&img, &params).unwrap();
        let b = degrade(&img, &params).unwrap();
        assert_eq!(a.tensor().data(), b.tensor().data());
        assert_eq!(a.dims(), img.dims());
        assert!(a.tensor().min() >= -1.0 && a.tensor().max() <= 1.0);
    }

    #[test]
    fn degrade_attenuates_high_frequency() {
        // Frequency-attenuation oracle: Laplacian response variance of a
        // checkerboard must drop strictly under r=8 down/up sampling.
        let n = 64;
        let mut data = vec![0.0; 3 * n * n];
        for i in 0..n {
            for j in 0..n {
                let v = if (i + j) % 2 == 0 { 0.8 } else { -0.8 };
                for c in 0..3 {
                    data[c * n * n + i * n + j] = v;
                }
            }
        }
        let checker = Image::from_tensor(Tensor::from_vec(vec![3, n, n], data)).unwrap();
        let params = DegradationParams {
            blur_sigma: 0.0,
            down_scale: 8.0,
            noise_sigma: 0.0,
            jpeg_quality: 100,
            seed: 0,
        };
        let out = degrade(&checker, &params).unwrap();

        let lap_var = |img: &Image| {
            let (h, w) = img.dims();
            let d = img.tensor().data();
            let mut responses = Vec::new();
            for i in 1..h - 1 {
                for j in 1..w - 1 {
                    let idx = i * w + j;
                    let r = 4.0 * d[idx] - d[idx - 1] - d[idx + 1] - d[idx - w] - d[idx + w];
                    responses.push(r);
                }
            }
            let m = responses.iter().sum::<f64>() / responses.len() as f64;
            responses.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / responses.len() as f64
        };
        assert!(
            lap_var(&out) < lap_var(&checker),
            "high-frequency energy must strictly drop"
        );
    }

    #[test]
    fn psnr_non_increasing_in_decreasing_jpeg_quality() {
        // Fixture corpus of 8 images, fixed blur/noise/scale.
        let corpus: Vec<Image> = (0..8).map(|i| fixtures::face(11, i, 64)).collect();
        let mut prev = f64::NEG_INFINITY;
        for q in [60u8, 70, 80, 90, 100] {
            let mut acc = 0.0;
            for (i, img) in corpus.iter().enumerate() {
                let params = DegradationParams {
                    blur_sigma: 1.5,
                    down_scale: 2.0,
                    noise_sigma: 5.0,
                    jpeg_quality: q,
                    seed: i as u64,
                };
                acc += psnr(&degrade(img, &params).unwrap(), img).unwrap();
            }
            let mean = acc / corpus.len() as f64;
            assert!(
                mean >= prev,
                "mean PSNR {mean:.3} at q={q} dropped below {prev:.3}"
            );
            prev = mean;
        }
    }

    #[test]
    fn manifest_round_trip_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<ManifestEntry> = (0..4)
            .map(|i| ManifestEntry {
                source: format!("face_{i:03}.png"),
                params: sample_params(1000 + i),
            })
            .collect();
        let path = dir.path().join("manifest.tsv");
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, entries);

        // Replay produces bit-identical LQ output.
        let img = fixtures::face(0, 0, 64);
        let a = degrade(&img, &entries[0].params).unwrap();
        let b = degrade(&img, &back[0].params).unwrap();
        assert_eq!(a.to_rgb8(), b.to_rgb8());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

            /// Output shape equals input shape and the range stays in
            /// [-1, 1] for any in-range parameter set; repeated calls are
            /// bit-identical.
            #[test]
            fn degrade_shape_range_and_purity(
                blur in 0.0f64..15.0,
                r in 0.8f64..8.0,
                noise in 0.0f64..20.0,
                q in 60u8..=100,
                seed in 0u64..u64::MAX,
            ) {
                let img = fixtures::face(13, (seed % 7) as usize, 24);
                let params = DegradationParams {
                    blur_sigma: blur,
                    down_scale: r,
                    noise_sigma: noise,
                    jpeg_quality: q,
                    seed,
                };
                let a = degrade(&img, &params).unwrap();
                let b = degrade(&img, &params).unwrap();
                prop_assert_eq!(a.dims(), img.dims());
                prop_assert!(a.tensor().min() >= -1.0 && a.tensor().max() <= 1.0);
                prop_assert_eq!(a.tensor().data(), b.tensor().data());
            }
        }
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(
            &path,
            "a.png\tblur_sigma=1\tdown_scale=2\tnoise_sigma=3\tjpeg_quality=80\tsneed=1\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Config(_))));
    }
}
