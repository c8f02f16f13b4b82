//! Procedural face-like fixture images.
//!
//! The pipeline is trained and validated on a small synthetic corpus so the
//! repository stays self-contained. Each fixture is a smooth, parameterized
//! cartoon face (background gradient, skin ellipse, hair, eyes, brows,
//! mouth) drawn deterministically from `(seed, index)`.

use crate::image::Image;
use crate::rng::Rng;
use crate::tensor::Tensor;

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f64>, // [3, h, w], working range [0, 1]
}

impl Canvas {
    fn new(h: usize, w: usize) -> Canvas {
        Canvas { h, w, data: vec![0.0; 3 * h * w] }
    }

    /// Alpha-blend `color` over the canvas with per-pixel coverage `alpha(x, y)`,
    /// where x, y are normalized to [0, 1).
    fn blend(&mut self, color: [f64; 3], alpha: impl Fn(f64, f64) -> f64) {
        let (h, w) = (self.h, self.w);
        for i in 0..h {
            let y = (i as f64 + 0.5) / h as f64;
            for j in 0..w {
                let x = (j as f64 + 0.5) / w as f64;
                let a = alpha(x, y).clamp(0.0, 1.0);
                if a <= 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let idx = c * h * w + i * w + j;
                    self.data[idx] = self.data[idx] * (1.0 - a) + color[c] * a;
                }
            }
        }
    }

    fn into_image(self) -> Image {
        let t = Tensor::from_vec(vec![3, self.h, self.w], self.data).map(|v| v * 2.0 - 1.0);
        Image::from_tensor(t).expect("canvas is [3,H,W]")
    }
}

/// Soft-edged ellipse coverage centred at `(cx, cy)` with radii `(rx, ry)`.
fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, soft: f64) -> impl Fn(f64, f64) -> f64 {
    move |x, y| {
        let d = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
        1.0 - smoothstep(1.0 - soft, 1.0 + soft, d)
    }
}

/// Deterministic fixture face `index` at `resolution` pixels.
pub fn face(seed: u64, index: usize, resolution: usize) -> Image {
    let mut rng = Rng::seed_from(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64));
    let mut canvas = Canvas::new(resolution, resolution);

    // Background: two-corner gradient.
    let bg0 = [rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)];
    let bg1 = [rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)];
    let angle = rng.uniform(0.0, std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    for i in 0..resolution {
        let y = (i as f64 + 0.5) / resolution as f64;
        for j in 0..resolution {
            let x = (j as f64 + 0.5) / resolution as f64;
            let t = ((x - 0.5) * ca + (y - 0.5) * sa + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                canvas.data[c * resolution * resolution + i * resolution + j] =
                    bg0[c] * (1.0 - t) + bg1[c] * t;
            }
        }
    }

    // Face ellipse.
    let skin_base = rng.uniform(0.45, 0.85);
    let skin = [skin_base, skin_base * rng.uniform(0.72, 0.88), skin_base * rng.uniform(0.5, 0.72)];
    let fcx = rng.uniform(0.44, 0.56);
    let fcy = rng.uniform(0.48, 0.58);
    let frx = rng.uniform(0.22, 0.3);
    let fry = rng.uniform(0.28, 0.38);
    canvas.blend(skin, ellipse(fcx, fcy, frx, fry, 0.06));

    // Hair: cap over the upper face.
    let hair = [rng.uniform(0.02, 0.5), rng.uniform(0.02, 0.35), rng.uniform(0.02, 0.3)];
    let hair_drop = rng.uniform(0.1, 0.3);
    let fcy_top = fcy - fry * rng.uniform(0.55, 0.8);
    canvas.blend(hair, {
        let e = ellipse(fcx, fcy_top, frx * 1.12, fry * 0.72, 0.08);
        move |x, y| if y < fcy_top + hair_drop { e(x, y) } else { 0.0 }
    });

    // Eyes with highlights, symmetric about the face axis.
    let eye_dx = frx * rng.uniform(0.38, 0.52);
    let eye_y = fcy - fry * rng.uniform(0.08, 0.22);
    let eye_r = rng.uniform(0.022, 0.034);
    let iris = [rng.uniform(0.02, 0.3), rng.uniform(0.05, 0.4), rng.uniform(0.1, 0.55)];
    for side in [-1.0, 1.0] {
        let ex = fcx + side * eye_dx;
        canvas.blend([0.95, 0.95, 0.94], ellipse(ex, eye_y, eye_r * 1.7, eye_r * 1.15, 0.25));
        canvas.blend(iris, ellipse(ex, eye_y, eye_r, eye_r, 0.3));
        canvas.blend([0.04, 0.04, 0.05], ellipse(ex, eye_y, eye_r * 0.45, eye_r * 0.45, 0.4));
        canvas.blend([0.98, 0.98, 0.98], ellipse(ex - eye_r * 0.3, eye_y - eye_r * 0.3, eye_r * 0.2, eye_r * 0.2, 0.6));
        // Brow.
        let brow_y = eye_y - rng.uniform(0.05, 0.08);
        canvas.blend(
            [hair[0] * 0.8, hair[1] * 0.8, hair[2] * 0.8],
            ellipse(ex, brow_y, eye_r * 2.0, eye_r * 0.55, 0.35),
        );
    }

    // Nose shading.
    canvas.blend(
        [skin[0] * 0.82, skin[1] * 0.78, skin[2] * 0.75],
        ellipse(fcx, fcy + fry * 0.12, 0.025, rng.uniform(0.05, 0.09), 0.45),
    );

    // Mouth.
    let mouth_y = fcy + fry * rng.uniform(0.42, 0.58);
    let mouth_w = frx * rng.uniform(0.4, 0.62);
    canvas.blend(
        [rng.uniform(0.5, 0.8), rng.uniform(0.1, 0.25), rng.uniform(0.12, 0.3)],
        ellipse(fcx, mouth_y, mouth_w, rng.uniform(0.014, 0.03), 0.3),
    );

    canvas.into_image()
}

/// Generate `count` fixture faces and write them to `dir` as
/// `face_000.png`, `face_001.png`, ...
pub fn write_corpus(
    dir: impl AsRef<std::path::Path>,
    count: usize,
    seed: u64,
    resolution: usize,
) -> crate::error::Result<Vec<String>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let name = format!("face_{i:03}.png");
        face(seed, i, resolution).save_png(dir.join(&name))?;
        names.push(name);
    }
    Ok(names)
}
