//! Pixel-space images.
//!
//! An [`Image`] is a `[3, H, W]` tensor with values in `[-1, 1]`. Files on
//! disk are 8-bit RGB PNGs; the `[-1, 1]` float convention matches what the
//! codec consumes.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Image {
    tensor: Tensor,
}

impl Image {
    /// Wrap a `[3, H, W]` tensor. Values are clamped into `[-1, 1]`.
    pub fn from_tensor(t: Tensor) -> Result<Image> {
        let shape = t.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(format!("image must be [3,H,W], got {shape:?}")));
        }
        Ok(Image { tensor: t.map(|v| v.clamp(-1.0, 1.0)) })
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Image {
        Image { tensor: Tensor::full(vec![3, h, w], value.clamp(-1.0, 1.0)) }
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.tensor.shape();
        (s[1], s[2])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = self.dims();
        let d = self.tensor.data();
        let mut out = vec![0u8; h * w * 3];
        for i in 0..h * w {
            for c in 0..3 {
                let v = ((d[c * h * w + i] + 1.0) * 127.5).round();
                out[i * 3 + c] = v.clamp(0.0, 255.0) as u8;
            }
        }
        out
    }

    pub fn from_rgb8(h: usize, w: usize, rgb: &[u8]) -> Result<Image> {
        if rgb.len() != h * w * 3 {
            return Err(Error::shape(format!(
                "rgb buffer has {} bytes, expected {}",
                rgb.len(),
                h * w * 3
            )));
        }
        let mut data = vec![0.0; 3 * h * w];
        for i in 0..h * w {
            for c in 0..3 {
                data[c * h * w + i] = rgb[i * 3 + c] as f64 / 127.5 - 1.0;
            }
        }
        Ok(Image { tensor: Tensor::from_vec(vec![3, h, w], data) })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let file = File::open(path)?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Image(format!("{}: only 8-bit PNGs supported", path.display())));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => buf[..w * h * 3].to_vec(),
            png::ColorType::Rgba => {
                buf[..w * h * 4].chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()
            }
            png::ColorType::Grayscale => {
                buf[..w * h].iter().flat_map(|&g| [g, g, g]).collect()
            }
            png::ColorType::GrayscaleAlpha => {
                buf[..w * h * 2].chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect()
            }
            other => {
                return Err(Error::Image(format!(
                    "{}: unsupported color type {other:?}",
                    path.display()
                )))
            }
        };
        Image::from_rgb8(h, w, &rgb)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let (h, w) = self.dims();
        let file = File::create(path)?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        writer
            .write_image_data(&self.to_rgb8())
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    /// Horizontal mirror.
    pub fn flip_horizontal(&self) -> Image {
        let (h, w) = self.dims();
        let d = self.tensor.data();
        let mut out = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    out[c * h * w + i * w + j] = d[c * h * w + i * w + (w - 1 - j)];
                }
            }
        }
        Image { tensor: Tensor::from_vec(vec![3, h, w], out) }
    }
}

/// Load every `.png` in a directory, sorted by file name.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, Image)>> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::config(format!("no .png files in {}", dir.display())));
    }
    names
        .into_iter()
        .map(|n| Image::load_png(dir.join(&n)).map(|img| (n, img)))
        .collect()
}
