//! 3-channel float raster images in [0,1] with 8-bit PNG interchange.
//!
//! Corpus images live on the 8-bit grid (values of the form k/255): every
//! generator and transform quantizes its output with [`quantize8`], which
//! makes PNG round-trips bit-exact and keeps algebraic identities (e.g.
//! double inversion) exact on corpus data.

use crate::error::{ClozeError, Result};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

pub const CHANNELS: usize = 3;

/// Row-major interleaved RGB float image, samples in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Snaps a sample onto the 8-bit grid: round(x*255)/255, clamped.
#[inline]
pub fn quantize8(x: f32) -> f32 {
    let k = (x * 255.0).round().clamp(0.0, 255.0);
    k / 255.0
}

/// Rec. 601 luma.
#[inline]
pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

impl RasterImage {
    pub fn new(width: usize, height: usize) -> Self {
        RasterImage { width, height, data: vec![0.0; width * height * CHANNELS] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(CHANNELS) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn luma_at(&self, x: usize, y: usize) -> f32 {
        let [r, g, b] = self.pixel(x, y);
        luma(r, g, b)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> RasterImage {
        RasterImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Quantizes every sample onto the 8-bit grid.
    pub fn quantized(mut self) -> RasterImage {
        for v in self.data.iter_mut() {
            *v = quantize8(*v);
        }
        self
    }

    pub fn all_finite_in_unit(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Nearest-neighbor resize.
    pub fn resize_nearest(&self, width: usize, height: usize) -> RasterImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = RasterImage::new(width, height);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                out.set_pixel(x, y, self.pixel(sx, sy));
            }
        }
        out
    }

    /// Writes an 8-bit RGB PNG; samples quantized with round(x*255).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let w = BufWriter::new(file);
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        writer.write_image_data(&bytes)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<RasterImage> {
        let file = File::open(path)?;
        let decoder = png::Decoder::new(file);
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf)?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(ClozeError::Image(format!("{}: expected 8-bit png", path.display())));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let data: Vec<f32> = match info.color_type {
            png::ColorType::Rgb => buf[..w * h * 3].iter().map(|&b| b as f32 / 255.0).collect(),
            png::ColorType::Rgba => buf[..w * h * 4]
                .chunks_exact(4)
                .flat_map(|px| px[..3].iter().map(|&b| b as f32 / 255.0).collect::<Vec<_>>())
                .collect(),
            png::ColorType::Grayscale => {
                buf[..w * h].iter().flat_map(|&b| [b as f32 / 255.0; 3]).collect()
            }
            other => {
                return Err(ClozeError::Image(format!(
                    "{}: unsupported color type {other:?}",
                    path.display()
                )))
            }
        };
        Ok(RasterImage { width: w, height: h, data })
    }

    /// Mean absolute per-sample difference.
    pub fn mean_abs_diff(&self, other: &RasterImage) -> f32 {
        assert_eq!(self.data.len(), other.data.len());
        let s: f32 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        s / self.data.len() as f32
    }

    /// Fraction of pixel locations where any channel differs.
    pub fn frac_pixels_differing(&self, other: &RasterImage) -> f32 {
        assert_eq!(self.data.len(), other.data.len());
        let n = self.width * self.height;
        let mut diff = 0usize;
        for i in 0..n {
            let a = &self.data[i * CHANNELS..(i + 1) * CHANNELS];
            let b = &other.data[i * CHANNELS..(i + 1) * CHANNELS];
            if a != b {
                diff += 1;
            }
        }
        diff as f32 / n as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_is_idempotent_and_complement_closed() {
        for k in 0..=255u32 {
            let x = k as f32 / 255.0;
            assert_eq!(quantize8(x), x);
            let inv = quantize8(1.0 - x);
            assert_eq!(quantize8(1.0 - inv), x, "k={k}");
        }
    }

    #[test]
    fn png_roundtrip_is_exact_on_quantized_data() {
        let dir = std::env::temp_dir().join("cloze_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut img = RasterImage::new(9, 5);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = quantize8((i % 256) as f32 / 255.0 * 0.7 + 0.1);
        }
        let p = dir.join("rt.png");
        img.save_png(&p).unwrap();
        let back = RasterImage::load_png(&p).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn resize_nearest_identity_and_down() {
        let mut img = RasterImage::new(4, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 7) as f32 / 7.0;
        }
        assert_eq!(img.resize_nearest(4, 4), img);
        let half = img.resize_nearest(2, 2);
        assert_eq!(half.pixel(0, 0), img.pixel(0, 0));
        assert_eq!(half.pixel(1, 1), img.pixel(2, 2));
    }
}
