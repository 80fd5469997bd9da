//! Patch tokenization of planar canvases. Token order matches the position
//! table's canonical order (row, then y, then x); each token packs its
//! channels as [c][py][px].

use crate::error::{ClozeError, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

/// Planar multi-channel buffer [c][h][w] backing the model's pixel state.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes<S> {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Planes<S> {
    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        Planes { channels, width, height, data: vec![S::ZERO; channels * width * height] }
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize) -> S {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: S) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Interleaved RGB image ([y][x][c] f32) to planar scalars.
    pub fn from_image(img: &crate::image::RasterImage) -> Planes<S> {
        let mut p = Planes::zeros(3, img.width, img.height);
        for y in 0..img.height {
            for x in 0..img.width {
                let px = img.pixel(x, y);
                for c in 0..3 {
                    p.set(c, x, y, S::from_f64(px[c] as f64));
                }
            }
        }
        p
    }

    /// First three channels back to an interleaved image (no clamping).
    pub fn to_image(&self) -> crate::image::RasterImage {
        assert!(self.channels >= 3);
        let mut img = crate::image::RasterImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                img.set_pixel(
                    x,
                    y,
                    [
                        self.at(0, x, y).to_f64s() as f32,
                        self.at(1, x, y).to_f64s() as f32,
                        self.at(2, x, y).to_f64s() as f32,
                    ],
                );
            }
        }
        img
    }
}

/// Number of tokens for a canvas of (width, height) at patch p.
pub fn token_count(width: usize, height: usize, patch: usize) -> usize {
    (width / patch) * (height / patch)
}

/// Tokens [n, channels*p*p] in canonical order from a planar canvas.
pub fn patchify<S: Scalar>(planes: &Planes<S>, patch: usize) -> Result<Mat<S>> {
    let (w, h) = (planes.width, planes.height);
    if w % patch != 0 || h % patch != 0 {
        return Err(ClozeError::ShapeMismatch(format!(
            "canvas {w}x{h} not divisible by patch {patch}"
        )));
    }
    let n = token_count(w, h, patch);
    let dim = planes.channels * patch * patch;
    let mut out = Mat::zeros(n, dim);
    let tokens_x = w / patch;
    for ty in 0..h / patch {
        for tx in 0..tokens_x {
            let row = out.row_mut(ty * tokens_x + tx);
            let mut i = 0;
            for c in 0..planes.channels {
                for py in 0..patch {
                    for px in 0..patch {
                        row[i] = planes.at(c, tx * patch + px, ty * patch + py);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of `patchify` for `channels`-deep token vectors.
pub fn unpatchify<S: Scalar>(
    tokens: &Mat<S>,
    channels: usize,
    width: usize,
    height: usize,
    patch: usize,
) -> Result<Planes<S>> {
    let n = token_count(width, height, patch);
    if tokens.rows != n || tokens.cols != channels * patch * patch {
        return Err(ClozeError::ShapeMismatch(format!(
            "tokens {}x{} do not match canvas {width}x{height}x{channels} at patch {patch}",
            tokens.rows, tokens.cols
        )));
    }
    let mut planes = Planes::zeros(channels, width, height);
    let tokens_x = width / patch;
    for ty in 0..height / patch {
        for tx in 0..tokens_x {
            let row = tokens.row(ty * tokens_x + tx);
            let mut i = 0;
            for c in 0..channels {
                for py in 0..patch {
                    for px in 0..patch {
                        planes.set(c, tx * patch + px, ty * patch + py, row[i]);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(planes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcorpus::gen_base_image;

    #[test]
    fn patchify_unpatchify_is_a_bijection() {
        let img = gen_base_image(3, 16);
        let planes: Planes<f32> = Planes::from_image(&img);
        let tokens = patchify(&planes, 4).unwrap();
        assert_eq!(tokens.rows, 16);
        assert_eq!(tokens.cols, 48);
        let back = unpatchify(&tokens, 3, 16, 16, 4).unwrap();
        assert_eq!(back, planes);
    }

    #[test]
    fn token_count_sums_over_rows() {
        // 2 rows of 32x8 at patch 4 -> 2 * 8 * 2 tokens
        assert_eq!(token_count(32, 16, 4), 32);
    }

    #[test]
    fn constant_canvas_gives_identical_tokens() {
        let mut planes: Planes<f64> = Planes::zeros(3, 8, 8);
        planes.data.iter_mut().for_each(|v| *v = 0.25);
        let tokens = patchify(&planes, 4).unwrap();
        for r in 1..tokens.rows {
            assert_eq!(tokens.row(r), tokens.row(0));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let planes: Planes<f32> = Planes::zeros(3, 10, 8);
        assert!(patchify(&planes, 4).is_err());
        let tokens = Mat::<f32>::zeros(4, 48);
        assert!(unpatchify(&tokens, 3, 16, 16, 4).is_err());
    }
}
