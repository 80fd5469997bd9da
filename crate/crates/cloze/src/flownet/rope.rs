//! 3-axis rotary position embedding: the head dimension is split into
//! (d_t, d_y, d_x) blocks and each block is rotated by its axis coordinate.

use crate::error::{ClozeError, Result};
use crate::gridlayout::PositionTable;
use crate::scalar::Scalar;

pub const ROPE_BASE: f64 = 10000.0;

/// Per-token cos/sin for each rotation pair, pairs laid out axis-block by
/// axis-block: d_t/2 pairs, then d_y/2, then d_x/2.
#[derive(Debug, Clone)]
pub struct RopeTables<S> {
    pub n_pairs: usize,
    pub cos: Vec<S>,
    pub sin: Vec<S>,
    pub n_tokens: usize,
}

/// Validates an axis split against a head dimension.
pub fn check_split(split: [usize; 3], head_dim: usize) -> Result<()> {
    if split.iter().any(|d| d % 2 != 0) {
        return Err(ClozeError::Config(format!("rope split {split:?} has an odd axis dim")));
    }
    if split.iter().sum::<usize>() != head_dim {
        return Err(ClozeError::Config(format!(
            "rope split {split:?} does not sum to head dim {head_dim}"
        )));
    }
    Ok(())
}

impl<S: Scalar> RopeTables<S> {
    /// Angles theta_k = pos * base^(-2k/d_axis) per axis block.
    pub fn build(positions: &PositionTable, split: [usize; 3], head_dim: usize) -> Result<RopeTables<S>> {
        check_split(split, head_dim)?;
        let n_pairs = head_dim / 2;
        let n_tokens = positions.len();
        let mut cos = Vec::with_capacity(n_tokens * n_pairs);
        let mut sin = Vec::with_capacity(n_tokens * n_pairs);
        for pos in &positions.positions {
            for (axis, &d_axis) in split.iter().enumerate() {
                let p = pos[axis] as f64;
                for k in 0..d_axis / 2 {
                    let theta = p * ROPE_BASE.powf(-2.0 * k as f64 / d_axis as f64);
                    cos.push(S::from_f64(theta.cos()));
                    sin.push(S::from_f64(theta.sin()));
                }
            }
        }
        Ok(RopeTables { n_pairs, cos, sin, n_tokens })
    }

    /// Rotates each head block of `x` ([n, heads*head_dim], row-major)
    /// in place. `inverse` applies the transpose rotation.
    pub fn apply(&self, x: &mut [S], heads: usize, inverse: bool) {
        let head_dim = self.n_pairs * 2;
        let width = heads * head_dim;
        debug_assert_eq!(x.len(), self.n_tokens * width);
        for i in 0..self.n_tokens {
            let crow = &self.cos[i * self.n_pairs..(i + 1) * self.n_pairs];
            let srow = &self.sin[i * self.n_pairs..(i + 1) * self.n_pairs];
            let row = &mut x[i * width..(i + 1) * width];
            for h in 0..heads {
                let block = &mut row[h * head_dim..(h + 1) * head_dim];
                for k in 0..self.n_pairs {
                    let (c, s) = (crow[k], if inverse { -srow[k] } else { srow[k] });
                    let a = block[2 * k];
                    let b = block[2 * k + 1];
                    block[2 * k] = a * c - b * s;
                    block[2 * k + 1] = a * s + b * c;
                }
            }
        }
    }
}
