//! Low-rank adapters for the attention and MLP matrices: delta = (alpha/r) * B*A
//! with B zero-initialized, merged behind the base weights on demand.
//!
//! Storage uses the transposed [in, out] layout of [`Linear`]: `down` is A^T
//! ([in, r]) and `up` is B^T ([r, out]), so delta^T = down @ up.

use super::{FlowParams, Linear};
use crate::error::{ClozeError, Result};
use crate::linalg::{gemm_acc, transpose_into, Mat};
use crate::rng::{sample_normal, SeededRng};
use crate::scalar::Scalar;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer<S> {
    pub down: Mat<S>,
    pub up: Mat<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<S> {
    pub rank: usize,
    pub alpha: f64,
    pub layers: BTreeMap<String, LoraLayer<S>>,
}

/// The adapted weight tensors: attention q,k,v,out and both MLP matrices.
pub fn target_names(depth: usize) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..depth {
        for tag in ["wq", "wk", "wv", "wo", "mlp1", "mlp2"] {
            out.push(format!("blocks.{i}.{tag}.w"));
        }
    }
    out
}

fn linear_by_name<'a, S>(params: &'a FlowParams<S>, name: &str) -> Option<&'a Linear<S>> {
    let rest = name.strip_prefix("blocks.")?;
    let (idx, tag) = rest.split_once('.')?;
    let tag = tag.strip_suffix(".w")?;
    let block = params.blocks.get(idx.parse::<usize>().ok()?)?;
    Some(match tag {
        "adaln" => &block.adaln,
        "wq" => &block.wq,
        "wk" => &block.wk,
        "wv" => &block.wv,
        "wo" => &block.wo,
        "mlp1" => &block.mlp1,
        "mlp2" => &block.mlp2,
        _ => return None,
    })
}

fn linear_by_name_mut<'a, S>(params: &'a mut FlowParams<S>, name: &str) -> Option<&'a mut Linear<S>> {
    let rest = name.strip_prefix("blocks.")?;
    let (idx, tag) = rest.split_once('.')?;
    let tag = tag.strip_suffix(".w")?;
    let block = params.blocks.get_mut(idx.parse::<usize>().ok()?)?;
    Some(match tag {
        "adaln" => &mut block.adaln,
        "wq" => &mut block.wq,
        "wk" => &mut block.wk,
        "wv" => &mut block.wv,
        "wo" => &mut block.wo,
        "mlp1" => &mut block.mlp1,
        "mlp2" => &mut block.mlp2,
        _ => return None,
    })
}

impl<S: Scalar> LoraAdapter<S> {
    /// Random down projection, zero up projection: the initial delta is zero.
    pub fn init(params: &FlowParams<S>, rank: usize, alpha: f64, rng: &mut SeededRng) -> Result<LoraAdapter<S>> {
        if rank == 0 {
            return Err(ClozeError::Config("lora rank must be >= 1".into()));
        }
        let mut layers = BTreeMap::new();
        for name in target_names(params.config.depth) {
            let lin = linear_by_name(params, &name)
                .ok_or_else(|| ClozeError::Config(format!("no target `{name}`")))?;
            let (d_in, d_out) = (lin.in_dim(), lin.out_dim());
            let mut down = Mat::zeros(d_in, rank);
            let std = 1.0 / (d_in as f64).sqrt();
            for v in down.data.iter_mut() {
                *v = S::from_f64(sample_normal(rng) * std);
            }
            layers.insert(name, LoraLayer { down, up: Mat::zeros(rank, d_out) });
        }
        Ok(LoraAdapter { rank, alpha, layers })
    }

    pub fn zeros_like(&self) -> LoraAdapter<S> {
        LoraAdapter {
            rank: self.rank,
            alpha: self.alpha,
            layers: self
                .layers
                .iter()
                .map(|(k, l)| {
                    (
                        k.clone(),
                        LoraLayer {
                            down: Mat::zeros(l.down.rows, l.down.cols),
                            up: Mat::zeros(l.up.rows, l.up.cols),
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn visit(&self) -> Vec<(String, &[S])> {
        let mut out = Vec::new();
        for (name, l) in &self.layers {
            out.push((format!("lora.{name}.down"), &l.down.data[..]));
            out.push((format!("lora.{name}.up"), &l.up.data[..]));
        }
        out
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut [S])> {
        let mut out = Vec::new();
        for (name, l) in self.layers.iter_mut() {
            out.push((format!("lora.{name}.down"), &mut l.down.data[..]));
            out.push((format!("lora.{name}.up"), &mut l.up.data[..]));
        }
        out
    }
}

/// W_eff = W + (alpha/r) * B*A per target; the base is left unmodified.
pub fn apply_lora<S: Scalar>(params: &FlowParams<S>, adapter: &LoraAdapter<S>) -> Result<FlowParams<S>> {
    let mut out = params.clone();
    let scale = S::from_f64(adapter.scale());
    for (name, layer) in &adapter.layers {
        let lin = linear_by_name_mut(&mut out, name)
            .ok_or_else(|| ClozeError::Config(format!("adapter targets unknown tensor `{name}`")))?;
        if layer.down.rows != lin.in_dim() || layer.up.cols != lin.out_dim() || layer.down.cols != layer.up.rows {
            return Err(ClozeError::ShapeMismatch(format!(
                "adapter `{name}`: down {}x{} up {}x{} vs weight {}x{}",
                layer.down.rows, layer.down.cols, layer.up.rows, layer.up.cols, lin.in_dim(), lin.out_dim()
            )));
        }
        let mut delta = vec![S::ZERO; lin.in_dim() * lin.out_dim()];
        gemm_acc(&layer.down.data, &layer.up.data, &mut delta, lin.in_dim(), layer.down.cols, lin.out_dim());
        for (w, dl) in lin.w.data.iter_mut().zip(&delta) {
            *w = *w + scale * *dl;
        }
    }
    Ok(out)
}

/// Chains merged-weight gradients onto the adapter factors:
/// d_down += scale * dW @ up^T, d_up += scale * down^T @ dW.
pub fn project_grads<S: Scalar>(
    adapter: &LoraAdapter<S>,
    merged_grads: &FlowParams<S>,
    out: &mut LoraAdapter<S>,
) -> Result<()> {
    let scale = S::from_f64(adapter.scale());
    for (name, layer) in &adapter.layers {
        let gw = linear_by_name(merged_grads, name)
            .ok_or_else(|| ClozeError::Config(format!("no gradient tensor `{name}`")))?;
        let (d_in, d_out, r) = (layer.down.rows, layer.up.cols, adapter.rank);
        let gl = out.layers.get_mut(name).expect("zeros_like adapter");

        let mut up_t = vec![S::ZERO; r * d_out];
        transpose_into(&layer.up.data, r, d_out, &mut up_t);
        let mut d_down = vec![S::ZERO; d_in * r];
        gemm_acc(&gw.w.data, &up_t, &mut d_down, d_in, d_out, r);
        for (g, dl) in gl.down.data.iter_mut().zip(&d_down) {
            *g = *g + scale * *dl;
        }

        let mut down_t = vec![S::ZERO; d_in * r];
        transpose_into(&layer.down.data, d_in, r, &mut down_t);
        let mut d_up = vec![S::ZERO; r * d_out];
        gemm_acc(&down_t, &gw.w.data, &mut d_up, r, d_in, d_out);
        for (g, dl) in gl.up.data.iter_mut().zip(&d_up) {
            *g = *g + scale * *dl;
        }
    }
    Ok(())
}
