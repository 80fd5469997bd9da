//! Pixel-space evaluation: RMSE, windowed SSIM, F1 on binarized edge maps,
//! and a task-disambiguation accuracy oracle that classifies an output by
//! its nearest forward transform of the query's base image.

use crate::error::{ClozeError, Result};
use crate::flownet::FlowParams;
use crate::image::RasterImage;
use crate::linalg::ExpSlice;
use crate::sampler::{infer_task, PromptSpec, SampleConfig};
use crate::scalar::Scalar;
use crate::synthcorpus::{annotate, content_caption, is_annotation_kind, resolve_node, CorpusManifest};
use crate::taskgraph::{TaskSpec, IMAGE_NODE};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn check_shapes(a: &RasterImage, b: &RasterImage) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(ClozeError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Root mean squared error over all samples.
pub fn rmse(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok((sum / a.data.len() as f64).sqrt())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable valid-mode convolution with the SSIM Gaussian window.
fn blur_valid(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let kw = kernel.len();
    let ow = w - kw + 1;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let oh = h - kw + 1;
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * horiz[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, ow, oh)
}

/// Mean local SSIM: Gaussian window 11 (sigma 1.5), K1 = 0.01, K2 = 0.03,
/// dynamic range 1, channels averaged, valid windows only.
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_shapes(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(ClozeError::ShapeMismatch(format!(
            "image {}x{} smaller than ssim window {SSIM_WINDOW}",
            a.width, a.height
        )));
    }
    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (w, h) = (a.width, a.height);
    let n_px = w * h;
    let mut total = 0.0;
    for ch in 0..3 {
        let xa: Vec<f64> = (0..n_px).map(|i| a.data[i * 3 + ch] as f64).collect();
        let xb: Vec<f64> = (0..n_px).map(|i| b.data[i * 3 + ch] as f64).collect();
        let xx: Vec<f64> = xa.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = xb.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| x * y).collect();
        let (mu_a, ow, oh) = blur_valid(&xa, w, h, &kernel);
        let (mu_b, ..) = blur_valid(&xb, w, h, &kernel);
        let (m_xx, ..) = blur_valid(&xx, w, h, &kernel);
        let (m_yy, ..) = blur_valid(&yy, w, h, &kernel);
        let (m_xy, ..) = blur_valid(&xy, w, h, &kernel);
        let mut acc = 0.0;
        for i in 0..ow * oh {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_xx[i] - ma * ma;
            let vb = m_yy[i] - mb * mb;
            let cov = m_xy[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

/// Pixel F1 after binarizing both maps at `tau` on luma. Both empty -> 1;
/// exactly one empty -> 0.
pub fn f1_edge(pred: &RasterImage, gt: &RasterImage, tau: f32) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for y in 0..pred.height {
        for x in 0..pred.width {
            let p = pred.luma_at(x, y) > tau;
            let g = gt.luma_at(x, y) > tau;
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp == 0 {
        return Ok(if fp == 0 && fn_ == 0 { 1.0 } else { 0.0 });
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Result of nearest-oracle task classification.
#[derive(Debug, Clone, Serialize)]
pub struct TaskAccuracy {
    pub accuracy: f64,
    pub ties: usize,
}

/// For each output, the predicted task is the candidate kind whose forward
/// transform of the query's base image is nearest in RMSE; accuracy is the
/// fraction matching the intended kinds. Ties break by candidate order and
/// are counted.
pub fn task_accuracy(
    outputs: &[RasterImage],
    base_inputs: &[RasterImage],
    intended: &[String],
    candidates: &[String],
) -> Result<TaskAccuracy> {
    if candidates.is_empty() {
        return Err(ClozeError::Config("empty candidate set".into()));
    }
    for k in candidates {
        if !is_annotation_kind(k) {
            return Err(ClozeError::NotForwardComputable(k.clone()));
        }
    }
    assert_eq!(outputs.len(), base_inputs.len());
    assert_eq!(outputs.len(), intended.len());
    let mut hits = 0usize;
    let mut ties = 0usize;
    for i in 0..outputs.len() {
        let mut best_kind = &candidates[0];
        let mut best = f64::INFINITY;
        let mut tied = false;
        for k in candidates {
            let oracle = annotate(&base_inputs[i], k)?;
            let d = rmse(&outputs[i], &oracle)?;
            if d < best {
                best = d;
                best_kind = k;
                tied = false;
            } else if d == best {
                tied = true;
            }
        }
        if tied {
            ties += 1;
        }
        if *best_kind == intended[i] {
            hits += 1;
        }
    }
    Ok(TaskAccuracy { accuracy: hits as f64 / outputs.len() as f64, ties })
}

// ---------------------------------------------------------------------------
// evaluation harness
// ---------------------------------------------------------------------------

fn default_contexts() -> Vec<usize> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub tasks: Vec<String>,
    #[serde(default = "default_contexts")]
    pub contexts: Vec<usize>,
    pub n_queries: usize,
    /// First held-out record index; evaluation uses records from here on.
    pub holdout_from: usize,
    pub seed: u64,
    pub steps: usize,
    #[serde(default)]
    pub include_task_text: bool,
    #[serde(default)]
    pub candidates: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalRow {
    pub task_id: String,
    #[serde(rename = "C")]
    pub context_count: usize,
    pub n: usize,
    pub rmse: f64,
    pub ssim: f64,
    pub f1: Option<f64>,
    pub task_acc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub config: serde_json::Value,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Binary-map target kinds get an F1 column.
fn is_binary_kind(kind: &str) -> bool {
    matches!(kind, "edge" | "binary_mask")
}

/// Runs the sampler over held-out queries for every (task, C) cell and
/// aggregates the metrics. Fully deterministic given the config.
pub fn evaluate<S: Scalar + ExpSlice>(
    params: &FlowParams<S>,
    manifest: &CorpusManifest,
    dir: &Path,
    cfg: &EvalConfig,
    trained_context_max: Option<usize>,
) -> Result<EvalReport> {
    if cfg.n_queries == 0 {
        return Err(ClozeError::Config("n_queries must be >= 1".into()));
    }
    let holdout_len = manifest.records.len().saturating_sub(cfg.holdout_from);
    let max_c = cfg.contexts.iter().copied().max().unwrap_or(0);
    if holdout_len < max_c + 1 {
        return Err(ClozeError::Corpus(format!(
            "holdout range has {holdout_len} records, need {}",
            max_c + 1
        )));
    }
    let tasks: Vec<TaskSpec> = cfg
        .tasks
        .iter()
        .map(|id| parse_task_id(id))
        .collect::<Result<Vec<_>>>()?;
    let candidates: Vec<String> = match &cfg.candidates {
        Some(c) => c.clone(),
        None => {
            let mut kinds: Vec<String> = tasks
                .iter()
                .filter(|t| t.target != IMAGE_NODE && is_annotation_kind(&t.target))
                .map(|t| t.target.clone())
                .collect();
            kinds.dedup();
            kinds
        }
    };

    let mut rows = Vec::new();
    for task in &tasks {
        for &c in &cfg.contexts {
            let mut rmse_sum = 0.0;
            let mut ssim_sum = 0.0;
            let mut f1_sum = 0.0;
            let mut outputs = Vec::with_capacity(cfg.n_queries);
            let mut bases = Vec::with_capacity(cfg.n_queries);
            let mut intended = Vec::with_capacity(cfg.n_queries);
            for q in 0..cfg.n_queries {
                let query_rec = cfg.holdout_from + (q % holdout_len);
                let mut ctx_rows = Vec::with_capacity(c);
                for k in 0..c {
                    let rec = cfg.holdout_from + ((q + 1 + k) % holdout_len);
                    let mut row = Vec::with_capacity(task.len());
                    for kind in &task.conditions {
                        row.push(resolve_node(manifest, dir, rec, kind)?);
                    }
                    row.push(resolve_node(manifest, dir, rec, &task.target)?);
                    ctx_rows.push(row);
                }
                let mut query_conditions = Vec::with_capacity(task.conditions.len());
                for kind in &task.conditions {
                    query_conditions.push(resolve_node(manifest, dir, query_rec, kind)?);
                }
                let gt = resolve_node(manifest, dir, query_rec, &task.target)?;
                let base = resolve_node(manifest, dir, query_rec, IMAGE_NODE)?;

                let caption = content_caption(manifest.records[query_rec].seed, manifest.image_size);
                let content = crate::prompt::content_instruction(
                    task,
                    &caption,
                    crate::prompt::ContentPolicy::OmitWhenImageVisible,
                );
                let prompt_spec =
                    PromptSpec { include_task: cfg.include_task_text, content_caption: content };
                let mut scfg = SampleConfig::new(params.config.mode, 0);
                scfg.steps = cfg.steps;
                scfg.seed = cfg
                    .seed
                    .wrapping_mul(0x9e3779b97f4a7c15)
                    .wrapping_add((rows.len() as u64) << 32)
                    .wrapping_add(q as u64);
                let (out, _) = infer_task(
                    params,
                    task,
                    &ctx_rows,
                    &query_conditions,
                    &prompt_spec,
                    &scfg,
                    trained_context_max,
                )?;
                rmse_sum += rmse(&out, &gt)?;
                ssim_sum += ssim(&out, &gt)?;
                if is_binary_kind(&task.target) {
                    f1_sum += f1_edge(&out, &gt, 0.5)?;
                }
                outputs.push(out);
                bases.push(base);
                intended.push(task.target.clone());
            }
            let n = cfg.n_queries;
            let task_acc = if task.target != IMAGE_NODE && candidates.contains(&task.target) {
                Some(task_accuracy(&outputs, &bases, &intended, &candidates)?.accuracy)
            } else {
                None
            };
            rows.push(EvalRow {
                task_id: task.task_id.clone(),
                context_count: c,
                n,
                rmse: rmse_sum / n as f64,
                ssim: ssim_sum / n as f64,
                f1: is_binary_kind(&task.target).then_some(f1_sum / n as f64),
                task_acc,
            });
        }
    }
    Ok(EvalReport { config: serde_json::to_value(cfg)?, rows })
}

/// Parses "cond1+cond2->target" back into a TaskSpec.
pub fn parse_task_id(id: &str) -> Result<TaskSpec> {
    let (conds, target) = id
        .split_once("->")
        .ok_or_else(|| ClozeError::InvalidTask(format!("bad task id `{id}`")))?;
    let conditions: Vec<String> = conds.split('+').map(|s| s.to_string()).collect();
    if conditions.is_empty() || conditions.iter().any(|c| c.is_empty()) || target.is_empty() {
        return Err(ClozeError::InvalidTask(format!("bad task id `{id}`")));
    }
    Ok(TaskSpec::new(conditions, target.to_string()))
}
