//! Flow-matching training: graph-sampled batches over the corpus, velocity
//! MSE on masked regions, AdamW with gradient accumulation, seeded
//! end-to-end so identical configs reproduce identical loss trajectories.

use crate::checkpoint::{self, AdamState};
use crate::error::{ClozeError, Result};
use crate::flownet::lora::{apply_lora, project_grads, LoraAdapter};
use crate::flownet::patchify::{patchify, Planes};
use crate::flownet::rope::RopeTables;
use crate::flownet::timestep::{sample_timestep, TimestepField};
use crate::flownet::{backward, flow_interpolate, forward, FlowParams, ModelConfig, ModelMode};
use crate::gridlayout::{
    assign_positions, build_training_mask, compose_full_grid, token_mask, GridSpec, MaskMatrix,
    PositionTable,
};
use crate::linalg::{ExpSlice, Mat};
use crate::prompt::{
    content_instruction, encode_prompt, layout_instruction, task_instruction, ContentPolicy,
    PromptBundle,
};
use crate::rng::{fill_normal, rng_from_seed, rng_substream, SeededRng};
use crate::scalar::Scalar;
use crate::synthcorpus::{content_caption, resolve_node, CorpusManifest};
use crate::taskgraph::{enumerate_tasks, TaskGraph, TaskSpec};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossScope {
    MaskedOnly,
    FullGrid,
}

fn default_time_base_len() -> usize {
    256
}
fn default_time_max_shift() -> f64 {
    3.0
}
fn default_checkpoint_every() -> usize {
    500
}
fn default_tasks() -> Option<Vec<String>> {
    None
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub micro_batch: usize,
    pub accum_steps: usize,
    pub lr: f64,
    pub wd: f64,
    pub seed: u64,
    pub mode: ModelMode,
    pub context_max: usize,
    pub len_range: (usize, usize),
    pub loss_scope: LossScope,
    pub task_text_p: f64,
    #[serde(default = "default_tasks")]
    pub tasks: Option<Vec<String>>,
    #[serde(default = "default_time_base_len")]
    pub time_base_len: usize,
    #[serde(default = "default_time_max_shift")]
    pub time_max_shift: f64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Desk-scale default: 3,000 steps, effective batch 16, lr 1e-4.
    pub fn desk_default(seed: u64) -> Self {
        TrainConfig {
            steps: 3000,
            micro_batch: 4,
            accum_steps: 4,
            lr: 1e-4,
            wd: 0.0,
            seed,
            mode: ModelMode::Fill,
            context_max: 2,
            len_range: (2, 4),
            loss_scope: LossScope::MaskedOnly,
            task_text_p: 0.5,
            tasks: None,
            time_base_len: default_time_base_len(),
            time_max_shift: default_time_max_shift(),
            checkpoint_every: default_checkpoint_every(),
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accum_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.micro_batch == 0 || self.accum_steps == 0 {
            return Err(ClozeError::Config("steps, micro_batch, accum_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.task_text_p) {
            return Err(ClozeError::Config("task_text_p must be in [0,1]".into()));
        }
        if self.len_range.0 < 2 || self.len_range.1 > 4 || self.len_range.0 > self.len_range.1 {
            return Err(ClozeError::Config(format!("len_range {:?} outside [2,4]", self.len_range)));
        }
        if self.mode == ModelMode::Dev && self.loss_scope == LossScope::FullGrid {
            return Err(ClozeError::Config(
                "full-grid loss is a fill-mode ablation; dev mode noises masked tokens only".into(),
            ));
        }
        if self.time_max_shift < 1.0 || self.time_base_len == 0 {
            return Err(ClozeError::Config("bad time shift parameters".into()));
        }
        Ok(())
    }
}

/// One training example: clean canvas, mask, noise, timestep, prompt.
#[derive(Debug, Clone)]
pub struct TrainElement {
    pub spec: GridSpec,
    pub task_id: String,
    pub x0: Planes<f32>,
    pub eps: Planes<f32>,
    pub mask: MaskMatrix,
    pub token_mask: Vec<bool>,
    pub positions: PositionTable,
    pub prompt: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub elements: Vec<TrainElement>,
}

/// Uniform draw from the task pool honoring the config's filter.
fn sample_task_filtered(
    graph: &TaskGraph,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<TaskSpec> {
    let all = enumerate_tasks(graph, cfg.len_range.1)?;
    let pool: Vec<TaskSpec> = all
        .into_iter()
        .filter(|t| t.len() >= cfg.len_range.0)
        .filter(|t| match &cfg.tasks {
            Some(ids) => ids.contains(&t.task_id),
            None => true,
        })
        .collect();
    if pool.is_empty() {
        return Err(ClozeError::NoValidTask("task filter excludes every enumerated task".into()));
    }
    let i = rng.gen_range(0..pool.len());
    Ok(pool[i].clone())
}

/// Builds one element from its own seed; pure, so elements parallelize.
fn build_element(
    graph: &TaskGraph,
    manifest: &CorpusManifest,
    dir: &Path,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    elem_seed: u64,
) -> Result<TrainElement> {
    let mut rng = rng_from_seed(elem_seed);
    let task = sample_task_filtered(graph, cfg, &mut rng)?;
    let c: usize = rng.gen_range(0..=cfg.context_max);
    let n_records = manifest.records.len();
    if n_records < c + 1 {
        return Err(ClozeError::Corpus(format!(
            "corpus has {n_records} records, need {} disjoint",
            c + 1
        )));
    }
    let picks = rand::seq::index::sample(&mut rng, n_records, c + 1);
    let query_idx = picks.index(0);
    let size = manifest.image_size;
    let spec = GridSpec::new(c, task.len(), size, size);

    // every row complete: conditions in spec order, then the target
    let mut rows = Vec::with_capacity(c + 1);
    for slot in 0..=c {
        // contexts fill rows 0..c, the query is row c
        let rec = if slot < c { picks.index(slot + 1) } else { query_idx };
        let mut row = Vec::with_capacity(task.len());
        for kind in &task.conditions {
            row.push(resolve_node(manifest, dir, rec, kind)?);
        }
        row.push(resolve_node(manifest, dir, rec, &task.target)?);
        rows.push(row);
    }
    let canvas = compose_full_grid(&rows, &spec)?;
    let mask = build_training_mask(&spec, &mut rng);
    let positions = assign_positions(&spec.row_shapes(), model_cfg.patch)?;
    let tmask = token_mask(&mask, &spec, model_cfg.patch)?;

    let include_task = rng.gen::<f64>() < cfg.task_text_p;
    let caption = content_caption(manifest.records[query_idx].seed, size);
    let bundle = PromptBundle {
        layout: layout_instruction(&spec),
        task: task_instruction(&task, include_task),
        content: content_instruction(&task, &caption, ContentPolicy::OmitWhenImageVisible),
    };
    let prompt = encode_prompt(&bundle, model_cfg.prompt_dim).values;

    let t = sample_timestep(&mut rng, positions.len(), cfg.time_base_len, cfg.time_max_shift);
    let x0 = Planes::<f32>::from_image(&canvas.image);
    let mut eps = Planes::<f32>::zeros(3, x0.width, x0.height);
    let mut noise = vec![0.0f64; eps.data.len()];
    fill_normal(&mut rng, &mut noise);
    for (e, n) in eps.data.iter_mut().zip(&noise) {
        *e = *n as f32;
    }

    Ok(TrainElement {
        spec,
        task_id: task.task_id,
        x0,
        eps,
        mask,
        token_mask: tmask,
        positions,
        prompt,
        t,
    })
}

/// Draws `count` elements from the stream: per-element sub-seeds keep
/// parallel generation deterministic.
pub fn assemble_batch(
    graph: &TaskGraph,
    manifest: &CorpusManifest,
    dir: &Path,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    count: usize,
    rng: &mut SeededRng,
) -> Result<TrainBatch> {
    let seeds: Vec<u64> = (0..count).map(|_| rng.gen()).collect();
    let elements = seeds
        .par_iter()
        .map(|&s| build_element(graph, manifest, dir, model_cfg, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainBatch { elements })
}

/// Loss (and optionally gradients) for one element. The scope is the set of
/// velocity components the MSE covers.
pub fn element_loss<S: Scalar + ExpSlice>(
    params: &FlowParams<S>,
    elem: &TrainElement,
    loss_scope: LossScope,
    grads: Option<&mut FlowParams<S>>,
) -> Result<f64> {
    let cfg = &params.config;
    let (w, h) = (elem.x0.width, elem.x0.height);
    let n_px = w * h;
    let out_dim = cfg.out_dim();

    // per-pixel interpolation; dev mode keeps clean pixels at x0 exactly
    let x0: Vec<S> = elem.x0.data.iter().map(|&v| S::from_f64(v as f64)).collect();
    let eps: Vec<S> = elem.eps.data.iter().map(|&v| S::from_f64(v as f64)).collect();
    let (xt_all, v_all) = flow_interpolate(&x0, &eps, elem.t);
    let mut state = Planes::<S>::zeros(3, w, h);
    match cfg.mode {
        ModelMode::Fill => state.data.copy_from_slice(&xt_all),
        ModelMode::Dev => {
            for ch in 0..3 {
                for i in 0..n_px {
                    let (x, y) = (i % w, i / w);
                    let masked = elem.mask.get(x, y) == 1;
                    let idx = ch * n_px + i;
                    state.data[idx] = if masked { xt_all[idx] } else { x0[idx] };
                }
            }
            // clean tokens never receive noise
            debug_assert!((0..n_px).all(|i| {
                let (x, y) = (i % w, i / w);
                elem.mask.get(x, y) == 1 || (0..3).all(|ch| state.data[ch * n_px + i] == x0[ch * n_px + i])
            }));
        }
    }

    let tokens = match cfg.mode {
        ModelMode::Fill => {
            let mut planes = Planes::<S>::zeros(7, w, h);
            planes.data[..3 * n_px].copy_from_slice(&state.data);
            for ch in 0..3 {
                for i in 0..n_px {
                    let (x, y) = (i % w, i / w);
                    let clean = if elem.mask.get(x, y) == 1 { S::ZERO } else { x0[ch * n_px + i] };
                    planes.data[(3 + ch) * n_px + i] = clean;
                }
            }
            for i in 0..n_px {
                let (x, y) = (i % w, i / w);
                planes.data[6 * n_px + i] =
                    if elem.mask.get(x, y) == 1 { S::ONE } else { S::ZERO };
            }
            patchify(&planes, cfg.patch)?
        }
        ModelMode::Dev => patchify(&state, cfg.patch)?,
    };

    let tfield = match cfg.mode {
        ModelMode::Fill => TimestepField::Uniform(elem.t),
        ModelMode::Dev => TimestepField::per_token_from_mask(&elem.token_mask, elem.t),
    };
    let prompt: Vec<S> = elem.prompt.iter().map(|&v| S::from_f64(v)).collect();
    let rope = RopeTables::build(&elem.positions, cfg.rope_split, cfg.head_dim())?;

    let (out, cache) = forward(params, &tokens, &tfield, &prompt, &rope)?;

    // velocity target in token space
    let mut v_planes = Planes::<S>::zeros(3, w, h);
    v_planes.data.copy_from_slice(&v_all);
    let v_tokens = patchify(&v_planes, cfg.patch)?;

    let in_scope: Vec<bool> = match (cfg.mode, loss_scope) {
        (ModelMode::Dev, _) | (_, LossScope::MaskedOnly) => elem.token_mask.clone(),
        (_, LossScope::FullGrid) => vec![true; out.rows],
    };
    let count = in_scope.iter().filter(|&&m| m).count() * out_dim;
    if count == 0 {
        return Err(ClozeError::ShapeMismatch("empty loss scope".into()));
    }

    let mut loss = 0.0f64;
    let mut dout = Mat::zeros(out.rows, out.cols);
    let inv = 1.0 / count as f64;
    for i in 0..out.rows {
        if !in_scope[i] {
            continue;
        }
        let (o, v) = (out.row(i), v_tokens.row(i));
        let dr = dout.row_mut(i);
        for j in 0..out_dim {
            let diff = (o[j] - v[j]).to_f64s();
            loss += diff * diff * inv;
            dr[j] = S::from_f64(2.0 * diff * inv);
        }
    }
    if !loss.is_finite() {
        return Err(ClozeError::NonFinite(format!(
            "loss diverged on task {} (t={:.4})",
            elem.task_id, elem.t
        )));
    }
    if let Some(g) = grads {
        backward(params, &cache, &dout, &rope, g);
    }
    Ok(loss)
}

fn sum_grads_into<S: Scalar>(total: &mut FlowParams<S>, part: &FlowParams<S>) {
    let mut t = total.visit_mut();
    let p = part.visit();
    for ((_, tv), (_, pv)) in t.iter_mut().zip(p.iter()) {
        for (a, b) in tv.iter_mut().zip(pv.iter()) {
            *a = *a + *b;
        }
    }
}

fn scale_grads<S: Scalar>(g: &mut FlowParams<S>, factor: f64) {
    let f = S::from_f64(factor);
    for (_, vs) in g.visit_mut() {
        for v in vs.iter_mut() {
            *v = *v * f;
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Decoupled-weight-decay adaptive-moments update over (param, grad) slices
/// flattened in visit order.
pub fn adamw_update<S: Scalar>(
    mut params: Vec<(String, &mut [S])>,
    grads: &[(String, &[S])],
    state: &mut AdamState<S>,
    lr: f64,
    wd: f64,
) {
    state.step += 1;
    let b1 = S::from_f64(ADAM_BETA1);
    let b2 = S::from_f64(ADAM_BETA2);
    let one_m_b1 = S::from_f64(1.0 - ADAM_BETA1);
    let one_m_b2 = S::from_f64(1.0 - ADAM_BETA2);
    let bc1 = S::from_f64(1.0 - ADAM_BETA1.powi(state.step as i32));
    let bc2 = S::from_f64(1.0 - ADAM_BETA2.powi(state.step as i32));
    let lr_s = S::from_f64(lr);
    let wd_s = S::from_f64(wd);
    let eps = S::from_f64(ADAM_EPS);

    let mut offset = 0usize;
    for ((_, pv), (_, gv)) in params.iter_mut().zip(grads.iter()) {
        let m = &mut state.m[offset..offset + pv.len()];
        let v = &mut state.v[offset..offset + pv.len()];
        for i in 0..pv.len() {
            let g = gv[i];
            m[i] = b1 * m[i] + one_m_b1 * g;
            v[i] = b2 * v[i] + one_m_b2 * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            pv[i] = pv[i] - lr_s * (mhat / (vhat.sqrt() + eps) + wd_s * pv[i]);
        }
        offset += pv.len();
    }
}

/// One optimizer update over `accum_steps` micro-batches: per-element
/// gradients are computed in parallel but summed in element order, then
/// averaged over the effective batch. With an adapter, only the adapter
/// trains; the base stays frozen.
pub fn train_step<S: Scalar + ExpSlice>(
    params: &mut FlowParams<S>,
    adapter: Option<&mut LoraAdapter<S>>,
    micro_batches: &[TrainBatch],
    opt: &mut AdamState<S>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let t_dbg = std::time::Instant::now();
    let eval_params = match &adapter {
        Some(a) => apply_lora(params, a)?,
        None => params.clone(),
    };
    let dbg_clone = t_dbg.elapsed();
    let mut total_grads = params.zeros_like();
    let mut total_loss = 0.0f64;
    let mut total_elems = 0usize;
    let mut dbg_elems = std::time::Duration::ZERO;
    let mut dbg_sum = std::time::Duration::ZERO;
    for mb in micro_batches {
        let t_dbg = std::time::Instant::now();
        let results: Vec<Result<(f64, FlowParams<S>)>> = mb
            .elements
            .par_iter()
            .map(|e| {
                let mut g = eval_params.zeros_like();
                let l = element_loss(&eval_params, e, cfg.loss_scope, Some(&mut g))?;
                Ok((l, g))
            })
            .collect();
        dbg_elems += t_dbg.elapsed();
        let t_dbg = std::time::Instant::now();
        for r in results {
            let (l, g) = r?;
            total_loss += l;
            sum_grads_into(&mut total_grads, &g);
            total_elems += 1;
        }
        dbg_sum += t_dbg.elapsed();
    }
    if std::env::var("CLOZE_DEBUG_TIMING").is_ok() {
        eprintln!("clone={dbg_clone:?} elems={dbg_elems:?} sum={dbg_sum:?}");
    }
    if total_elems == 0 {
        return Err(ClozeError::Config("empty batch".into()));
    }
    scale_grads(&mut total_grads, 1.0 / total_elems as f64);
    let mean_loss = total_loss / total_elems as f64;
    if !mean_loss.is_finite() {
        return Err(ClozeError::NonFinite(format!("batch loss {mean_loss}")));
    }

    match adapter {
        Some(a) => {
            let mut agrads = a.zeros_like();
            project_grads(a, &total_grads, &mut agrads)?;
            let ag: Vec<(String, &[S])> =
                agrads.visit().into_iter().map(|(n, v)| (n, v)).collect();
            adamw_update(a.visit_mut(), &ag, opt, cfg.lr, cfg.wd);
        }
        None => {
            let gv: Vec<(String, &[S])> =
                total_grads.visit().into_iter().map(|(n, v)| (n, v)).collect();
            adamw_update(params.visit_mut(), &gv, opt, cfg.lr, cfg.wd);
        }
    }
    Ok(mean_loss)
}

#[derive(Debug, Clone, Serialize)]
pub struct LogLine {
    pub step: usize,
    pub loss: f64,
    pub t_mean: f64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub losses: Vec<f64>,
}

/// Full training run with step-indexed JSON-lines logging and periodic
/// checkpoints; resuming from a checkpoint continues the exact trajectory.
pub fn run_training<S: Scalar + ExpSlice>(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    graph: &TaskGraph,
    manifest: &CorpusManifest,
    corpus_dir: &Path,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    model_cfg.validate()?;
    if manifest.records.is_empty() {
        return Err(ClozeError::Corpus("empty corpus".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("model.ckpt");
    let log_path = out_dir.join("train_log.jsonl");

    let (mut params, mut opt, start_step) = match resume_from {
        Some(p) => {
            let (params, opt, step) = checkpoint::load_model::<S>(p)?;
            let opt = opt.ok_or_else(|| {
                ClozeError::Checkpoint("checkpoint has no optimizer state; cannot resume".into())
            })?;
            (params, opt, step as usize)
        }
        None => {
            let params = FlowParams::<S>::init(*model_cfg, &mut rng_from_seed(cfg.seed))?;
            let n = params.param_count();
            let _ = std::fs::remove_file(&log_path);
            (params, AdamState::new(n), 0)
        }
    };

    let mut log_file = std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    let mut losses = Vec::with_capacity(cfg.steps.saturating_sub(start_step));
    for step in start_step..cfg.steps {
        let mut rng = rng_substream(cfg.seed, step as u64 + 1);
        let mut micro_batches = Vec::with_capacity(cfg.accum_steps);
        for _ in 0..cfg.accum_steps {
            micro_batches.push(assemble_batch(
                graph,
                manifest,
                corpus_dir,
                model_cfg,
                cfg,
                cfg.micro_batch,
                &mut rng,
            )?);
        }
        let t_sum: f64 = micro_batches.iter().flat_map(|b| b.elements.iter().map(|e| e.t)).sum();
        let t_mean = t_sum / cfg.effective_batch() as f64;
        let loss = train_step(&mut params, None, &micro_batches, &mut opt, cfg)?;
        use std::io::Write;
        serde_json::to_writer(&mut log_file, &LogLine { step, loss, t_mean })?;
        log_file.write_all(b"\n")?;
        losses.push(loss);
        let done = step + 1 == cfg.steps;
        if done || (step + 1) % cfg.checkpoint_every == 0 {
            checkpoint::save_model(&ckpt_path, &params, Some(&opt), (step + 1) as u64)?;
        }
    }
    Ok(RunArtifacts { checkpoint: ckpt_path, log: log_path, losses })
}

/// Synthetic element for corpus-free numerical checks.
pub fn synthetic_element(model_cfg: &ModelConfig, spec: GridSpec, seed: u64, t: f64) -> TrainElement {
    let mut rng = rng_from_seed(seed);
    let (w, h) = spec.canvas_size();
    let mut x0 = Planes::<f32>::zeros(3, w, h);
    for v in x0.data.iter_mut() {
        *v = rng.gen::<f32>();
    }
    let mut eps = Planes::<f32>::zeros(3, w, h);
    let mut noise = vec![0.0f64; eps.data.len()];
    fill_normal(&mut rng, &mut noise);
    for (e, n) in eps.data.iter_mut().zip(&noise) {
        *e = *n as f32;
    }
    let mask = build_training_mask(&spec, &mut rng);
    let positions = assign_positions(&spec.row_shapes(), model_cfg.patch).unwrap();
    let tmask = token_mask(&mask, &spec, model_cfg.patch).unwrap();
    let mut prompt = vec![0.0f64; model_cfg.prompt_dim];
    fill_normal(&mut rng, &mut prompt);
    let norm: f64 = prompt.iter().map(|v| v * v).sum::<f64>().sqrt();
    prompt.iter_mut().for_each(|v| *v /= norm);
    TrainElement {
        spec,
        task_id: "synthetic".into(),
        x0,
        eps,
        mask,
        token_mask: tmask,
        positions,
        prompt,
        t,
    }
}

/// Central-difference validation of the analytic gradients on a micro model
/// in double precision. Returns the max relative error over >= 200 randomly
/// sampled coordinates (both modes).
pub fn grad_check(seed: u64) -> Result<f64> {
    let mut max_rel = 0.0f64;
    for mode in [ModelMode::Fill, ModelMode::Dev] {
        let model_cfg = ModelConfig {
            width: 16,
            depth: 1,
            heads: 2,
            patch: 2,
            mode,
            rope_split: [2, 2, 4],
            prompt_dim: 8,
        };
        let mut params = FlowParams::<f64>::init(model_cfg, &mut rng_from_seed(seed))?;
        let mut rng = rng_from_seed(seed ^ 0xabcd);
        for (_, vs) in params.visit_mut() {
            for v in vs.iter_mut() {
                if *v == 0.0 {
                    *v = crate::rng::sample_normal(&mut rng) * 0.05;
                }
            }
        }
        let elem = synthetic_element(&model_cfg, GridSpec::new(1, 2, 4, 4), seed + 1, 0.4);

        let mut grads = params.zeros_like();
        element_loss(&params, &elem, LossScope::MaskedOnly, Some(&mut grads))?;

        let n_tensors = params.visit().len();
        let mut coords: Vec<(usize, usize)> = Vec::new();
        let mut pick = rng_from_seed(seed ^ 0x5eed);
        while coords.len() < 120 {
            let ti = pick.gen_range(0..n_tensors);
            let len = params.visit()[ti].1.len();
            coords.push((ti, pick.gen_range(0..len)));
        }
        let h = 1e-5;
        for (ti, ci) in coords {
            let orig = params.visit()[ti].1[ci];
            params.visit_mut()[ti].1[ci] = orig + h;
            let lp = element_loss(&params, &elem, LossScope::MaskedOnly, None)?;
            params.visit_mut()[ti].1[ci] = orig - h;
            let lm = element_loss(&params, &elem, LossScope::MaskedOnly, None)?;
            params.visit_mut()[ti].1[ci] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.visit()[ti].1[ci];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}
