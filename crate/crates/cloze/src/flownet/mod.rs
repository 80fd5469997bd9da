//! Miniature velocity-prediction transformer: patch tokens with 3-axis
//! rotary positions, adaLN-Zero modulation driven by (timestep, prompt)
//! conditioning, and a zero-initialized output head so the untrained model
//! predicts exactly zero velocity.
//!
//! Timestep conditioning is grouped per distinct t value, which makes the
//! per-token timestep field of dev mode (clean tokens at t = 0, noised
//! tokens at t) cost two modulation rows instead of one.

pub mod lora;
pub mod patchify;
pub mod rope;
pub mod timestep;

use crate::error::{ClozeError, Result};
use crate::linalg::{
    gemm_acc, gemm_tn_acc, layernorm_rows, layernorm_rows_backward, softmax_rows,
    softmax_rows_backward, transpose_into, ExpSlice, Mat,
};
use crate::rng::{sample_normal, SeededRng};
use crate::scalar::Scalar;
use rope::RopeTables;
use serde::{Deserialize, Serialize};
use timestep::TimestepField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    /// Channel conditioning: noisy canvas + masked-clean canvas + mask.
    Fill,
    /// Clean-latent preservation with per-token timesteps, 3 channels.
    Dev,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub mode: ModelMode,
    pub rope_split: [usize; 3],
    pub prompt_dim: usize,
}

impl ModelConfig {
    /// Desk-scale default: width 128, depth 4, heads 4, patch 4.
    pub fn desk_default(mode: ModelMode) -> Self {
        ModelConfig {
            width: 128,
            depth: 4,
            heads: 4,
            patch: 4,
            mode,
            rope_split: [8, 12, 12],
            prompt_dim: 128,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self.mode {
            ModelMode::Fill => 7,
            ModelMode::Dev => 3,
        }
    }

    pub fn token_dim(&self) -> usize {
        self.in_channels() * self.patch * self.patch
    }

    pub fn out_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.heads == 0 || self.patch == 0 {
            return Err(ClozeError::Config("model dims must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(ClozeError::Config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.prompt_dim < 8 {
            return Err(ClozeError::Config("prompt_dim must be >= 8".into()));
        }
        rope::check_split(self.rope_split, self.head_dim())
    }
}

/// y = x @ w + b with w stored [in, out].
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    pub w: Mat<S>,
    pub b: Vec<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear { w: Mat::zeros(d_in, d_out), b: vec![S::ZERO; d_out] }
    }

    /// LeCun-normal weights, zero bias.
    pub fn init(rng: &mut SeededRng, d_in: usize, d_out: usize) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let mut l = Linear::zeros(d_in, d_out);
        for v in l.w.data.iter_mut() {
            *v = S::from_f64(sample_normal(rng) * std);
        }
        l
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols
    }

    pub fn forward(&self, x: &Mat<S>) -> Mat<S> {
        debug_assert_eq!(x.cols, self.in_dim());
        let mut y = Mat::zeros(x.rows, self.out_dim());
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.b);
        }
        gemm_acc(&x.data, &self.w.data, &mut y.data, x.rows, x.cols, self.out_dim());
        y
    }

    pub fn forward_vec(&self, x: &[S]) -> Vec<S> {
        let mut y = self.b.clone();
        for (k, &xv) in x.iter().enumerate() {
            let wrow = self.w.row(k);
            for (o, yo) in y.iter_mut().enumerate() {
                *yo = *yo + xv * wrow[o];
            }
        }
        y
    }

    /// Accumulates dW += x^T dy, db += colsum(dy), and optionally
    /// dx += dy @ w^T.
    pub fn backward(&self, x: &Mat<S>, dy: &Mat<S>, dx: Option<&mut Mat<S>>, grad: &mut Linear<S>) {
        debug_assert_eq!(x.rows, dy.rows);
        let (n, d_in, d_out) = (x.rows, self.in_dim(), self.out_dim());
        let mut xt = vec![S::ZERO; n * d_in];
        transpose_into(&x.data, n, d_in, &mut xt);
        gemm_acc(&xt, &dy.data, &mut grad.w.data, d_in, n, d_out);
        for r in 0..n {
            let dyr = dy.row(r);
            for (o, g) in grad.b.iter_mut().enumerate() {
                *g = *g + dyr[o];
            }
        }
        if let Some(dx) = dx {
            let mut wt = vec![S::ZERO; d_in * d_out];
            transpose_into(&self.w.data, d_in, d_out, &mut wt);
            gemm_acc(&dy.data, &wt, &mut dx.data, n, d_out, d_in);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<S> {
    pub adaln: Linear<S>,
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub mlp1: Linear<S>,
    pub mlp2: Linear<S>,
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams<S> {
    pub config: ModelConfig,
    pub token_embed: Linear<S>,
    pub time_w1: Linear<S>,
    pub time_w2: Linear<S>,
    pub prompt_proj: Linear<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub final_adaln: Linear<S>,
    pub head: Linear<S>,
}

impl<S: Scalar> FlowParams<S> {
    /// Random init; adaLN tables and the output head start at zero.
    pub fn init(config: ModelConfig, rng: &mut SeededRng) -> Result<FlowParams<S>> {
        config.validate()?;
        let d = config.width;
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                adaln: Linear::zeros(d, 6 * d),
                wq: Linear::init(rng, d, d),
                wk: Linear::init(rng, d, d),
                wv: Linear::init(rng, d, d),
                wo: Linear::init(rng, d, d),
                mlp1: Linear::init(rng, d, config.mlp_dim()),
                mlp2: Linear::init(rng, config.mlp_dim(), d),
            })
            .collect();
        Ok(FlowParams {
            config,
            token_embed: Linear::init(rng, config.token_dim(), d),
            time_w1: Linear::init(rng, d, d),
            time_w2: Linear::init(rng, d, d),
            prompt_proj: Linear::init(rng, config.prompt_dim, d),
            blocks,
            final_adaln: Linear::zeros(d, 2 * d),
            head: Linear::zeros(d, config.out_dim()),
        })
    }

    pub fn zeros_like(&self) -> FlowParams<S> {
        let z = |l: &Linear<S>| Linear::zeros(l.in_dim(), l.out_dim());
        FlowParams {
            config: self.config,
            token_embed: z(&self.token_embed),
            time_w1: z(&self.time_w1),
            time_w2: z(&self.time_w2),
            prompt_proj: z(&self.prompt_proj),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    adaln: z(&b.adaln),
                    wq: z(&b.wq),
                    wk: z(&b.wk),
                    wv: z(&b.wv),
                    wo: z(&b.wo),
                    mlp1: z(&b.mlp1),
                    mlp2: z(&b.mlp2),
                })
                .collect(),
            final_adaln: z(&self.final_adaln),
            head: z(&self.head),
        }
    }

    /// Stable (name, values) listing of every tensor.
    pub fn visit(&self) -> Vec<(String, &[S])> {
        let mut out: Vec<(String, &[S])> = vec![
            ("token_embed.w".into(), &self.token_embed.w.data),
            ("token_embed.b".into(), &self.token_embed.b),
            ("time_w1.w".into(), &self.time_w1.w.data),
            ("time_w1.b".into(), &self.time_w1.b),
            ("time_w2.w".into(), &self.time_w2.w.data),
            ("time_w2.b".into(), &self.time_w2.b),
            ("prompt_proj.w".into(), &self.prompt_proj.w.data),
            ("prompt_proj.b".into(), &self.prompt_proj.b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, lin) in [
                ("adaln", &b.adaln),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("mlp1", &b.mlp1),
                ("mlp2", &b.mlp2),
            ] {
                out.push((format!("blocks.{i}.{tag}.w"), &lin.w.data));
                out.push((format!("blocks.{i}.{tag}.b"), &lin.b));
            }
        }
        out.push(("final_adaln.w".into(), &self.final_adaln.w.data));
        out.push(("final_adaln.b".into(), &self.final_adaln.b));
        out.push(("head.w".into(), &self.head.w.data));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    pub fn visit_mut(&mut self) -> Vec<(String, &mut [S])> {
        let mut out: Vec<(String, &mut [S])> = vec![
            ("token_embed.w".into(), &mut self.token_embed.w.data[..]),
            ("token_embed.b".into(), &mut self.token_embed.b[..]),
            ("time_w1.w".into(), &mut self.time_w1.w.data[..]),
            ("time_w1.b".into(), &mut self.time_w1.b[..]),
            ("time_w2.w".into(), &mut self.time_w2.w.data[..]),
            ("time_w2.b".into(), &mut self.time_w2.b[..]),
            ("prompt_proj.w".into(), &mut self.prompt_proj.w.data[..]),
            ("prompt_proj.b".into(), &mut self.prompt_proj.b[..]),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (tag, lin) in [
                ("adaln", &mut b.adaln),
                ("wq", &mut b.wq),
                ("wk", &mut b.wk),
                ("wv", &mut b.wv),
                ("wo", &mut b.wo),
                ("mlp1", &mut b.mlp1),
                ("mlp2", &mut b.mlp2),
            ] {
                out.push((format!("blocks.{i}.{tag}.w"), &mut lin.w.data[..]));
                out.push((format!("blocks.{i}.{tag}.b"), &mut lin.b[..]));
            }
        }
        out.push(("final_adaln.w".into(), &mut self.final_adaln.w.data[..]));
        out.push(("final_adaln.b".into(), &mut self.final_adaln.b[..]));
        out.push(("head.w".into(), &mut self.head.w.data[..]));
        out.push(("head.b".into(), &mut self.head.b[..]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.visit().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> FlowParams<T> {
        let c = |l: &Linear<S>| Linear {
            w: Mat::from_vec(
                l.w.rows,
                l.w.cols,
                l.w.data.iter().map(|v| T::from_f64(v.to_f64s())).collect(),
            ),
            b: l.b.iter().map(|v| T::from_f64(v.to_f64s())).collect(),
        };
        FlowParams {
            config: self.config,
            token_embed: c(&self.token_embed),
            time_w1: c(&self.time_w1),
            time_w2: c(&self.time_w2),
            prompt_proj: c(&self.prompt_proj),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    adaln: c(&b.adaln),
                    wq: c(&b.wq),
                    wk: c(&b.wk),
                    wv: c(&b.wv),
                    wo: c(&b.wo),
                    mlp1: c(&b.mlp1),
                    mlp2: c(&b.mlp2),
                })
                .collect(),
            final_adaln: c(&self.final_adaln),
            head: c(&self.head),
        }
    }
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

fn silu<S: ExpSlice>(x: S) -> S {
    let mut e = [-x];
    S::exp_slice(&mut e);
    x / (S::ONE + e[0])
}

fn silu_prime<S: ExpSlice>(x: S) -> S {
    let mut e = [-x];
    S::exp_slice(&mut e);
    let sig = S::ONE / (S::ONE + e[0]);
    sig * (S::ONE + x * (S::ONE - sig))
}

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

/// Conditioning cache: one row per distinct timestep value.
#[derive(Debug, Clone)]
pub struct CondCache<S> {
    pub values: Vec<f64>,
    pub groups: Vec<u32>,
    sincos: Mat<S>,
    time_pre: Mat<S>,
    time_h: Mat<S>,
    c: Mat<S>,
    silu_c: Mat<S>,
    prompt_in: Vec<S>,
}

#[derive(Debug, Clone)]
struct BlockCache<S> {
    x_in: Mat<S>,
    ln1_out: Mat<S>,
    ln1_mean: Vec<S>,
    ln1_rstd: Vec<S>,
    q: Mat<S>,
    k: Mat<S>,
    v: Mat<S>,
    attn_softmax: Vec<Mat<S>>,
    attn_concat: Mat<S>,
    attn_proj: Mat<S>,
    x_mid: Mat<S>,
    ln2_out: Mat<S>,
    ln2_mean: Vec<S>,
    ln2_rstd: Vec<S>,
    mlp_pre: Mat<S>,
    mlp_act: Mat<S>,
    mlp_out: Mat<S>,
    mod6: Mat<S>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    tokens_in: Mat<S>,
    pub cond: CondCache<S>,
    blocks: Vec<BlockCache<S>>,
    x_final: Mat<S>,
    lnf_out: Mat<S>,
    lnf_mean: Vec<S>,
    lnf_rstd: Vec<S>,
    mod2: Mat<S>,
    hf: Mat<S>,
}

fn sincos_embed<S: Scalar>(t: f64, dim: usize) -> Vec<S> {
    let half = dim / 2;
    let mut out = vec![S::ZERO; dim];
    for k in 0..half {
        let freq = (-(10000.0f64.ln()) * k as f64 / half as f64).exp();
        let arg = t * 1000.0 * freq;
        out[k] = S::from_f64(arg.sin());
        out[half + k] = S::from_f64(arg.cos());
    }
    out
}

fn build_cond<S: Scalar + ExpSlice>(
    params: &FlowParams<S>,
    tfield: &TimestepField,
    prompt: &[S],
    n_tokens: usize,
) -> Result<CondCache<S>> {
    if prompt.len() != params.config.prompt_dim {
        return Err(ClozeError::ShapeMismatch(format!(
            "prompt len {} != prompt_dim {}",
            prompt.len(),
            params.config.prompt_dim
        )));
    }
    let d = params.config.width;
    let (values, groups) = tfield.group_of_tokens(n_tokens);
    let g = values.len();
    let mut sincos = Mat::zeros(g, d);
    for (gi, &t) in values.iter().enumerate() {
        sincos.row_mut(gi).copy_from_slice(&sincos_embed::<S>(t, d));
    }
    let time_pre = params.time_w1.forward(&sincos);
    let mut time_h = time_pre.clone();
    time_h.data.iter_mut().for_each(|v| *v = silu(*v));
    let mut c = params.time_w2.forward(&time_h);
    let prompt_out = params.prompt_proj.forward_vec(prompt);
    for gi in 0..g {
        let row = c.row_mut(gi);
        for (o, p) in row.iter_mut().zip(&prompt_out) {
            *o = *o + *p;
        }
    }
    let mut silu_c = c.clone();
    silu_c.data.iter_mut().for_each(|v| *v = silu(*v));
    Ok(CondCache {
        values,
        groups,
        sincos,
        time_pre,
        time_h,
        c,
        silu_c,
        prompt_in: prompt.to_vec(),
    })
}

/// h = x * (1 + scale_g) + shift_g per token, with segment offsets into the
/// modulation table rows.
fn modulate<S: Scalar>(x: &Mat<S>, table: &Mat<S>, groups: &[u32], shift_seg: usize, scale_seg: usize, d: usize) -> Mat<S> {
    let mut out = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let trow = table.row(groups[i] as usize);
        let shift = &trow[shift_seg * d..(shift_seg + 1) * d];
        let scale = &trow[scale_seg * d..(scale_seg + 1) * d];
        let xr = x.row(i);
        let or = out.row_mut(i);
        for j in 0..d {
            or[j] = xr[j] * (S::ONE + scale[j]) + shift[j];
        }
    }
    out
}

/// Backward of `modulate`: accumulates the shift/scale gradients into
/// `dtable` and returns dx.
fn modulate_backward<S: Scalar>(
    dh: &Mat<S>,
    x: &Mat<S>,
    table: &Mat<S>,
    dtable: &mut Mat<S>,
    groups: &[u32],
    shift_seg: usize,
    scale_seg: usize,
    d: usize,
) -> Mat<S> {
    let mut dx = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let gi = groups[i] as usize;
        let trow = table.row(gi);
        let scale = &trow[scale_seg * d..(scale_seg + 1) * d];
        let (dhr, xr) = (dh.row(i), x.row(i));
        let drow = dtable.row_mut(gi);
        for j in 0..d {
            drow[shift_seg * d + j] = drow[shift_seg * d + j] + dhr[j];
            drow[scale_seg * d + j] = drow[scale_seg * d + j] + xr[j] * dhr[j];
        }
        let dxr = dx.row_mut(i);
        for j in 0..d {
            dxr[j] = dhr[j] * (S::ONE + scale[j]);
        }
    }
    dx
}

/// x += gate_g * branch; returns nothing, mutates x.
fn apply_gate<S: Scalar>(x: &mut Mat<S>, branch: &Mat<S>, table: &Mat<S>, groups: &[u32], gate_seg: usize, d: usize) {
    for i in 0..x.rows {
        let gate = &table.row(groups[i] as usize)[gate_seg * d..(gate_seg + 1) * d];
        let br = branch.row(i);
        let xr = x.row_mut(i);
        for j in 0..d {
            xr[j] = xr[j] + gate[j] * br[j];
        }
    }
}

/// Backward of the gated residual: given dx_out, accumulates dgate into
/// `dtable` and returns dbranch (dx_out passes through the residual).
fn gate_backward<S: Scalar>(
    dx_out: &Mat<S>,
    branch: &Mat<S>,
    table: &Mat<S>,
    dtable: &mut Mat<S>,
    groups: &[u32],
    gate_seg: usize,
    d: usize,
) -> Mat<S> {
    let mut dbranch = Mat::zeros(branch.rows, branch.cols);
    for i in 0..branch.rows {
        let gi = groups[i] as usize;
        let gate = &table.row(gi)[gate_seg * d..(gate_seg + 1) * d];
        let (dor, br) = (dx_out.row(i), branch.row(i));
        let drow = dtable.row_mut(gi);
        for j in 0..d {
            drow[gate_seg * d + j] = drow[gate_seg * d + j] + br[j] * dor[j];
        }
        let dbr = dbranch.row_mut(i);
        for j in 0..d {
            dbr[j] = dor[j] * gate[j];
        }
    }
    dbranch
}

fn copy_head<S: Scalar>(src: &Mat<S>, head: usize, head_dim: usize, out: &mut [S]) {
    let n = src.rows;
    for i in 0..n {
        let row = &src.row(i)[head * head_dim..(head + 1) * head_dim];
        out[i * head_dim..(i + 1) * head_dim].copy_from_slice(row);
    }
}

fn add_head_back<S: Scalar>(dst: &mut Mat<S>, head: usize, head_dim: usize, src: &[S]) {
    let n = dst.rows;
    for i in 0..n {
        let row = &mut dst.row_mut(i)[head * head_dim..(head + 1) * head_dim];
        for j in 0..head_dim {
            row[j] = row[j] + src[i * head_dim + j];
        }
    }
}

/// Velocity prediction. Returns the output tokens [n, out_dim] and the
/// cache needed by `backward`.
pub fn forward<S: Scalar + ExpSlice>(
    params: &FlowParams<S>,
    tokens: &Mat<S>,
    tfield: &TimestepField,
    prompt: &[S],
    rope: &RopeTables<S>,
) -> Result<(Mat<S>, ForwardCache<S>)> {
    let cfg = &params.config;
    let (n, d) = (tokens.rows, cfg.width);
    if tokens.cols != cfg.token_dim() {
        return Err(ClozeError::ShapeMismatch(format!(
            "token dim {} != expected {}",
            tokens.cols,
            cfg.token_dim()
        )));
    }
    if rope.n_tokens != n {
        return Err(ClozeError::ShapeMismatch("rope table token count mismatch".into()));
    }
    if tokens.data.iter().any(|v| !v.is_finite()) {
        return Err(ClozeError::NonFinite("model input tokens".into()));
    }

    let cond = build_cond(params, tfield, prompt, n)?;
    let groups = &cond.groups;
    let (heads, hd) = (cfg.heads, cfg.head_dim());
    let inv_sqrt = S::from_f64(1.0 / (hd as f64).sqrt());

    let mut x = params.token_embed.forward(tokens);
    let mut blocks = Vec::with_capacity(cfg.depth);

    for bp in &params.blocks {
        let x_in = x.clone();
        let mod6 = bp.adaln.forward(&cond.silu_c);

        let mut ln1_out = Mat::zeros(n, d);
        let (mut ln1_mean, mut ln1_rstd) = (vec![S::ZERO; n], vec![S::ZERO; n]);
        layernorm_rows(&x.data, n, d, &mut ln1_out.data, &mut ln1_mean, &mut ln1_rstd);
        let h1 = modulate(&ln1_out, &mod6, groups, 0, 1, d);

        let mut q = bp.wq.forward(&h1);
        let mut k = bp.wk.forward(&h1);
        let v = bp.wv.forward(&h1);
        rope.apply(&mut q.data, heads, false);
        rope.apply(&mut k.data, heads, false);

        let mut attn_concat = Mat::zeros(n, d);
        let mut attn_softmax = Vec::with_capacity(heads);
        let mut qh = vec![S::ZERO; n * hd];
        let mut kh = vec![S::ZERO; n * hd];
        let mut vh = vec![S::ZERO; n * hd];
        let mut kht = vec![S::ZERO; n * hd];
        let mut oh = vec![S::ZERO; n * hd];
        for h in 0..heads {
            copy_head(&q, h, hd, &mut qh);
            copy_head(&k, h, hd, &mut kh);
            copy_head(&v, h, hd, &mut vh);
            for qv in qh.iter_mut() {
                *qv = *qv * inv_sqrt;
            }
            transpose_into(&kh, n, hd, &mut kht);
            let mut scores = Mat::zeros(n, n);
            gemm_acc(&qh, &kht, &mut scores.data, n, hd, n);
            softmax_rows(&mut scores.data, n, n);
            oh.iter_mut().for_each(|v| *v = S::ZERO);
            gemm_acc(&scores.data, &vh, &mut oh, n, n, hd);
            add_head_back(&mut attn_concat, h, hd, &oh);
            attn_softmax.push(scores);
        }
        let attn_proj = bp.wo.forward(&attn_concat);
        apply_gate(&mut x, &attn_proj, &mod6, groups, 2, d);
        let x_mid = x.clone();

        let mut ln2_out = Mat::zeros(n, d);
        let (mut ln2_mean, mut ln2_rstd) = (vec![S::ZERO; n], vec![S::ZERO; n]);
        layernorm_rows(&x.data, n, d, &mut ln2_out.data, &mut ln2_mean, &mut ln2_rstd);
        let h2 = modulate(&ln2_out, &mod6, groups, 3, 4, d);
        let mlp_pre = bp.mlp1.forward(&h2);
        let mut mlp_act = mlp_pre.clone();
        S::gelu_slice(&mut mlp_act.data);
        let mlp_out = bp.mlp2.forward(&mlp_act);
        apply_gate(&mut x, &mlp_out, &mod6, groups, 5, d);

        blocks.push(BlockCache {
            x_in,
            ln1_out,
            ln1_mean,
            ln1_rstd,
            q,
            k,
            v,
            attn_softmax,
            attn_concat,
            attn_proj,
            x_mid,
            ln2_out,
            ln2_mean,
            ln2_rstd,
            mlp_pre,
            mlp_act,
            mlp_out,
            mod6,
        });
    }

    let x_final = x;
    let mod2 = params.final_adaln.forward(&cond.silu_c);
    let mut lnf_out = Mat::zeros(n, d);
    let (mut lnf_mean, mut lnf_rstd) = (vec![S::ZERO; n], vec![S::ZERO; n]);
    layernorm_rows(&x_final.data, n, d, &mut lnf_out.data, &mut lnf_mean, &mut lnf_rstd);
    let hf = modulate(&lnf_out, &mod2, groups, 0, 1, d);
    let out = params.head.forward(&hf);

    let cache = ForwardCache {
        tokens_in: tokens.clone(),
        cond,
        blocks,
        x_final,
        lnf_out,
        lnf_mean,
        lnf_rstd,
        mod2,
        hf,
    };
    Ok((out, cache))
}

/// Accumulates parameter gradients for dL/d(out) = `dout` into `grads`.
/// `rope` must be the table used in the matching `forward` call.
pub fn backward<S: Scalar + ExpSlice>(
    params: &FlowParams<S>,
    cache: &ForwardCache<S>,
    dout: &Mat<S>,
    rope: &RopeTables<S>,
    grads: &mut FlowParams<S>,
) {
    let cfg = &params.config;
    let d = cfg.width;
    let n = cache.tokens_in.rows;
    let groups = &cache.cond.groups;
    let (heads, hd) = (cfg.heads, cfg.head_dim());
    let inv_sqrt = S::from_f64(1.0 / (hd as f64).sqrt());
    let g_rows = cache.cond.values.len();

    let mut d_silu_c = Mat::zeros(g_rows, d);

    // head
    let mut d_hf = Mat::zeros(n, d);
    params.head.backward(&cache.hf, dout, Some(&mut d_hf), &mut grads.head);

    // final modulation + layer norm
    let mut d_mod2 = Mat::zeros(g_rows, 2 * d);
    let d_lnf = modulate_backward(&d_hf, &cache.lnf_out, &cache.mod2, &mut d_mod2, groups, 0, 1, d);
    params
        .final_adaln
        .backward(&cache.cond.silu_c, &d_mod2, Some(&mut d_silu_c), &mut grads.final_adaln);
    let mut dx = Mat::zeros(n, d);
    layernorm_rows_backward(
        &cache.x_final.data,
        &cache.lnf_mean,
        &cache.lnf_rstd,
        &d_lnf.data,
        n,
        d,
        &mut dx.data,
    );

    for ((bp, bc), gp) in params
        .blocks
        .iter()
        .rev()
        .zip(cache.blocks.iter().rev())
        .zip(grads.blocks.iter_mut().rev())
    {
        let mut d_mod6 = Mat::zeros(g_rows, 6 * d);

        // second residual: x_out = x_mid + gate2 * mlp_out
        let d_mlp_out = gate_backward(&dx, &bc.mlp_out, &bc.mod6, &mut d_mod6, groups, 5, d);

        // mlp
        let mut d_mlp_act = Mat::zeros(n, cfg.mlp_dim());
        bp.mlp2.backward(&bc.mlp_act, &d_mlp_out, Some(&mut d_mlp_act), &mut gp.mlp2);
        let mut d_mlp_pre = d_mlp_act;
        S::gelu_prime_mul(&bc.mlp_pre.data, &mut d_mlp_pre.data);
        let h2 = modulate(&bc.ln2_out, &bc.mod6, groups, 3, 4, d);
        let mut d_h2 = Mat::zeros(n, d);
        bp.mlp1.backward(&h2, &d_mlp_pre, Some(&mut d_h2), &mut gp.mlp1);
        let d_ln2 = modulate_backward(&d_h2, &bc.ln2_out, &bc.mod6, &mut d_mod6, groups, 3, 4, d);
        // dx currently holds d(x_out); the residual passes it through to
        // x_mid, and the ln2 path adds to it
        layernorm_rows_backward(
            &bc.x_mid.data,
            &bc.ln2_mean,
            &bc.ln2_rstd,
            &d_ln2.data,
            n,
            d,
            &mut dx.data,
        );

        // first residual: x_mid = x_in + gate1 * attn_proj
        let d_attn_proj = gate_backward(&dx, &bc.attn_proj, &bc.mod6, &mut d_mod6, groups, 2, d);

        let mut d_concat = Mat::zeros(n, d);
        bp.wo.backward(&bc.attn_concat, &d_attn_proj, Some(&mut d_concat), &mut gp.wo);

        // attention
        let mut dq = Mat::zeros(n, d);
        let mut dk = Mat::zeros(n, d);
        let mut dv = Mat::zeros(n, d);
        let mut qh = vec![S::ZERO; n * hd];
        let mut kh = vec![S::ZERO; n * hd];
        let mut vh = vec![S::ZERO; n * hd];
        let mut vht = vec![S::ZERO; n * hd];
        let mut doh = vec![S::ZERO; n * hd];
        let mut dqh = vec![S::ZERO; n * hd];
        let mut dkh = vec![S::ZERO; n * hd];
        let mut dvh = vec![S::ZERO; n * hd];
        for h in 0..heads {
            let s = &bc.attn_softmax[h];
            copy_head(&bc.q, h, hd, &mut qh);
            copy_head(&bc.k, h, hd, &mut kh);
            copy_head(&bc.v, h, hd, &mut vh);
            copy_head(&d_concat, h, hd, &mut doh);

            // dS = do @ v^T
            transpose_into(&vh, n, hd, &mut vht);
            let mut ds = Mat::zeros(n, n);
            gemm_acc(&doh, &vht, &mut ds.data, n, hd, n);
            // dv = S^T @ do
            dvh.iter_mut().for_each(|v| *v = S::ZERO);
            gemm_tn_acc(&s.data, &doh, &mut dvh, n, n, hd);
            add_head_back(&mut dv, h, hd, &dvh);
            // dz through softmax
            softmax_rows_backward(&s.data, &mut ds.data, n, n);
            // dq = (dz @ k) * inv_sqrt ; dk = (dz^T @ q) * inv_sqrt
            dqh.iter_mut().for_each(|v| *v = S::ZERO);
            gemm_acc(&ds.data, &kh, &mut dqh, n, n, hd);
            for v in dqh.iter_mut() {
                *v = *v * inv_sqrt;
            }
            add_head_back(&mut dq, h, hd, &dqh);
            dkh.iter_mut().for_each(|v| *v = S::ZERO);
            gemm_tn_acc(&ds.data, &qh, &mut dkh, n, n, hd);
            for v in dkh.iter_mut() {
                *v = *v * inv_sqrt;
            }
            add_head_back(&mut dk, h, hd, &dkh);
        }
        // invert the in-place rotations applied after the projections
        rope.apply(&mut dq.data, heads, true);
        rope.apply(&mut dk.data, heads, true);

        let h1 = modulate(&bc.ln1_out, &bc.mod6, groups, 0, 1, d);
        let mut d_h1 = Mat::zeros(n, d);
        bp.wq.backward(&h1, &dq, Some(&mut d_h1), &mut gp.wq);
        bp.wk.backward(&h1, &dk, Some(&mut d_h1), &mut gp.wk);
        bp.wv.backward(&h1, &dv, Some(&mut d_h1), &mut gp.wv);

        let d_ln1 = modulate_backward(&d_h1, &bc.ln1_out, &bc.mod6, &mut d_mod6, groups, 0, 1, d);
        // dx holds d(x_mid); the residual passes it through to x_in
        layernorm_rows_backward(
            &bc.x_in.data,
            &bc.ln1_mean,
            &bc.ln1_rstd,
            &d_ln1.data,
            n,
            d,
            &mut dx.data,
        );

        bp.adaln.backward(&cache.cond.silu_c, &d_mod6, Some(&mut d_silu_c), &mut gp.adaln);
    }

    // token embedding
    params.token_embed.backward(&cache.tokens_in, &dx, None, &mut grads.token_embed);

    // conditioning path: silu(c) -> c = time_w2(silu(time_w1(sincos))) + prompt_proj(prompt)
    let mut dc = d_silu_c;
    for (dv, &cv) in dc.data.iter_mut().zip(&cache.cond.c.data) {
        *dv = *dv * silu_prime(cv);
    }
    let mut d_time_h = Mat::zeros(g_rows, d);
    params.time_w2.backward(&cache.cond.time_h, &dc, Some(&mut d_time_h), &mut grads.time_w2);
    let mut d_time_pre = d_time_h;
    for (dv, &pre) in d_time_pre.data.iter_mut().zip(&cache.cond.time_pre.data) {
        *dv = *dv * silu_prime(pre);
    }
    params.time_w1.backward(&cache.cond.sincos, &d_time_pre, None, &mut grads.time_w1);

    // the prompt projection feeds every group row identically
    let pd = params.config.prompt_dim;
    let mut d_prompt_out = vec![S::ZERO; d];
    for gi in 0..g_rows {
        for (acc, &v) in d_prompt_out.iter_mut().zip(dc.row(gi)) {
            *acc = *acc + v;
        }
    }
    for k in 0..pd {
        let xv = cache.cond.prompt_in[k];
        let grow = grads.prompt_proj.w.row_mut(k);
        for (o, g) in grow.iter_mut().enumerate() {
            *g = *g + xv * d_prompt_out[o];
        }
    }
    for (g, &v) in grads.prompt_proj.b.iter_mut().zip(&d_prompt_out) {
        *g = *g + v;
    }
}

/// Rectified-flow interpolation: x_t = (1-t) x0 + t eps, with the
/// noise-pointing velocity target eps - x0.
pub fn flow_interpolate<S: Scalar>(x0: &[S], eps: &[S], t: f64) -> (Vec<S>, Vec<S>) {
    assert_eq!(x0.len(), eps.len(), "flow_interpolate shape mismatch");
    let ts = S::from_f64(t);
    let one_minus = S::ONE - ts;
    let xt = x0
        .iter()
        .zip(eps)
        .map(|(&a, &e)| one_minus * a + ts * e)
        .collect();
    let v = x0.iter().zip(eps).map(|(&a, &e)| e - a).collect();
    (xt, v)
}
