//! Acceptance suite: one test per criterion, each printing a single
//! PASS line with its measured numbers (visible via --nocapture).
//!
//! Criteria 3-6 train real models and take minutes; the structural and
//! numerical criteria finish in seconds. Run the whole suite with
//! `cargo test -p cloze-cli --test acceptance`.

use cloze::checkpoint::load_model;
use cloze::flownet::lora::{apply_lora, LoraAdapter};
use cloze::flownet::patchify::{patchify, unpatchify, Planes};
use cloze::flownet::rope::RopeTables;
use cloze::flownet::timestep::TimestepField;
use cloze::flownet::{forward, FlowParams, ModelConfig, ModelMode};
use cloze::gridlayout::{assign_positions, build_inference_mask, build_training_mask, GridSpec};
use cloze::image::RasterImage;
use cloze::linalg::{dot, Mat};
use cloze::metrics::{evaluate, f1_edge, rmse, ssim, EvalConfig, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use cloze::rng::{rng_from_seed, sample_normal, SeededRng};
use cloze::synthcorpus::{annotate, build_corpus, gen_base_image, CorpusConfig, CorpusManifest};
use cloze::taskgraph::{build_default_graph, GraphConfig, NodeFamily, NodeKind, TaskGraph};
use cloze::trainer::{
    grad_check, run_training, train_step, LossScope, TrainBatch, TrainConfig, TrainElement,
};
use rand::Rng;
use std::path::{Path, PathBuf};
use std::process::Command;

fn work_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cloze_acceptance_{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn micro_model(mode: ModelMode) -> ModelConfig {
    ModelConfig {
        width: 16,
        depth: 1,
        heads: 2,
        patch: 2,
        mode,
        rope_split: [2, 2, 4],
        prompt_dim: 8,
    }
}

// ---------------------------------------------------------------------------
// criterion 1: structural invariants
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_structural_invariants() {
    // inference mask: exactly one cell, last row and last column
    for c in 0..=4usize {
        for l in 2..=4usize {
            let spec = GridSpec::new(c, l, 12, 8);
            let m = build_inference_mask(&spec);
            assert_eq!(m.ones_count(), 12 * 8, "C={c} L={l} mask area");
            for y in 0..m.height {
                for x in 0..m.width {
                    let inside = y >= c * 8 && x >= (l - 1) * 12;
                    assert_eq!(m.get(x, y) == 1, inside, "C={c} L={l} ({x},{y})");
                }
            }
        }
    }

    // additive 0.5 training-mask frequency over 10^4 draws
    let spec = GridSpec::new(1, 3, 4, 4);
    let single = build_inference_mask(&spec).ones_count();
    let mut rng = rng_from_seed(20_001);
    let draws = 10_000;
    let mut extra = 0usize;
    for _ in 0..draws {
        let ones = build_training_mask(&spec, &mut rng).ones_count();
        assert!(ones == single || ones == 2 * single);
        if ones == 2 * single {
            extra += 1;
        }
    }
    let frac = extra as f64 / draws as f64;
    assert!((0.47..=0.53).contains(&frac), "extra-mask fraction {frac}");

    // position-table injectivity across 100 random specs
    let mut rng = rng_from_seed(20_002);
    for _ in 0..100 {
        let c: usize = rng.gen_range(0..=4);
        let l: usize = rng.gen_range(2..=4);
        let p = [2usize, 4][rng.gen_range(0..2)];
        let spec = GridSpec::new(c, l, p * rng.gen_range(1..=6), p * rng.gen_range(1..=6));
        let table = assign_positions(&spec.row_shapes(), p).unwrap();
        assert!(table.all_unique(), "{spec:?}");
    }

    // patchify/unpatchify bijection
    let img = gen_base_image(5, 16);
    let planes: Planes<f32> = Planes::from_image(&img);
    let tokens = patchify(&planes, 4).unwrap();
    assert_eq!(unpatchify(&tokens, 3, 16, 16, 4).unwrap(), planes);

    // adaLN-Zero: zero velocity at init, both modes
    for mode in [ModelMode::Fill, ModelMode::Dev] {
        let cfg = micro_model(mode);
        let params = FlowParams::<f64>::init(cfg, &mut rng_from_seed(9)).unwrap();
        let table = assign_positions(&[(8, 4), (8, 4)], 2).unwrap();
        let rope = RopeTables::build(&table, cfg.rope_split, cfg.head_dim()).unwrap();
        let mut tokens = Mat::zeros(table.len(), cfg.token_dim());
        let mut rng = rng_from_seed(10);
        tokens.data.iter_mut().for_each(|v| *v = sample_normal(&mut rng));
        let prompt = vec![0.25; cfg.prompt_dim];
        let (out, _) =
            forward(&params, &tokens, &TimestepField::Uniform(0.3), &prompt, &rope).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0), "{mode:?}");
    }

    // LoRA with zero up-projection is an exact no-op
    let cfg = micro_model(ModelMode::Fill);
    let mut params = FlowParams::<f64>::init(cfg, &mut rng_from_seed(11)).unwrap();
    let mut rng = rng_from_seed(12);
    for (_, vs) in params.visit_mut() {
        for v in vs.iter_mut() {
            if *v == 0.0 {
                *v = sample_normal(&mut rng) * 0.05;
            }
        }
    }
    let adapter = LoraAdapter::init(&params, 4, 8.0, &mut rng_from_seed(13)).unwrap();
    let merged = apply_lora(&params, &adapter).unwrap();
    let table = assign_positions(&[(8, 4)], 2).unwrap();
    let rope = RopeTables::build(&table, cfg.rope_split, cfg.head_dim()).unwrap();
    let mut tokens = Mat::zeros(table.len(), cfg.token_dim());
    tokens.data.iter_mut().for_each(|v| *v = sample_normal(&mut rng) * 0.3);
    let prompt = vec![0.1; cfg.prompt_dim];
    let tf = TimestepField::Uniform(0.5);
    let (a, _) = forward(&params, &tokens, &tf, &prompt, &rope).unwrap();
    let (b, _) = forward(&merged, &tokens, &tf, &prompt, &rope).unwrap();
    assert_eq!(a.data, b.data);

    println!(
        "criterion 1 PASS: mask location/area, training-mask frequency {frac:.4}, \
         position injectivity (100 specs), patchify bijection, adaLN-Zero init, LoRA no-op"
    );
}

// ---------------------------------------------------------------------------
// criterion 2: numerical core
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_numerical_core() {
    // finite-difference gradient check on the double-precision micro model
    let max_rel = grad_check(4242).unwrap();
    assert!(max_rel <= 1e-4, "grad check max relative error {max_rel}");

    // RoPE relative-shift invariance at <= 1e-5 relative error
    let split = [4usize, 6, 6];
    let head_dim: usize = split.iter().sum();
    let mut rng = rng_from_seed(77);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let q: Vec<f64> = (0..head_dim).map(|_| sample_normal(&mut rng)).collect();
        let k: Vec<f64> = (0..head_dim).map(|_| sample_normal(&mut rng)).collect();
        let a = [rng.gen_range(0..8u32), rng.gen_range(0..8), rng.gen_range(0..8)];
        let b = [rng.gen_range(0..8u32), rng.gen_range(0..8), rng.gen_range(0..8)];
        let delta = [rng.gen_range(0..16u32), rng.gen_range(0..16), rng.gen_range(0..16)];
        let score = |pa: [u32; 3], pb: [u32; 3]| -> f64 {
            let table = cloze::gridlayout::PositionTable {
                patch: 1,
                row_shapes: vec![],
                positions: vec![pa, pb],
            };
            let rt: RopeTables<f64> = RopeTables::build(&table, split, head_dim).unwrap();
            let mut both = [q.clone(), k.clone()].concat();
            rt.apply(&mut both, 1, false);
            dot(&both[..head_dim].to_vec(), &both[head_dim..].to_vec())
        };
        let base = score(a, b);
        let shifted = score(
            [a[0] + delta[0], a[1] + delta[1], a[2] + delta[2]],
            [b[0] + delta[0], b[1] + delta[1], b[2] + delta[2]],
        );
        let rel = (base - shifted).abs() / base.abs().max(1e-9);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-5, "rope relative-shift error {worst}");

    // gradient-accumulation equivalence at <= 1e-6 relative
    let mc = micro_model(ModelMode::Fill);
    let elems: Vec<TrainElement> = (0..8)
        .map(|i| cloze::trainer::synthetic_element(&mc, GridSpec::new(1, 2, 4, 4), 900 + i, 0.45))
        .collect();
    let cfg = TrainConfig {
        steps: 1,
        micro_batch: 8,
        accum_steps: 1,
        lr: 1e-3,
        wd: 0.0,
        seed: 0,
        mode: ModelMode::Fill,
        context_max: 1,
        len_range: (2, 2),
        loss_scope: LossScope::MaskedOnly,
        task_text_p: 0.5,
        tasks: None,
        time_base_len: 256,
        time_max_shift: 3.0,
        checkpoint_every: 10,
    };
    let run = |splits: Vec<usize>| -> (f64, FlowParams<f64>) {
        let mut params = FlowParams::<f64>::init(mc, &mut rng_from_seed(31)).unwrap();
        let mut rng = rng_from_seed(32);
        for (_, vs) in params.visit_mut() {
            for v in vs.iter_mut() {
                if *v == 0.0 {
                    *v = sample_normal(&mut rng) * 0.05;
                }
            }
        }
        let mut opt = cloze::checkpoint::AdamState::new(params.param_count());
        let mut it = elems.iter().cloned();
        let batches: Vec<TrainBatch> = splits
            .iter()
            .map(|&s| TrainBatch { elements: (&mut it).take(s).collect() })
            .collect();
        let loss = train_step(&mut params, None, &batches, &mut opt, &cfg).unwrap();
        (loss, params)
    };
    let (l1, p1) = run(vec![8]);
    let (l2, p2) = run(vec![2; 4]);
    let loss_rel = (l1 - l2).abs() / l1.abs().max(1e-12);
    assert!(loss_rel <= 1e-6, "accumulation loss mismatch {loss_rel}");
    let mut worst_param: f64 = 0.0;
    for ((_, v1), (_, v2)) in p1.visit().iter().zip(p2.visit().iter()) {
        for (a, b) in v1.iter().zip(v2.iter()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-9);
            worst_param = worst_param.max(rel);
        }
    }
    assert!(worst_param <= 1e-6, "accumulation param mismatch {worst_param}");

    println!(
        "criterion 2 PASS: grad check {max_rel:.2e} <= 1e-4, rope shift invariance {worst:.2e} <= 1e-5, \
         accumulation equivalence {worst_param:.2e} <= 1e-6"
    );
}

// ---------------------------------------------------------------------------
// criterion 7: metric oracles
// ---------------------------------------------------------------------------

/// Independent dense implementation of the SSIM definition: per-pixel
/// Gaussian-window statistics computed by direct summation.
fn ssim_dense_oracle(a: &RasterImage, b: &RasterImage) -> f64 {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut kern = vec![0.0f64; SSIM_WINDOW * SSIM_WINDOW];
    let mut ksum = 0.0;
    for dy in -half..=half {
        for dx in -half..=half {
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            kern[((dy + half) * SSIM_WINDOW as isize + dx + half) as usize] = v;
            ksum += v;
        }
    }
    kern.iter_mut().for_each(|v| *v /= ksum);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    for ch in 0..3 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for cy in half..(h as isize - half) {
            for cx in half..(w as isize - half) {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -half..=half {
                    for dx in -half..=half {
                        let kv = kern[((dy + half) * SSIM_WINDOW as isize + dx + half) as usize];
                        let i = (((cy + dy) * w as isize + cx + dx) * 3) as usize + ch;
                        let (xa, xb) = (a.data[i] as f64, b.data[i] as f64);
                        ma += kv * xa;
                        mb += kv * xb;
                        saa += kv * xa * xa;
                        sbb += kv * xb * xb;
                        sab += kv * xa * xb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / 3.0
}

#[test]
fn criterion_7_metric_oracles() {
    // ssim self-similarity
    let mut worst_self: f64 = 0.0;
    for seed in 0..5 {
        let x = gen_base_image(3000 + seed, 24);
        worst_self = worst_self.max((ssim(&x, &x).unwrap() - 1.0).abs());
    }
    assert!(worst_self <= 1e-9, "ssim(x,x) error {worst_self}");

    // rmse closed forms, exact
    let zeros = RasterImage::new(8, 8);
    let ones = RasterImage::filled(8, 8, [1.0; 3]);
    assert_eq!(rmse(&zeros, &zeros).unwrap(), 0.0);
    assert_eq!(rmse(&zeros, &ones).unwrap(), 1.0);
    let mut half = zeros.clone();
    for i in 0..half.data.len() / 2 {
        half.data[i] = 1.0;
    }
    assert!((rmse(&half, &zeros).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);

    // f1 counting cases, exact
    let mut gt = RasterImage::new(10, 10);
    for y in 0..10 {
        for x in 0..5 {
            gt.set_pixel(x, y, [1.0; 3]);
        }
    }
    let full = RasterImage::filled(10, 10, [1.0; 3]);
    let mut disjoint = RasterImage::new(10, 10);
    for y in 0..10 {
        for x in 5..10 {
            disjoint.set_pixel(x, y, [1.0; 3]);
        }
    }
    assert_eq!(f1_edge(&gt, &gt, 0.5).unwrap(), 1.0);
    assert_eq!(f1_edge(&disjoint, &gt, 0.5).unwrap(), 0.0);
    assert!((f1_edge(&full, &gt, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);

    // ssim vs the independent dense oracle on 20 random pairs
    let mut rng = rng_from_seed(3100);
    let mut worst_pair: f64 = 0.0;
    for trial in 0..20u64 {
        let a = gen_base_image(3200 + trial, 16);
        let b = if rng.gen::<bool>() {
            gen_base_image(3300 + trial, 16)
        } else {
            a.map(|v| (v + 0.03).min(1.0))
        };
        let fast = ssim(&a, &b).unwrap();
        let dense = ssim_dense_oracle(&a, &b);
        worst_pair = worst_pair.max((fast - dense).abs());
    }
    assert!(worst_pair <= 1e-6, "ssim oracle disagreement {worst_pair}");

    println!(
        "criterion 7 PASS: ssim self {worst_self:.1e}, rmse/f1 closed forms exact, \
         ssim-vs-dense-oracle {worst_pair:.1e} <= 1e-6 over 20 pairs"
    );
}

// ---------------------------------------------------------------------------
// criterion 8: reproducibility through the CLI
// ---------------------------------------------------------------------------

fn cli() -> &'static str {
    env!("CARGO_BIN_EXE_cloze")
}

fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(cli()).args(args).output().expect("spawn cloze");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).to_string(),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

#[test]
fn criterion_8_cli_reproducibility() {
    let dir = work_dir("c8");
    let corpus_dir = dir.join("corpus");
    let mk_config = |run_dir: &Path| -> PathBuf {
        let config = serde_json::json!({
            "out_dir": run_dir,
            "graph": {
                "annotations": [
                    {"id": "invert", "family": "edit", "forward": true},
                    {"id": "grayscale", "family": "style", "forward": true}
                ]
            },
            "corpus": {
                "count": 8, "size": 16, "seed": 500,
                "annotations": ["invert", "grayscale"],
                "out_dir": corpus_dir
            },
            "model": {
                "width": 16, "depth": 1, "heads": 2, "patch": 2,
                "mode": "fill", "rope_split": [2, 2, 4], "prompt_dim": 8
            },
            "train": {
                "steps": 6, "micro_batch": 2, "accum_steps": 2, "lr": 1e-3, "wd": 0.0,
                "seed": 99, "mode": "fill", "context_max": 1, "len_range": [2, 2],
                "loss_scope": "masked-only", "task_text_p": 0.5
            },
            "eval": {
                "tasks": ["image->invert", "image->grayscale"],
                "contexts": [0, 1], "n_queries": 3, "holdout_from": 5,
                "seed": 61, "steps": 5, "include_task_text": true
            },
            "train_records": 5
        });
        let p = run_dir.parent().unwrap().join(format!(
            "cfg_{}.json",
            run_dir.file_name().unwrap().to_string_lossy()
        ));
        std::fs::write(&p, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        p
    };

    let cfg_a = mk_config(&dir.join("run_a"));
    let cfg_b = mk_config(&dir.join("run_b"));

    let (code, _, err) = run_cli(&["corpus", "--config", cfg_a.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");

    for cfg in [&cfg_a, &cfg_b] {
        let (code, _, err) = run_cli(&["train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
    }
    let log_a = std::fs::read(dir.join("run_a/train_log.jsonl")).unwrap();
    let log_b = std::fs::read(dir.join("run_b/train_log.jsonl")).unwrap();
    assert_eq!(log_a, log_b, "training loss logs differ between identical runs");

    // eval twice from the same checkpoint: byte-identical reports
    for out in ["r1.json", "r2.json"] {
        let (code, _, err) = run_cli(&[
            "eval",
            "--config",
            cfg_a.to_str().unwrap(),
            "--out",
            dir.join(out).to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
    }
    let r1 = std::fs::read(dir.join("r1.json")).unwrap();
    let r2 = std::fs::read(dir.join("r2.json")).unwrap();
    assert_eq!(r1, r2, "eval reports differ between reruns");

    println!(
        "criterion 8 PASS: identical loss logs across cmd_train reruns ({} bytes), \
         byte-identical eval reports ({} bytes)",
        log_a.len(),
        r1.len()
    );
}

// ---------------------------------------------------------------------------
// criterion 3: training progress on the default desk config
// ---------------------------------------------------------------------------

/// Trains (or reuses, when CLOZE_ACCEPTANCE_CACHE=1 and a checkpoint
/// exists) and returns the run artifacts.
fn train_or_reuse(
    tag: &str,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    graph: &TaskGraph,
    manifest: &CorpusManifest,
    corpus_dir: &Path,
) -> (PathBuf, Vec<f64>) {
    let out_dir = std::env::temp_dir().join(format!("cloze_acceptance_run_{tag}"));
    let ckpt = out_dir.join("model.ckpt");
    let log = out_dir.join("train_log.jsonl");
    let cache_ok = std::env::var("CLOZE_ACCEPTANCE_CACHE").is_ok();
    if !(cache_ok && ckpt.exists() && log.exists()) {
        let _ = std::fs::remove_dir_all(&out_dir);
        run_training::<f32>(train_cfg, model_cfg, graph, manifest, corpus_dir, &out_dir, None)
            .unwrap();
    }
    let losses: Vec<f64> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"].as_f64().unwrap())
        .collect();
    (ckpt, losses)
}

fn build_or_reuse_corpus(tag: &str, cfg: &CorpusConfig) -> CorpusManifest {
    let manifest_path = cfg.out_dir.join("manifest.json");
    if std::env::var("CLOZE_ACCEPTANCE_CACHE").is_ok() && manifest_path.exists() {
        return CorpusManifest::load(&manifest_path).unwrap();
    }
    let _ = std::fs::remove_dir_all(&cfg.out_dir);
    let m = build_corpus(cfg).unwrap();
    let _ = tag;
    m
}

#[test]
fn criterion_3_training_progress() {
    // (a) default desk config: 12-kind graph, 512 records, 32x32 cells,
    // width-128 model, 3,000 steps at the default lr
    let dir = std::env::temp_dir().join("cloze_acceptance_c3_corpus");
    let corpus_cfg = CorpusConfig {
        count: 512,
        size: 32,
        seed: 31_000,
        annotations: cloze::synthcorpus::ANNOTATION_KINDS.iter().map(|s| s.to_string()).collect(),
        out_dir: dir.clone(),
    };
    let manifest = build_or_reuse_corpus("c3", &corpus_cfg);
    let graph = build_default_graph(&GraphConfig::default_desk()).unwrap();
    assert_eq!(graph.nodes.len(), 13);
    let train_cfg = TrainConfig::desk_default(31_001);
    let model_cfg = ModelConfig::desk_default(ModelMode::Fill);
    let (_, losses) = train_or_reuse("c3", &train_cfg, &model_cfg, &graph, &manifest, &dir);
    assert_eq!(losses.len(), 3000);
    let initial = losses[0];
    let tail = &losses[losses.len() - 50..];
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    let reduction = 1.0 - final_loss / initial;
    assert!(
        reduction >= 0.70,
        "training loss reduced only {:.1}% (initial {initial:.4}, final {final_loss:.4})",
        reduction * 100.0
    );

    // (b) 1-sample overfit reaches masked-cell RMSE <= 0.05
    let ov_dir = std::env::temp_dir().join("cloze_acceptance_c3_overfit");
    let ov_corpus = CorpusConfig {
        count: 1,
        size: 16,
        seed: 31_500,
        annotations: vec!["invert".into()],
        out_dir: ov_dir.clone(),
    };
    let ov_manifest = build_or_reuse_corpus("c3ov", &ov_corpus);
    let ov_graph = build_default_graph(&GraphConfig {
        annotations: vec![
            NodeKind { id: "invert".into(), family: NodeFamily::Edit, forward: true },
            NodeKind { id: "grayscale".into(), family: NodeFamily::Style, forward: true },
        ],
        extra_edges: vec![],
    })
    .unwrap();
    let ov_model = ModelConfig {
        width: 96,
        depth: 4,
        heads: 4,
        patch: 4,
        mode: ModelMode::Fill,
        rope_split: [8, 8, 8],
        prompt_dim: 64,
    };
    let ov_train = TrainConfig {
        steps: 1500,
        micro_batch: 8,
        accum_steps: 1,
        lr: 1e-3,
        wd: 0.0,
        seed: 31_501,
        mode: ModelMode::Fill,
        context_max: 0,
        len_range: (2, 2),
        loss_scope: LossScope::MaskedOnly,
        task_text_p: 1.0,
        tasks: Some(vec!["image->invert".into()]),
        time_base_len: 256,
        time_max_shift: 3.0,
        checkpoint_every: 100_000,
    };
    let (ov_ckpt, _) = train_or_reuse("c3ov", &ov_train, &ov_model, &ov_graph, &ov_manifest, &ov_dir);
    let (params, _, _) = load_model::<f32>(&ov_ckpt).unwrap();
    let base = gen_base_image(31_500, 16);
    let target = annotate(&base, "invert").unwrap();
    let task = cloze::taskgraph::TaskSpec::new(vec!["image".into()], "invert".into());
    let mut scfg = cloze::sampler::SampleConfig::new(ModelMode::Fill, 5);
    scfg.steps = 20;
    let spec = cloze::sampler::PromptSpec { include_task: true, content_caption: None };
    let (out, _) =
        cloze::sampler::infer_task(&params, &task, &[], &[base], &spec, &scfg, Some(0)).unwrap();
    let overfit_rmse = rmse(&out, &target).unwrap();
    assert!(overfit_rmse <= 0.05, "overfit masked-cell rmse {overfit_rmse:.4} > 0.05");

    println!(
        "criterion 3 PASS: desk-config loss {initial:.3} -> {final_loss:.3} ({:.1}% reduction >= 70%), \
         1-sample overfit rmse {overfit_rmse:.4} <= 0.05",
        reduction * 100.0
    );
}

// ---------------------------------------------------------------------------
// criterion 4: in-context task disambiguation
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_task_disambiguation() {
    let dir = std::env::temp_dir().join("cloze_acceptance_c4_corpus");
    let corpus_cfg = CorpusConfig {
        count: 176,
        size: 16,
        seed: 41_000,
        annotations: vec!["invert".into(), "grayscale".into()],
        out_dir: dir.clone(),
    };
    let manifest = build_or_reuse_corpus("c4", &corpus_cfg);
    let graph = build_default_graph(&GraphConfig {
        annotations: vec![
            NodeKind { id: "invert".into(), family: NodeFamily::Edit, forward: true },
            NodeKind { id: "grayscale".into(), family: NodeFamily::Style, forward: true },
        ],
        extra_edges: vec![],
    })
    .unwrap();
    let model_cfg = ModelConfig {
        width: 96,
        depth: 4,
        heads: 4,
        patch: 4,
        mode: ModelMode::Fill,
        rope_split: [8, 8, 8],
        prompt_dim: 64,
    };
    let train_cfg = TrainConfig {
        steps: 6000,
        micro_batch: 8,
        accum_steps: 2,
        lr: 1e-3,
        wd: 0.0,
        seed: 41_001,
        mode: ModelMode::Fill,
        context_max: 2,
        len_range: (2, 2),
        loss_scope: LossScope::MaskedOnly,
        task_text_p: 0.35,
        tasks: Some(vec!["image->invert".into(), "image->grayscale".into()]),
        time_base_len: 256,
        time_max_shift: 3.0,
        checkpoint_every: 100_000,
    };
    let mut train_manifest = manifest.clone();
    train_manifest.records.truncate(64);
    let (ckpt, _) = train_or_reuse("c4", &train_cfg, &model_cfg, &graph, &train_manifest, &dir);
    let (params, _, _) = load_model::<f32>(&ckpt).unwrap();

    // ambiguous pair, task text withheld, 100 held-out queries per C
    // (50 intended-invert + 50 intended-grayscale)
    let eval_cfg = EvalConfig {
        tasks: vec!["image->invert".into(), "image->grayscale".into()],
        contexts: vec![0, 1, 2],
        n_queries: 50,
        holdout_from: 64,
        seed: 41_002,
        steps: 20,
        include_task_text: false,
        candidates: Some(vec!["invert".into(), "grayscale".into()]),
    };
    let report = evaluate(&params, &manifest, &dir, &eval_cfg, Some(2)).unwrap();
    let combined = |c: usize| -> f64 {
        let accs: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.context_count == c)
            .map(|r| r.task_acc.expect("accuracy row"))
            .collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    };
    let (a0, a1, a2) = (combined(0), combined(1), combined(2));
    assert!(
        (0.35..=0.65).contains(&a0),
        "C=0 accuracy {a0:.3} not chance-like (expected within [0.35, 0.65])"
    );
    assert!(a2 >= 0.80, "C=2 accuracy {a2:.3} < 0.80");
    assert!(a1 >= a0 - 0.05 && a2 >= a1 - 0.05, "not monotone within 0.05: {a0:.3}, {a1:.3}, {a2:.3}");

    println!(
        "criterion 4 PASS: task accuracy C=0 {a0:.3} (chance band), C=1 {a1:.3}, C=2 {a2:.3} >= 0.80, \
         monotone within 0.05 over 100 held-out queries per context count"
    );
}

// ---------------------------------------------------------------------------
// criterion 6: per-token timestep ablation (dev mode)
// ---------------------------------------------------------------------------

/// One-sided sign test: P(Binomial(n, 0.5) >= wins).
fn sign_test_p(wins: u64, n: u64) -> f64 {
    // exact tail sum with log-space binomial coefficients
    let ln_fact = |k: u64| -> f64 { (1..=k).map(|i| (i as f64).ln()).sum() };
    let ln_n_fact = ln_fact(n);
    let mut p = 0.0;
    for k in wins..=n {
        let ln_c = ln_n_fact - ln_fact(k) - ln_fact(n - k);
        p += (ln_c + (n as f64) * 0.5f64.ln()).exp();
    }
    p.min(1.0)
}

#[test]
fn criterion_6_dev_timestep_ablation() {
    use cloze::gridlayout::{build_inference_mask, compose_grid, crop_target, GridSpec};
    use cloze::prompt::{encode_prompt, layout_instruction, task_instruction, PromptBundle};
    use cloze::sampler::{sample_dev, SampleConfig};
    use cloze::synthcorpus::resolve_node;
    use cloze::taskgraph::TaskSpec;

    let dir = std::env::temp_dir().join("cloze_acceptance_c6_corpus");
    let corpus_cfg = CorpusConfig {
        count: 120,
        size: 16,
        seed: 61_000,
        annotations: vec!["edge".into()],
        out_dir: dir.clone(),
    };
    let manifest = build_or_reuse_corpus("c6", &corpus_cfg);
    let graph = build_default_graph(&GraphConfig {
        annotations: vec![
            NodeKind { id: "edge".into(), family: NodeFamily::SpatialCondition, forward: true },
            NodeKind { id: "grayscale".into(), family: NodeFamily::Style, forward: true },
        ],
        extra_edges: vec![],
    })
    .unwrap();
    let model_cfg = ModelConfig {
        width: 96,
        depth: 4,
        heads: 4,
        patch: 4,
        mode: ModelMode::Dev,
        rope_split: [8, 8, 8],
        prompt_dim: 64,
    };
    let train_cfg = TrainConfig {
        steps: 3000,
        micro_batch: 8,
        accum_steps: 2,
        lr: 1e-3,
        wd: 0.0,
        seed: 61_001,
        mode: ModelMode::Dev,
        context_max: 1,
        len_range: (2, 2),
        loss_scope: LossScope::MaskedOnly,
        task_text_p: 1.0,
        tasks: Some(vec!["image->edge".into()]),
        time_base_len: 256,
        time_max_shift: 3.0,
        checkpoint_every: 100_000,
    };
    let mut train_manifest = manifest.clone();
    train_manifest.records.truncate(64);
    let (ckpt, _) = train_or_reuse("c6", &train_cfg, &model_cfg, &graph, &train_manifest, &dir);
    let (params, _, _) = load_model::<f32>(&ckpt).unwrap();

    // paired comparison on >= 50 held-out samples, same checkpoint and seed
    let task = TaskSpec::new(vec!["image".into()], "edge".into());
    let spec = GridSpec::new(0, 2, 16, 16);
    let holdout = 64usize;
    let n_eval = 50usize;
    let mut wins = 0u64;
    let mut ties = 0u64;
    let (mut sum_sep, mut sum_uni) = (0.0, 0.0);
    for q in 0..n_eval {
        let rec = holdout + (q % (manifest.records.len() - holdout));
        let base = resolve_node(&manifest, &dir, rec, "image").unwrap();
        let gt = resolve_node(&manifest, &dir, rec, "edge").unwrap();
        let canvas = compose_grid(&[], &[base], &spec).unwrap();
        let mask = build_inference_mask(&spec);
        let bundle = PromptBundle {
            layout: layout_instruction(&spec),
            task: task_instruction(&task, true),
            content: None,
        };
        let emb = encode_prompt(&bundle, model_cfg.prompt_dim);
        let prompt: Vec<f32> = emb.values.iter().map(|&v| v as f32).collect();
        let mut cfg = SampleConfig::new(ModelMode::Dev, 61_500 + q as u64);
        cfg.steps = 20;
        let sep = {
            let out = sample_dev(&params, &canvas, &mask, &prompt, &cfg).unwrap();
            rmse(&crop_target(&out), &gt).unwrap()
        };
        let uni = {
            let mut c2 = cfg.clone();
            c2.unified_timestep = true;
            let out = sample_dev(&params, &canvas, &mask, &prompt, &c2).unwrap();
            rmse(&crop_target(&out), &gt).unwrap()
        };
        sum_sep += sep;
        sum_uni += uni;
        if sep < uni {
            wins += 1;
        } else if sep == uni {
            ties += 1;
        }
    }
    let mean_sep = sum_sep / n_eval as f64;
    let mean_uni = sum_uni / n_eval as f64;
    let n_eff = n_eval as u64 - ties;
    let p = sign_test_p(wins, n_eff);
    assert!(
        mean_sep < mean_uni,
        "separate-timestep rmse {mean_sep:.4} not strictly below unified {mean_uni:.4}"
    );
    assert!(p < 0.05, "sign test p {p:.2e} >= 0.05 ({wins}/{n_eff} wins)");

    println!(
        "criterion 6 PASS: separate per-token timesteps rmse {mean_sep:.4} < unified {mean_uni:.4}, \
         {wins}/{n_eff} paired wins, one-sided sign test p {p:.2e} < 0.05"
    );
}
