//! Operator entry point: corpus building, task enumeration, training,
//! inference, and evaluation behind a single JSON run config.
//!
//! Exit codes: 0 success, 1 usage, 2 config, 3 runtime.

use anyhow::{anyhow, Context};
use cloze::checkpoint;
use cloze::flownet::ModelConfig;
use cloze::gridlayout::{build_cell_mask, compose_full_grid, read_cell, GridSpec};
use cloze::image::RasterImage;
use cloze::metrics::{evaluate, parse_task_id, EvalConfig};
use cloze::prompt::{layout_instruction, task_instruction, PromptBundle};
use cloze::sampler::{infer_task, sample, PromptSpec, SampleConfig};
use cloze::synthcorpus::{build_corpus, CorpusConfig, CorpusManifest};
use cloze::taskgraph::{build_default_graph, enumerate_tasks, GraphConfig, TaskGraph};
use cloze::trainer::{run_training, TrainConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const USAGE: &str = "\
usage: cloze <command> [options]

commands:
  corpus --config cfg.json [--dry-run]        build the procedural corpus
  tasks  --config cfg.json [--json] [--max-len N]
  train  --config cfg.json [--resume ckpt] [--steps N] [--seed N] [--dry-run]
  infer  --checkpoint ckpt --task ID --query a.png[,b.png..] [options]
  eval   --config cfg.json [--checkpoint ckpt] [--out report.json] [--dry-run]

infer options:
  --context \"a.png,b.png;c.png,d.png\"   full demonstration rows
  --target t.png --mask-cell N            reverse: mask condition cell N,
                                          supply the target content
  --include-task-text                     attach the task instruction
  --content TEXT                          attach a content instruction
  --steps N --seed N --out out.png
";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn classify(e: anyhow::Error) -> CliError {
    if let Some(ce) = e.downcast_ref::<cloze::ClozeError>() {
        match ce {
            cloze::ClozeError::Config(_)
            | cloze::ClozeError::GraphConfig(_)
            | cloze::ClozeError::Json(_) => return CliError::Config(e),
            _ => {}
        }
    }
    CliError::Runtime(e)
}

/// Full run configuration; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    out_dir: PathBuf,
    #[serde(default)]
    graph: Option<GraphConfig>,
    #[serde(default)]
    corpus: Option<CorpusConfig>,
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
    #[serde(default)]
    eval: Option<EvalConfig>,
    /// Training uses only the first N corpus records, leaving the rest
    /// held out for evaluation.
    #[serde(default)]
    train_records: Option<usize>,
}

#[derive(Debug, Default)]
struct Flags {
    values: BTreeMap<String, String>,
    switches: Vec<String>,
}

impl Flags {
    fn parse(args: &[String], value_flags: &[&str], switch_flags: &[&str]) -> Result<Flags, CliError> {
        let mut flags = Flags::default();
        let mut i = 0;
        while i < args.len() {
            let a = &args[i];
            let name = a
                .strip_prefix("--")
                .ok_or_else(|| CliError::Usage(format!("unexpected argument `{a}`")))?;
            if switch_flags.contains(&name) {
                flags.switches.push(name.to_string());
                i += 1;
            } else if value_flags.contains(&name) {
                let v = args
                    .get(i + 1)
                    .ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?;
                flags.values.insert(name.to_string(), v.clone());
                i += 2;
            } else {
                return Err(CliError::Usage(format!("unknown flag --{name}")));
            }
        }
        Ok(flags)
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|s| s.as_str())
    }

    fn has(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }

    fn required(&self, name: &str) -> Result<&str, CliError> {
        self.get(name).ok_or_else(|| CliError::Usage(format!("--{name} is required")))
    }

    fn parse_num<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>, CliError> {
        match self.get(name) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("--{name}: bad value `{v}`"))),
        }
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    format!("{h:016x}")
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    seed: u64,
    artifact_versions: ArtifactVersions,
}

#[derive(Serialize)]
struct ArtifactVersions {
    corpus_manifest: u32,
    checkpoint_format: u32,
}

fn write_run_manifest(out_dir: &Path, command: &str, config_bytes: &[u8], seed: u64) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let manifest = RunManifest {
        command: command.to_string(),
        config_hash: fnv1a_hex(config_bytes),
        seed,
        artifact_versions: ArtifactVersions {
            corpus_manifest: 1,
            checkpoint_format: checkpoint::FORMAT_VERSION,
        },
    };
    let path = out_dir.join(format!("run_manifest_{command}.json"));
    std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn load_run_config(flags: &Flags) -> Result<(RunConfig, Vec<u8>), CliError> {
    let path = flags.required("config")?;
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading config `{path}`"))
        .map_err(CliError::Config)?;
    let cfg: RunConfig = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing config `{path}`"))
        .map_err(CliError::Config)?;
    Ok((cfg, bytes))
}

fn build_graph(cfg: &RunConfig) -> anyhow::Result<TaskGraph> {
    let gcfg = cfg.graph.clone().unwrap_or_else(GraphConfig::default_desk);
    Ok(build_default_graph(&gcfg)?)
}

fn cmd_corpus(args: &[String]) -> Result<(), CliError> {
    let flags = Flags::parse(args, &["config"], &["dry-run"])?;
    let (cfg, bytes) = load_run_config(&flags)?;
    let corpus_cfg = cfg
        .corpus
        .clone()
        .ok_or_else(|| CliError::Config(anyhow!("config has no `corpus` section")))?;
    corpus_cfg.validate().map_err(|e| CliError::Config(e.into()))?;
    if flags.has("dry-run") {
        println!(
            "corpus dry run: {} records of {}x{} with {} annotation kinds -> {}",
            corpus_cfg.count,
            corpus_cfg.size,
            corpus_cfg.size,
            corpus_cfg.annotations.len(),
            corpus_cfg.out_dir.display()
        );
        return Ok(());
    }
    let manifest = build_corpus(&corpus_cfg).map_err(|e| classify(e.into()))?;
    write_run_manifest(&cfg.out_dir, "corpus", &bytes, corpus_cfg.seed)
        .map_err(CliError::Runtime)?;
    println!(
        "built corpus: {} records at {}",
        manifest.records.len(),
        corpus_cfg.out_dir.join("manifest.json").display()
    );
    Ok(())
}

fn cmd_tasks(args: &[String]) -> Result<(), CliError> {
    let flags = Flags::parse(args, &["config", "max-len"], &["json"])?;
    let (cfg, _) = load_run_config(&flags)?;
    let graph = build_graph(&cfg).map_err(classify)?;
    let max_len = flags.parse_num::<usize>("max-len")?.unwrap_or(4);
    let tasks = enumerate_tasks(&graph, max_len).map_err(|e| classify(e.into()))?;
    if flags.has("json") {
        let json = serde_json::to_string_pretty(&tasks).map_err(|e| CliError::Runtime(e.into()))?;
        println!("{json}");
    } else {
        for t in &tasks {
            println!("{}", t.task_id);
        }
        println!("total: {} tasks", tasks.len());
    }
    Ok(())
}

fn cmd_train(args: &[String]) -> Result<(), CliError> {
    let flags = Flags::parse(args, &["config", "resume", "steps", "seed"], &["dry-run"])?;
    let (cfg, bytes) = load_run_config(&flags)?;
    let mut train_cfg = cfg
        .train
        .clone()
        .ok_or_else(|| CliError::Config(anyhow!("config has no `train` section")))?;
    if let Some(steps) = flags.parse_num::<usize>("steps")? {
        train_cfg.steps = steps;
    }
    if let Some(seed) = flags.parse_num::<u64>("seed")? {
        train_cfg.seed = seed;
    }
    train_cfg.validate().map_err(|e| CliError::Config(e.into()))?;
    let model_cfg = cfg
        .model
        .clone()
        .unwrap_or_else(|| ModelConfig::desk_default(train_cfg.mode));
    model_cfg.validate().map_err(|e| CliError::Config(e.into()))?;
    if model_cfg.mode != train_cfg.mode {
        return Err(CliError::Config(anyhow!(
            "model mode {:?} does not match train mode {:?}",
            model_cfg.mode,
            train_cfg.mode
        )));
    }
    let corpus_cfg = cfg
        .corpus
        .clone()
        .ok_or_else(|| CliError::Config(anyhow!("config has no `corpus` section")))?;
    let graph = build_graph(&cfg).map_err(classify)?;
    let manifest_path = corpus_cfg.out_dir.join("manifest.json");
    let mut manifest = CorpusManifest::load(&manifest_path)
        .with_context(|| {
            format!(
                "loading corpus manifest `{}` (run `cloze corpus` first)",
                manifest_path.display()
            )
        })
        .map_err(classify)?;
    if let Some(n) = cfg.train_records {
        if n == 0 || n > manifest.records.len() {
            return Err(CliError::Config(anyhow!(
                "train_records {n} outside 1..={}",
                manifest.records.len()
            )));
        }
        manifest.records.truncate(n);
    }
    if flags.has("dry-run") {
        println!(
            "train dry run: {} steps, effective batch {}, {} records, model width {} depth {} ({:?})",
            train_cfg.steps,
            train_cfg.effective_batch(),
            manifest.records.len(),
            model_cfg.width,
            model_cfg.depth,
            model_cfg.mode
        );
        return Ok(());
    }
    let resume = flags.get("resume").map(PathBuf::from);
    let run = run_training::<f32>(
        &train_cfg,
        &model_cfg,
        &graph,
        &manifest,
        &corpus_cfg.out_dir,
        &cfg.out_dir,
        resume.as_deref(),
    )
    .map_err(|e| classify(e.into()))?;
    write_run_manifest(&cfg.out_dir, "train", &bytes, train_cfg.seed).map_err(CliError::Runtime)?;
    let first = run.losses.first().copied().unwrap_or(f64::NAN);
    let last = run.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained to step {}: loss {:.4} -> {:.4}; checkpoint {}",
        train_cfg.steps,
        first,
        last,
        run.checkpoint.display()
    );
    Ok(())
}

fn load_png_list(arg: &str) -> anyhow::Result<Vec<RasterImage>> {
    arg.split(',')
        .filter(|s| !s.is_empty())
        .map(|p| RasterImage::load_png(Path::new(p)).map_err(|e| e.into()))
        .collect()
}

fn cmd_infer(args: &[String]) -> Result<(), CliError> {
    let flags = Flags::parse(
        args,
        &[
            "checkpoint",
            "task",
            "query",
            "context",
            "target",
            "mask-cell",
            "content",
            "steps",
            "seed",
            "out",
        ],
        &["include-task-text"],
    )?;
    let ckpt_path = flags.required("checkpoint")?;
    let task = parse_task_id(flags.required("task")?).map_err(|e| CliError::Usage(e.to_string()))?;
    let (params, _, _) =
        checkpoint::load_model::<f32>(Path::new(ckpt_path)).map_err(|e| classify(e.into()))?;
    let query = load_png_list(flags.required("query")?).map_err(classify)?;
    let context: Vec<Vec<RasterImage>> = match flags.get("context") {
        None => Vec::new(),
        Some(arg) => arg
            .split(';')
            .filter(|s| !s.is_empty())
            .map(load_png_list)
            .collect::<anyhow::Result<Vec<_>>>()
            .map_err(classify)?,
    };
    let mut sample_cfg = SampleConfig::new(params.config.mode, 0);
    if let Some(steps) = flags.parse_num::<usize>("steps")? {
        sample_cfg.steps = steps;
    }
    if let Some(seed) = flags.parse_num::<u64>("seed")? {
        sample_cfg.seed = seed;
    }
    let out_path = PathBuf::from(flags.get("out").unwrap_or("infer_out.png"));

    let (image, meta) = match flags.get("mask-cell") {
        None => {
            let prompt_spec = PromptSpec {
                include_task: flags.has("include-task-text"),
                content_caption: flags.get("content").map(|s| s.to_string()),
            };
            infer_task(&params, &task, &context, &query, &prompt_spec, &sample_cfg, None)
                .map_err(|e| classify(e.into()))?
        }
        Some(cell) => {
            // reverse generation: mask one condition cell, supply the target
            let col: usize = cell
                .parse()
                .map_err(|_| CliError::Usage(format!("--mask-cell: bad index `{cell}`")))?;
            if col >= task.len() - 1 {
                return Err(CliError::Usage(format!(
                    "--mask-cell {col} outside the {} condition columns",
                    task.len() - 1
                )));
            }
            let target_png = flags.required("target")?;
            let target =
                RasterImage::load_png(Path::new(target_png)).map_err(|e| classify(e.into()))?;
            if query.len() != task.len() - 1 {
                return Err(CliError::Usage(format!(
                    "reverse mode expects all {} condition images via --query",
                    task.len() - 1
                )));
            }
            let c = context.len();
            let spec = GridSpec::new(c, task.len(), target.width, target.height);
            let mut rows = context.clone();
            let mut query_row = query.clone();
            query_row.push(target);
            rows.push(query_row);
            let canvas = compose_full_grid(&rows, &spec).map_err(|e| classify(e.into()))?;
            let bundle = PromptBundle {
                layout: layout_instruction(&spec),
                task: task_instruction(&task, flags.has("include-task-text")),
                content: flags.get("content").map(|s| s.to_string()),
            };
            let mask = build_cell_mask(&spec, c, col);
            let emb = cloze::prompt::encode_prompt(&bundle, params.config.prompt_dim);
            let prompt: Vec<f32> = emb.values.iter().map(|&v| v as f32).collect();
            let out =
                sample(&params, &canvas, &mask, &prompt, &sample_cfg).map_err(|e| classify(e.into()))?;
            let image = read_cell(&out, c, col);
            let meta = cloze::sampler::InferMetadata {
                seed: sample_cfg.seed,
                steps: sample_cfg.steps,
                mode: params.config.mode,
                context_count: c,
                images_per_row: task.len(),
                task_id: task.task_id.clone(),
                beyond_trained_context: false,
            };
            (image, meta)
        }
    };

    image.save_png(&out_path).map_err(|e| classify(e.into()))?;
    let meta_path = out_path.with_extension("json");
    std::fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).map_err(|e| CliError::Runtime(e.into()))?,
    )
    .map_err(|e| CliError::Runtime(e.into()))?;
    println!("wrote {} and {}", out_path.display(), meta_path.display());
    Ok(())
}

fn cmd_eval(args: &[String]) -> Result<(), CliError> {
    let flags = Flags::parse(args, &["config", "checkpoint", "out"], &["dry-run"])?;
    let (cfg, bytes) = load_run_config(&flags)?;
    let eval_cfg = cfg
        .eval
        .clone()
        .ok_or_else(|| CliError::Config(anyhow!("config has no `eval` section")))?;
    let corpus_cfg = cfg
        .corpus
        .clone()
        .ok_or_else(|| CliError::Config(anyhow!("config has no `corpus` section")))?;
    let ckpt_path = match flags.get("checkpoint") {
        Some(p) => PathBuf::from(p),
        None => cfg.out_dir.join("model.ckpt"),
    };
    if flags.has("dry-run") {
        println!(
            "eval dry run: {} tasks x {} contexts x {} queries from {}",
            eval_cfg.tasks.len(),
            eval_cfg.contexts.len(),
            eval_cfg.n_queries,
            ckpt_path.display()
        );
        return Ok(());
    }
    let (params, _, step) =
        checkpoint::load_model::<f32>(&ckpt_path).map_err(|e| classify(e.into()))?;
    let manifest = CorpusManifest::load(&corpus_cfg.out_dir.join("manifest.json"))
        .map_err(|e| classify(e.into()))?;
    let trained_cmax = cfg.train.as_ref().map(|t| t.context_max);
    let report = evaluate(&params, &manifest, &corpus_cfg.out_dir, &eval_cfg, trained_cmax)
        .map_err(|e| classify(e.into()))?;
    let out_path = match flags.get("out") {
        Some(p) => PathBuf::from(p),
        None => cfg.out_dir.join("eval_report.json"),
    };
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(e.into()))?;
    }
    report.save(&out_path).map_err(|e| classify(e.into()))?;
    write_run_manifest(&cfg.out_dir, "eval", &bytes, eval_cfg.seed).map_err(CliError::Runtime)?;
    println!(
        "evaluated checkpoint at step {}: {} rows -> {}",
        step,
        report.rows.len(),
        out_path.display()
    );
    Ok(())
}

fn init_threads() {
    if let Ok(v) = std::env::var("CLOZE_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn run() -> Result<(), CliError> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = args.first() else {
        return Err(CliError::Usage("missing command".into()));
    };
    init_threads();
    let rest = &args[1..];
    match command.as_str() {
        "corpus" => cmd_corpus(rest),
        "tasks" => cmd_tasks(rest),
        "train" => cmd_train(rest),
        "infer" => cmd_infer(rest),
        "eval" => cmd_eval(rest),
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            Ok(())
        }
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

fn main() {
    match run() {
        Ok(()) => {}
        Err(e) => {
            match &e {
                CliError::Usage(msg) => {
                    eprintln!("error: {msg}");
                    eprint!("{USAGE}");
                }
                CliError::Config(err) => eprintln!("config error: {err:#}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            std::process::exit(e.code());
        }
    }
}
