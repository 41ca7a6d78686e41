//! Command-line front end: dataset generation, two-stage training,
//! evaluation, the ablation grid, latency measurement, and report
//! rendering. Every command writes a manifest that snapshots its full
//! configuration, so runs are self-describing and repeatable.
//!
//! Exit codes: 0 on success, 1 on any documented runtime error (missing
//! inputs, occupied output directory, invalid configuration), 2 on flag
//! parse errors (from clap).

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::eval::{
    evaluate, grid_to_tsv, measure_latency, report_to_tsv, run_ablation_grid, MetricReport,
};
use crate::model::{init_params, ModelConfig, Variant, ALL_VARIANTS};
use crate::scene::{dataset_hash, dataset_read, dataset_write, generate_dataset, Dataset, GenConfig};
use crate::tensor::ParamStore;
use crate::train::{train, Stage, TrainConfig};

#[derive(Parser)]
#[command(
    name = "hcg",
    about = "Hierarchical grounding pipeline on a synthetic scene benchmark",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory (records, PPM images, manifest).
    GenData(GenDataArgs),
    /// Train one stage and write a checkpoint plus a CSV loss trace.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metric JSON + TSV.
    Eval(EvalArgs),
    /// Train and evaluate every variant over >= 3 seeds.
    Ablate(AblateArgs),
    /// Measure median forward latency per query.
    Latency(LatencyArgs),
    /// Render an ablation grid and loss traces into a text table and SVG plots.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of records.
    #[arg(long, default_value_t = 2000)]
    num: usize,
    #[arg(long, default_value_t = 64)]
    image_side: usize,
    /// Fraction of REC records.
    #[arg(long, default_value_t = 0.35)]
    rec_frac: f64,
    /// Fraction of VQA records that are hallucination probes.
    #[arg(long, default_value_t = 0.15)]
    probe_frac: f64,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, trace, and manifest.
    #[arg(long)]
    out: PathBuf,
    /// 1 = global-only warmup, 2 = joint.
    #[arg(long, default_value_t = 1)]
    stage: u8,
    /// Checkpoint to start from (required for stage 2 unless --cold).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Allow stage 2 from random initialization.
    #[arg(long)]
    cold: bool,
    #[arg(long, default_value = "full")]
    variant: String,
    /// Explicit step budget; overrides --epochs.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 6)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training scalar type: f32 or f64.
    #[arg(long, default_value = "f32")]
    precision: String,
    /// JSON TrainConfig snapshot; replaces the tuning flags
    /// (--steps/--epochs/--batch/--lr/--lambda/--seed and the stage).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint (omit with --oracle-labels).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "full")]
    variant: String,
    /// Sanity mode: score the ground-truth labels instead of a model.
    #[arg(long)]
    oracle_labels: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Evaluation dataset directory.
    #[arg(long)]
    eval_data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds, at least 3.
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Comma-separated variant subset (default: all).
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long, default_value_t = 1000)]
    stage1_steps: usize,
    #[arg(long, default_value_t = 3000)]
    joint_steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct LatencyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "full")]
    variant: String,
    /// Timed queries (after 10 warmup queries).
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// grid.json from ablate.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Comma-separated trace.csv files to plot.
    #[arg(long, value_delimiter = ',')]
    traces: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Msg(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, CliError>;

fn err(msg: impl Into<String>) -> CliError {
    CliError::Msg(msg.into())
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let started = Instant::now();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a, started),
        Command::Train(a) => cmd_train(a, started),
        Command::Eval(a) => cmd_eval(a, started),
        Command::Ablate(a) => cmd_ablate(a, started),
        Command::Latency(a) => cmd_latency(a, started),
        Command::Report(a) => cmd_report(a, started),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Worker cap from HCG_THREADS; the pipeline currently always runs one
/// worker, the variable only bounds it.
fn worker_cap() -> Result<usize> {
    match std::env::var("HCG_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => {
            let n: usize =
                v.parse().map_err(|_| err(format!("HCG_THREADS must be a positive integer, got {v:?}")))?;
            if n == 0 {
                return Err(err("HCG_THREADS must be >= 1"));
            }
            Ok(n.min(1))
        }
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seeds: Vec<u64>,
    git_describe: String,
    dataset_hash: Option<String>,
    outputs: Vec<String>,
    wall_clock_secs: f64,
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Refuse to write into an existing non-empty directory unless forced.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(err(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    ds_hash: Option<String>,
    outputs: &[&str],
    started: Instant,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config,
        seeds,
        git_describe: git_describe(),
        dataset_hash: ds_hash,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}

fn parse_variant(name: &str) -> Result<Variant> {
    Variant::from_name(name).ok_or_else(|| {
        let known: Vec<&str> = ALL_VARIANTS.iter().map(|v| v.name()).collect();
        err(format!("unknown variant {name:?}; expected one of {known:?}"))
    })
}

fn load_dataset(dir: &Path) -> Result<(Dataset, String)> {
    if !dir.join("manifest.json").exists() {
        return Err(err(format!("no dataset at {}", dir.display())));
    }
    let ds = dataset_read(dir)?;
    let hash = dataset_hash(dir)?;
    Ok((ds, hash))
}

fn model_config_for(ds: &Dataset) -> ModelConfig {
    ModelConfig { image_side: ds.manifest.config.image_side, ..Default::default() }
}

fn cmd_gen_data(a: GenDataArgs, started: Instant) -> Result<()> {
    worker_cap()?;
    if a.num == 0 {
        return Err(err("--num must be positive"));
    }
    let config = GenConfig {
        image_side: a.image_side,
        rec_frac: a.rec_frac,
        probe_frac: a.probe_frac,
        ..Default::default()
    };
    prepare_out_dir(&a.out, a.force)?;
    let ds = generate_dataset(&config, a.seed, a.num)?;
    dataset_write(&a.out, &ds)?;
    let hash = dataset_hash(&a.out)?;
    // gen-data's dataset manifest doubles as the dataset description; the
    // run manifest goes alongside it under a distinct name.
    let run = RunManifest {
        command: "gen-data".to_string(),
        config: serde_json::to_value(&config)?,
        seeds: vec![a.seed],
        git_describe: git_describe(),
        dataset_hash: Some(hash.clone()),
        outputs: vec!["manifest.json".into(), "records.jsonl".into()],
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    std::fs::write(a.out.join("run_manifest.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    println!("wrote {} records to {} (hash {hash})", ds.records.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSnapshot {
    model: ModelConfig,
    train: TrainConfig,
    variant: String,
    precision: String,
    init: Option<String>,
    data: String,
}

fn cmd_train(a: TrainArgs, started: Instant) -> Result<()> {
    worker_cap()?;
    let variant = parse_variant(&a.variant)?;
    let stage = match a.stage {
        1 => Stage::GlobalOnly,
        2 => Stage::Joint,
        s => return Err(err(format!("--stage must be 1 or 2, got {s}"))),
    };
    let (ds, ds_hash) = load_dataset(&a.data)?;
    let model_cfg = model_config_for(&ds);
    let train_cfg: TrainConfig = match &a.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => TrainConfig {
            learning_rate: a.lr,
            batch_size: a.batch,
            epochs: a.epochs,
            total_steps: a.steps,
            lambda_consistency: a.lambda,
            stage,
            seed: a.seed,
            ..Default::default()
        },
    };
    if train_cfg.stage == Stage::Joint && a.init.is_none() && !a.cold {
        return Err(err("stage 2 requires --init <checkpoint> (or --cold to start from scratch)"));
    }
    let mut store = match &a.init {
        Some(path) => ParamStore::load(path, a.seed)?,
        None => {
            let mut s = ParamStore::new(a.seed);
            init_params(&mut s, &model_cfg);
            s
        }
    };
    prepare_out_dir(&a.out, a.force)?;
    let result = match a.precision.as_str() {
        "f32" => train::<f32>(&model_cfg, &train_cfg, &ds, &mut store, variant)?,
        "f64" => train::<f64>(&model_cfg, &train_cfg, &ds, &mut store, variant)?,
        p => return Err(err(format!("--precision must be f32 or f64, got {p:?}"))),
    };
    store.save(&a.out.join("checkpoint.bin"))?;
    std::fs::write(a.out.join("trace.csv"), crate::train::trace_to_csv(&result.trace))?;
    let snapshot = TrainSnapshot {
        model: model_cfg,
        train: train_cfg,
        variant: variant.name().to_string(),
        precision: a.precision.clone(),
        init: a.init.as_ref().map(|p| p.display().to_string()),
        data: a.data.display().to_string(),
    };
    write_manifest(
        &a.out,
        "train",
        serde_json::to_value(&snapshot)?,
        vec![a.seed],
        Some(ds_hash),
        &["checkpoint.bin", "trace.csv"],
        started,
    )?;
    println!("trained {} steps; checkpoint at {}", result.steps, a.out.display());
    Ok(())
}

/// Oracle predictor: echo the ground truth (metric plumbing sanity check).
fn oracle_reports(ds: &Dataset) -> Result<MetricReport> {
    use crate::geom::BoundingBox;
    use crate::model::FusedOutput;
    use crate::scene::{ANSWER_VOCAB, NOT_PRESENT_LABEL};
    let mut outputs = Vec::new();
    for r in &ds.records {
        let mut logits = vec![0.0; ANSWER_VOCAB.len()];
        let label = if r.probe { NOT_PRESENT_LABEL } else { r.answer_label.unwrap_or(0) };
        logits[label] = 1.0;
        let bbox = r
            .bbox
            .map(BoundingBox::from_array)
            .unwrap_or(BoundingBox { x0: 0.25, y0: 0.25, x1: 0.75, y1: 0.75 });
        outputs.push(FusedOutput::new(logits, bbox, vec![1.0]));
    }
    Ok(crate::eval::tally("oracle", &ds.records, &outputs)?)
}

fn cmd_eval(a: EvalArgs, started: Instant) -> Result<()> {
    worker_cap()?;
    let variant = parse_variant(&a.variant)?;
    let (ds, ds_hash) = load_dataset(&a.data)?;
    let model_cfg = model_config_for(&ds);
    let report = if a.oracle_labels {
        oracle_reports(&ds)?
    } else {
        let path = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| err("--checkpoint is required unless --oracle-labels is set"))?;
        if !path.exists() {
            return Err(err(format!("no checkpoint at {}", path.display())));
        }
        let store = ParamStore::load(path, 0)?;
        evaluate(&store, &model_cfg, &ds, variant)?
    };
    prepare_out_dir(&a.out, a.force)?;
    std::fs::write(a.out.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    std::fs::write(a.out.join("metrics.tsv"), report_to_tsv(std::slice::from_ref(&report)))?;
    write_manifest(
        &a.out,
        "eval",
        serde_json::json!({
            "model": model_cfg,
            "variant": report.variant,
            "oracle_labels": a.oracle_labels,
            "checkpoint": a.checkpoint.as_ref().map(|p| p.display().to_string()),
            "data": a.data.display().to_string(),
        }),
        vec![],
        Some(ds_hash),
        &["metrics.json", "metrics.tsv"],
        started,
    )?;
    println!("{}", report_to_tsv(std::slice::from_ref(&report)));
    Ok(())
}

fn cmd_ablate(a: AblateArgs, started: Instant) -> Result<()> {
    worker_cap()?;
    if a.seeds.len() < 3 {
        return Err(err(format!("--seeds needs at least 3 seeds, got {}", a.seeds.len())));
    }
    let variants: Vec<Variant> = match &a.variants {
        None => ALL_VARIANTS.to_vec(),
        Some(names) => names.iter().map(|n| parse_variant(n)).collect::<Result<_>>()?,
    };
    let (train_ds, train_hash) = load_dataset(&a.data)?;
    let (eval_ds, _) = load_dataset(&a.eval_data)?;
    if train_ds.manifest.config.image_side != eval_ds.manifest.config.image_side {
        return Err(err("train and eval datasets have different image sides"));
    }
    let model_cfg = model_config_for(&train_ds);
    let stage1 = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        total_steps: Some(a.stage1_steps),
        lambda_consistency: a.lambda,
        stage: Stage::GlobalOnly,
        ..Default::default()
    };
    let joint = TrainConfig {
        total_steps: Some(a.joint_steps),
        stage: Stage::Joint,
        ..stage1.clone()
    };
    prepare_out_dir(&a.out, a.force)?;
    let grid = run_ablation_grid(
        &model_cfg,
        &stage1,
        &joint,
        &train_ds,
        &eval_ds,
        &variants,
        &a.seeds,
        |seed, variant, report| {
            println!(
                "seed {seed} {:<18} acc {}  iou {}  halluc {}",
                variant.name(),
                report.accuracy.map_or("-".into(), |v| format!("{v:.3}")),
                report.mean_iou.map_or("-".into(), |v| format!("{v:.3}")),
                report.hallucination_rate.map_or("-".into(), |v| format!("{v:.3}")),
            );
        },
    )?;
    std::fs::write(a.out.join("grid.json"), serde_json::to_string_pretty(&grid)? + "\n")?;
    std::fs::write(a.out.join("grid.tsv"), grid_to_tsv(&grid))?;
    write_manifest(
        &a.out,
        "ablate",
        serde_json::json!({
            "model": model_cfg,
            "stage1": stage1,
            "joint": joint,
            "variants": variants.iter().map(|v| v.name()).collect::<Vec<_>>(),
            "data": a.data.display().to_string(),
            "eval_data": a.eval_data.display().to_string(),
        }),
        a.seeds.clone(),
        Some(train_hash),
        &["grid.json", "grid.tsv"],
        started,
    )?;
    print!("{}", grid_to_tsv(&grid));
    Ok(())
}

fn cmd_latency(a: LatencyArgs, started: Instant) -> Result<()> {
    worker_cap()?;
    let variant = parse_variant(&a.variant)?;
    let (ds, ds_hash) = load_dataset(&a.data)?;
    let model_cfg = model_config_for(&ds);
    if !a.checkpoint.exists() {
        return Err(err(format!("no checkpoint at {}", a.checkpoint.display())));
    }
    let store = ParamStore::load(&a.checkpoint, 0)?;
    let ms = measure_latency(&store, &model_cfg, &ds, variant, a.n)?;
    prepare_out_dir(&a.out, a.force)?;
    let payload = serde_json::json!({
        "variant": variant.name(),
        "n": a.n,
        "median_ms_per_query": ms,
    });
    std::fs::write(a.out.join("latency.json"), serde_json::to_string_pretty(&payload)? + "\n")?;
    write_manifest(
        &a.out,
        "latency",
        serde_json::json!({ "model": model_cfg, "variant": variant.name(), "n": a.n }),
        vec![],
        Some(ds_hash),
        &["latency.json"],
        started,
    )?;
    println!("{} median {ms:.2} ms/query over {} queries", variant.name(), a.n);
    Ok(())
}

fn cmd_report(a: ReportArgs, started: Instant) -> Result<()> {
    worker_cap()?;
    if a.grid.is_none() && a.traces.is_empty() {
        return Err(err("report needs --grid and/or --traces"));
    }
    prepare_out_dir(&a.out, a.force)?;
    let mut outputs: Vec<String> = Vec::new();
    let mut table = String::new();
    if let Some(grid_path) = &a.grid {
        let grid: crate::eval::AblationGrid =
            serde_json::from_str(&std::fs::read_to_string(grid_path)?)?;
        table = render_grid_table(&grid);
        std::fs::write(a.out.join("report.txt"), &table)?;
        outputs.push("report.txt".into());
    }
    for trace_path in &a.traces {
        let csv = std::fs::read_to_string(trace_path)?;
        let svg = render_loss_svg(&csv)
            .ok_or_else(|| err(format!("unparseable trace {}", trace_path.display())))?;
        let stem = trace_path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "trace".into());
        let name = format!("loss_{stem}.svg");
        std::fs::write(a.out.join(&name), svg)?;
        outputs.push(name);
    }
    let out_refs: Vec<&str> = outputs.iter().map(|s| s.as_str()).collect();
    write_manifest(
        &a.out,
        "report",
        serde_json::json!({
            "grid": a.grid.as_ref().map(|p| p.display().to_string()),
            "traces": a.traces.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        }),
        vec![],
        None,
        &out_refs,
        started,
    )?;
    if !table.is_empty() {
        print!("{table}");
    }
    Ok(())
}

/// Fixed-width table in the ablation-row layout.
fn render_grid_table(grid: &crate::eval::AblationGrid) -> String {
    let fmt = |c: &Option<crate::eval::AblationCell>| {
        c.as_ref().map_or_else(|| "-".to_string(), |c| format!("{:.3}±{:.3}", c.mean, c.sd))
    };
    let mut out = format!(
        "{:<22} {:>14} {:>14} {:>14} {:>14}\n",
        "variant", "accuracy", "mean_iou", "iou@0.5", "hallucination"
    );
    for row in &grid.rows {
        out.push_str(&format!(
            "{:<22} {:>14} {:>14} {:>14} {:>14}\n",
            row.variant,
            fmt(&row.accuracy),
            fmt(&row.mean_iou),
            fmt(&row.iou_at_50),
            fmt(&row.hallucination_rate),
        ));
    }
    out
}

/// Static SVG line plot of the task / consistency / total loss columns.
/// Returns None when the CSV has no data rows.
pub fn render_loss_svg(trace_csv: &str) -> Option<String> {
    let mut rows: Vec<[f64; 3]> = Vec::new();
    for line in trace_csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return None;
        }
        let task: f64 = fields[2].parse().ok()?;
        let cons: f64 = fields[3].parse().ok()?;
        let total: f64 = fields[4].parse().ok()?;
        rows.push([task, cons, total]);
    }
    if rows.is_empty() {
        return None;
    }
    let (w, h, ml, mb) = (640.0, 360.0, 50.0, 30.0);
    let y_max = rows.iter().flatten().cloned().fold(f64::MIN, f64::max).max(1e-9);
    let y_min = 0.0f64;
    let x = |i: usize| ml + (w - ml - 10.0) * i as f64 / (rows.len().max(2) - 1) as f64;
    let y = |v: f64| (h - mb) - (h - mb - 10.0) * (v - y_min) / (y_max - y_min);
    let series = |idx: usize, color: &str, label: &str| {
        let pts: Vec<String> =
            rows.iter().enumerate().map(|(i, r)| format!("{:.1},{:.1}", x(i), y(r[idx]))).collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"12\">{label}</text>\n",
            pts.join(" "),
            w - 120.0,
            20.0 + 16.0 * idx as f64
        )
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <line x1=\"{ml}\" y1=\"10\" x2=\"{ml}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <text x=\"4\" y=\"16\" font-size=\"12\">{ymax:.3}</text>\n\
         <text x=\"4\" y=\"{y0}\" font-size=\"12\">0</text>\n\
         <text x=\"{x1}\" y=\"{yb}\" font-size=\"12\" text-anchor=\"end\">step {n}</text>\n",
        y0 = h - mb,
        x1 = w - 10.0,
        yb = h - 8.0,
        ymax = y_max,
        n = rows.len() - 1,
    );
    svg.push_str(&series(0, "#1f77b4", "L_task"));
    svg.push_str(&series(1, "#2ca02c", "L_consistency"));
    svg.push_str(&series(2, "#d62728", "L_total"));
    svg.push_str("</svg>\n");
    Some(svg)
}
