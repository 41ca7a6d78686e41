//! Metrics (accuracy, IoU, hallucination rate), the ablation grid, and
//! latency measurement.

use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::geom::{iou, BoundingBox};
use crate::model::{
    apply_abstention, forward_sample, BoundParams, FusedOutput, ModelConfig, Variant,
};
use crate::scene::{Dataset, QueryRecord, Task, NOT_PRESENT_LABEL};
use crate::tensor::{Graph, ParamStore, TensorError};
use crate::train::{self, Stage, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid eval input: {0}")]
    InvalidArg(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Per-variant metric row. Rates are `None` when their split is empty.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub variant: String,
    pub num_vqa: usize,
    pub num_rec: usize,
    pub num_probe: usize,
    /// Accuracy over all VQA records; a probe's ground truth is
    /// "not-present".
    pub accuracy: Option<f64>,
    pub mean_iou: Option<f64>,
    pub iou_at_50: Option<f64>,
    /// Fraction of probe records answered with anything but "not-present".
    pub hallucination_rate: Option<f64>,
    pub latency_ms: Option<f64>,
}

/// Forward one record at f64 and apply the variant's abstention rule.
pub fn predict(
    store: &ParamStore,
    cfg: &ModelConfig,
    variant: Variant,
    dataset: &Dataset,
    record: &QueryRecord,
) -> Result<FusedOutput> {
    let mut g = Graph::<f64>::new();
    let p = BoundParams::bind(&mut g, store)?;
    let fwd = forward_sample(&mut g, &p, cfg, variant, dataset.image_for(record), &record.tokens)?;
    let out = fwd.fused_output(&g);
    if variant.abstention_enabled() {
        Ok(apply_abstention(out, cfg.abstain_threshold)?)
    } else {
        Ok(out)
    }
}

pub fn evaluate(
    store: &ParamStore,
    cfg: &ModelConfig,
    dataset: &Dataset,
    variant: Variant,
) -> Result<MetricReport> {
    if dataset.records.is_empty() {
        return Err(EvalError::InvalidArg("empty evaluation split".into()));
    }
    let mut outputs = Vec::with_capacity(dataset.records.len());
    for record in &dataset.records {
        outputs.push(predict(store, cfg, variant, dataset, record)?);
    }
    tally(variant.name(), &dataset.records, &outputs)
}

/// Score a list of per-record outputs against the ground truth.
pub fn tally(
    variant: &str,
    records: &[QueryRecord],
    outputs: &[FusedOutput],
) -> Result<MetricReport> {
    if records.len() != outputs.len() {
        return Err(EvalError::InvalidArg(format!(
            "{} records vs {} outputs",
            records.len(),
            outputs.len()
        )));
    }
    let mut correct = 0usize;
    let mut num_vqa = 0usize;
    let mut iou_sum = 0.0;
    let mut iou_hits = 0usize;
    let mut num_rec = 0usize;
    let mut hallucinated = 0usize;
    let mut num_probe = 0usize;
    for (record, out) in records.iter().zip(outputs) {
        if record.probe {
            num_probe += 1;
            if out.answer_label != NOT_PRESENT_LABEL {
                hallucinated += 1;
            }
        }
        match record.task {
            Task::Vqa => {
                // Probes are VQA records whose ground truth is
                // "not-present"; they count toward accuracy (a constant
                // not-present predictor scores the probe base rate) and
                // additionally feed the hallucination rate above.
                num_vqa += 1;
                let gt = if record.probe {
                    Some(NOT_PRESENT_LABEL)
                } else {
                    record.answer_label
                };
                if Some(out.answer_label) == gt {
                    correct += 1;
                }
            }
            Task::Rec => {
                num_rec += 1;
                let gt = BoundingBox::from_array(record.bbox.ok_or_else(|| {
                    EvalError::InvalidArg(format!("REC record {} without a box", record.id))
                })?);
                let v = iou(&out.bbox, &gt)
                    .map_err(|e| EvalError::InvalidArg(format!("record {}: {e}", record.id)))?;
                iou_sum += v;
                if v >= 0.5 {
                    iou_hits += 1;
                }
            }
        }
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(MetricReport {
        variant: variant.to_string(),
        num_vqa,
        num_rec,
        num_probe,
        accuracy: rate(correct, num_vqa),
        mean_iou: (num_rec > 0).then(|| iou_sum / num_rec as f64),
        iou_at_50: rate(iou_hits, num_rec),
        hallucination_rate: rate(hallucinated, num_probe),
        latency_ms: None,
    })
}

/// Median wall-clock per query in milliseconds, single-threaded; `n` timed
/// queries after 10 warmup queries.
pub fn measure_latency(
    store: &ParamStore,
    cfg: &ModelConfig,
    dataset: &Dataset,
    variant: Variant,
    n: usize,
) -> Result<f64> {
    if n < 100 {
        return Err(EvalError::InvalidArg(format!("latency sample count {n} must be >= 100")));
    }
    if dataset.records.is_empty() {
        return Err(EvalError::InvalidArg("empty dataset".into()));
    }
    let record = |i: usize| &dataset.records[i % dataset.records.len()];
    for i in 0..10 {
        predict(store, cfg, variant, dataset, record(i))?;
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t0 = Instant::now();
        predict(store, cfg, variant, dataset, record(i))?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = n / 2;
    Ok(if n % 2 == 0 { (samples[mid - 1] + samples[mid]) / 2.0 } else { samples[mid] })
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, sd)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub accuracy: Option<AblationCell>,
    pub mean_iou: Option<AblationCell>,
    pub iou_at_50: Option<AblationCell>,
    pub hallucination_rate: Option<AblationCell>,
    pub per_seed: Vec<MetricReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn cell(values: Vec<f64>) -> Option<AblationCell> {
    if values.is_empty() {
        return None;
    }
    let (mean, sd) = mean_sd(&values);
    Some(AblationCell { mean, sd })
}

/// Train and evaluate every variant for every seed. Per seed, the
/// global-only warmup is trained once and shared by all variants; the
/// joint stage then trains each variant from that common checkpoint.
pub fn run_ablation_grid(
    model_cfg: &ModelConfig,
    stage1_cfg: &TrainConfig,
    joint_cfg: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(u64, Variant, &MetricReport),
) -> Result<AblationGrid> {
    if seeds.len() < 3 {
        return Err(EvalError::InvalidArg(format!(
            "ablation grid needs >= 3 seeds, got {}",
            seeds.len()
        )));
    }
    let mut per_variant: Vec<Vec<MetricReport>> = vec![Vec::new(); variants.len()];
    for &seed in seeds {
        let mut warm = ParamStore::new(seed);
        crate::model::init_params(&mut warm, model_cfg);
        let s1 = TrainConfig { stage: Stage::GlobalOnly, seed, ..stage1_cfg.clone() };
        train::train::<f32>(model_cfg, &s1, train_ds, &mut warm, Variant::Full)?;
        for (vi, &variant) in variants.iter().enumerate() {
            let mut store = warm.clone();
            let s2 = TrainConfig { stage: Stage::Joint, seed, ..joint_cfg.clone() };
            train::train::<f32>(model_cfg, &s2, train_ds, &mut store, variant)?;
            let report = evaluate(&store, model_cfg, eval_ds, variant)?;
            progress(seed, variant, &report);
            per_variant[vi].push(report);
        }
    }
    let rows = variants
        .iter()
        .zip(per_variant)
        .map(|(v, per_seed)| {
            let pick = |f: fn(&MetricReport) -> Option<f64>| {
                cell(per_seed.iter().filter_map(f).collect())
            };
            AblationRow {
                variant: v.name().to_string(),
                accuracy: pick(|r| r.accuracy),
                mean_iou: pick(|r| r.mean_iou),
                iou_at_50: pick(|r| r.iou_at_50),
                hallucination_rate: pick(|r| r.hallucination_rate),
                per_seed,
            }
        })
        .collect();
    Ok(AblationGrid { seeds: seeds.to_vec(), rows })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn fmt_cell(c: &Option<AblationCell>) -> String {
    c.as_ref().map_or_else(|| "-".to_string(), |c| format!("{:.4}±{:.4}", c.mean, c.sd))
}

/// Tab-separated single-variant report.
pub fn report_to_tsv(reports: &[MetricReport]) -> String {
    let mut out = String::from(
        "variant\tnum_vqa\tnum_rec\tnum_probe\taccuracy\tmean_iou\tiou@0.5\thallucination\tlatency_ms\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.variant,
            r.num_vqa,
            r.num_rec,
            r.num_probe,
            fmt_opt(r.accuracy),
            fmt_opt(r.mean_iou),
            fmt_opt(r.iou_at_50),
            fmt_opt(r.hallucination_rate),
            fmt_opt(r.latency_ms),
        ));
    }
    out
}

/// Tab-separated ablation table with mean ± sd cells.
pub fn grid_to_tsv(grid: &AblationGrid) -> String {
    let mut out = String::from("variant\taccuracy\tmean_iou\tiou@0.5\thallucination\n");
    for row in &grid.rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            row.variant,
            fmt_cell(&row.accuracy),
            fmt_cell(&row.mean_iou),
            fmt_cell(&row.iou_at_50),
            fmt_cell(&row.hallucination_rate),
        ));
    }
    out
}
