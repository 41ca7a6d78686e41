//! Adaptive fusion of the global embedding with consistency-weighted local
//! features, the answer and box output heads, and the abstention rule.

use crate::geom::BoundingBox;
use crate::scene::NOT_PRESENT_LABEL;
use crate::tensor::{Graph, Real, Result, TensorError, TensorId};

use super::pipeline::BoundParams;
use super::ModelConfig;

/// Final model output for one query, in eager (graph-free) form.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedOutput {
    pub answer_logits: Vec<f64>,
    pub answer_label: usize,
    pub bbox: BoundingBox,
    pub abstained: bool,
    /// Consistency score per proposal, in proposal order.
    pub scores: Vec<f64>,
}

impl FusedOutput {
    pub fn new(answer_logits: Vec<f64>, bbox: BoundingBox, scores: Vec<f64>) -> Self {
        let answer_label = argmax(&answer_logits);
        FusedOutput { answer_logits, answer_label, bbox, abstained: false, scores }
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fused embedding [D]: MLP over the global embedding and the
/// score-softmax mixture of local features (uniform mixture when
/// `uniform_weights`; zero vector when there are no proposals). Scores
/// enter only as fusion weights, never as MLP inputs.
pub fn adaptive_fuse<R: Real>(
    g: &mut Graph<R>,
    p: &BoundParams,
    cfg: &ModelConfig,
    global_emb: TensorId,
    features: &[TensorId],
    scores: &[TensorId],
    uniform_weights: bool,
) -> Result<TensorId> {
    if features.len() != scores.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adaptive_fuse",
            detail: format!("{} features vs {} scores", features.len(), scores.len()),
        });
    }
    let local_summary = if features.is_empty() {
        g.constant(&[cfg.dim], vec![R::zero(); cfg.dim])?
    } else {
        let stacked = g.stack_rows(features)?;
        let weights = if uniform_weights {
            let k = features.len();
            g.constant(&[k], vec![R::from_f64(1.0 / k as f64); k])?
        } else {
            let s = g.stack_scalars(scores)?;
            g.softmax(s, cfg.fusion_temp)?
        };
        g.vecmat(weights, stacked)?
    };
    let joint = g.concat_vec(&[global_emb, local_summary])?;
    let h = g.matvec(p.get("fuse.w1")?, joint)?;
    let h = g.add(h, p.get("fuse.b1")?)?;
    let h = g.relu(h)?;
    let out = g.matvec(p.get("fuse.w2")?, h)?;
    g.add(out, p.get("fuse.b2")?)
}

/// Linear map from the fused embedding to answer logits.
pub fn answer_head<R: Real>(
    g: &mut Graph<R>,
    p: &BoundParams,
    fused: TensorId,
) -> Result<TensorId> {
    let logits = g.matvec(p.get("fuse.ans.w")?, fused)?;
    g.add(logits, p.get("fuse.ans.b")?)
}

/// Box pre-activations [4] from the fused embedding; pair with
/// [`bbox_from_pre`] for the normalized corner box.
pub fn bbox_head<R: Real>(
    g: &mut Graph<R>,
    p: &BoundParams,
    fused: TensorId,
) -> Result<TensorId> {
    let pre = g.matvec(p.get("fuse.box.w")?, fused)?;
    g.add(pre, p.get("fuse.box.b")?)
}

const BOX_SIZE_FLOOR: f64 = 1e-3;

/// Decode box pre-activations: sigmoid to (cx, cy, w, h), floor w and h at
/// 1e-3, convert to corners, clamp to [0,1]. Differentiable; returns the
/// corner vector [x0, y0, x1, y1].
pub fn bbox_from_pre<R: Real>(g: &mut Graph<R>, pre: TensorId) -> Result<TensorId> {
    let s = g.sigmoid(pre)?;
    let cx = g.slice_vec(s, 0, 1)?;
    let cy = g.slice_vec(s, 1, 1)?;
    // max(v, floor) as floor + relu(v - floor), exact for v >= floor.
    let half = |g: &mut Graph<R>, idx: usize| -> Result<TensorId> {
        let v = g.slice_vec(s, idx, 1)?;
        let v = g.add_const(v, -BOX_SIZE_FLOOR)?;
        let v = g.relu(v)?;
        let v = g.add_const(v, BOX_SIZE_FLOOR)?;
        g.scale(v, 0.5)
    };
    let hw = half(g, 2)?;
    let hh = half(g, 3)?;
    let x0 = g.sub(cx, hw)?;
    let x1 = g.add(cx, hw)?;
    let y0 = g.sub(cy, hh)?;
    let y1 = g.add(cy, hh)?;
    let corners = g.concat_vec(&[x0, y0, x1, y1])?;
    g.clamp01(corners)
}

/// If the maximum consistency score falls below `theta` (or there are no
/// proposals), mark the output abstained and answer "not-present".
/// Idempotent.
pub fn apply_abstention(mut out: FusedOutput, theta: f64) -> Result<FusedOutput> {
    if !(-1.0..1.0).contains(&theta) {
        return Err(TensorError::InvalidArg {
            op: "apply_abstention",
            detail: format!("theta {theta} must be in (-1,1)"),
        });
    }
    let max_score = out.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if out.scores.is_empty() || max_score < theta {
        out.abstained = true;
        out.answer_label = NOT_PRESENT_LABEL;
    }
    Ok(out)
}
