//! Local detail enhancement and semantic consistency validation: crop the
//! proposed regions, re-encode them with a small convolutional stack, score
//! them against the query embedding, and train the scores contrastively.

use crate::scene::Image;
use crate::tensor::{ConvSpec, Graph, Real, Result, TensorError, TensorId};

use super::pipeline::BoundParams;
use super::{ModelConfig, RegionProposal};

/// Pixel-space source rectangle of a crop, half-open on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// A cropped region resized to the local resolution, with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub res: usize,
    /// res*res*3 values in [0,1], row-major RGB.
    pub pixels: Vec<f64>,
    pub src: PixelRect,
}

/// Map a normalized box to a pixel rectangle: floor/ceil of box * side,
/// clamped to the image, then expanded to at least 4x4 pixels (growing
/// toward the high edge first, then the low edge once clamped).
pub fn crop_rect(x0: f64, y0: f64, x1: f64, y1: f64, side: usize) -> PixelRect {
    let clamp = |v: f64| -> usize { (v.max(0.0).min(side as f64)) as usize };
    let expand = |lo: usize, hi: usize| -> (usize, usize) {
        let mut hi = hi.max(lo + 1).min(side);
        let mut lo = lo.min(hi - 1);
        while hi - lo < 4.min(side) {
            if hi < side {
                hi += 1;
            } else {
                lo -= 1;
            }
        }
        (lo, hi)
    };
    let (px0, px1) = expand(clamp((x0 * side as f64).floor()), clamp((x1 * side as f64).ceil()));
    let (py0, py1) = expand(clamp((y0 * side as f64).floor()), clamp((y1 * side as f64).ceil()));
    PixelRect { x0: px0, y0: py0, x1: px1, y1: py1 }
}

/// Crop the proposal's box out of the image and bilinearly resize to
/// `local_res` x `local_res`.
pub fn crop_region(img: &Image, proposal: &RegionProposal, local_res: usize) -> Patch {
    let b = &proposal.bbox;
    let rect = crop_rect(b.x0, b.y0, b.x1, b.y1, img.side);
    let (w, h) = (rect.x1 - rect.x0, rect.y1 - rect.y0);
    let l = local_res;
    let mut pixels = Vec::with_capacity(l * l * 3);
    for j in 0..l {
        // Source coordinate of the destination pixel center, clamped so the
        // 2x2 support stays inside the rectangle.
        let v = (rect.y0 as f64 + (j as f64 + 0.5) * h as f64 / l as f64 - 0.5)
            .max(rect.y0 as f64)
            .min((rect.y1 - 1) as f64);
        let v0 = v.floor() as usize;
        let v1 = (v0 + 1).min(rect.y1 - 1);
        let fv = v - v0 as f64;
        for i in 0..l {
            let u = (rect.x0 as f64 + (i as f64 + 0.5) * w as f64 / l as f64 - 0.5)
                .max(rect.x0 as f64)
                .min((rect.x1 - 1) as f64);
            let u0 = u.floor() as usize;
            let u1 = (u0 + 1).min(rect.x1 - 1);
            let fu = u - u0 as f64;
            let p00 = img.get(u0, v0);
            let p10 = img.get(u1, v0);
            let p01 = img.get(u0, v1);
            let p11 = img.get(u1, v1);
            for c in 0..3 {
                let top = (1.0 - fu) * p00[c] + fu * p10[c];
                let bot = (1.0 - fu) * p01[c] + fu * p11[c];
                pixels.push((1.0 - fv) * top + fv * bot);
            }
        }
    }
    Patch { res: l, pixels, src: rect }
}

/// Unit-norm local feature [D] from a patch, via the 3-layer stride-2
/// convolutional encoder with global average pooling.
pub fn encode_local<R: Real>(
    g: &mut Graph<R>,
    p: &BoundParams,
    cfg: &ModelConfig,
    patch: &Patch,
) -> Result<TensorId> {
    if patch.res != cfg.local_res {
        return Err(TensorError::ShapeMismatch {
            op: "encode_local",
            detail: format!("patch res {} vs config {}", patch.res, cfg.local_res),
        });
    }
    // Center [0,1] pixels to [-1,1]; the stored patch stays in [0,1].
    let centered: Vec<f64> = patch.pixels.iter().map(|v| 2.0 * v - 1.0).collect();
    let mut x = g.constant_f64(&[patch.res * patch.res, 3], &centered)?;
    let mut side = patch.res;
    let mut channels = 3;
    for (i, &c_out) in cfg.conv_channels.iter().enumerate() {
        let spec = ConvSpec { h: side, w: side, c: channels, k: 3, stride: 2, pad: 1 };
        let cols = g.im2col(x, spec)?;
        let y = g.matmul(cols, p.get(&format!("local.conv{i}.w"))?)?;
        let y = g.add_row_broadcast(y, p.get(&format!("local.conv{i}.b"))?)?;
        x = g.relu(y)?;
        side = spec.out_h();
        channels = c_out;
    }
    let pooled = g.mean_rows(x)?;
    // Augment with a constant channel: a fully uniform crop zeroes every
    // ReLU activation, and the projection of the bare pooled vector would
    // have no direction to normalize.
    let one = g.constant(&[1], vec![R::one()])?;
    let pooled = g.concat_vec(&[pooled, one])?;
    let proj = g.matvec(p.get("local.proj.w")?, pooled)?;
    let proj = g.add(proj, p.get("local.proj.b")?)?;
    g.normalize_rows(proj)
}

/// Cosine similarity between a local feature and the query embedding.
pub fn consistency_score<R: Real>(
    g: &mut Graph<R>,
    feature: TensorId,
    query_emb: TensorId,
) -> Result<TensorId> {
    g.cosine_sim(feature, query_emb)
}

/// Symmetric InfoNCE over matched (feature, query) pairs: cross-entropy of
/// the row-wise and column-wise softmax of the pairwise cosine matrix at
/// the diagonal, averaged over both directions and all pairs.
pub fn consistency_loss<R: Real>(
    g: &mut Graph<R>,
    features: &[TensorId],
    queries: &[TensorId],
    temperature: f64,
) -> Result<TensorId> {
    let n = features.len();
    if n != queries.len() {
        return Err(TensorError::ShapeMismatch {
            op: "consistency_loss",
            detail: format!("{n} features vs {} queries", queries.len()),
        });
    }
    if n < 2 {
        return Err(TensorError::InvalidArg {
            op: "consistency_loss",
            detail: format!("batch size {n} must be >= 2"),
        });
    }
    if !(temperature > 0.0) {
        return Err(TensorError::InvalidArg {
            op: "consistency_loss",
            detail: format!("temperature {temperature} must be positive"),
        });
    }
    let mut scores = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            scores.push(g.cosine_sim(features[i], queries[j])?);
        }
    }
    infonce_from_scores(g, &scores, n, temperature)
}

/// Symmetric InfoNCE over an n x n row-major matrix of score nodes with
/// pair i matched at the diagonal.
pub fn infonce_from_scores<R: Real>(
    g: &mut Graph<R>,
    scores: &[TensorId],
    n: usize,
    temperature: f64,
) -> Result<TensorId> {
    if scores.len() != n * n || n < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "infonce",
            detail: format!("{} scores for n = {n}", scores.len()),
        });
    }
    if !(temperature > 0.0) {
        return Err(TensorError::InvalidArg {
            op: "infonce",
            detail: format!("temperature {temperature} must be positive"),
        });
    }
    let inv_t = 1.0 / temperature;
    let mut terms = Vec::with_capacity(2 * n);
    for i in 0..n {
        let row = g.stack_scalars(&scores[i * n..(i + 1) * n])?;
        let row = g.scale(row, inv_t)?;
        terms.push(g.cross_entropy(row, i)?);
    }
    for j in 0..n {
        let col: Vec<TensorId> = (0..n).map(|i| scores[i * n + j]).collect();
        let col = g.stack_scalars(&col)?;
        let col = g.scale(col, inv_t)?;
        terms.push(g.cross_entropy(col, j)?);
    }
    let stacked = g.stack_scalars(&terms)?;
    g.mean_elems(stacked)
}

/// Hinge alternative: max(0, margin - S(f+, e_Q) + S(f-, e_Q)).
pub fn triplet_consistency_loss<R: Real>(
    g: &mut Graph<R>,
    anchor: TensorId,
    positive: TensorId,
    negative: TensorId,
    margin: f64,
) -> Result<TensorId> {
    if !(margin > 0.0) {
        return Err(TensorError::InvalidArg {
            op: "triplet_consistency_loss",
            detail: format!("margin {margin} must be positive"),
        });
    }
    let s_pos = g.cosine_sim(positive, anchor)?;
    let s_neg = g.cosine_sim(negative, anchor)?;
    let diff = g.lincomb(s_neg, s_pos, 1.0, -1.0)?;
    let shifted = g.add_const(diff, margin)?;
    g.relu(shifted)
}
