//! Global perception: a small pre-LN patch transformer over the full image,
//! a token transformer over the query, query-conditioned attention over the
//! patch grid, and region-proposal extraction from the attention map.

use crate::geom::BoundingBox;
use crate::scene::{token_id, Image};
use crate::tensor::{Graph, Real, Result, TensorError, TensorId};

use super::pipeline::BoundParams;
use super::ModelConfig;

/// Query-to-patch attention weights on the patch grid, row-major;
/// nonnegative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub grid: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn new(grid: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid * grid || grid == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "attention_map",
                detail: format!("{} weights for a {grid}x{grid} grid", weights.len()),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TensorError::InvalidArg {
                op: "attention_map",
                detail: "weights must be finite and nonnegative".into(),
            });
        }
        Ok(AttentionMap { grid, weights })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.grid + col]
    }

    pub fn max(&self) -> f64 {
        self.weights.iter().cloned().fold(0.0, f64::max)
    }
}

/// One region proposal: a box in normalized image coordinates plus a
/// relevance score in (0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RegionProposal {
    pub bbox: BoundingBox,
    /// Peak weight divided by the map maximum.
    pub score: f64,
    /// (row, col) of the peak cell on the patch grid.
    pub peak: (usize, usize),
}

/// Extract up to `k` proposals from an attention map.
///
/// Peaks are grid cells whose weight is >= all 4-neighbors and strictly
/// above `floor * max(map)`. Peaks are visited in order of decreasing
/// weight, ties broken row-major. Each claims the 4-connected region of
/// still-unclaimed cells with weight >= half its own; the proposal box is
/// that region's extent on the patch grid mapped to [0,1]^2 coordinates.
pub fn extract_proposals(
    map: &AttentionMap,
    k: usize,
    floor: f64,
) -> Result<Vec<RegionProposal>> {
    if k == 0 {
        return Err(TensorError::InvalidArg {
            op: "extract_proposals",
            detail: "k must be positive".into(),
        });
    }
    if !(0.0..1.0).contains(&floor) {
        return Err(TensorError::InvalidArg {
            op: "extract_proposals",
            detail: format!("floor {floor} must be in [0,1)"),
        });
    }
    let g = map.grid;
    let max = map.max();
    if max <= 0.0 {
        return Ok(Vec::new());
    }
    // Candidate peaks in row-major order; the stable sort below keeps that
    // order among equal weights.
    let mut peaks: Vec<(usize, usize, f64)> = Vec::new();
    for r in 0..g {
        for c in 0..g {
            let w = map.at(r, c);
            if w <= floor * max {
                continue;
            }
            let mut is_peak = true;
            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr >= 0 && nr < g as i64 && nc >= 0 && nc < g as i64 {
                    is_peak &= w >= map.at(nr as usize, nc as usize);
                }
            }
            if is_peak {
                peaks.push((r, c, w));
            }
        }
    }
    peaks.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());

    let mut claimed = vec![false; g * g];
    let mut proposals = Vec::new();
    for &(pr, pc, pw) in &peaks {
        if proposals.len() == k {
            break;
        }
        if claimed[pr * g + pc] {
            continue;
        }
        // Flood fill the peak's support at half its height.
        let (mut rmin, mut rmax, mut cmin, mut cmax) = (pr, pr, pc, pc);
        let mut queue = vec![(pr, pc)];
        claimed[pr * g + pc] = true;
        while let Some((r, c)) = queue.pop() {
            rmin = rmin.min(r);
            rmax = rmax.max(r);
            cmin = cmin.min(c);
            cmax = cmax.max(c);
            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nr >= g as i64 || nc < 0 || nc >= g as i64 {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if !claimed[nr * g + nc] && map.at(nr, nc) >= 0.5 * pw {
                    claimed[nr * g + nc] = true;
                    queue.push((nr, nc));
                }
            }
        }
        let gf = g as f64;
        proposals.push(RegionProposal {
            bbox: BoundingBox {
                x0: cmin as f64 / gf,
                y0: rmin as f64 / gf,
                x1: (cmax + 1) as f64 / gf,
                y1: (rmax + 1) as f64 / gf,
            },
            score: pw / max,
            peak: (pr, pc),
        });
    }
    Ok(proposals)
}

/// Flatten the image into patch rows: row `pr * grid + pc` holds that
/// patch's pixels in (y, x, channel) order, centered from [0,1] to [-1,1]
/// so the embedding sees a zero-mean signal.
pub fn patchify(image: &Image, cfg: &ModelConfig) -> Vec<f64> {
    let p = cfg.patch_size;
    let grid = cfg.grid();
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for pr in 0..grid {
        for pc in 0..grid {
            for py in 0..p {
                for px in 0..p {
                    let rgb = image.get(pc * p + px, pr * p + py);
                    out.extend(rgb.iter().map(|v| 2.0 * v - 1.0));
                }
            }
        }
    }
    out
}

/// One pre-LN transformer block with residual connections.
pub fn transformer_block<R: Real>(
    g: &mut Graph<R>,
    p: &BoundParams,
    prefix: &str,
    x: TensorId,
    heads: usize,
) -> Result<TensorId> {
    let d = g.shape(x)[1];
    let hd = d / heads;

    let h = g.layer_norm(x, p.get(&format!("{prefix}.ln1.g"))?, p.get(&format!("{prefix}.ln1.b"))?)?;
    let proj = |g: &mut Graph<R>, w: &str, b: &str| -> Result<TensorId> {
        let wm = g.matmul(h, p.get(&format!("{prefix}.attn.{w}"))?)?;
        g.add_row_broadcast(wm, p.get(&format!("{prefix}.attn.{b}"))?)
    };
    let q = proj(g, "wq", "bq")?;
    let k = proj(g, "wk", "bk")?;
    let v = proj(g, "wv", "bv")?;

    let mut ctx_heads = Vec::with_capacity(heads);
    for hi in 0..heads {
        let qh = g.slice_cols(q, hi * hd, hd)?;
        let kh = g.slice_cols(k, hi * hd, hd)?;
        let vh = g.slice_cols(v, hi * hd, hd)?;
        let scores = g.matmul_nt(qh, kh)?;
        let attn = g.softmax(scores, (hd as f64).sqrt())?;
        ctx_heads.push(g.matmul(attn, vh)?);
    }
    let ctx = g.concat_cols(&ctx_heads)?;
    let wo = g.matmul(ctx, p.get(&format!("{prefix}.attn.wo"))?)?;
    let attn_out = g.add_row_broadcast(wo, p.get(&format!("{prefix}.attn.bo"))?)?;
    let x = g.add(x, attn_out)?;

    let h2 = g.layer_norm(x, p.get(&format!("{prefix}.ln2.g"))?, p.get(&format!("{prefix}.ln2.b"))?)?;
    let m1 = g.matmul(h2, p.get(&format!("{prefix}.mlp.w1"))?)?;
    let m1 = g.add_row_broadcast(m1, p.get(&format!("{prefix}.mlp.b1"))?)?;
    let m1 = g.relu(m1)?;
    let m2 = g.matmul(m1, p.get(&format!("{prefix}.mlp.w2"))?)?;
    let m2 = g.add_row_broadcast(m2, p.get(&format!("{prefix}.mlp.b2"))?)?;
    g.add(x, m2)
}

/// Patch-feature matrix [num_patches, D] for the image.
pub fn encode_image_global<R: Real>(
    g: &mut Graph<R>,
    p: &BoundParams,
    cfg: &ModelConfig,
    image: &Image,
) -> Result<TensorId> {
    if image.side != cfg.image_side {
        return Err(TensorError::ShapeMismatch {
            op: "encode_image",
            detail: format!("image side {} vs config {}", image.side, cfg.image_side),
        });
    }
    let patches = patchify(image, cfg);
    let patches = g.constant_f64(&[cfg.num_patches(), cfg.patch_dim()], &patches)?;
    let x = g.matmul(patches, p.get("vis.patch_embed.w")?)?;
    let x = g.add_row_broadcast(x, p.get("vis.patch_embed.b")?)?;
    let mut x = g.add(x, p.get("vis.pos_emb")?)?;
    for b in 0..cfg.blocks {
        x = transformer_block(g, p, &format!("vis.block{b}"), x, cfg.heads)?;
    }
    g.layer_norm(x, p.get("vis.ln_out.g")?, p.get("vis.ln_out.b")?)
}

/// Unit-norm query embedding [D].
pub fn encode_text<R: Real>(
    g: &mut Graph<R>,
    p: &BoundParams,
    cfg: &ModelConfig,
    tokens: &[String],
) -> Result<TensorId> {
    if tokens.is_empty() || tokens.len() > cfg.max_query_len {
        return Err(TensorError::InvalidArg {
            op: "encode_text",
            detail: format!("query length {} not in 1..={}", tokens.len(), cfg.max_query_len),
        });
    }
    let mut ids = Vec::with_capacity(tokens.len());
    for t in tokens {
        ids.push(token_id(t).ok_or_else(|| TensorError::InvalidArg {
            op: "encode_text",
            detail: format!("unknown token {t:?}"),
        })?);
    }
    let emb = g.gather_rows(p.get("text.tok_emb")?, &ids)?;
    let pos_ids: Vec<usize> = (0..tokens.len()).collect();
    let pos = g.gather_rows(p.get("text.pos_emb")?, &pos_ids)?;
    let mut x = g.add(emb, pos)?;
    for b in 0..cfg.text_blocks {
        x = transformer_block(g, p, &format!("text.block{b}"), x, cfg.heads)?;
    }
    let pooled = g.mean_rows(x)?;
    g.normalize_rows(pooled)
}

/// Outputs of the query-conditioned global stage.
pub struct GlobalOutput {
    /// Attention weights over patches, [num_patches].
    pub map: TensorId,
    /// Pre-softmax patch-query affinities, [num_patches]; the training
    /// loop supervises these with the referent's patch location.
    pub affinity: TensorId,
    /// Unit-norm attention-pooled image embedding, [D].
    pub embedding: TensorId,
    /// Global answer logits, [num answers].
    pub answer_logits: TensorId,
    /// Global box pre-activations, [4].
    pub box_pre: TensorId,
}

/// Attend from the query embedding to the patch features and read out the
/// global heads.
pub fn cross_attend<R: Real>(
    g: &mut Graph<R>,
    p: &BoundParams,
    cfg: &ModelConfig,
    patch_feats: TensorId,
    query_emb: TensorId,
) -> Result<GlobalOutput> {
    // A learned projection of the query decouples the localization
    // geometry from the answer-embedding geometry; without it the map can
    // only sharpen by bending the patch features themselves.
    let q_proj = g.matvec(p.get("global.map.w")?, query_emb)?;
    let affinity = g.matvec(patch_feats, q_proj)?;
    // Unit temperature: the query embedding is unit-norm, so affinities are
    // already O(1); dividing by sqrt(D) here flattens the map and starves
    // the localization signal.
    let map = g.softmax(affinity, 1.0)?;
    let pooled = g.vecmat(map, patch_feats)?;
    let embedding = g.normalize_rows(pooled)?;
    let logits = g.matvec(p.get("global.ans.w")?, embedding)?;
    let answer_logits = g.add(logits, p.get("global.ans.b")?)?;
    // Box pre-activations read the embedding plus geometric moments of the
    // attention map (centroid and variance per axis), so box supervision
    // has a direct path to sharpening the map around the referent.
    let geo = attention_moments(g, cfg, map)?;
    let box_lin = g.matvec(p.get("global.box.w")?, embedding)?;
    let box_geo = g.matvec(p.get("global.box.gw")?, geo)?;
    let box_lin = g.add(box_lin, box_geo)?;
    let box_pre = g.add(box_lin, p.get("global.box.b")?)?;
    Ok(GlobalOutput { map, affinity, embedding, answer_logits, box_pre })
}

/// [cx, cy, var_x, var_y] of the attention distribution over patch centers
/// in normalized image coordinates.
fn attention_moments<R: Real>(
    g: &mut Graph<R>,
    cfg: &ModelConfig,
    map: TensorId,
) -> Result<TensorId> {
    let grid = cfg.grid();
    let mut basis = Vec::with_capacity(grid * grid * 4);
    for r in 0..grid {
        for c in 0..grid {
            let x = (c as f64 + 0.5) / grid as f64;
            let y = (r as f64 + 0.5) / grid as f64;
            basis.extend_from_slice(&[x, y, x * x, y * y]);
        }
    }
    let basis = g.constant_f64(&[grid * grid, 4], &basis)?;
    let m = g.vecmat(map, basis)?;
    let cx = g.slice_vec(m, 0, 1)?;
    let cy = g.slice_vec(m, 1, 1)?;
    let ex2 = g.slice_vec(m, 2, 1)?;
    let ey2 = g.slice_vec(m, 3, 1)?;
    let cx2 = g.mul(cx, cx)?;
    let cy2 = g.mul(cy, cy)?;
    let vx = g.sub(ex2, cx2)?;
    let vy = g.sub(ey2, cy2)?;
    g.concat_vec(&[cx, cy, vx, vy])
}
