//! End-to-end forward pass for one (image, query) sample, shared by
//! training, evaluation, and the ablation variants.

use std::collections::HashMap;

use crate::scene::Image;
use crate::tensor::{Graph, ParamStore, Real, Result, TensorError, TensorId};

use super::fusion::{adaptive_fuse, answer_head, bbox_from_pre, bbox_head, FusedOutput};
use super::global::{cross_attend, encode_image_global, encode_text, GlobalOutput};
use super::local::{consistency_score, crop_region, encode_local};
use super::{extract_proposals, AttentionMap, ModelConfig, RegionProposal, Variant};

/// Parameter leaves bound onto one graph; bind once per forward graph so a
/// whole batch shares the same leaves and gradients accumulate.
pub struct BoundParams {
    ids: HashMap<String, TensorId>,
}

impl BoundParams {
    pub fn bind<R: Real>(g: &mut Graph<R>, store: &ParamStore) -> Result<BoundParams> {
        let mut ids = HashMap::new();
        for name in store.names() {
            ids.insert(name.clone(), g.param(store, &name)?);
        }
        Ok(BoundParams { ids })
    }

    /// Bind only `tracked` names as gradient leaves; everything else
    /// becomes a constant. Keeps finite-difference sweeps over the full
    /// pipeline affordable.
    pub fn bind_tracked<R: Real>(
        g: &mut Graph<R>,
        store: &ParamStore,
        tracked: &[&str],
    ) -> Result<BoundParams> {
        let mut ids = HashMap::new();
        for name in store.names() {
            let id = if tracked.contains(&name.as_str()) {
                g.param(store, &name)?
            } else {
                let p = store.get(&name).unwrap();
                g.constant_f64(&p.shape, &p.values)?
            };
            ids.insert(name, id);
        }
        Ok(BoundParams { ids })
    }

    pub fn get(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }
}

/// Everything the training loss and the evaluator need from one forward.
pub struct SampleForward {
    pub query_emb: TensorId,
    pub global: GlobalOutput,
    /// Eager copy of the attention weights on the patch grid.
    pub attention: AttentionMap,
    pub proposals: Vec<RegionProposal>,
    /// Unit-norm local feature per proposal.
    pub local_features: Vec<TensorId>,
    /// Consistency score node per proposal.
    pub score_ids: Vec<TensorId>,
    /// Eager copies of the scores, in proposal order.
    pub scores: Vec<f64>,
    /// Answer logits of the variant's output path.
    pub final_logits: TensorId,
    /// Decoded corner box [x0,y0,x1,y1] of the variant's output path.
    pub final_box: TensorId,
}

impl SampleForward {
    /// Eager output for evaluation; abstention is applied by the caller.
    pub fn fused_output<R: Real>(&self, g: &Graph<R>) -> FusedOutput {
        let logits = g.values_f64(self.final_logits);
        let b = g.values_f64(self.final_box);
        let bbox = crate::geom::BoundingBox { x0: b[0], y0: b[1], x1: b[2], y1: b[3] };
        FusedOutput::new(logits, bbox, self.scores.clone())
    }
}

/// Mean of the global patch features whose cells overlap `bbox`,
/// re-normalized: the "coarse features at proposal locations" substitution.
fn pooled_patch_feature<R: Real>(
    g: &mut Graph<R>,
    cfg: &ModelConfig,
    patch_feats: TensorId,
    proposal: &RegionProposal,
) -> Result<TensorId> {
    let grid = cfg.grid() as f64;
    let b = &proposal.bbox;
    let clamp = |v: f64| (v.max(0.0).min(grid - 1.0)) as usize;
    let (c0, c1) = (clamp((b.x0 * grid).floor()), clamp((b.x1 * grid).ceil() - 1.0));
    let (r0, r1) = (clamp((b.y0 * grid).floor()), clamp((b.y1 * grid).ceil() - 1.0));
    let mut idx = Vec::new();
    for r in r0..=r1 {
        for c in c0..=c1 {
            idx.push(r * cfg.grid() + c);
        }
    }
    let rows = g.gather_rows(patch_feats, &idx)?;
    let mean = g.mean_rows(rows)?;
    g.normalize_rows(mean)
}

/// Forward pass with the hierarchy knobs exposed directly:
/// `reencode_crops` selects re-encoded crops vs pooled global features for
/// the local stage and `uniform_fusion` replaces score-softmax weights
/// with a uniform mean.
pub fn forward_hierarchical<R: Real>(
    g: &mut Graph<R>,
    p: &BoundParams,
    cfg: &ModelConfig,
    image: &Image,
    tokens: &[String],
    reencode_crops: bool,
    uniform_fusion: bool,
) -> Result<SampleForward> {
    let patch_feats = encode_image_global(g, p, cfg, image)?;
    let query_emb = encode_text(g, p, cfg, tokens)?;
    let global = cross_attend(g, p, cfg, patch_feats, query_emb)?;
    let attention = AttentionMap::new(cfg.grid(), g.values_f64(global.map))?;
    let proposals = extract_proposals(&attention, cfg.max_proposals, cfg.proposal_floor)?;

    let mut local_features = Vec::with_capacity(proposals.len());
    let mut score_ids = Vec::with_capacity(proposals.len());
    let mut scores = Vec::with_capacity(proposals.len());
    for proposal in &proposals {
        let f = if reencode_crops {
            let patch = crop_region(image, proposal, cfg.local_res);
            encode_local(g, p, cfg, &patch)?
        } else {
            pooled_patch_feature(g, cfg, patch_feats, proposal)?
        };
        let s = consistency_score(g, f, query_emb)?;
        scores.push(g.scalar(s));
        local_features.push(f);
        score_ids.push(s);
    }

    let fused = adaptive_fuse(
        g,
        p,
        cfg,
        global.embedding,
        &local_features,
        &score_ids,
        uniform_fusion,
    )?;
    let final_logits = answer_head(g, p, fused)?;
    let box_pre = bbox_head(g, p, fused)?;
    let final_box = bbox_from_pre(g, box_pre)?;

    Ok(SampleForward {
        query_emb,
        global,
        attention,
        proposals,
        local_features,
        score_ids,
        scores,
        final_logits,
        final_box,
    })
}

/// Forward pass for one sample under an ablation variant.
pub fn forward_sample<R: Real>(
    g: &mut Graph<R>,
    p: &BoundParams,
    cfg: &ModelConfig,
    variant: Variant,
    image: &Image,
    tokens: &[String],
) -> Result<SampleForward> {
    if variant == Variant::BaseGlobalOnly {
        let patch_feats = encode_image_global(g, p, cfg, image)?;
        let query_emb = encode_text(g, p, cfg, tokens)?;
        let global = cross_attend(g, p, cfg, patch_feats, query_emb)?;
        let attention = AttentionMap::new(cfg.grid(), g.values_f64(global.map))?;
        let final_logits = global.answer_logits;
        let final_box = bbox_from_pre(g, global.box_pre)?;
        return Ok(SampleForward {
            query_emb,
            global,
            attention,
            proposals: Vec::new(),
            local_features: Vec::new(),
            score_ids: Vec::new(),
            scores: Vec::new(),
            final_logits,
            final_box,
        });
    }
    forward_hierarchical(
        g,
        p,
        cfg,
        image,
        tokens,
        variant.reencodes_crops(),
        variant.uniform_fusion(),
    )
}
