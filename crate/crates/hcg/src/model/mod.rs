//! The two-layer grounding model: global perception, local grounding, and
//! adaptive fusion, plus the ablation variants that disable individual
//! stages.

pub mod fusion;
pub mod global;
pub mod local;
mod pipeline;

pub use fusion::{
    adaptive_fuse, answer_head, apply_abstention, argmax, bbox_from_pre, bbox_head, FusedOutput,
};
pub use global::{
    cross_attend, encode_image_global, encode_text, extract_proposals, AttentionMap, GlobalOutput,
    RegionProposal,
};
pub use local::{
    consistency_loss, consistency_score, crop_rect, crop_region, encode_local,
    infonce_from_scores, triplet_consistency_loss, Patch, PixelRect,
};
pub use pipeline::{forward_hierarchical, forward_sample, BoundParams, SampleForward};

use serde::{Deserialize, Serialize};

use crate::scene::{ANSWER_VOCAB, TOKEN_VOCAB};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch_size: usize,
    /// Embedding width D shared by both encoders.
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub text_blocks: usize,
    pub max_query_len: usize,
    /// Local crop resolution L.
    pub local_res: usize,
    pub conv_channels: [usize; 3],
    /// K: proposal budget per query.
    pub max_proposals: usize,
    /// Peaks below floor * max(map) are dropped.
    pub proposal_floor: f64,
    /// Temperature of the score-softmax fusion weights.
    pub fusion_temp: f64,
    /// Abstention threshold on max consistency score.
    pub abstain_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_side: 64,
            patch_size: 8,
            dim: 64,
            heads: 4,
            blocks: 2,
            text_blocks: 1,
            max_query_len: 12,
            local_res: 32,
            conv_channels: [8, 16, 32],
            max_proposals: 4,
            proposal_floor: 0.25,
            fusion_temp: 0.25,
            abstain_threshold: 0.1,
        }
    }
}

impl ModelConfig {
    /// Patch-size 16 variant for 224x224 inputs.
    pub fn paper_parity() -> Self {
        ModelConfig { image_side: 224, patch_size: 16, ..Default::default() }
    }

    /// Smallest config that exercises every code path; used by gradient
    /// checks where finite differences over the full parameter set must
    /// stay cheap.
    pub fn tiny() -> Self {
        ModelConfig {
            image_side: 32,
            patch_size: 8,
            dim: 8,
            heads: 2,
            blocks: 1,
            text_blocks: 1,
            max_query_len: 12,
            local_res: 8,
            conv_channels: [2, 3, 4],
            max_proposals: 2,
            proposal_floor: 0.25,
            fusion_temp: 0.25,
            abstain_threshold: 0.1,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.image_side % self.patch_size != 0 {
            return Err(format!(
                "image side {} not divisible by patch size {}",
                self.image_side, self.patch_size
            ));
        }
        if self.dim % self.heads != 0 {
            return Err(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.local_res % 8 != 0 {
            return Err(format!("local_res {} must be a multiple of 8", self.local_res));
        }
        if !(0.0..1.0).contains(&self.proposal_floor) {
            return Err("proposal_floor must be in [0,1)".into());
        }
        if !(-1.0..1.0).contains(&self.abstain_threshold) {
            return Err("abstain_threshold must be in (-1,1)".into());
        }
        Ok(())
    }
}

/// Ablation variants; each maps to one documented component substitution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Local features are pooled global patch features instead of
    /// re-encoded crops.
    NoLde,
    /// Consistency validation off: no consistency loss, uniform fusion
    /// weights, abstention disabled.
    NoScv,
    /// Uniform mean instead of score-softmax in the fusion step.
    SimpleConcatFusion,
    /// First layer only; answer and box come from the global heads.
    BaseGlobalOnly,
}

pub const ALL_VARIANTS: [Variant; 5] = [
    Variant::Full,
    Variant::NoLde,
    Variant::NoScv,
    Variant::SimpleConcatFusion,
    Variant::BaseGlobalOnly,
];

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLde => "no_lde",
            Variant::NoScv => "no_scv",
            Variant::SimpleConcatFusion => "simple_concat",
            Variant::BaseGlobalOnly => "base_global_only",
        }
    }

    pub fn from_name(name: &str) -> Option<Variant> {
        ALL_VARIANTS.iter().copied().find(|v| v.name() == name)
    }

    pub fn uses_local_stage(&self) -> bool {
        !matches!(self, Variant::BaseGlobalOnly)
    }

    pub fn reencodes_crops(&self) -> bool {
        !matches!(self, Variant::NoLde | Variant::BaseGlobalOnly)
    }

    /// Uniform mean instead of the score-softmax mixture.
    pub fn uniform_fusion(&self) -> bool {
        matches!(self, Variant::NoScv | Variant::SimpleConcatFusion)
    }

    pub fn abstention_enabled(&self) -> bool {
        !matches!(self, Variant::NoScv | Variant::BaseGlobalOnly)
    }

    pub fn consistency_loss_enabled(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoLde | Variant::SimpleConcatFusion)
    }
}

/// Create and initialize every model parameter in `store`.
pub fn init_params(store: &mut ParamStore, cfg: &ModelConfig) {
    let d = cfg.dim;
    let v_tok = TOKEN_VOCAB.len();
    let v_ans = ANSWER_VOCAB.len();

    store.init_uniform("text.tok_emb", &[v_tok, d], d);
    store.init_uniform("text.pos_emb", &[cfg.max_query_len, d], d);
    for b in 0..cfg.text_blocks {
        init_block(store, &format!("text.block{b}"), d, cfg.heads);
    }

    store.init_uniform("vis.patch_embed.w", &[cfg.patch_dim(), d], cfg.patch_dim());
    store.init_zeros("vis.patch_embed.b", &[d]);
    store.init_uniform("vis.pos_emb", &[cfg.num_patches(), d], d);
    for b in 0..cfg.blocks {
        init_block(store, &format!("vis.block{b}"), d, cfg.heads);
    }
    store.init_ones("vis.ln_out.g", &[d]);
    store.init_zeros("vis.ln_out.b", &[d]);

    store.init_uniform("global.map.w", &[d, d], d);
    store.init_uniform("global.ans.w", &[v_ans, d], d);
    store.init_zeros("global.ans.b", &[v_ans]);
    store.init_uniform("global.box.w", &[4, d], d);
    store.init_uniform("global.box.gw", &[4, 4], 4);
    store.init_zeros("global.box.b", &[4]);

    let [c1, c2, c3] = cfg.conv_channels;
    store.init_uniform("local.conv0.w", &[9 * 3, c1], 9 * 3);
    store.init_zeros("local.conv0.b", &[c1]);
    store.init_uniform("local.conv1.w", &[9 * c1, c2], 9 * c1);
    store.init_zeros("local.conv1.b", &[c2]);
    store.init_uniform("local.conv2.w", &[9 * c2, c3], 9 * c2);
    store.init_zeros("local.conv2.b", &[c3]);
    store.init_uniform("local.proj.w", &[d, c3 + 1], c3 + 1);
    store.init_zeros("local.proj.b", &[d]);

    // Hidden width 2D: the fusion MLP has to learn an agreement function
    // between its two inputs (global embedding vs crop summary), which is
    // what presence questions ride on; width D is not enough for it
    // alongside the attribute readout.
    store.init_uniform("fuse.w1", &[2 * d, 2 * d], 2 * d);
    store.init_zeros("fuse.b1", &[2 * d]);
    store.init_uniform("fuse.w2", &[d, 2 * d], 2 * d);
    store.init_zeros("fuse.b2", &[d]);
    store.init_uniform("fuse.ans.w", &[v_ans, d], d);
    store.init_zeros("fuse.ans.b", &[v_ans]);
    store.init_uniform("fuse.box.w", &[4, d], d);
    store.init_zeros("fuse.box.b", &[4]);
}

fn init_block(store: &mut ParamStore, prefix: &str, d: usize, _heads: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.init_uniform(&format!("{prefix}.attn.{w}"), &[d, d], d);
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.init_zeros(&format!("{prefix}.attn.{b}"), &[d]);
    }
    store.init_ones(&format!("{prefix}.ln1.g"), &[d]);
    store.init_zeros(&format!("{prefix}.ln1.b"), &[d]);
    store.init_ones(&format!("{prefix}.ln2.g"), &[d]);
    store.init_zeros(&format!("{prefix}.ln2.b"), &[d]);
    store.init_uniform(&format!("{prefix}.mlp.w1"), &[d, d], d);
    store.init_zeros(&format!("{prefix}.mlp.b1"), &[d]);
    store.init_uniform(&format!("{prefix}.mlp.w2"), &[d, d], d);
    store.init_zeros(&format!("{prefix}.mlp.b2"), &[d]);
}

#[cfg(test)]
mod tests;
