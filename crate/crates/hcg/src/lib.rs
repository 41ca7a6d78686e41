//! Coarse-to-fine visual grounding pipeline on a procedurally generated
//! scene benchmark: a global query-conditioned perception stage proposes
//! regions, a local stage re-encodes crops and validates them against the
//! query, and an adaptive fusion step produces the answer or box, with an
//! abstention rule for queries about absent objects.

pub mod cli;
pub mod eval;
pub mod geom;
pub mod model;
pub mod scene;
pub mod tensor;
pub mod train;
