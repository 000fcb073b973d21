//! Instruction-conditioned selection and refinement of visual-token regions.
//!
//! The crate models an image as a 2-d grid of token embeddings. Sliding
//! windows enumerate candidate regions; a small alignment model (learnable
//! guidance queries plus two projection MLPs) scores each region against a
//! tokenized instruction; regions are selected until their enclosing hull
//! covers a target fraction of the image; the crop is then re-encoded in
//! isolation so its tokens no longer depend on out-of-crop content.
//! Training is contrastive over (grid, instruction, ground-truth box)
//! triples. Evaluation covers ANLS, region accuracy, coverage, and a
//! parametric FLOPs model, with a synthetic planted-region task standing in
//! for real data. A mock-driven annotation pipeline produces the
//! ground-truth region files.

pub mod align;
pub mod boxes;
pub mod eval;
pub mod flops;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod select;
pub mod synth;
pub mod text;
pub mod train;
