//! Desk-scale framework for training a tiny vision-language policy to
//! diagnose abnormalities on synthetic patch-grid images.
//!
//! The crate is organized around a two-stage recipe:
//!
//! 1. supervised instruction tuning on canonical diagnosis responses
//!    ([`train::run_sft`]), followed by
//! 2. reward-guided policy optimization ([`train::run_rl`]) that combines a
//!    relevance judge score, a bounding-box localization reward, and a
//!    cross-attention mass reward, normalized per query group and optimized
//!    with a clipped surrogate objective.
//!
//! Supporting pieces: exact box geometry ([`geom`]), the synthetic world
//! generator ([`synthworld`]), the tokenizer and response schema ([`vocab`]),
//! the encoder-decoder policy model with manual backprop ([`model`]), reward
//! channels ([`rewards`]), the evaluation harness ([`evalharness`]), and the
//! generate-reflect-review dataset pipeline ([`databuild`]).

pub mod databuild;
pub mod evalharness;
pub mod geom;
pub mod model;
pub mod rewards;
pub mod sample;
pub mod synthworld;
pub mod train;
pub mod vocab;

pub use geom::{iou, patches_in_region, BBox, GridImage};
pub use sample::{Response, Sample, TokenId};
