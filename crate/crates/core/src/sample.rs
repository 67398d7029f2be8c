//! Shared dataset value types.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::geom::{BBox, GridImage};

pub type TokenId = u32;

/// Split tag constants used by the split planner and the trainers.
pub const TAG_TRAIN: &str = "train";
pub const TAG_TEST: &str = "test";
pub const TAG_HELDOUT_CATEGORY: &str = "heldout_category";
pub const TAG_HELDOUT_DATASET: &str = "heldout_dataset";

/// One training/evaluation example: an image, a tokenized query, the
/// canonical reference response, and its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: GridImage,
    pub query: Vec<TokenId>,
    pub reference_response: Vec<TokenId>,
    pub gt_category: usize,
    pub gt_bbox: BBox,
    pub split_tags: BTreeSet<String>,
}

impl Sample {
    pub fn has_tag(&self, tag: &str) -> bool {
        self.split_tags.contains(tag)
    }
}

/// A model response after schema parsing. `schema_valid` implies both parsed
/// fields are present; the parser is total and never panics on garbage.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub tokens: Vec<TokenId>,
    pub parsed_category: Option<usize>,
    pub parsed_bbox: Option<BBox>,
    pub schema_valid: bool,
}
