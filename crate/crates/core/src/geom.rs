//! Axis-aligned boxes in continuous patch coordinates and patch-grid images.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("invalid bbox ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },
    #[error("invalid grid image: {0}")]
    InvalidImage(String),
}

/// Axis-aligned rectangle. Coordinates are continuous patch units with
/// `x1 <= x2` and `y1 <= y2`; zero-area boxes are permitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeomError> {
        let all_finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(GeomError::InvalidBBox {
                x1,
                y1,
                x2,
                y2,
                reason: "coordinates must be finite",
            });
        }
        if x1 > x2 || y1 > y2 {
            return Err(GeomError::InvalidBBox {
                x1,
                y1,
                x2,
                y2,
                reason: "requires x1 <= x2 and y1 <= y2",
            });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// True if this box lies inside `[0, width] x [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

/// Intersection over union of two boxes.
///
/// Overlap is `max(0, min(x2) - max(x1)) * max(0, min(y2) - max(y1))`; a zero
/// union (two degenerate boxes) yields 0 rather than an error.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ow = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let oh = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let overlap = ow * oh;
    let union = a.area() + b.area() - overlap;
    if union <= 0.0 {
        0.0
    } else {
        overlap / union
    }
}

/// A synthetic "medical image": a grid of feature patches with exactly one
/// abnormal rectangle carrying a category-specific signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridImage {
    pub height_patches: usize,
    pub width_patches: usize,
    pub feature_dim: usize,
    /// Row-major per-patch features, length `patch_count() * feature_dim`.
    pub patch_features: Vec<f64>,
    pub abnormal_region: BBox,
    pub category_id: usize,
    /// Seed the generator used for this image, when it was generated; lets
    /// serialized records rebuild features instead of storing them inline.
    pub gen_seed: Option<u64>,
}

impl GridImage {
    pub fn new(
        height_patches: usize,
        width_patches: usize,
        feature_dim: usize,
        patch_features: Vec<f64>,
        abnormal_region: BBox,
        category_id: usize,
    ) -> Result<Self, GeomError> {
        if height_patches == 0 || width_patches == 0 {
            return Err(GeomError::InvalidImage("grid dimensions must be positive".into()));
        }
        let expected = height_patches * width_patches * feature_dim;
        if patch_features.len() != expected {
            return Err(GeomError::InvalidImage(format!(
                "expected {} feature values, got {}",
                expected,
                patch_features.len()
            )));
        }
        if !abnormal_region.within(width_patches as f64, height_patches as f64) {
            return Err(GeomError::InvalidImage(format!(
                "abnormal region {:?} outside {}x{} grid",
                abnormal_region, width_patches, height_patches
            )));
        }
        Ok(Self {
            height_patches,
            width_patches,
            feature_dim,
            patch_features,
            abnormal_region,
            category_id,
            gen_seed: None,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.height_patches * self.width_patches
    }

    pub fn feature(&self, patch: usize) -> &[f64] {
        let lo = patch * self.feature_dim;
        &self.patch_features[lo..lo + self.feature_dim]
    }
}

/// Indices (row-major, ascending) of all patches whose center lies strictly
/// inside the image's abnormal region. Sub-patch-sized regions may cover no
/// center and yield an empty set.
pub fn patches_in_region(image: &GridImage) -> Vec<usize> {
    let r = &image.abnormal_region;
    let mut out = Vec::new();
    for row in 0..image.height_patches {
        let cy = row as f64 + 0.5;
        if !(cy > r.y1 && cy < r.y2) {
            continue;
        }
        for col in 0..image.width_patches {
            let cx = col as f64 + 0.5;
            if cx > r.x1 && cx < r.x2 {
                out.push(row * image.width_patches + col);
            }
        }
    }
    out
}
