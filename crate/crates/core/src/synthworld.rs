//! Deterministic generator for the synthetic abnormality world and the
//! train/test split planner, including held-out-family exclusions.
//!
//! Categories are (site, kind) pairs. The abnormal rectangle's patches carry
//! an additive signature built from one-hot site and kind blocks, so kind
//! recognition transfers to sites never seen in training. Single-patch
//! distractors with other-kind signatures make genuine localization
//! necessary for classification.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{iou, BBox, GridImage};
use crate::sample::{
    Sample, TAG_HELDOUT_CATEGORY, TAG_HELDOUT_DATASET, TAG_TEST, TAG_TRAIN,
};
use crate::vocab::{kind_idx, site_idx, Vocab};

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("invalid split plan: {0}")]
    InvalidPlan(String),
    #[error("split produced an empty {0} set")]
    EmptySplit(&'static str),
    #[error("iou target {target} unreachable by horizontal shift (best reachable {best:.4})")]
    IouTargetUnreachable { target: f64, best: f64 },
    #[error("bad iou hint inputs: {0}")]
    BadHintInputs(String),
}

/// Stir a seed and a stream index into an independent sub-seed (splitmix64).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub height_patches: usize,
    pub width_patches: usize,
    /// Site names; the category family of a sample is its site.
    pub sites: Vec<String>,
    /// Kind names; categories enumerate sites x kinds.
    pub kinds: Vec<String>,
    /// Amplitude of the one-hot signature blocks injected into abnormal patches.
    pub signature_scale: f64,
    /// Standard deviation of the Gaussian background noise on every feature.
    pub noise_scale: f64,
    /// Abnormal rectangle side length range, inclusive, in patches.
    pub region_min: usize,
    pub region_max: usize,
    /// Number of single-patch distractors carrying another kind's signature.
    pub distractor_count: usize,
    /// Distractor amplitude relative to the true signature.
    pub distractor_scale: f64,
    /// Fraction of samples whose query carries a ground-truth bbox hint.
    pub hint_fraction: f64,
    /// Dataset-family labels (style groupings); category c belongs to family
    /// `c % dataset_families.len()`.
    pub dataset_families: Vec<String>,
    /// Amplitude of the per-dataset-family constant style offset (0 disables).
    pub dataset_style_scale: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            height_patches: 10,
            width_patches: 10,
            sites: vec!["lung".into(), "kidney".into()],
            kinds: vec!["nodule".into(), "stone".into()],
            signature_scale: 1.0,
            noise_scale: 0.3,
            region_min: 4,
            region_max: 4,
            distractor_count: 1,
            distractor_scale: 0.7,
            hint_fraction: 0.25,
            dataset_families: vec!["ct".into(), "xray".into()],
            dataset_style_scale: 0.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn num_categories(&self) -> usize {
        self.sites.len() * self.kinds.len()
    }

    /// Feature layout: one-hot site block followed by one-hot kind block.
    pub fn feature_dim(&self) -> usize {
        self.sites.len() + self.kinds.len()
    }

    pub fn signature(&self, category: usize) -> Vec<f64> {
        let mut sig = vec![0.0; self.feature_dim()];
        let s = site_idx(category, self.kinds.len());
        let k = kind_idx(category, self.kinds.len());
        sig[s] = self.signature_scale;
        sig[self.sites.len() + k] = self.signature_scale;
        sig
    }

    pub fn category_family(&self, category: usize) -> &str {
        &self.sites[site_idx(category, self.kinds.len())]
    }

    pub fn dataset_family(&self, category: usize) -> &str {
        &self.dataset_families[category % self.dataset_families.len()]
    }

    pub fn vocab(&self) -> Vocab {
        let coord_max = self.width_patches.max(self.height_patches);
        Vocab::new(&self.sites, &self.kinds, coord_max)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.num_categories() < 2 {
            return Err(WorldError::InvalidConfig(
                "need at least two categories (sites x kinds)".into(),
            ));
        }
        if self.height_patches == 0 || self.width_patches == 0 {
            return Err(WorldError::InvalidConfig("grid dimensions must be positive".into()));
        }
        if self.region_min == 0 || self.region_min > self.region_max {
            return Err(WorldError::InvalidConfig(
                "require 0 < region_min <= region_max".into(),
            ));
        }
        if self.region_max > self.width_patches.min(self.height_patches) {
            return Err(WorldError::InvalidConfig(format!(
                "abnormal region (max side {}) cannot fit the {}x{} grid",
                self.region_max, self.width_patches, self.height_patches
            )));
        }
        if self.signature_scale <= 0.0 {
            return Err(WorldError::InvalidConfig("signature_scale must be > 0".into()));
        }
        if self.noise_scale < 0.0 {
            return Err(WorldError::InvalidConfig("noise_scale must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.hint_fraction) {
            return Err(WorldError::InvalidConfig("hint_fraction must be in [0, 1]".into()));
        }
        if self.dataset_families.is_empty() {
            return Err(WorldError::InvalidConfig("need at least one dataset family".into()));
        }
        let mut names: Vec<&String> = self.sites.iter().chain(self.kinds.iter()).collect();
        names.sort();
        names.dedup();
        if names.len() != self.sites.len() + self.kinds.len() {
            return Err(WorldError::InvalidConfig(
                "site and kind names must be pairwise distinct".into(),
            ));
        }
        Ok(())
    }
}

/// Per-family style offset, deterministic in the family index.
fn style_offset(cfg: &WorldConfig, family_idx: usize, dim: usize) -> Vec<f64> {
    if cfg.dataset_style_scale == 0.0 {
        return vec![0.0; dim];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(0x5717_1e00, family_idx as u64));
    (0..dim)
        .map(|_| cfg.dataset_style_scale * if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Rebuild an image's features from its generator seed and ground truth.
/// This is the single code path used both at generation and at JSONL load.
pub fn rebuild_image(
    cfg: &WorldConfig,
    feature_seed: u64,
    region: BBox,
    category: usize,
) -> Result<GridImage, WorldError> {
    let dim = cfg.feature_dim();
    let p = cfg.height_patches * cfg.width_patches;
    let mut rng = ChaCha8Rng::seed_from_u64(feature_seed);
    let noise = Normal::new(0.0, cfg.noise_scale.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let mut features = vec![0.0; p * dim];
    if cfg.noise_scale > 0.0 {
        for v in features.iter_mut() {
            *v = noise.sample(&mut rng);
        }
    } else {
        // Keep the rng stream aligned so distractor draws below do not
        // depend on the noise setting.
        for _ in 0..features.len() {
            let _ = rng.gen::<f64>();
        }
    }

    let sig = cfg.signature(category);
    let fam = category % cfg.dataset_families.len();
    let style = style_offset(cfg, fam, dim);
    for v in features.chunks_mut(dim) {
        for (x, s) in v.iter_mut().zip(&style) {
            *x += s;
        }
    }

    // Abnormal rectangle: integer box covering rows y1..y2, cols x1..x2.
    let (x1, y1, x2, y2) = (
        region.x1 as usize,
        region.y1 as usize,
        region.x2 as usize,
        region.y2 as usize,
    );
    for row in y1..y2 {
        for col in x1..x2 {
            let base = (row * cfg.width_patches + col) * dim;
            for (d, s) in sig.iter().enumerate() {
                features[base + d] += s;
            }
        }
    }

    // Single-patch distractors outside the region, same site, another kind.
    let n_kinds = cfg.kinds.len();
    let own_kind = kind_idx(category, n_kinds);
    for _ in 0..cfg.distractor_count {
        let mut patch = None;
        for _attempt in 0..64 {
            let row = rng.gen_range(0..cfg.height_patches);
            let col = rng.gen_range(0..cfg.width_patches);
            let inside = row >= y1 && row < y2 && col >= x1 && col < x2;
            if !inside {
                patch = Some((row, col));
                break;
            }
        }
        let other_kind = if n_kinds > 1 {
            let mut k = rng.gen_range(0..n_kinds);
            if k == own_kind {
                k = (k + 1) % n_kinds;
            }
            k
        } else {
            own_kind
        };
        if let Some((row, col)) = patch {
            let site = site_idx(category, n_kinds);
            let base = (row * cfg.width_patches + col) * dim;
            features[base + site] += cfg.distractor_scale * cfg.signature_scale;
            features[base + cfg.sites.len() + other_kind] +=
                cfg.distractor_scale * cfg.signature_scale;
        }
    }

    let mut image = GridImage::new(
        cfg.height_patches,
        cfg.width_patches,
        dim,
        features,
        region,
        category,
    )
    .map_err(|e| WorldError::InvalidConfig(e.to_string()))?;
    image.gen_seed = Some(feature_seed);
    Ok(image)
}

/// Generate `n` samples. A pure function of `(cfg, n)`: sample i draws all
/// randomness from sub-seeds of `(cfg.seed, i)`, so generation may be
/// parallelized or replayed per sample.
pub fn generate_dataset(cfg: &WorldConfig, n: usize) -> Result<Vec<Sample>, WorldError> {
    cfg.validate()?;
    if n == 0 {
        return Err(WorldError::InvalidConfig("n must be >= 1".into()));
    }
    let vocab = cfg.vocab();
    let n_kinds = cfg.kinds.len();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let sample_seed = mix_seed(cfg.seed, i as u64);
        let mut meta_rng = ChaCha8Rng::seed_from_u64(mix_seed(sample_seed, 0));
        let feature_seed = mix_seed(sample_seed, 1);

        let category = meta_rng.gen_range(0..cfg.num_categories());
        let w = meta_rng.gen_range(cfg.region_min..=cfg.region_max);
        let h = meta_rng.gen_range(cfg.region_min..=cfg.region_max);
        let x1 = meta_rng.gen_range(0..=cfg.width_patches - w);
        let y1 = meta_rng.gen_range(0..=cfg.height_patches - h);
        let region = BBox::new(x1 as f64, y1 as f64, (x1 + w) as f64, (y1 + h) as f64)
            .expect("integer box is valid");
        let hinted = meta_rng.gen::<f64>() < cfg.hint_fraction;

        let image = rebuild_image(cfg, feature_seed, region, category)?;
        let mut query = vocab.encode_query(site_idx(category, n_kinds));
        if hinted {
            query.extend(vocab.encode_hint(&region).expect("gt hint encodes"));
        }
        let reference_response = vocab
            .encode_response(category, &region)
            .expect("gt response encodes");
        debug_assert!({
            let r = vocab.parse_response(&reference_response);
            r.schema_valid && r.parsed_category == Some(category) && r.parsed_bbox == Some(region)
        });

        samples.push(Sample {
            id: format!("s{i:06}"),
            image,
            query,
            reference_response,
            gt_category: category,
            gt_bbox: region,
            split_tags: Default::default(),
        });
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub heldout_category_families: Vec<String>,
    pub heldout_dataset_families: Vec<String>,
    /// Fraction of non-held-out samples assigned to train, in (0, 1).
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            heldout_category_families: Vec::new(),
            heldout_dataset_families: Vec::new(),
            train_fraction: 0.8,
            seed: 1,
        }
    }
}

/// Tag every sample with exactly one of train/test plus optional held-out
/// tags. Samples of a held-out family never land in train.
pub fn apply_split(
    samples: &[Sample],
    plan: &SplitPlan,
    cfg: &WorldConfig,
) -> Result<Vec<Sample>, WorldError> {
    if !(plan.train_fraction > 0.0 && plan.train_fraction < 1.0) {
        return Err(WorldError::InvalidPlan("train_fraction must be in (0, 1)".into()));
    }
    for fam in &plan.heldout_category_families {
        if !cfg.sites.contains(fam) {
            return Err(WorldError::InvalidPlan(format!("unknown category family {fam:?}")));
        }
    }
    for fam in &plan.heldout_dataset_families {
        if !cfg.dataset_families.contains(fam) {
            return Err(WorldError::InvalidPlan(format!("unknown dataset family {fam:?}")));
        }
    }

    let mut out: Vec<Sample> = samples.to_vec();
    let mut pool = Vec::new();
    for (idx, s) in out.iter_mut().enumerate() {
        s.split_tags.clear();
        let cat_fam = cfg.category_family(s.gt_category).to_string();
        let ds_fam = cfg.dataset_family(s.gt_category).to_string();
        let held_cat = plan.heldout_category_families.contains(&cat_fam);
        let held_ds = plan.heldout_dataset_families.contains(&ds_fam);
        if held_cat {
            s.split_tags.insert(TAG_HELDOUT_CATEGORY.into());
        }
        if held_ds {
            s.split_tags.insert(TAG_HELDOUT_DATASET.into());
        }
        if held_cat || held_ds {
            s.split_tags.insert(TAG_TEST.into());
        } else {
            pool.push(idx);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    // Fisher-Yates over the pool for a seed-stable permutation.
    for i in (1..pool.len()).rev() {
        let j = rng.gen_range(0..=i);
        pool.swap(i, j);
    }
    let n_train = (plan.train_fraction * pool.len() as f64).round() as usize;
    for (rank, &idx) in pool.iter().enumerate() {
        let tag = if rank < n_train { TAG_TRAIN } else { TAG_TEST };
        out[idx].split_tags.insert(tag.into());
    }

    if !out.iter().any(|s| s.has_tag(TAG_TRAIN)) {
        return Err(WorldError::EmptySplit("train"));
    }
    if !out.iter().any(|s| s.has_tag(TAG_TEST)) {
        return Err(WorldError::EmptySplit("test"));
    }
    Ok(out)
}

/// Construct a box whose IoU with `gt` is `target_iou` within 0.01, by
/// binary search over a horizontal shift of `gt` (IoU of two equal boxes is
/// strictly decreasing in the shift). The shift is clamped to the grid; an
/// unreachable target is an explicit error.
pub fn make_iou_hint(
    gt: &BBox,
    target_iou: f64,
    grid_width: f64,
    grid_height: f64,
) -> Result<BBox, WorldError> {
    if !(0.0..=1.0).contains(&target_iou) {
        return Err(WorldError::BadHintInputs(format!(
            "target_iou {target_iou} outside [0, 1]"
        )));
    }
    if gt.area() <= 0.0 {
        return Err(WorldError::BadHintInputs("gt box must have positive area".into()));
    }
    if !gt.within(grid_width, grid_height) {
        return Err(WorldError::BadHintInputs("gt box outside the grid".into()));
    }
    if target_iou >= 1.0 {
        return Ok(*gt);
    }

    let room_right = grid_width - gt.x2;
    let room_left = gt.x1;
    let (sign, s_max) = if room_right >= room_left {
        (1.0, room_right)
    } else {
        (-1.0, room_left)
    };
    let iou_at = |s: f64| iou(&gt.translated(sign * s, 0.0), gt);
    let best = iou_at(s_max);
    if best > target_iou + 0.01 {
        return Err(WorldError::IouTargetUnreachable {
            target: target_iou,
            best,
        });
    }

    let (mut lo, mut hi) = (0.0, s_max);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if iou_at(mid) > target_iou {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    Ok(gt.translated(sign * s, 0.0))
}
