//! Reward channels, per-query group normalization, and the tabular Bellman
//! update utility.

pub mod judge;

use thiserror::Error;

pub use judge::{
    relevance_judge, FallbackJudge, HttpJudge, JudgeBackend, JudgeError, JudgeRequest,
    JudgeVerdict, MockJudgeServer, ReferenceJudge, RubricWeights,
};

use crate::geom::{iou, BBox};
use crate::model::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("reward group must be non-empty")]
    EmptyGroup,
}

/// Per-candidate reward channels. Raw fields are set at scoring time; the
/// normalized fields and the combined total only after
/// [`normalize_and_aggregate`] ran over the candidate's query group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RewardBreakdown {
    /// Relevance judge score in [0, 1].
    pub r_llm: f64,
    /// Localization reward (IoU) in [0, 1].
    pub r_loc: f64,
    /// Attention-mass reward in [0, |N|].
    pub r_att: f64,
    pub r_loc_norm: Option<f64>,
    pub r_att_norm: Option<f64>,
    pub r_combined: Option<f64>,
}

impl RewardBreakdown {
    pub fn new(r_llm: f64, r_loc: f64, r_att: f64) -> Self {
        Self {
            r_llm,
            r_loc,
            r_att,
            ..Default::default()
        }
    }

    pub fn combined(&self) -> f64 {
        self.r_combined
            .expect("combined reward read before group normalization")
    }
}

/// IoU of the predicted box against ground truth; a missing or unparsable
/// prediction scores 0.
pub fn localization_reward(pred: Option<&BBox>, gt: &BBox) -> f64 {
    match pred {
        Some(p) => iou(p, gt),
        None => 0.0,
    }
}

/// Attention mass on the abnormal patches.
///
/// `att_logits` holds pre-softmax cross-attention logits, one row per
/// response token in `N`, one column per patch. Each row is softmaxed over
/// all patches and the probability mass landing on `abnormal_patches` is
/// summed, so the result lies in `[0, |N|]`. Row masses are computed as a
/// ratio of exponential sums, which keeps the uniform-logit case exact.
pub fn vision_relevance_reward(att_logits: &Tensor, abnormal_patches: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..att_logits.rows {
        let row = att_logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            continue;
        }
        let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let numer: f64 = abnormal_patches.iter().map(|&j| (row[j] - m).exp()).sum();
        total += numer / denom;
    }
    total
}

/// Divide each candidate's localization and attention rewards by the group
/// maximum of that channel (0 when the maximum is 0) and set the combined
/// total `r_llm + r_loc_norm + r_att_norm`.
pub fn normalize_and_aggregate(group: &mut [RewardBreakdown]) -> Result<(), RewardError> {
    if group.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    let max_loc = group.iter().map(|r| r.r_loc).fold(0.0, f64::max);
    let max_att = group.iter().map(|r| r.r_att).fold(0.0, f64::max);
    for r in group.iter_mut() {
        let loc_n = if max_loc > 0.0 { r.r_loc / max_loc } else { 0.0 };
        let att_n = if max_att > 0.0 { r.r_att / max_att } else { 0.0 };
        r.r_loc_norm = Some(loc_n);
        r.r_att_norm = Some(att_n);
        r.r_combined = Some(r.r_llm + loc_n + att_n);
    }
    Ok(())
}

/// One tabular Q-learning step: `delta = alpha (r + gamma max_a' Q(s',a') - q)`,
/// returning `(delta, q + delta)`.
pub fn bellman_q_update(q: f64, r: f64, gamma: f64, max_next_q: f64, alpha: f64) -> (f64, f64) {
    let delta = alpha * (r + gamma * max_next_q - q);
    (delta, q + delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn localization_reward_examples() {
        let gt = bb(5.0, 5.0, 15.0, 15.0);
        assert_eq!(localization_reward(Some(&gt), &gt), 1.0);
        assert_eq!(localization_reward(None, &gt), 0.0);
        let pred = bb(0.0, 0.0, 10.0, 10.0);
        assert!((localization_reward(Some(&pred), &gt) - 25.0 / 175.0).abs() < 1e-12);
    }

    #[test]
    fn vrr_uniform_logits_is_selected_fraction() {
        // |N| = 1, uniform logits over 8 patches, 3 abnormal: exactly 3/8.
        let logits = Tensor {
            rows: 1,
            cols: 8,
            data: vec![0.7; 8],
        };
        assert_eq!(vision_relevance_reward(&logits, &[0, 3, 5]), 3.0 / 8.0);
    }

    #[test]
    fn vrr_empty_token_set_is_zero() {
        let logits = Tensor::zeros(0, 8);
        assert_eq!(vision_relevance_reward(&logits, &[0, 1]), 0.0);
    }

    #[test]
    fn vrr_hand_softmax_example() {
        // One token, two patches, logits [ln 2, 0]: mass on patch 0 is
        // 2 / (2 + 1) = 2/3.
        let logits = Tensor {
            rows: 1,
            cols: 2,
            data: vec![2.0f64.ln(), 0.0],
        };
        let got = vision_relevance_reward(&logits, &[0]);
        assert!((got - 2.0 / 3.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn normalize_hand_example() {
        // r_loc [0.2, 0.4], r_att [1, 2], r_llm [0.1, 0.3] -> [1.1, 2.3].
        let mut group = vec![
            RewardBreakdown::new(0.1, 0.2, 1.0),
            RewardBreakdown::new(0.3, 0.4, 2.0),
        ];
        normalize_and_aggregate(&mut group).unwrap();
        // Bitwise the same arithmetic route as the hand computation.
        assert_eq!(group[0].r_combined, Some(0.1 + 0.2 / 0.4 + 1.0 / 2.0));
        assert_eq!(group[1].r_combined, Some(0.3 + 1.0 + 1.0));
        assert!((group[0].combined() - 1.1).abs() < 1e-12);
        assert!((group[1].combined() - 2.3).abs() < 1e-12);
    }

    #[test]
    fn normalize_degenerate_zero_max() {
        let mut group = vec![
            RewardBreakdown::new(0.5, 0.0, 0.0),
            RewardBreakdown::new(0.2, 0.0, 0.0),
        ];
        normalize_and_aggregate(&mut group).unwrap();
        for r in &group {
            assert_eq!(r.r_loc_norm, Some(0.0));
            assert_eq!(r.r_att_norm, Some(0.0));
            assert_eq!(r.r_combined, Some(r.r_llm));
        }
    }

    #[test]
    fn normalize_single_candidate_gets_unit_norms() {
        let mut group = vec![RewardBreakdown::new(0.4, 0.3, 1.7)];
        normalize_and_aggregate(&mut group).unwrap();
        assert_eq!(group[0].r_loc_norm, Some(1.0));
        assert_eq!(group[0].r_att_norm, Some(1.0));
        assert!((group[0].combined() - 2.4).abs() < 1e-12);
    }

    #[test]
    fn normalize_empty_group_errors() {
        let mut group: Vec<RewardBreakdown> = Vec::new();
        assert_eq!(normalize_and_aggregate(&mut group), Err(RewardError::EmptyGroup));
    }

    #[test]
    fn bellman_examples() {
        let (delta, new_q) = bellman_q_update(0.0, 1.0, 0.99, 0.0, 0.1);
        assert!((delta - 0.1).abs() < 1e-12);
        assert!((new_q - 0.1).abs() < 1e-12);
        // alpha = 0 leaves q unchanged.
        let (delta, new_q) = bellman_q_update(0.7, 3.0, 0.9, 5.0, 0.0);
        assert_eq!(delta, 0.0);
        assert_eq!(new_q, 0.7);
        // Fixed point: target 0 + 0.5 * 2 equals q.
        let (delta, new_q) = bellman_q_update(1.0, 0.0, 0.5, 2.0, 0.3);
        assert_eq!(delta, 0.0);
        assert_eq!(new_q, 1.0);
    }

    /// Exact value iteration oracle for the fixed 3-state, 2-action MDP used
    /// below; transitions are deterministic.
    pub(crate) const MDP_NEXT: [[usize; 2]; 3] = [[1, 2], [0, 2], [2, 0]];
    pub(crate) const MDP_REWARD: [[f64; 2]; 3] = [[0.0, 1.0], [2.0, 0.0], [0.5, 0.0]];
    pub(crate) const MDP_GAMMA: f64 = 0.9;

    pub(crate) fn value_iteration_oracle(tol: f64) -> [[f64; 2]; 3] {
        let mut q = [[0.0f64; 2]; 3];
        loop {
            let mut next = q;
            let mut delta: f64 = 0.0;
            for s in 0..3 {
                for a in 0..2 {
                    let sn = MDP_NEXT[s][a];
                    let target = MDP_REWARD[s][a] + MDP_GAMMA * q[sn][0].max(q[sn][1]);
                    delta = delta.max((target - q[s][a]).abs());
                    next[s][a] = target;
                }
            }
            q = next;
            if delta < tol {
                return q;
            }
        }
    }

    #[test]
    fn bellman_sweeps_converge_to_value_iteration_fixed_point() {
        let oracle = value_iteration_oracle(1e-13);
        let mut q = [[0.0f64; 2]; 3];
        for _ in 0..2000 {
            for s in 0..3 {
                for a in 0..2 {
                    let sn = MDP_NEXT[s][a];
                    let max_next = q[sn][0].max(q[sn][1]);
                    let (_, new_q) = bellman_q_update(q[s][a], MDP_REWARD[s][a], MDP_GAMMA, max_next, 0.5);
                    q[s][a] = new_q;
                }
            }
        }
        for s in 0..3 {
            for a in 0..2 {
                assert!(
                    (q[s][a] - oracle[s][a]).abs() < 1e-6,
                    "Q({s},{a}) = {} vs oracle {}",
                    q[s][a],
                    oracle[s][a]
                );
            }
        }
    }

    proptest! {
        /// Mass on the region plus mass on its complement partitions |N|.
        #[test]
        fn prop_vrr_partition(rows in 1usize..4, logits in proptest::collection::vec(-4.0f64..4.0, 12..48)) {
            let cols = logits.len() / rows;
            prop_assume!(cols >= 2);
            let t = Tensor { rows, cols, data: logits[..rows * cols].to_vec() };
            let inside: Vec<usize> = (0..cols).filter(|j| j % 3 == 0).collect();
            let outside: Vec<usize> = (0..cols).filter(|j| j % 3 != 0).collect();
            let a = vision_relevance_reward(&t, &inside);
            let b = vision_relevance_reward(&t, &outside);
            prop_assert!(a >= 0.0 && a <= rows as f64 + 1e-9);
            prop_assert!((a + b - rows as f64).abs() < 1e-6);
        }

        /// Normalization keeps each channel's within-group ordering and puts
        /// at least one candidate at 1 unless the channel is all zero.
        #[test]
        fn prop_normalization_monotone_and_anchored(
            locs in proptest::collection::vec(0.0f64..1.0, 2..8),
            atts in proptest::collection::vec(0.0f64..3.0, 2..8),
        ) {
            let n = locs.len().min(atts.len());
            let mut group: Vec<RewardBreakdown> = (0..n)
                .map(|i| RewardBreakdown::new(0.0, locs[i], atts[i]))
                .collect();
            normalize_and_aggregate(&mut group).unwrap();
            for i in 0..n {
                for j in 0..n {
                    if group[i].r_loc <= group[j].r_loc {
                        prop_assert!(group[i].r_loc_norm.unwrap() <= group[j].r_loc_norm.unwrap() + 1e-12);
                    }
                    if group[i].r_att <= group[j].r_att {
                        prop_assert!(group[i].r_att_norm.unwrap() <= group[j].r_att_norm.unwrap() + 1e-12);
                    }
                }
            }
            if group.iter().any(|r| r.r_loc > 0.0) {
                prop_assert!(group.iter().any(|r| (r.r_loc_norm.unwrap() - 1.0).abs() < 1e-12));
            }
            if group.iter().any(|r| r.r_att > 0.0) {
                prop_assert!(group.iter().any(|r| (r.r_att_norm.unwrap() - 1.0).abs() < 1e-12));
            }
        }
    }
}
