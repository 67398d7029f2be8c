//! Stage 2: reward-guided policy optimization.
//!
//! For each query a group of candidate responses is sampled, scored on the
//! three reward channels, normalized per group, and turned into terminal
//! discounted returns with value-baseline advantages. The policy ascends a
//! clipped surrogate objective with a value-error penalty and an entropy
//! bonus:
//!
//! ```text
//! J = L_clip + c1 * r - c2 * L_vf + c3 * S
//! ```
//!
//! where the `c1 * r` term carries no gradient (the sampled rewards do not
//! depend on the parameters once trajectories are drawn) and only scales the
//! reported objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evalharness::{acc_metric, mean_iou_metric};
use crate::geom::patches_in_region;
use crate::model::sampling::{greedy_decode, sample_from_state, DecodeParams};
use crate::model::tensor::softmax;
use crate::model::{
    cross_attention_slice, HeadReduce, ImageEncoding, LayerSelect, ParamSet, PolicyModel, Tensor,
};
use crate::rewards::{
    localization_reward, normalize_and_aggregate, relevance_judge, vision_relevance_reward,
    JudgeBackend, RewardBreakdown,
};
use crate::sample::{Response, Sample, TokenId};
use crate::synthworld::mix_seed;

use super::sft::GRAD_CHUNKS;
use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub gamma: f64,
    /// Combined-reward coefficient in the objective (reporting/scaling term).
    pub c1: f64,
    /// Value-loss coefficient.
    pub c2: f64,
    /// Entropy-bonus coefficient.
    pub c3: f64,
    pub clip_epsilon: f64,
    /// Desk-scale default; the paper-scale recipe uses 1e-6.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub candidates_per_query: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub epochs: usize,
    pub batch_queries: usize,
    pub max_response_len: usize,
    /// Evaluate the dev split every this many iterations (rows in between
    /// carry the latest value forward).
    pub dev_eval_every: usize,
    /// Cap on dev samples scored per evaluation.
    pub dev_eval_cap: usize,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            c1: 0.5,
            c2: 0.5,
            c3: 0.01,
            clip_epsilon: 0.2,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            candidates_per_query: 8,
            temperature: 0.9,
            top_p: 0.9,
            epochs: 1,
            batch_queries: 8,
            max_response_len: 12,
            dev_eval_every: 10,
            dev_eval_cap: 64,
            seed: 4,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(TrainError::BadConfig("gamma must be in [0, 1]".into()));
        }
        if self.candidates_per_query < 2 {
            return Err(TrainError::BadConfig(
                "candidates_per_query must be >= 2 for group normalization".into(),
            ));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(TrainError::BadConfig("clip_epsilon must be > 0".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(TrainError::BadConfig("temperature must be > 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(TrainError::BadConfig("top_p must be in (0, 1]".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig("learning_rate must be > 0".into()));
        }
        if self.batch_queries == 0 || self.max_response_len == 0 || self.dev_eval_every == 0 {
            return Err(TrainError::BadConfig("sizes must be >= 1".into()));
        }
        Ok(())
    }

    fn decode_params(&self) -> DecodeParams {
        DecodeParams {
            temperature: self.temperature,
            top_p: self.top_p,
            max_response_len: self.max_response_len,
            greedy: false,
        }
    }
}

/// One sampled candidate with everything the update step needs.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub tokens: Vec<TokenId>,
    /// Sampler log-probs under the truncated renormalized distribution.
    pub behavior_logps: Vec<f64>,
    /// Full-softmax log-probs of the taken tokens, the PPO reference point.
    pub old_logps: Vec<f64>,
    pub old_values: Vec<f64>,
    pub response: Response,
    pub rewards: RewardBreakdown,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// All candidates sampled for one query.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub sample_index: usize,
    pub candidates: Vec<Candidate>,
}

/// Terminal-reward returns and value-baseline advantages:
/// `G_t = gamma^(T-1-t) * r_combined`, `A_t = G_t - V(s_t)`.
pub fn compute_returns_and_advantages(group: &mut RolloutGroup, gamma: f64) {
    for cand in group.candidates.iter_mut() {
        let t_len = cand.tokens.len();
        let r = cand.rewards.combined();
        cand.returns = (0..t_len)
            .map(|t| gamma.powi((t_len - 1 - t) as i32) * r)
            .collect();
        cand.advantages = cand
            .returns
            .iter()
            .zip(&cand.old_values)
            .map(|(g, v)| g - v)
            .collect();
    }
}

/// Scalar surrogate objective for one candidate (maximized):
/// mean clipped term + `c1 * r_combined` - `c2` * value loss + `c3` * entropy.
#[allow(clippy::too_many_arguments)]
pub fn ppo_objective(
    new_logp: &[f64],
    old_logp: &[f64],
    advantages: &[f64],
    values: &[f64],
    returns: &[f64],
    entropies: &[f64],
    r_combined: f64,
    cfg: &RlConfig,
) -> Result<f64, TrainError> {
    let t_len = new_logp.len();
    if t_len == 0
        || old_logp.len() != t_len
        || advantages.len() != t_len
        || values.len() != t_len
        || returns.len() != t_len
        || entropies.len() != t_len
    {
        return Err(TrainError::BadConfig("ppo_objective arrays must align and be non-empty".into()));
    }
    let mut l_clip = 0.0;
    for t in 0..t_len {
        let ratio = (new_logp[t] - old_logp[t]).exp();
        if !ratio.is_finite() {
            return Err(TrainError::Diverged(format!("non-finite ratio at step {t}")));
        }
        let clipped = ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
        l_clip += (ratio * advantages[t]).min(clipped * advantages[t]);
    }
    l_clip /= t_len as f64;
    let l_vf = values
        .iter()
        .zip(returns)
        .map(|(v, g)| (v - g) * (v - g))
        .sum::<f64>()
        / t_len as f64;
    let entropy = entropies.iter().sum::<f64>() / t_len as f64;
    Ok(l_clip + cfg.c1 * r_combined - cfg.c2 * l_vf + cfg.c3 * entropy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlIterationMetrics {
    pub iteration: usize,
    pub mean_r_llm: f64,
    pub mean_r_loc: f64,
    pub mean_r_att: f64,
    pub mean_r_combined: f64,
    pub objective: f64,
    pub dev_acc: f64,
    pub dev_mean_iou: f64,
}

/// Sample and score one query group on a frozen model snapshot.
fn rollout_group(
    model: &PolicyModel,
    sample: &Sample,
    sample_index: usize,
    cfg: &RlConfig,
    judge: &dyn JudgeBackend,
    group_seed: u64,
) -> Result<RolloutGroup, TrainError> {
    let enc = model.encode_image(&sample.image, false)?;
    let abnormal = patches_in_region(&sample.image);
    let params = cfg.decode_params();
    let prefix = model.prefill(&enc, &sample.query)?;
    let mut candidates = Vec::with_capacity(cfg.candidates_per_query);
    for c in 0..cfg.candidates_per_query {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(group_seed, c as u64));
        let seq = sample_from_state(model, &enc, prefix.clone(), &params, &mut rng)?;
        // Scoring pass: teacher-forced forward over the sampled tokens gives
        // the full-softmax log-probs, per-step values, and attention maps.
        let trace = model.decode(&enc, &sample.query, &seq.tokens)?;
        let mut old_logps = Vec::with_capacity(seq.tokens.len());
        let mut old_values = Vec::with_capacity(seq.tokens.len());
        for (t, &tok) in seq.tokens.iter().enumerate() {
            let probs = softmax(trace.step_logits(t));
            old_logps.push(probs[tok as usize].ln());
            old_values.push(trace.step_value(t));
        }
        let response = model.vocab.parse_response(&seq.tokens);
        let verdict = relevance_judge(&response, sample, &model.vocab, judge)
            .map_err(|e| TrainError::Judge(e.to_string()))?;
        let r_loc = localization_reward(response.parsed_bbox.as_ref(), &sample.gt_bbox);
        let name_positions: Vec<usize> = seq
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, &tok)| model.vocab.is_name_token(tok))
            .map(|(t, _)| t)
            .collect();
        let att = cross_attention_slice(&trace, &name_positions, LayerSelect::Last, HeadReduce::Mean);
        let r_att = vision_relevance_reward(&att, &abnormal);
        candidates.push(Candidate {
            tokens: seq.tokens,
            behavior_logps: seq.logps,
            old_logps,
            old_values,
            response,
            rewards: RewardBreakdown::new(verdict.score, r_loc, r_att),
            returns: Vec::new(),
            advantages: Vec::new(),
        });
    }
    Ok(RolloutGroup {
        sample_index,
        candidates,
    })
}

/// Gradient contribution of one candidate. Accumulates d(-J)/dparams into
/// `grads` (scaled by `scale`) and returns the candidate's objective value.
fn candidate_update(
    model: &PolicyModel,
    enc: &ImageEncoding,
    sample: &Sample,
    cand: &Candidate,
    cfg: &RlConfig,
    scale: f64,
    grads: &mut ParamSet,
) -> Result<f64, TrainError> {
    let trace = model.decode(enc, &sample.query, &cand.tokens)?;
    let t_len = cand.tokens.len();
    let inv_t = 1.0 / t_len as f64;
    let vocab_size = model.vocab.size();
    let ctx_len = trace.ctx.len();
    let mut d_logits = Tensor::zeros(ctx_len, vocab_size);
    let mut d_values = vec![0.0; ctx_len];
    let mut new_logps = Vec::with_capacity(t_len);
    let mut values = Vec::with_capacity(t_len);
    let mut entropies = Vec::with_capacity(t_len);

    for (t, &tok) in cand.tokens.iter().enumerate() {
        let tok = tok as usize;
        let probs = softmax(trace.step_logits(t));
        let logp = probs[tok].ln();
        let ratio = (logp - cand.old_logps[t]).exp();
        if !ratio.is_finite() {
            return Err(TrainError::Diverged(format!("non-finite ratio at step {t}")));
        }
        let adv = cand.advantages[t];
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * adv;
        // Gradient flows through the ratio only when the unclipped branch is
        // the minimum (ties included); in the clipped regime it is zero.
        let d_logp = if unclipped <= clipped { ratio * adv } else { 0.0 };

        let entropy = -probs
            .iter()
            .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
            .sum::<f64>();
        let value = trace.step_value(t);
        new_logps.push(logp);
        values.push(value);
        entropies.push(entropy);

        // d(-J)/dlogits at this step's prediction row.
        let row = d_logits.row_mut(trace.sep_pos() + t);
        for (j, (dst, &p)) in row.iter_mut().zip(&probs).enumerate() {
            let mut d_j = 0.0;
            // Clip term: d logp / dz_j = onehot - p.
            d_j += d_logp * (((j == tok) as u8 as f64) - p);
            // Entropy bonus: dH/dz_j = -p_j (ln p_j + H).
            if p > 0.0 {
                d_j += cfg.c3 * (-p * (p.ln() + entropy));
            }
            *dst = -scale * inv_t * d_j;
        }
        // Value loss: d(-J)/dv = c2 * 2 (v - G) / T.
        d_values[trace.sep_pos() + t] = scale * inv_t * cfg.c2 * 2.0 * (value - cand.returns[t]);
    }

    let objective = ppo_objective(
        &new_logps,
        &cand.old_logps,
        &cand.advantages,
        &values,
        &cand.returns,
        &entropies,
        cand.rewards.combined(),
        cfg,
    )?;
    model.backward(enc, &trace, &d_logits, &d_values, grads);
    Ok(objective)
}

fn dev_eval(model: &PolicyModel, dev: &[Sample], cfg: &RlConfig) -> Result<(f64, f64), TrainError> {
    if dev.is_empty() {
        return Ok((0.0, 0.0));
    }
    let subset = &dev[..dev.len().min(cfg.dev_eval_cap)];
    let responses: Result<Vec<Response>, TrainError> = subset
        .par_iter()
        .map(|s| {
            let tokens = greedy_decode(model, &s.image, &s.query, cfg.max_response_len)
                .map_err(|e| TrainError::Model(e.to_string()))?;
            Ok(model.vocab.parse_response(&tokens))
        })
        .collect();
    let responses = responses?;
    Ok((
        acc_metric(&responses, subset, &model.vocab),
        mean_iou_metric(&responses, subset),
    ))
}

/// Run the reward-tuning stage in place. The model should already be
/// instruction-tuned (stage order is enforced by the CLI).
pub fn run_rl(
    model: &mut PolicyModel,
    train: &[Sample],
    dev: &[Sample],
    cfg: &RlConfig,
    judge: &dyn JudgeBackend,
) -> Result<Vec<RlIterationMetrics>, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::BadConfig("train split is empty".into()));
    }
    let mut opt = super::adam::Adam::new(&model.params);
    let mut metrics: Vec<RlIterationMetrics> = Vec::new();
    let mut iteration = 0usize;
    let (mut dev_acc, mut dev_iou) = (f64::NAN, f64::NAN);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1000 + epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_queries) {
            // Rollout and reward scoring on the frozen snapshot.
            let groups: Result<Vec<RolloutGroup>, TrainError> = batch
                .par_iter()
                .map(|&idx| {
                    let group_seed = mix_seed(mix_seed(cfg.seed, epoch as u64), idx as u64);
                    rollout_group(model, &train[idx], idx, cfg, judge, group_seed)
                })
                .collect();
            let mut groups = groups?;
            for group in groups.iter_mut() {
                let mut breakdowns: Vec<RewardBreakdown> =
                    group.candidates.iter().map(|c| c.rewards.clone()).collect();
                normalize_and_aggregate(&mut breakdowns).expect("group is non-empty");
                for (cand, b) in group.candidates.iter_mut().zip(breakdowns) {
                    cand.rewards = b;
                }
                compute_returns_and_advantages(group, cfg.gamma);
            }

            // Update pass.
            let n_cands = (groups.len() * cfg.candidates_per_query) as f64;
            let scale = 1.0 / n_cands;
            let chunk_size = groups.len().div_ceil(GRAD_CHUNKS);
            let partials: Vec<Result<(ParamSet, f64), TrainError>> = groups
                .par_chunks(chunk_size)
                .map(|chunk| {
                    let mut grads = model.params.zeros_like();
                    let mut obj = 0.0;
                    for group in chunk {
                        let sample = &train[group.sample_index];
                        let enc = model.encode_image(&sample.image, true)?;
                        for cand in &group.candidates {
                            obj += candidate_update(model, &enc, sample, cand, cfg, scale, &mut grads)?;
                        }
                    }
                    Ok((grads, obj))
                })
                .collect();
            let mut grads = model.params.zeros_like();
            let mut objective = 0.0;
            for part in partials {
                let (g, o) = part?;
                grads.add_assign(&g);
                objective += o;
            }
            objective /= n_cands;
            if !objective.is_finite() {
                return Err(TrainError::Diverged(format!(
                    "non-finite objective at iteration {iteration}"
                )));
            }
            opt.step(&mut model.params, &grads, cfg.learning_rate, cfg.weight_decay);

            let all: Vec<&Candidate> = groups.iter().flat_map(|g| g.candidates.iter()).collect();
            let mean = |f: &dyn Fn(&Candidate) -> f64| {
                all.iter().map(|c| f(c)).sum::<f64>() / all.len() as f64
            };
            if iteration % cfg.dev_eval_every == 0 {
                let (a, i) = dev_eval(model, dev, cfg)?;
                dev_acc = a;
                dev_iou = i;
            }
            metrics.push(RlIterationMetrics {
                iteration,
                mean_r_llm: mean(&|c| c.rewards.r_llm),
                mean_r_loc: mean(&|c| c.rewards.r_loc),
                mean_r_att: mean(&|c| c.rewards.r_att),
                mean_r_combined: mean(&|c| c.rewards.combined()),
                objective,
                dev_acc,
                dev_mean_iou: dev_iou,
            });
            iteration += 1;
        }
    }
    // Final dev numbers on the trained model.
    if !dev.is_empty() {
        let (a, i) = dev_eval(model, dev, cfg)?;
        if let Some(last) = metrics.last_mut() {
            last.dev_acc = a;
            last.dev_mean_iou = i;
        }
    }
    Ok(metrics)
}
