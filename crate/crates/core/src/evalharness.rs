//! Metrics and analysis suites: category accuracy, mean IoU, the
//! hint-injection ablation curve, per-split evaluation reports, and the
//! held-out-family generalization suite.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::sampling::greedy_decode;
use crate::model::PolicyModel;
use crate::rewards::localization_reward;
use crate::sample::{Response, Sample, TAG_TEST};
use crate::synthworld::{apply_split, generate_dataset, make_iou_hint, SplitPlan, WorldConfig, WorldError};
use crate::train::TrainError;
use crate::vocab::Vocab;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation inputs misaligned: {0}")]
    Misaligned(String),
    #[error("decode failed: {0}")]
    Decode(String),
    #[error("world error: {0}")]
    World(#[from] WorldError),
    #[error("training failed for run {label}: {source}")]
    Training {
        label: String,
        #[source]
        source: TrainError,
    },
}

/// Fraction of responses whose text contains the ground-truth category name
/// as consecutive whole tokens, case-insensitively.
pub fn acc_metric(responses: &[Response], samples: &[Sample], vocab: &Vocab) -> f64 {
    assert_eq!(responses.len(), samples.len(), "aligned lists required");
    if samples.is_empty() {
        return 0.0;
    }
    let hits = responses
        .iter()
        .zip(samples)
        .filter(|(r, s)| {
            let name = vocab.category_name(s.gt_category).expect("valid category");
            text_contains_name(&vocab.decode_text(&r.tokens), &name)
        })
        .count();
    hits as f64 / samples.len() as f64
}

/// Whole-token, case-insensitive containment of a (possibly multi-word)
/// name in a text.
pub fn text_contains_name(text: &str, name: &str) -> bool {
    let words: Vec<String> = text.split_whitespace().map(|w| w.to_lowercase()).collect();
    let target: Vec<String> = name.split_whitespace().map(|w| w.to_lowercase()).collect();
    if target.is_empty() || words.len() < target.len() {
        return false;
    }
    words.windows(target.len()).any(|w| w == target.as_slice())
}

/// Mean localization reward over the set; a missing bbox counts 0.
pub fn mean_iou_metric(responses: &[Response], samples: &[Sample]) -> f64 {
    assert_eq!(responses.len(), samples.len(), "aligned lists required");
    if samples.is_empty() {
        return 0.0;
    }
    let total: f64 = responses
        .iter()
        .zip(samples)
        .map(|(r, s)| localization_reward(r.parsed_bbox.as_ref(), &s.gt_bbox))
        .sum();
    total / samples.len() as f64
}

/// Teacher-forced token accuracy of a frozen checkpoint over samples'
/// reference responses.
pub fn teacher_forced_token_accuracy(
    model: &PolicyModel,
    samples: &[Sample],
) -> Result<f64, EvalError> {
    let counts: Result<Vec<(usize, usize)>, EvalError> = samples
        .par_iter()
        .map(|s| {
            let enc = model
                .encode_image(&s.image, false)
                .map_err(|e| EvalError::Decode(e.to_string()))?;
            let trace = model
                .decode(&enc, &s.query, &s.reference_response)
                .map_err(|e| EvalError::Decode(e.to_string()))?;
            let mut correct = 0;
            for (t, &target) in s.reference_response.iter().enumerate() {
                let logits = trace.step_logits(t);
                let argmax = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap();
                if argmax == target as usize {
                    correct += 1;
                }
            }
            Ok((correct, s.reference_response.len()))
        })
        .collect();
    let counts = counts?;
    let correct: usize = counts.iter().map(|c| c.0).sum();
    let total: usize = counts.iter().map(|c| c.1).sum();
    Ok(correct as f64 / total.max(1) as f64)
}

/// Greedy-decode and parse a batch of samples on a frozen checkpoint.
pub fn decode_responses(
    model: &PolicyModel,
    samples: &[Sample],
    max_len: usize,
) -> Result<Vec<Response>, EvalError> {
    samples
        .par_iter()
        .map(|s| {
            let tokens = greedy_decode(model, &s.image, &s.query, max_len)
                .map_err(|e| EvalError::Decode(e.to_string()))?;
            Ok(model.vocab.parse_response(&tokens))
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx).powi(2);
        vy += (ry[i] - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub target_iou: f64,
    pub acc: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Hint-injection ablation: for each target IoU, build a hint box with that
/// IoU against ground truth, append it to the query, decode greedily, and
/// record accuracy. Samples whose hint target is unreachable inside the grid
/// are skipped and counted. Rows come back sorted by target.
pub fn run_injection_ablation(
    model: &PolicyModel,
    samples: &[Sample],
    iou_grid: &[f64],
    max_len: usize,
) -> Result<Vec<CurveRow>, EvalError> {
    let mut targets = iou_grid.to_vec();
    targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut rows = Vec::with_capacity(targets.len());
    for &target in &targets {
        let mut hinted = Vec::new();
        let mut kept = Vec::new();
        let mut skipped = 0usize;
        for s in samples {
            let grid_w = s.image.width_patches as f64;
            let grid_h = s.image.height_patches as f64;
            match make_iou_hint(&s.gt_bbox, target, grid_w, grid_h) {
                Ok(hint) => {
                    let mut q = s.query.clone();
                    q.extend(
                        model
                            .vocab
                            .encode_hint(&hint)
                            .map_err(|e| EvalError::Decode(e.to_string()))?,
                    );
                    let mut sample = s.clone();
                    sample.query = q;
                    hinted.push(sample);
                    kept.push(s.clone());
                }
                Err(WorldError::IouTargetUnreachable { .. }) => skipped += 1,
                Err(e) => return Err(EvalError::World(e)),
            }
        }
        let responses = decode_responses(model, &hinted, max_len)?;
        rows.push(CurveRow {
            target_iou: target,
            acc: acc_metric(&responses, &kept, &model.vocab),
            evaluated: kept.len(),
            skipped,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub count: usize,
    pub acc: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: usize,
    pub name: String,
    pub count: usize,
    pub acc: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_split: Vec<SplitMetrics>,
    pub per_category: Vec<CategoryMetrics>,
    pub curve: Vec<CurveRow>,
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    /// Plain-text summary table, one row per split then per category.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24} {:>8} {:>8} {:>10}\n", "split", "n", "acc", "mean_iou"));
        for s in &self.per_split {
            out.push_str(&format!(
                "{:<24} {:>8} {:>8.4} {:>10.4}\n",
                s.split, s.count, s.acc, s.mean_iou
            ));
        }
        for c in &self.per_category {
            out.push_str(&format!(
                "{:<24} {:>8} {:>8.4} {:>10.4}\n",
                format!("category/{}", c.name),
                c.count,
                c.acc,
                c.mean_iou
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,key,count,acc,mean_iou\n");
        for s in &self.per_split {
            out.push_str(&format!(
                "split,{},{},{:.6},{:.6}\n",
                s.split, s.count, s.acc, s.mean_iou
            ));
        }
        for c in &self.per_category {
            out.push_str(&format!(
                "category,{},{},{:.6},{:.6}\n",
                c.name, c.count, c.acc, c.mean_iou
            ));
        }
        for r in &self.curve {
            out.push_str(&format!(
                "curve,{:.2},{},{:.6},{}\n",
                r.target_iou, r.evaluated, r.acc, r.skipped
            ));
        }
        out
    }
}

/// Evaluate a frozen checkpoint per split tag and per category. The report is
/// a pure function of (checkpoint, samples).
pub fn evaluate(
    model: &PolicyModel,
    samples: &[Sample],
    max_len: usize,
) -> Result<EvalReport, EvalError> {
    let responses = decode_responses(model, samples, max_len)?;
    let mut split_groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        for tag in &s.split_tags {
            split_groups.entry(tag.clone()).or_default().push(i);
        }
        if s.split_tags.is_empty() {
            split_groups.entry("all".into()).or_default().push(i);
        }
    }
    let metrics_for = |ids: &[usize]| {
        let rs: Vec<Response> = ids.iter().map(|&i| responses[i].clone()).collect();
        let ss: Vec<Sample> = ids.iter().map(|&i| samples[i].clone()).collect();
        (
            acc_metric(&rs, &ss, &model.vocab),
            mean_iou_metric(&rs, &ss),
        )
    };
    let per_split = split_groups
        .iter()
        .map(|(tag, ids)| {
            let (acc, miou) = metrics_for(ids);
            SplitMetrics {
                split: tag.clone(),
                count: ids.len(),
                acc,
                mean_iou: miou,
            }
        })
        .collect();
    let mut cat_groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        cat_groups.entry(s.gt_category).or_default().push(i);
    }
    let per_category = cat_groups
        .iter()
        .map(|(&cat, ids)| {
            let (acc, miou) = metrics_for(ids);
            CategoryMetrics {
                category: cat,
                name: model.vocab.category_name(cat).expect("valid category"),
                count: ids.len(),
                acc,
                mean_iou: miou,
            }
        })
        .collect();
    Ok(EvalReport {
        per_split,
        per_category,
        curve: Vec::new(),
        metadata: BTreeMap::new(),
    })
}

/// The three checkpoints a generalization run compares.
pub struct TrainedTriple {
    pub untrained: PolicyModel,
    pub sft_only: PolicyModel,
    pub full: PolicyModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRow {
    pub plan: String,
    pub slice: String,
    pub slice_size: usize,
    pub acc_full: f64,
    pub acc_sft_only: f64,
    pub acc_untrained: f64,
    pub iou_full: f64,
    pub iou_sft_only: f64,
    pub iou_untrained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GenReport {
    pub rows: Vec<GenRow>,
    pub audit_log: Vec<String>,
}

impl GenReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "plan,slice,n,acc_full,acc_sft_only,acc_untrained,iou_full,iou_sft_only,iou_untrained\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.plan,
                r.slice,
                r.slice_size,
                r.acc_full,
                r.acc_sft_only,
                r.acc_untrained,
                r.iou_full,
                r.iou_sft_only,
                r.iou_untrained
            ));
        }
        out
    }
}

/// Train under each exclusion plan and evaluate the trained/sft-only/
/// untrained checkpoints on the excluded slices. The trainer closure
/// receives (train split, dev split) and returns the three checkpoints.
pub fn run_generalization_suite(
    world: &WorldConfig,
    n_samples: usize,
    plans: &[(String, SplitPlan)],
    max_len: usize,
    trainer: &(dyn Fn(&[Sample], &[Sample]) -> Result<TrainedTriple, TrainError> + Sync),
) -> Result<GenReport, EvalError> {
    if plans.is_empty() {
        return Err(EvalError::Misaligned("need at least one held-out plan".into()));
    }
    let samples = generate_dataset(world, n_samples)?;
    let mut report = GenReport::default();
    for (label, plan) in plans {
        let tagged = apply_split(&samples, plan, world)?;
        let train: Vec<Sample> = tagged
            .iter()
            .filter(|s| s.has_tag(crate::sample::TAG_TRAIN))
            .cloned()
            .collect();
        let dev: Vec<Sample> = tagged
            .iter()
            .filter(|s| s.has_tag(TAG_TEST) && !is_heldout(s))
            .cloned()
            .collect();
        let leaked = train.iter().filter(|s| is_heldout(s)).count();
        report.audit_log.push(format!(
            "plan={label} train={} dev={} heldout_in_train={leaked}",
            train.len(),
            dev.len()
        ));
        let triple = trainer(&train, &dev).map_err(|source| EvalError::Training {
            label: label.clone(),
            source,
        })?;

        let mut slices: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
        for s in tagged.iter().filter(|s| is_heldout(s)) {
            for tag in &s.split_tags {
                if tag.starts_with("heldout") {
                    slices.entry(tag.clone()).or_default().push(s.clone());
                }
            }
        }
        for (slice, members) in slices {
            let eval_on = |model: &PolicyModel| -> Result<(f64, f64), EvalError> {
                let responses = decode_responses(model, &members, max_len)?;
                Ok((
                    acc_metric(&responses, &members, &model.vocab),
                    mean_iou_metric(&responses, &members),
                ))
            };
            let (acc_full, iou_full) = eval_on(&triple.full)?;
            let (acc_sft, iou_sft) = eval_on(&triple.sft_only)?;
            let (acc_un, iou_un) = eval_on(&triple.untrained)?;
            report.rows.push(GenRow {
                plan: label.clone(),
                slice,
                slice_size: members.len(),
                acc_full,
                acc_sft_only: acc_sft,
                acc_untrained: acc_un,
                iou_full,
                iou_sft_only: iou_sft,
                iou_untrained: iou_un,
            });
        }
    }
    Ok(report)
}

fn is_heldout(s: &Sample) -> bool {
    s.split_tags.iter().any(|t| t.starts_with("heldout"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::generate_dataset;

    fn world() -> WorldConfig {
        WorldConfig {
            seed: 21,
            ..WorldConfig::default()
        }
    }

    fn response_from_text(vocab: &Vocab, text: &str) -> Response {
        let tokens: Vec<u32> = text
            .split_whitespace()
            .filter_map(|w| vocab.token(w).ok())
            .collect();
        vocab.parse_response(&tokens)
    }

    #[test]
    fn acc_metric_counts_whole_token_category_mentions() {
        let cfg = world();
        let vocab = cfg.vocab();
        let samples = generate_dataset(&cfg, 4).unwrap();
        // Hit pattern {1, 0, 1, 1} -> 0.75.
        let responses: Vec<Response> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i == 1 {
                    response_from_text(&vocab, "describe the image")
                } else {
                    let name = vocab.category_name(s.gt_category).unwrap();
                    response_from_text(&vocab, &format!("abnormality present category {name}"))
                }
            })
            .collect();
        let acc = acc_metric(&responses, &samples, &vocab);
        assert!((acc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn acc_metric_empty_response_counts_zero() {
        let cfg = world();
        let vocab = cfg.vocab();
        let samples = generate_dataset(&cfg, 2).unwrap();
        let responses = vec![
            Response {
                tokens: vec![],
                parsed_category: None,
                parsed_bbox: None,
                schema_valid: false,
            };
            2
        ];
        assert_eq!(acc_metric(&responses, &samples, &vocab), 0.0);
    }

    /// Independent substring-based oracle: lowercase, pad with spaces, and
    /// search for the padded name.
    fn substring_oracle_miss_rate(texts: &[String], names: &[String]) -> f64 {
        let misses = texts
            .iter()
            .zip(names)
            .filter(|(t, n)| {
                let padded = format!(" {} ", t.to_lowercase());
                !padded.contains(&format!(" {} ", n.to_lowercase()))
            })
            .count();
        misses as f64 / texts.len() as f64
    }

    #[test]
    fn acc_metric_agrees_with_substring_oracle() {
        let cfg = world();
        let vocab = cfg.vocab();
        let samples = generate_dataset(&cfg, 24).unwrap();
        let responses: Vec<Response> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i % 3 == 0 {
                    response_from_text(&vocab, "bbox 1 1 3 3")
                } else {
                    vocab.parse_response(&s.reference_response)
                }
            })
            .collect();
        let texts: Vec<String> = responses.iter().map(|r| vocab.decode_text(&r.tokens)).collect();
        let names: Vec<String> = samples
            .iter()
            .map(|s| vocab.category_name(s.gt_category).unwrap())
            .collect();
        let acc = acc_metric(&responses, &samples, &vocab);
        let oracle = 1.0 - substring_oracle_miss_rate(&texts, &names);
        assert!((acc - oracle).abs() < 1e-12);
    }

    #[test]
    fn mean_iou_examples() {
        let cfg = world();
        let vocab = cfg.vocab();
        let samples = generate_dataset(&cfg, 2).unwrap();
        let perfect: Vec<Response> = samples
            .iter()
            .map(|s| vocab.parse_response(&s.reference_response))
            .collect();
        assert!((mean_iou_metric(&perfect, &samples) - 1.0).abs() < 1e-12);
        let missing = vec![
            Response {
                tokens: vec![],
                parsed_category: None,
                parsed_bbox: None,
                schema_valid: false,
            };
            2
        ];
        assert_eq!(mean_iou_metric(&missing, &samples), 0.0);
        let mixed = vec![perfect[0].clone(), missing[0].clone()];
        assert!((mean_iou_metric(&mixed, &samples) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
    }

    #[test]
    fn injection_ablation_empty_grid_is_empty_and_rows_sorted() {
        let cfg = world();
        let model = PolicyModel::new(
            crate::model::ModelConfig {
                feature_dim: cfg.feature_dim(),
                max_patches: 100,
                embed_dim: 16,
                num_heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                ff_dim: 16,
                ..Default::default()
            },
            cfg.vocab(),
        )
        .unwrap();
        let samples = generate_dataset(&cfg, 6).unwrap();
        let rows = run_injection_ablation(&model, &samples, &[], 12).unwrap();
        assert!(rows.is_empty());
        let rows = run_injection_ablation(&model, &samples, &[0.8, 0.2, 1.0], 12).unwrap();
        let targets: Vec<f64> = rows.iter().map(|r| r.target_iou).collect();
        assert_eq!(targets, vec![0.2, 0.8, 1.0]);
        for r in &rows {
            assert_eq!(r.evaluated + r.skipped, 6);
        }
    }

    #[test]
    fn evaluate_is_pure() {
        let cfg = world();
        let model = PolicyModel::new(
            crate::model::ModelConfig {
                feature_dim: cfg.feature_dim(),
                max_patches: 100,
                embed_dim: 16,
                num_heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                ff_dim: 16,
                ..Default::default()
            },
            cfg.vocab(),
        )
        .unwrap();
        let samples = generate_dataset(&cfg, 8).unwrap();
        let a = evaluate(&model, &samples, 12).unwrap();
        let b = evaluate(&model, &samples, 12).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_split.len(), 1, "untagged samples group under 'all'");
    }
}
