//! Stage 1: supervised instruction tuning on canonical diagnosis responses.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::tensor::softmax;
use crate::model::{ParamSet, PolicyModel, Tensor};
use crate::sample::Sample;
use crate::synthworld::mix_seed;

use super::adam::Adam;
use super::TrainError;

/// Fixed parallel-accumulation fan-out so gradient sums are bit-identical
/// regardless of thread count.
pub(crate) const GRAD_CHUNKS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    /// Desk-scale default; the paper-scale recipe for finetuning a large
    /// pretrained backbone uses 1e-5.
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Desk default 32 (the paper-scale value is 128).
    pub batch_size: usize,
    pub epochs: usize,
    pub linear_lr_decay: bool,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.5e-3,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 4,
            linear_lr_decay: true,
            seed: 2,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig("learning_rate must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::BadConfig("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftEpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub token_accuracy: f64,
}

/// Teacher-forced cross-entropy of the reference response:
/// `L = -sum_t log p(reference[t])`. Pure scoring variant without gradients.
pub fn sft_loss(model: &PolicyModel, sample: &Sample) -> Result<f64, TrainError> {
    if sample.reference_response.is_empty() {
        return Err(TrainError::BadConfig("reference response must be non-empty".into()));
    }
    let enc = model.encode_image(&sample.image, false)?;
    let trace = model.decode(&enc, &sample.query, &sample.reference_response)?;
    let mut loss = 0.0;
    for (t, &target) in sample.reference_response.iter().enumerate() {
        let probs = softmax(trace.step_logits(t));
        loss -= probs[target as usize].ln();
    }
    Ok(loss)
}

/// One sample's loss plus accumulated gradients (d_logits = softmax - onehot
/// at every prediction position). Returns (loss, correct tokens, tokens).
fn sft_backward(
    model: &PolicyModel,
    sample: &Sample,
    scale: f64,
    grads: &mut ParamSet,
) -> Result<(f64, usize, usize), TrainError> {
    let enc = model.encode_image(&sample.image, true)?;
    let trace = model.decode(&enc, &sample.query, &sample.reference_response)?;
    let l = trace.ctx.len();
    let vocab_size = model.vocab.size();
    let mut d_logits = Tensor::zeros(l, vocab_size);
    let d_values = vec![0.0; l];
    let mut loss = 0.0;
    let mut correct = 0;
    for (t, &target) in sample.reference_response.iter().enumerate() {
        let logits = trace.step_logits(t);
        let probs = softmax(logits);
        loss -= probs[target as usize].ln();
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        if argmax == target as usize {
            correct += 1;
        }
        let row = d_logits.row_mut(trace.sep_pos() + t);
        for (dst, &p) in row.iter_mut().zip(&probs) {
            *dst = scale * p;
        }
        row[target as usize] -= scale;
    }
    model.backward(&enc, &trace, &d_logits, &d_values, grads);
    Ok((loss, correct, sample.reference_response.len()))
}

/// Run supervised tuning in place. Deterministic given the seed; epoch order
/// is reshuffled per epoch and gradients are averaged over each batch.
pub fn run_sft(
    model: &mut PolicyModel,
    train: &[Sample],
    cfg: &SftConfig,
) -> Result<Vec<SftEpochMetrics>, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::BadConfig("train split is empty".into()));
    }
    let mut opt = Adam::new(&model.params);
    let total_steps = (cfg.epochs * train.len().div_ceil(cfg.batch_size)).max(1);
    let mut step = 0usize;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            // Fixed-fan-out parallel accumulation, folded in chunk order.
            let chunk_size = batch.len().div_ceil(GRAD_CHUNKS);
            let partials: Vec<Result<(ParamSet, f64, usize, usize), TrainError>> = batch
                .par_chunks(chunk_size)
                .map(|ids| {
                    let mut grads = model.params.zeros_like();
                    let mut loss = 0.0;
                    let mut correct = 0;
                    let mut tokens = 0;
                    for &i in ids {
                        let (l, c, n) = sft_backward(model, &train[i], scale, &mut grads)?;
                        loss += l;
                        correct += c;
                        tokens += n;
                    }
                    Ok((grads, loss, correct, tokens))
                })
                .collect();
            let mut grads = model.params.zeros_like();
            let mut batch_loss = 0.0;
            for part in partials {
                let (g, l, c, n) = part?;
                grads.add_assign(&g);
                batch_loss += l;
                epoch_correct += c;
                epoch_tokens += n;
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged(format!(
                    "non-finite loss at epoch {epoch} step {step}"
                )));
            }
            epoch_loss += batch_loss;
            let lr = if cfg.linear_lr_decay {
                cfg.learning_rate * (1.0 - step as f64 / total_steps as f64)
            } else {
                cfg.learning_rate
            };
            opt.step(&mut model.params, &grads, lr, cfg.weight_decay);
            step += 1;
        }
        metrics.push(SftEpochMetrics {
            epoch,
            mean_loss: epoch_loss / train.len() as f64,
            token_accuracy: epoch_correct as f64 / epoch_tokens.max(1) as f64,
        });
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthworld::{generate_dataset, WorldConfig};

    fn tiny_setup(n: usize) -> (PolicyModel, Vec<Sample>) {
        let world = WorldConfig {
            height_patches: 6,
            width_patches: 6,
            region_min: 2,
            region_max: 3,
            distractor_count: 0,
            seed: 3,
            ..WorldConfig::default()
        };
        let samples = generate_dataset(&world, n).unwrap();
        let cfg = ModelConfig {
            embed_dim: 16,
            num_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_dim: 24,
            feature_dim: world.feature_dim(),
            max_patches: 36,
            max_ctx: 32,
            init_seed: 5,
            init_std: 0.05,
        };
        let model = PolicyModel::new(cfg, world.vocab()).unwrap();
        (model, samples)
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let (mut model, samples) = tiny_setup(8);
        let before = model.params.clone();
        let cfg = SftConfig {
            epochs: 0,
            ..SftConfig::default()
        };
        let metrics = run_sft(&mut model, &samples, &cfg).unwrap();
        assert!(metrics.is_empty());
        assert_eq!(model.params, before);
    }

    #[test]
    fn same_seed_gives_identical_training() {
        let cfg = SftConfig {
            epochs: 2,
            batch_size: 4,
            ..SftConfig::default()
        };
        let (mut m1, samples) = tiny_setup(12);
        let (mut m2, _) = tiny_setup(12);
        let a = run_sft(&mut m1, &samples, &cfg).unwrap();
        let b = run_sft(&mut m2, &samples, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(m1.params, m2.params);
    }

    #[test]
    fn loss_decreases_on_a_tiny_dataset() {
        let (mut model, samples) = tiny_setup(16);
        let cfg = SftConfig {
            epochs: 3,
            batch_size: 8,
            ..SftConfig::default()
        };
        let metrics = run_sft(&mut model, &samples, &cfg).unwrap();
        assert!(metrics.last().unwrap().mean_loss < metrics[0].mean_loss);
    }

    #[test]
    fn sft_loss_rejects_empty_reference() {
        let (model, samples) = tiny_setup(1);
        let mut s = samples[0].clone();
        s.reference_response.clear();
        assert!(sft_loss(&model, &s).is_err());
    }
}
