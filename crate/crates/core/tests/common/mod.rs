//! Shared helpers for the integration and acceptance suites.
#![allow(dead_code)]

use lesionlab_core::model::tensor::softmax;
use lesionlab_core::model::{ModelConfig, ParamSet, PolicyModel, Tensor};
use lesionlab_core::sample::Sample;
use lesionlab_core::synthworld::WorldConfig;

/// Model configuration sized for a world (feature dim, patch budget, context
/// budget derived from the grid and schema lengths).
pub fn model_for_world(world: &WorldConfig, embed_dim: usize, heads: usize, enc: usize, dec: usize, ff: usize, seed: u64) -> PolicyModel {
    let cfg = ModelConfig {
        embed_dim,
        num_heads: heads,
        encoder_layers: enc,
        decoder_layers: dec,
        ff_dim: ff,
        feature_dim: world.feature_dim(),
        max_patches: world.height_patches * world.width_patches,
        max_ctx: 40,
        init_seed: seed,
        init_std: 0.02,
    };
    PolicyModel::new(cfg, world.vocab()).expect("valid model config")
}

/// Teacher-forced cross-entropy over the reference response plus, when
/// `value_targets` is set, a value-head MSE term. Used as the loss under
/// finite-difference checks.
pub fn test_loss(model: &PolicyModel, sample: &Sample, value_targets: Option<&[f64]>) -> f64 {
    let (_, trace) = model
        .forward(&sample.image, &sample.query, &sample.reference_response)
        .expect("forward");
    let mut loss = 0.0;
    for (t, &target) in sample.reference_response.iter().enumerate() {
        let probs = softmax(trace.step_logits(t));
        loss -= probs[target as usize].ln();
    }
    if let Some(targets) = value_targets {
        for (t, &g) in targets.iter().enumerate() {
            let v = trace.step_value(t);
            loss += (v - g) * (v - g);
        }
    }
    loss
}

/// Analytic gradients of [`test_loss`] via the model's backward pass.
pub fn test_loss_grads(model: &PolicyModel, sample: &Sample, value_targets: Option<&[f64]>) -> ParamSet {
    let (enc, trace) = model
        .forward(&sample.image, &sample.query, &sample.reference_response)
        .expect("forward");
    let l = trace.ctx.len();
    let mut d_logits = Tensor::zeros(l, model.vocab.size());
    let mut d_values = vec![0.0; l];
    for (t, &target) in sample.reference_response.iter().enumerate() {
        let probs = softmax(trace.step_logits(t));
        let row = d_logits.row_mut(trace.sep_pos() + t);
        row.copy_from_slice(&probs);
        row[target as usize] -= 1.0;
    }
    if let Some(targets) = value_targets {
        for (t, &g) in targets.iter().enumerate() {
            let v = trace.step_value(t);
            d_values[trace.sep_pos() + t] = 2.0 * (v - g);
        }
    }
    let mut grads = model.params.zeros_like();
    model.backward(&enc, &trace, &d_logits, &d_values, &mut grads);
    grads
}

pub struct GradCheckReport {
    pub checked_entries: usize,
    pub worst_rel_err: f64,
    pub worst_location: String,
}

/// Central finite differences on sampled entries of every parameter tensor.
/// Returns the worst relative error observed.
pub fn gradcheck(
    model: &mut PolicyModel,
    sample: &Sample,
    value_targets: Option<&[f64]>,
    entries_per_tensor: usize,
    eps: f64,
) -> GradCheckReport {
    let analytic = test_loss_grads(model, sample, value_targets);
    let names = model.params.names();
    let mut worst = 0.0f64;
    let mut worst_loc = String::new();
    let mut checked = 0usize;
    for name in names {
        let len = model.params.get(&name).data.len();
        // Deterministic spread of probe indices across the tensor.
        let probes: Vec<usize> = (0..entries_per_tensor.min(len))
            .map(|k| k * len / entries_per_tensor.min(len) + (k * 7919) % (len / entries_per_tensor.min(len)).max(1))
            .map(|i| i % len)
            .collect();
        for idx in probes {
            let orig = model.params.get(&name).data[idx];
            model.params.get_mut(&name).data[idx] = orig + eps;
            let plus = test_loss(model, sample, value_targets);
            model.params.get_mut(&name).data[idx] = orig - eps;
            let minus = test_loss(model, sample, value_targets);
            model.params.get_mut(&name).data[idx] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic.get(&name).data[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            checked += 1;
            if rel > worst {
                worst = rel;
                worst_loc = format!("{name}[{idx}] fd={fd:.6e} analytic={an:.6e}");
            }
        }
    }
    GradCheckReport {
        checked_entries: checked,
        worst_rel_err: worst,
        worst_location: worst_loc,
    }
}
