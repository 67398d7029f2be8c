//! Finite-difference verification of the hand-written backprop.

mod common;

use lesionlab_core::synthworld::{generate_dataset, WorldConfig};

fn small_world() -> WorldConfig {
    WorldConfig {
        height_patches: 4,
        width_patches: 4,
        region_min: 2,
        region_max: 2,
        distractor_count: 1,
        noise_scale: 0.4,
        seed: 99,
        ..WorldConfig::default()
    }
}

#[test]
fn analytic_gradients_match_central_differences() {
    let world = small_world();
    let sample = generate_dataset(&world, 1).unwrap().remove(0);
    let mut model = common::model_for_world(&world, 8, 2, 1, 1, 12, 17);
    let report = common::gradcheck(&mut model, &sample, None, 4, 1e-5);
    assert!(report.checked_entries > 60);
    assert!(
        report.worst_rel_err < 1e-3,
        "worst {} at {}",
        report.worst_rel_err,
        report.worst_location
    );
}

#[test]
fn value_head_gradients_match_central_differences() {
    let world = small_world();
    let sample = generate_dataset(&world, 1).unwrap().remove(0);
    let mut model = common::model_for_world(&world, 8, 2, 1, 1, 12, 18);
    let targets: Vec<f64> = (0..sample.reference_response.len())
        .map(|t| 0.5 + 0.1 * t as f64)
        .collect();
    let report = common::gradcheck(&mut model, &sample, Some(&targets), 4, 1e-5);
    assert!(
        report.worst_rel_err < 1e-3,
        "worst {} at {}",
        report.worst_rel_err,
        report.worst_location
    );
}

#[test]
fn gradients_hold_on_a_two_layer_decoder() {
    let world = small_world();
    let sample = generate_dataset(&world, 1).unwrap().remove(0);
    let mut model = common::model_for_world(&world, 8, 2, 1, 2, 12, 19);
    let targets = vec![0.3; sample.reference_response.len()];
    let report = common::gradcheck(&mut model, &sample, Some(&targets), 3, 1e-5);
    assert!(
        report.worst_rel_err < 1e-3,
        "worst {} at {}",
        report.worst_rel_err,
        report.worst_location
    );
}
