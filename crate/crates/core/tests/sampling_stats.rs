//! Statistical check: with top_p = 1 and temperature = 1, sampling is plain
//! ancestral sampling from the model's softmax.

mod common;

use lesionlab_core::model::sampling::{sample_one, DecodeParams};
use lesionlab_core::model::tensor::softmax;
use lesionlab_core::synthworld::{generate_dataset, WorldConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn ancestral_sampling_matches_softmax_frequencies() {
    let world = WorldConfig {
        height_patches: 4,
        width_patches: 4,
        region_min: 2,
        region_max: 2,
        seed: 55,
        ..WorldConfig::default()
    };
    let sample = generate_dataset(&world, 1).unwrap().remove(0);
    // Frozen random-init model; only the first sampled token matters.
    let model = common::model_for_world(&world, 16, 2, 1, 1, 24, 23);
    let enc = model.encode_image(&sample.image, false).unwrap();
    let trace = model.decode(&enc, &sample.query, &[]).unwrap();
    let probs = softmax(trace.next_logits());

    let params = DecodeParams {
        temperature: 1.0,
        top_p: 1.0,
        max_response_len: 1,
        greedy: false,
    };
    const DRAWS: usize = 20_000;
    let mut counts = vec![0usize; probs.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..DRAWS {
        let seq = sample_one(&model, &enc, &sample.query, &params, &mut rng).unwrap();
        counts[seq.tokens[0] as usize] += 1;
    }

    // Chi-square against the model distribution, merging bins with small
    // expected counts into one.
    let mut chi2 = 0.0;
    let mut dof = 0usize;
    let mut rest_obs = 0.0;
    let mut rest_exp = 0.0;
    for (tok, &p) in probs.iter().enumerate() {
        let expected = p * DRAWS as f64;
        if expected >= 5.0 {
            let diff = counts[tok] as f64 - expected;
            chi2 += diff * diff / expected;
            dof += 1;
        } else {
            rest_obs += counts[tok] as f64;
            rest_exp += expected;
        }
    }
    if rest_exp > 0.0 {
        let diff = rest_obs - rest_exp;
        chi2 += diff * diff / rest_exp.max(1e-9);
        dof += 1;
    }
    assert!(dof > 2, "need enough bins, got {dof}");
    let dist = ChiSquared::new((dof - 1) as f64).unwrap();
    let p_value = 1.0 - dist.cdf(chi2);
    assert!(
        p_value > 0.01,
        "chi2 = {chi2:.2} with {dof} bins gives p = {p_value:.5}"
    );
}
