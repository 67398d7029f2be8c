//! Scratch experiments for hyperparameter tuning. Ignored by default.

mod common;

use std::time::Instant;

use lesionlab_core::evalharness::{
    acc_metric, decode_responses, mean_iou_metric, teacher_forced_token_accuracy,
};
use lesionlab_core::rewards::{ReferenceJudge, RubricWeights};
use lesionlab_core::sample::{TAG_TEST, TAG_TRAIN};
use lesionlab_core::synthworld::{apply_split, generate_dataset, SplitPlan, WorldConfig};
use lesionlab_core::train::{run_rl, run_sft, RlConfig, SftConfig};

#[test]
#[ignore]
fn tune_sft() {
    let world = WorldConfig {
        seed: 7,
        region_min: 4,
        region_max: 4,
        hint_fraction: 0.25,
        distractor_count: 1,
        distractor_scale: 0.7,
        ..WorldConfig::default()
    };
    let samples = generate_dataset(&world, 1250).unwrap();
    let tagged = apply_split(&samples, &SplitPlan::default(), &world).unwrap();
    let train: Vec<_> = tagged.iter().filter(|s| s.has_tag(TAG_TRAIN)).cloned().collect();
    let test: Vec<_> = tagged.iter().filter(|s| s.has_tag(TAG_TEST)).cloned().collect();
    println!("train {} test {}", train.len(), test.len());
    for (lr, batch) in [(2e-3, 8), (2e-3, 4), (1.5e-3, 8)] {
        let t0 = Instant::now();
        let mut model = common::model_for_world(&world, 64, 4, 1, 2, 128, 42);
        let cfg = SftConfig {
            learning_rate: lr,
            batch_size: batch,
            ..SftConfig::default()
        };
        let metrics = run_sft(&mut model, &train[..1000], &cfg).unwrap();
        for m in &metrics {
            println!("lr {lr} b{batch}: epoch {} loss {:.4} tok_acc {:.4}", m.epoch, m.mean_loss, m.token_accuracy);
        }
        let tf_acc = teacher_forced_token_accuracy(&model, &train[..1000]).unwrap();
        let responses = decode_responses(&model, &test, 12).unwrap();
        let acc = acc_metric(&responses, &test, &model.vocab);
        let miou = mean_iou_metric(&responses, &test);
        println!(
            "lr {lr} b{batch}: final TF train acc {tf_acc:.4} | TEST acc {acc:.4} mean_iou {miou:.4}  elapsed {:?}",
            t0.elapsed()
        );
    }
}

#[test]
#[ignore]
fn tune_rl() {
    let world = WorldConfig {
        seed: 7,
        ..WorldConfig::default()
    };
    let samples = generate_dataset(&world, 1250).unwrap();
    let tagged = apply_split(&samples, &SplitPlan::default(), &world).unwrap();
    let train: Vec<_> = tagged.iter().filter(|s| s.has_tag(TAG_TRAIN)).cloned().collect();
    let test: Vec<_> = tagged.iter().filter(|s| s.has_tag(TAG_TEST)).cloned().collect();
    let mut model = common::model_for_world(&world, 64, 4, 1, 2, 128, 42);
    let sft_cfg = SftConfig::default();
    let t0 = Instant::now();
    run_sft(&mut model, &train[..1000], &sft_cfg).unwrap();
    println!("sft done in {:?}", t0.elapsed());
    let responses = decode_responses(&model, &test, 12).unwrap();
    let acc0 = acc_metric(&responses, &test, &model.vocab);
    let iou0 = mean_iou_metric(&responses, &test);
    println!("SFT-only: acc {acc0:.4} iou {iou0:.4}");

    let judge = ReferenceJudge::new(world.vocab(), RubricWeights::default());
    let rl_cfg = RlConfig::default();
    let t1 = Instant::now();
    let metrics = run_rl(&mut model, &train[..1000], &test, &rl_cfg, &judge).unwrap();
    println!("rl done in {:?} ({} iters)", t1.elapsed(), metrics.len());
    for m in metrics.iter().step_by(20) {
        println!(
            "iter {} r_llm {:.3} r_loc {:.3} r_att {:.3} comb {:.3} obj {:.3} dev_acc {:.3} dev_iou {:.3}",
            m.iteration, m.mean_r_llm, m.mean_r_loc, m.mean_r_att, m.mean_r_combined, m.objective, m.dev_acc, m.dev_mean_iou
        );
    }
    let responses = decode_responses(&model, &test, 12).unwrap();
    let acc1 = acc_metric(&responses, &test, &model.vocab);
    let iou1 = mean_iou_metric(&responses, &test);
    println!("after RL: acc {acc1:.4} iou {iou1:.4} (was acc {acc0:.4} iou {iou0:.4})");
}
