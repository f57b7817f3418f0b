//! Selection policies, label generation, and predictor training on tiny
//! models.

mod common;

use std::fs;

use common::{constant_target, random_image, tiny_target};
use instance_tta::dataio::gen_synthetic;
use instance_tta::imgcore::{apply_for_model, default_space, Transform};
use instance_tta::labelgen::{
    compute_transform_losses, generate_label_store, LabelStore, PerturbationPlan,
};
use instance_tta::nets::{
    batch_plan, mean_spearman, train_predictor, LossPredictor, PredictorArch, TrainConfig,
};
use instance_tta::ranking::RankingObjectiveConfig;
use instance_tta::ttapolicy::{
    oracle_select, predict, predict_fixed_ensemble, predict_instance_aware, random_select,
    select_topk, SelectionPolicy,
};
use instance_tta::Error;

fn tiny_predictor_arch() -> PredictorArch {
    PredictorArch {
        in_side: 16,
        channels: vec![4, 4, 8],
        tap_width: 4,
    }
}

#[test]
fn singleton_identity_ensemble_equals_forward() {
    let t = tiny_target(1);
    let img = random_image(16, 1);
    let e = predict_fixed_ensemble(&t, &img, &[Transform::IDENTITY]).unwrap();
    let direct = t.forward(&img).unwrap();
    let cast: Vec<f32> = e.probabilities.iter().map(|&p| p as f32).collect();
    assert_eq!(cast, direct);
    assert_eq!(e.inference_count, 1);
}

#[test]
fn two_view_ensemble_is_hand_average() {
    let t = tiny_target(2);
    let img = random_image(16, 2);
    let ts = [Transform::rotate(20.0), Transform::color(0.5)];
    let e = predict_fixed_ensemble(&t, &img, &ts).unwrap();
    let p = t
        .probs_f64(&apply_for_model(&img, &ts[0]).unwrap())
        .unwrap();
    let q = t
        .probs_f64(&apply_for_model(&img, &ts[1]).unwrap())
        .unwrap();
    for ((e, p), q) in e.probabilities.iter().zip(&p).zip(&q) {
        assert!((e - (p + q) / 2.0).abs() < 1e-12);
    }
    assert!((e.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(matches!(
        predict_fixed_ensemble(&t, &img, &[]),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn instance_aware_reduces_to_fixed_ensemble_and_singleton() {
    let space = default_space();
    let t = tiny_target(3);
    let p = LossPredictor::new(&tiny_predictor_arch(), 3, &space, 3).unwrap();
    let img = random_image(16, 3);

    let all = predict_instance_aware(&t, &p, &img, &space, space.len(), false).unwrap();
    let fixed = predict_fixed_ensemble(&t, &img, space.transforms()).unwrap();
    for (a, b) in all.probabilities.iter().zip(&fixed.probabilities) {
        assert!((a - b).abs() < 1e-6);
    }

    let one = predict_instance_aware(&t, &p, &img, &space, 1, false).unwrap();
    let best = select_topk(&p.scores(&img).unwrap(), 1).unwrap()[0];
    assert_eq!(one.chosen, vec![best]);
    let direct = t
        .probs_f64(&apply_for_model(&img, &space.transforms()[best]).unwrap())
        .unwrap();
    assert_eq!(one.probabilities, direct);

    let flip = predict_instance_aware(&t, &p, &img, &space, 2, true).unwrap();
    assert_eq!(flip.inference_count, 4);
    assert_eq!(flip.chosen.len(), 2);
}

#[test]
fn oracle_matches_brute_force() {
    let space = default_space();
    let t = tiny_target(4);
    for s in 0..5 {
        let img = random_image(16, 10 + s);
        for label in 0..3 {
            let mut best = (f64::INFINITY, usize::MAX);
            for (i, tr) in space.transforms().iter().enumerate() {
                let loss = -t.log_probs(&apply_for_model(&img, tr).unwrap()).unwrap()[label];
                if loss < best.0 {
                    best = (loss, i);
                }
            }
            assert_eq!(
                oracle_select(&t, &img, label, &space, 1).unwrap(),
                vec![best.1]
            );
            let via_policy = predict(
                &SelectionPolicy::OracleK { k: 1 },
                &t,
                None,
                &img,
                Some(label),
                &space,
                0,
            )
            .unwrap();
            assert_eq!(via_policy.chosen, vec![best.1]);
        }
    }
    assert!(matches!(
        oracle_select(&t, &random_image(16, 0), 3, &space, 1),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn random_selection_is_uniform() {
    let mut counts = [0u32; 12];
    let n = 10_000;
    for i in 0..n {
        counts[random_select(12, 1, i).unwrap()[0]] += 1;
    }
    let p = 1.0 / 12.0;
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!(
            (c as f64 - mean).abs() <= 3.0 * sd,
            "count {c} vs mean {mean:.0}"
        );
    }
}

#[test]
fn policy_checks() {
    let space = default_space();
    let t = tiny_target(5);
    let img = random_image(16, 5);
    let ours = SelectionPolicy::OursK {
        k: 1,
        compose_flip: false,
    };
    assert!(matches!(
        predict(&ours, &t, None, &img, None, &space, 0),
        Err(Error::Config(_))
    ));
    let too_big = SelectionPolicy::RandomK { k: 13, seed: 0 };
    assert!(matches!(
        predict(&too_big, &t, None, &img, None, &space, 0),
        Err(Error::Parameter(_))
    ));
    for (policy, n) in [
        (SelectionPolicy::Identity, 1),
        (SelectionPolicy::HFlipEnsemble, 2),
        (SelectionPolicy::FiveCrop, 5),
        (SelectionPolicy::TenCrop, 10),
        (SelectionPolicy::RandomK { k: 3, seed: 1 }, 3),
    ] {
        let e = predict(&policy, &t, None, &img, None, &space, 7).unwrap();
        assert_eq!(e.inference_count, n);
        assert!((e.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn transform_losses_reference_values() {
    let space = default_space();
    let img = random_image(16, 6);
    let uniform = constant_target(&[0.0, 0.0, 0.0]);
    let l = compute_transform_losses(&uniform, &img, 1, &space).unwrap();
    assert_eq!(l.len(), 12);
    assert!(l.iter().all(|v| (v - 3f64.ln()).abs() < 1e-4));

    let half = constant_target(&[2f32.ln(), 0.0, 0.0]);
    let l = compute_transform_losses(&half, &img, 0, &space).unwrap();
    assert!(l.iter().all(|v| (v - std::f64::consts::LN_2).abs() < 1e-4));

    let t = tiny_target(6);
    let l = compute_transform_losses(&t, &img, 2, &space).unwrap();
    let direct = -t.log_probs(&img).unwrap()[2];
    assert!((l[space.identity_index()] - direct).abs() < 1e-6);

    let mut unfrozen = instance_tta::nets::TargetClassifier::new(&common::tiny_arch(), 0).unwrap();
    assert!(compute_transform_losses(&unfrozen, &img, 0, &space).is_err());
    unfrozen.freeze();
    assert!(compute_transform_losses(&unfrozen, &img, 0, &space).is_ok());
}

#[test]
fn label_store_generation_is_resumable_and_parallelism_free() {
    let space = default_space();
    let t = tiny_target(7);
    let data = gen_synthetic(12, 3, 16, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let clean = dir.path().join("clean.tsv");
    let store = generate_label_store(
        &t,
        &data,
        &space,
        &PerturbationPlan::clean_only(),
        &clean,
        2,
    )
    .unwrap();
    assert_eq!(store.len(), 12);
    assert!(store.records().iter().all(|r| r.raw_losses.len() == 12));

    let plan = PerturbationPlan {
        seed: 3,
        ..PerturbationPlan::default()
    };
    let one = dir.path().join("one.tsv");
    let eight = dir.path().join("eight.tsv");
    let a = generate_label_store(&t, &data, &space, &plan, &one, 1).unwrap();
    let b = generate_label_store(&t, &data, &space, &plan, &eight, 8).unwrap();
    assert_eq!(a.len(), 48);
    assert_eq!(a.canonical_text(), b.canonical_text());
    assert_eq!(fs::read(&one).unwrap(), fs::read(&eight).unwrap());

    // rerun: nothing new, file unchanged
    let before = fs::read(&one).unwrap();
    let again = generate_label_store(&t, &data, &space, &plan, &one, 1).unwrap();
    assert_eq!(again.len(), 48);
    assert_eq!(fs::read(&one).unwrap(), before);

    // an interrupted run resumes to the same bytes
    let text = String::from_utf8(before.clone()).unwrap();
    let cut: String = text
        .lines()
        .take(20)
        .map(|l| format!("{l}\n"))
        .collect::<String>()
        + "12\tcle";
    fs::write(&one, cut).unwrap();
    generate_label_store(&t, &data, &space, &plan, &one, 1).unwrap();
    assert_eq!(
        LabelStore::load(&one).unwrap().canonical_text(),
        a.canonical_text()
    );

    // a different target is refused
    let other = tiny_target(8);
    assert!(matches!(
        generate_label_store(&other, &data, &space, &plan, &one, 1),
        Err(Error::Consistency(_))
    ));

    for r in a.records() {
        let soft = instance_tta::labelgen::normalize_relative(&r.raw_losses).unwrap();
        for (x, y) in soft.iter().zip(&r.relative_losses) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn batches_repeat_each_image_with_distinct_states() {
    let states: Vec<Vec<usize>> = (0..100).map(|i| (4 * i..4 * i + 4).collect()).collect();
    let cfg = TrainConfig {
        batch_size: 64,
        batch_repeat: 2,
        ..TrainConfig::default()
    };
    let batches = batch_plan(&states, &cfg, 0);
    assert_eq!(batches.len(), 4);
    for b in &batches[..3] {
        assert_eq!(b.len(), 64);
        let mut images: Vec<usize> = b.iter().map(|s| s.image).collect();
        images.sort_unstable();
        images.dedup();
        assert_eq!(images.len(), 32);
        for img in images {
            let recs: Vec<usize> = b
                .iter()
                .filter(|s| s.image == img)
                .map(|s| s.record)
                .collect();
            assert_eq!(recs.len(), 2);
            assert_ne!(recs[0], recs[1]);
            assert!(recs.iter().all(|r| states[img].contains(r)));
        }
    }
    assert_eq!(batch_plan(&states, &cfg, 0), batches);
}

#[test]
fn predictor_training_leaves_target_untouched() {
    let space = default_space();
    let t = tiny_target(9);
    let before = t.fingerprint();
    let data = gen_synthetic(24, 3, 16, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let plan = PerturbationPlan {
        corrupted_per_image: 1,
        seed: 1,
        ..PerturbationPlan::default()
    };
    let store =
        generate_label_store(&t, &data, &space, &plan, &dir.path().join("l.tsv"), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let (p, report) = train_predictor(
        &store,
        &data,
        &space,
        &cfg,
        &RankingObjectiveConfig::default(),
        &tiny_predictor_arch(),
    )
    .unwrap();
    assert_eq!(report.epoch_losses.len(), 2);
    assert_eq!(t.fingerprint(), before);
    assert!(mean_spearman(&p, &store, &data).unwrap().is_finite());

    // single record: trains; a fold without records has no correlation
    let one = data.head(1);
    let single = LabelStore::parse(
        &(store
            .to_text()
            .lines()
            .take(2)
            .map(|l| format!("{l}\n"))
            .collect::<String>()),
    )
    .unwrap();
    assert_eq!(single.len(), 1);
    let (p1, _) = train_predictor(
        &single,
        &one,
        &space,
        &cfg,
        &RankingObjectiveConfig::default(),
        &tiny_predictor_arch(),
    )
    .unwrap();
    assert!(mean_spearman(&p1, &single, &data.subset(&[5]))
        .unwrap()
        .is_nan());

    // ids missing from the store
    let other = gen_synthetic(30, 3, 16, 1).unwrap().subset(&[25]);
    assert!(matches!(
        train_predictor(
            &store,
            &other,
            &space,
            &cfg,
            &RankingObjectiveConfig::default(),
            &tiny_predictor_arch()
        ),
        Err(Error::Consistency(_))
    ));
}
