mod oracle;

use std::collections::BTreeMap;

use chrono::{Duration, TimeZone, Utc};
use cxr_core::evalkit::{
    arm_comparison, balanced_accuracy, mean_reader_scores, roc_auc, roc_curve, trapezoid_area, Arm, ReadingEvent,
    DEFAULT_TIME_CAP_S,
};
use oracle::{auc_all_pairs, confusion_vectors, group_mean, random_scored_set, rng, BALANCED_ACCURACY_FIXTURES};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn balanced_accuracy_matches_hand_fixtures() {
    for (i, &(tp, fn_, tn, fp, expected)) in BALANCED_ACCURACY_FIXTURES.iter().enumerate() {
        let (pred, truth) = confusion_vectors(i as u64, tp, fn_, tn, fp);
        let got = balanced_accuracy(&pred, &truth).unwrap();
        assert!((got - expected).abs() < 1e-15, "fixture {i}: {got} vs {expected}");
    }
}

#[test]
fn auc_equals_all_pairs_exactly_with_ties() {
    for seed in 0..100 {
        let (scores, labels) = random_scored_set(seed, 5 + seed as usize % 40, 6);
        assert_eq!(
            roc_auc(&scores, &labels).unwrap(),
            auc_all_pairs(&scores, &labels),
            "seed {seed}"
        );
    }
}

#[test]
fn trapezoid_area_equals_auc() {
    for seed in 100..200 {
        let (scores, labels) = random_scored_set(seed, 10 + seed as usize % 50, 1 + seed as u32 % 30);
        let curve = roc_curve(&scores, &labels).unwrap();
        assert_eq!((curve[0].fpr, curve[0].tpr), (0.0, 0.0));
        assert_eq!(curve.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
        assert!(curve.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
        let auc = roc_auc(&scores, &labels).unwrap();
        assert!((trapezoid_area(&curve) - auc).abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn single_class_inputs_are_errors() {
    assert!(roc_auc(&[0.1, 0.2], &[false, false]).is_err());
    assert!(roc_curve(&[0.1, 0.2], &[true, true]).is_err());
    assert!(balanced_accuracy(&[true, false], &[false, false]).is_err());
}

fn event(reader: &str, image: &str, arm: Arm, severity: u8, secs: f64) -> ReadingEvent {
    let t0 = Utc.with_ymd_and_hms(2024, 3, 1, 10, 0, 0).unwrap();
    ReadingEvent {
        study: "s".into(),
        reader: reader.into(),
        image: image.into(),
        arm,
        severity,
        displayed_at: t0,
        submitted_at: t0 + Duration::milliseconds((secs * 1000.0) as i64),
        duration_s: secs,
        report_shown: arm == Arm::Assisted,
    }
}

#[test]
fn mean_reader_scores_match_group_by() {
    let mut r = rng(7);
    let mut events = vec![];
    for reader in 0..6 {
        for patient in 0..10 {
            for arm in Arm::ALL {
                events.push(event(
                    &format!("r{reader}"),
                    &format!("p{patient}"),
                    arm,
                    r.random_range(0..=18),
                    30.0,
                ));
            }
        }
    }
    for arm in Arm::ALL {
        let rows: Vec<(String, f64)> = events
            .iter()
            .filter(|e| e.arm == arm)
            .map(|e| (e.image.clone(), e.severity as f64))
            .collect();
        assert_eq!(mean_reader_scores(&events, arm, None).scores, group_mean(&rows));
    }
    let single: Vec<ReadingEvent> = events.iter().filter(|e| e.reader == "r0").cloned().collect();
    let m = mean_reader_scores(&single, Arm::Blind, None);
    for e in single.iter().filter(|e| e.arm == Arm::Blind) {
        assert_eq!(m.scores[&e.image], e.severity as f64);
    }
}

#[test]
fn pooled_auc_equals_hand_computation() {
    let truth: BTreeMap<String, bool> = (0..4).map(|i| (format!("i{i}"), i < 2)).collect();
    // blind means: i0 5, i1 3, i2 4, i3 1 -> pairs (5>4, 5>1, 3<4, 3>1) = 3/4
    // assisted means: i0 8, i1 6, i2 2, i3 2 -> 4/4
    let rows = [
        ("a", "i0", 4, 6),
        ("b", "i0", 6, 10),
        ("a", "i1", 2, 6),
        ("b", "i1", 4, 6),
        ("a", "i2", 4, 2),
        ("b", "i2", 4, 2),
        ("a", "i3", 0, 3),
        ("b", "i3", 2, 1),
    ];
    let mut events = vec![];
    for (reader, image, blind, assisted) in rows {
        events.push(event(reader, image, Arm::Blind, blind, 40.0));
        events.push(event(reader, image, Arm::Assisted, assisted, 25.0));
    }
    let cmp = arm_comparison(&events, &truth, DEFAULT_TIME_CAP_S).unwrap();
    assert_eq!(cmp.pooled_arm(Arm::Blind).unwrap().auc, 0.75);
    assert_eq!(cmp.pooled_arm(Arm::Assisted).unwrap().auc, 1.0);
    assert_eq!(cmp.below_identity, None);
    assert_eq!(
        cmp.pooled_arm(Arm::Assisted).unwrap().mean_time_per_reading_s,
        Some(25.0)
    );
}

proptest! {
    #[test]
    fn auc_invariant_under_exp(seed in 0u64..10_000) {
        let (scores, labels) = random_scored_set(seed, 30, 10);
        let transformed: Vec<f64> = scores.iter().map(|s| (5.0 * s).exp()).collect();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&transformed, &labels).unwrap());
    }

    #[test]
    fn auc_of_negated_scores_is_complement(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let n = 25;
        let scores: Vec<f64> = (0..n).map(|i| i as f64 + r.random_range(0.0..0.5)).collect();
        let mut labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        labels.shuffle(&mut r);
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn balanced_accuracy_invariant_under_permutation(seed in 0u64..10_000, tp in 1usize..12, fn_ in 0usize..12, tn in 1usize..12, fp in 0usize..12) {
        let (pred, truth) = confusion_vectors(seed, tp, fn_, tn, fp);
        let mut idx: Vec<usize> = (0..pred.len()).collect();
        idx.shuffle(&mut rng(seed + 1));
        let p2: Vec<bool> = idx.iter().map(|&i| pred[i]).collect();
        let t2: Vec<bool> = idx.iter().map(|&i| truth[i]).collect();
        prop_assert_eq!(balanced_accuracy(&pred, &truth).unwrap(), balanced_accuracy(&p2, &t2).unwrap());
    }
}
