mod support;

use proptest::prelude::*;

use support::*;
use uda_core::numerics::Tensor;
use uda_core::pseudo_labels::*;

const DELTAS: [f64; 5] = [-1.0, 0.0, 0.25, 0.5, 2.0];

fn one_row(row: &[f64], delta: f64) -> (Option<usize>, ConfidenceReport) {
    let s = cosine_table(1, 1, row.len(), row.to_vec());
    let (labels, report) = assign_pseudo_labels(&s, delta).unwrap();
    (labels.get(0), report)
}

#[test]
fn published_examples() {
    let (l, rep) = one_row(&[0.9, 0.5, 0.1, -0.2, 0.0], 0.25);
    assert_eq!(l, Some(0));
    assert!((rep.difference[0] - 0.4).abs() < 1e-15);
    assert_eq!((rep.top_index[0], rep.second_index[0]), (0, 1));
    let (l, rep) = one_row(&[0.62, 0.55, 0.1, 0.0, 0.0], 0.25);
    assert_eq!(l, None);
    assert!(!rep.selected[0]);
    for d in [0.0, 0.25, 1.0] {
        assert_eq!(one_row(&[0.3, 0.7, 0.7, 0.1], d).0, None);
    }
}

#[test]
fn threshold_extremes() {
    let (l, _) = one_row(&[0.1, 0.2, 0.3], -1.0);
    assert_eq!(l, Some(2));
    let (l, _) = one_row(&[-1.0, 1.0, -1.0], 2.0);
    assert_eq!(l, None);
}

#[test]
fn single_category_is_an_error() {
    let s = cosine_table(1, 2, 1, vec![0.3, 0.1]);
    assert_eq!(
        assign_pseudo_labels(&s, 0.25).unwrap_err(),
        LabelError::TooFewCategories(1)
    );
}

#[test]
fn pseudo_maps_are_marked_and_ground_truth_is_complete() {
    let s = cosine_table(1, 2, 3, vec![0.9, 0.0, 0.1, 0.5, 0.5, 0.0]);
    let (labels, _) = assign_pseudo_labels(&s, 0.25).unwrap();
    assert_eq!(labels.kind(), LabelKind::Pseudo);
    assert_eq!(labels.labels(), &[Some(0), None]);
    let one_hot = labels.to_one_hot();
    assert_eq!(one_hot.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let back = LabelMap::from_one_hot(1, 2, &one_hot, LabelKind::Pseudo).unwrap();
    assert_eq!(back, labels);
    assert!(LabelMap::from_one_hot(1, 2, &one_hot, LabelKind::GroundTruth).is_err());
    let bad = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    assert!(matches!(
        LabelMap::from_one_hot(1, 2, &bad, LabelKind::Pseudo),
        Err(LabelError::NotOneHot { pixel: 0, .. })
    ));
    assert!(matches!(
        LabelMap::ground_truth(1, 2, 3, &[0, 3]),
        Err(LabelError::CategoryOutOfRange { pixel: 1, .. })
    ));
}

#[test]
fn matches_sorting_oracle_on_ten_thousand_rows() {
    let mut r = rng(2024);
    let scores = random_scores(&mut r, 10_000, 5);
    let table = cosine_table(100, 100, 5, scores.clone());
    for delta in DELTAS {
        let (labels, report) = assign_pseudo_labels(&table, delta).unwrap();
        let oracle = pseudo_label_oracle(&scores, 5, delta);
        assert_eq!(labels.labels(), &oracle[..], "delta {delta}");
        for (i, row) in scores.chunks(5).enumerate() {
            assert!(report.difference[i] >= 0.0);
            assert_eq!(report.selected[i], report.difference[i] > delta);
            assert_eq!(row[report.top_index[i]], row.iter().cloned().fold(f64::MIN, f64::max));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn raising_the_threshold_only_removes_labels(seed in any::<u64>(), a in -1.0f64..2.0, b in -1.0f64..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut r = rng(seed);
        let scores = random_scores(&mut r, 64, 5);
        let table = cosine_table(8, 8, 5, scores);
        let (l1, _) = assign_pseudo_labels(&table, lo).unwrap();
        let (l2, _) = assign_pseudo_labels(&table, hi).unwrap();
        for (x, y) in l1.labels().iter().zip(l2.labels()) {
            if y.is_some() {
                prop_assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn assigned_labels_are_row_argmax(seed in any::<u64>(), delta in -1.0f64..2.0) {
        let mut r = rng(seed);
        let scores = random_scores(&mut r, 64, 4);
        let (labels, _) = assign_pseudo_labels(&cosine_table(8, 8, 4, scores.clone()), delta).unwrap();
        for (p, c) in labels.assigned() {
            let row = &scores[p * 4..p * 4 + 4];
            prop_assert!(row.iter().all(|&v| v <= row[c]));
        }
    }

    #[test]
    fn extreme_thresholds(seed in any::<u64>()) {
        let mut r = rng(seed);
        let scores = random_scores(&mut r, 64, 5);
        let table = cosine_table(8, 8, 5, scores.clone());
        let (all, _) = assign_pseudo_labels(&table, -1.0).unwrap();
        for (p, row) in scores.chunks(5).enumerate() {
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            if row.iter().filter(|&&v| v == max).count() == 1 {
                prop_assert!(all.get(p).is_some());
            }
        }
        let (none, _) = assign_pseudo_labels(&table, 2.0).unwrap();
        prop_assert_eq!(none.assigned_count(), 0);
    }
}
