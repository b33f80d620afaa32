mod common;

use common::{toy_dataset, FnPredictor};
use proptest::prelude::*;
use tmlab_core::metrics::*;

#[test]
fn two_class_hand_computation() {
    let c = vec![vec![8, 2], vec![3, 7]];
    // class 0: precision 8/11, recall 8/10; class 1: precision 7/9, recall 7/10
    let f0 = 2.0 * (8.0 / 11.0) * 0.8 / (8.0 / 11.0 + 0.8);
    let f1 = 2.0 * (7.0 / 9.0) * 0.7 / (7.0 / 9.0 + 0.7);
    let got = per_class_f1(&c);
    assert!((got[0] - f0).abs() < 1e-15 && (got[1] - f1).abs() < 1e-15);
    assert!((macro_f1(&c) - (f0 + f1) / 2.0).abs() < 1e-15);
    assert!((accuracy(&c) - 0.75).abs() < 1e-15);
}

#[test]
fn oracle_predictor_scores_one() {
    let ds = toy_dataset(20, 4, 3);
    let oracle = FnPredictor::new(4, 0, |s, _| {
        let mut p = vec![0.0; 4];
        p[s.label.unwrap()] = 1.0;
        p
    });
    let r = evaluate(&oracle, &ds, 0).unwrap();
    assert_eq!(r.macro_f1, 1.0);
    assert_eq!(r.n, 20);
    for (i, row) in r.confusion.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert_eq!(v == 0, i != j);
        }
    }
    assert_eq!(evaluate(&oracle, &ds, 0).unwrap(), r);
}

#[test]
fn constant_predictor_on_balanced_pair() {
    let ds = toy_dataset(10, 2, 2);
    let constant = FnPredictor::new(2, 0, |_, _| vec![0.8, 0.2]);
    let r = evaluate(&constant, &ds, 0).unwrap();
    assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn unlabeled_samples_are_rejected() {
    let ds = toy_dataset(4, 2, 2).without_labels();
    let constant = FnPredictor::new(2, 0, |_, _| vec![0.5, 0.5]);
    assert!(matches!(evaluate(&constant, &ds, 0), Err(tmlab_core::Error::Unlabeled(_))));
}

#[test]
fn sweep_matches_single_evaluations() {
    let ds = toy_dataset(12, 3, 2);
    let model = FnPredictor::new(3, 5, |s, shift| {
        let mut p = vec![0.1; 3];
        p[(s.label.unwrap() + shift.unsigned_abs() as usize) % 3] = 0.8;
        p
    });
    let shifts: Vec<i32> = (-5..=5).collect();
    let sweep = evaluate_sweep(&model, &ds, &shifts).unwrap();
    for (r, &s) in sweep.iter().zip(&shifts) {
        assert_eq!(r, &evaluate(&model, &ds, s).unwrap());
    }
}

fn confusion() -> impl Strategy<Value = Confusion> {
    (2usize..6).prop_flat_map(|k| prop::collection::vec(prop::collection::vec(0u64..50, k), k))
}

proptest! {
    #[test]
    fn class_permutation_permutes_scores(c in confusion(), rot in 0usize..6) {
        let k = c.len();
        let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
        let mut p = vec![vec![0u64; k]; k];
        for i in 0..k {
            for j in 0..k {
                p[perm[i]][perm[j]] = c[i][j];
            }
        }
        let f = per_class_f1(&c);
        let g = per_class_f1(&p);
        for i in 0..k {
            prop_assert!((f[i] - g[perm[i]]).abs() < 1e-12);
        }
        prop_assert!((macro_f1(&c) - macro_f1(&p)).abs() < 1e-12);
    }

    #[test]
    fn duplication_keeps_rates(c in confusion()) {
        let d: Confusion = c.iter().map(|r| r.iter().map(|v| 2 * v).collect()).collect();
        prop_assert!((macro_f1(&c) - macro_f1(&d)).abs() < 1e-12);
        prop_assert!((accuracy(&c) - accuracy(&d)).abs() < 1e-12);
        let m = macro_f1(&c);
        prop_assert!((0.0..=1.0).contains(&m));
        let total: u64 = c.iter().flatten().sum();
        let trace: u64 = (0..c.len()).map(|i| c[i][i]).sum();
        if total > 0 {
            prop_assert!((accuracy(&c) - trace as f64 / total as f64).abs() < 1e-15);
        }
    }
}
