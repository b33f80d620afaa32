mod common;

use common::{index_of, random_distribution, toy_dataset, FnPredictor};
use proptest::prelude::*;
use rand::Rng;
use tmlab_core::data::Dataset;
use tmlab_core::rng::rng_from;
use tmlab_core::shift::*;

// Direct-summation references, kept free of library helpers.

fn h(p: &[f64]) -> f64 {
    let mut s = 0.0;
    for &v in p {
        if v > 0.0 {
            s -= v * v.ln();
        }
    }
    s
}

fn mean_h(preds: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for p in preds {
        s += h(p);
    }
    s / preds.len() as f64
}

fn mean_p(preds: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; preds[0].len()];
    for p in preds {
        for j in 0..m.len() {
            m[j] += p[j];
        }
    }
    for v in &mut m {
        *v /= preds.len() as f64;
    }
    m
}

fn is_by_kl(preds: &[Vec<f64>]) -> f64 {
    let m = mean_p(preds);
    let mut total = 0.0;
    for p in preds {
        for j in 0..m.len() {
            if p[j] > 0.0 {
                total += p[j] * (p[j] / m[j]).ln();
            }
        }
    }
    total / preds.len() as f64
}

fn is_by_entropies(preds: &[Vec<f64>]) -> f64 {
    h(&mean_p(preds)) - mean_h(preds)
}

fn am_direct(preds: &[Vec<f64>], c: &[f64]) -> f64 {
    let m = mean_p(preds);
    let mut kl = 0.0;
    for j in 0..c.len() {
        if c[j] > 0.0 {
            kl += c[j] * (c[j] / m[j].max(1e-12)).ln();
        }
    }
    mean_h(preds) + kl
}

/// Dataset of `preds.len()` samples whose predictions are `preds` at every
/// shift.
fn table(preds: Vec<Vec<f64>>, max: u32) -> (Dataset, FnPredictor<impl Fn(&tmlab_core::data::TimeSeriesSample, i32) -> Vec<f64> + Sync>) {
    let k = preds[0].len().max(2);
    let ds = toy_dataset(preds.len(), k, 3);
    let model = FnPredictor::new(k, max, move |s, _| preds[index_of(s)].clone());
    (ds, model)
}

fn all(n: usize) -> SampleCap {
    SampleCap::new(n, 0)
}

#[test]
fn expected_entropy_examples() {
    let (ds, m) = table(vec![vec![0.25; 4]; 3], 0);
    assert!((expected_entropy(&m, &ds, 0, &all(3)).unwrap() - 4f64.ln()).abs() < 1e-12);
    let (ds, m) = table(vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]], 0);
    assert_eq!(expected_entropy(&m, &ds, 0, &all(2)).unwrap(), 0.0);
    let preds = vec![vec![0.9, 0.1], vec![0.5, 0.5]];
    let want = mean_h(&preds);
    let (ds, m) = table(preds, 0);
    assert!((expected_entropy(&m, &ds, 0, &all(2)).unwrap() - want).abs() < 1e-12);
}

#[test]
fn marginal_examples() {
    let p = vec![0.2, 0.3, 0.5];
    let (ds, m) = table(vec![p.clone(); 5], 0);
    let got = marginal(&m, &ds, 0, &all(5)).unwrap();
    for (a, b) in got.iter().zip(&p) {
        assert!((a - b).abs() < 1e-12);
    }
    let (ds, m) = table(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0);
    assert_eq!(marginal(&m, &ds, 0, &all(2)).unwrap(), vec![0.5, 0.5]);

    let mut rng = rng_from(11);
    let preds: Vec<Vec<f64>> = (0..13).map(|_| random_distribution(&mut rng, 4)).collect();
    let want = mean_p(&preds);
    let (ds, m) = table(preds, 0);
    for (a, b) in marginal(&m, &ds, 0, &all(13)).unwrap().iter().zip(&want) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn inception_score_examples() {
    let (ds, m) = table(vec![vec![0.3, 0.7]; 4], 0);
    assert!(inception_score(&m, &ds, 0, &all(4)).unwrap().abs() < 1e-12);
    let (ds, m) = table(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0);
    assert!((inception_score(&m, &ds, 0, &all(2)).unwrap() - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn am_score_examples() {
    // one-hot predictions with class frequencies (0.5, 0.25, 0.25)
    let preds = vec![
        vec![1.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
    ];
    let (ds, m) = table(preds, 0);
    assert!(am_score(&m, &ds, 0, &[0.5, 0.25, 0.25], &all(4)).unwrap().abs() < 1e-12);

    let (ds, m) = table(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 0);
    assert!((am_score(&m, &ds, 0, &[1.0, 0.0], &all(2)).unwrap() - 2f64.ln()).abs() < 1e-12);

    let (ds, m) = table(vec![vec![0.25; 4]; 3], 0);
    assert!((am_score(&m, &ds, 0, &[0.25; 4], &all(3)).unwrap() - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn scores_match_direct_summation_on_random_batches() {
    let mut rng = rng_from(2024);
    for _ in 0..50 {
        let k = rng.random_range(2..=5);
        let n = rng.random_range(1..=20);
        let preds: Vec<Vec<f64>> = (0..n).map(|_| random_distribution(&mut rng, k)).collect();
        let c = random_distribution(&mut rng, k);
        assert!((inception_score_of(&preds).unwrap() - is_by_kl(&preds)).abs() < 1e-9);
        assert!((inception_score_kl_form(&preds).unwrap() - is_by_kl(&preds)).abs() < 1e-9);
        assert!((is_by_kl(&preds) - is_by_entropies(&preds)).abs() < 1e-9);
        assert!((am_score_of(&preds, &c).unwrap() - am_direct(&preds, &c)).abs() < 1e-9);
    }
}

#[test]
fn pseudo_label_distribution_examples() {
    let (ds, m) = table(vec![vec![0.1, 0.2, 0.7]; 6], 0);
    assert_eq!(pseudo_label_distribution(&m, &ds, 0, &all(6)).unwrap(), vec![0.0, 0.0, 1.0]);

    let preds: Vec<Vec<f64>> = (0..4)
        .map(|i| if i % 2 == 0 { vec![0.6, 0.3, 0.1] } else { vec![0.2, 0.7, 0.1] })
        .collect();
    let (ds, m) = table(preds, 0);
    assert_eq!(pseudo_label_distribution(&m, &ds, 0, &all(4)).unwrap(), vec![0.5, 0.5, 0.0]);

    let mut rng = rng_from(5);
    let preds: Vec<Vec<f64>> = (0..10).map(|_| random_distribution(&mut rng, 4)).collect();
    let mut counts = [0usize; 4];
    for p in &preds {
        let mut best = 0;
        for j in 1..4 {
            if p[j] > p[best] {
                best = j;
            }
        }
        counts[best] += 1;
    }
    let (ds, m) = table(preds, 0);
    let got = pseudo_label_distribution(&m, &ds, 0, &all(10)).unwrap();
    for j in 0..4 {
        assert_eq!(got[j], counts[j] as f64 / 10.0);
    }
}

/// Confidence toward the sample's label peaks at `peak` and decays with
/// distance to it.
fn peaked(k: usize, max: u32, peak: i32) -> (Dataset, FnPredictor<impl Fn(&tmlab_core::data::TimeSeriesSample, i32) -> Vec<f64> + Sync>) {
    let ds = toy_dataset(3 * k, k, 4);
    let model = FnPredictor::new(k, max, move |s, shift| {
        let c = 1.0 / (1.0 + (shift - peak).abs() as f64);
        let mut p = vec![(1.0 - c) / k as f64; k];
        p[s.label.unwrap()] += c;
        p
    });
    (ds, model)
}

#[test]
fn estimators_find_the_peak_and_cover_the_grid() {
    let (ds, m) = peaked(3, 10, 7);
    let is = estimate_shift_is(&m, &ds, 10, &all(9)).unwrap();
    assert_eq!(is.delta_t_to_s, 7);
    assert_eq!(is.delta_s_to_t(), -7);
    assert_eq!(is.curve.len(), 21);
    let am = estimate_shift_am(&m, &ds, 10, &[1.0 / 3.0; 3], &all(9)).unwrap();
    assert_eq!(am.delta_t_to_s, 7);
    assert_eq!(estimate_shift_entropy(&m, &ds, 10, &all(9)).unwrap().delta_t_to_s, 7);
}

#[test]
fn constant_model_returns_zero_with_flat_curves() {
    let (ds, m) = table(vec![vec![0.2, 0.5, 0.3]; 5], 6);
    let is = estimate_shift_is(&m, &ds, 6, &all(5)).unwrap();
    assert_eq!(is.delta_t_to_s, 0);
    assert_eq!(is.curve.len(), 13);
    let am = estimate_shift_am(&m, &ds, 6, &[0.2, 0.3, 0.5], &all(5)).unwrap();
    assert_eq!(am.delta_t_to_s, 0);
    let est = estimate_temporal_shift(&m, &ds, 6, None, &all(5)).unwrap();
    assert_eq!(est.delta_t_to_s, 0);
    let first = est.curve[&0];
    assert!(est.curve.values().all(|&v| v == first));
    let c = est.class_distribution_used.unwrap();
    assert_eq!(c, vec![0.0, 1.0, 0.0]);
}

#[test]
fn prior_means_a_single_am_scan() {
    let (ds, m) = peaked(4, 5, -2);
    let prior = [0.25; 4];
    let est = estimate_temporal_shift(&m, &ds, 5, Some(&prior), &all(12)).unwrap();
    assert_eq!(est.scans, ScanCounts { entropy: 0, is: 0, am: 1 });
    assert_eq!(est.metric, Metric::Am);
    assert_eq!(est.class_distribution_used.as_deref(), Some(&prior[..]));
    let mut calls = m.calls();
    calls.sort();
    assert_eq!(calls, (-5..=5).collect::<Vec<_>>());
    assert_eq!(est.delta_t_to_s, -2);
}

#[test]
fn no_prior_bootstraps_with_inception_score() {
    let (ds, m) = peaked(4, 5, 3);
    let est = estimate_temporal_shift(&m, &ds, 5, None, &all(12)).unwrap();
    assert_eq!(est.scans, ScanCounts { entropy: 0, is: 1, am: 1 });
    assert_eq!(est.delta_t_to_s, 3);
    // pseudo-labels at the IS peak are the true labels, 3 of each class
    assert_eq!(est.class_distribution_used.unwrap(), vec![0.25; 4]);
    // one grid of predictions serves both scans
    assert_eq!(m.calls().len(), 11);
}

#[test]
fn estimates_ignore_sample_order() {
    let mut rng = rng_from(8);
    let k = 3;
    let n = 30;
    let bias: Vec<Vec<f64>> = (0..n).map(|_| random_distribution(&mut rng, k)).collect();
    let f = move |s: &tmlab_core::data::TimeSeriesSample, shift: i32| {
        let b = &bias[index_of(s)];
        let w = (-((shift - 2) as f64).powi(2) / 8.0).exp();
        let mut p: Vec<f64> = b.iter().map(|v| v * (1.0 - w)).collect();
        p[s.label.unwrap()] += w;
        p
    };
    let ds = toy_dataset(n, k, 3);
    let mut reversed = ds.clone();
    reversed.samples.reverse();
    let m = FnPredictor::new(k, 8, f);
    for cap in [SampleCap::new(n, 1), SampleCap::new(17, 4)] {
        let a = estimate_temporal_shift(&m, &ds, 8, None, &cap).unwrap();
        let b = estimate_temporal_shift(&m, &reversed, 8, None, &cap).unwrap();
        assert_eq!(a.delta_t_to_s, b.delta_t_to_s);
        for (x, y) in a.curve.values().zip(b.curve.values()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn sample_cap_keeps_a_fixed_subset() {
    let ds = toy_dataset(50, 3, 2);
    let cap = SampleCap::new(10, 3);
    let a: Vec<&str> = cap.select(&ds).unwrap().iter().map(|s| s.id.as_str()).collect();
    let mut shuffled = ds.clone();
    shuffled.samples.rotate_left(17);
    let b: Vec<&str> = cap.select(&shuffled).unwrap().iter().map(|s| s.id.as_str()).collect();
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
    let other: Vec<&str> = SampleCap::new(10, 4).select(&ds).unwrap().iter().map(|s| s.id.as_str()).collect();
    assert_ne!(a, other);
    assert_eq!(SampleCap::new(80, 0).select(&ds).unwrap().len(), 50);
}

#[test]
fn error_cases() {
    let (ds, m) = table(vec![vec![0.5, 0.5]; 2], 3);
    let empty = Dataset::new(Vec::new(), ds.class_names.clone(), "empty", 1).unwrap();
    assert!(matches!(
        expected_entropy(&m, &empty, 0, &all(1)),
        Err(tmlab_core::Error::EmptyDataset(_))
    ));
    assert!(estimate_shift_am(&m, &ds, 3, &[0.7, 0.7], &all(2)).is_err());
    assert!(estimate_shift_am(&m, &ds, 3, &[1.0], &all(2)).is_err());
    assert!(matches!(
        estimate_shift_is(&m, &ds, 4, &all(2)),
        Err(tmlab_core::Error::ShiftOutOfRange { .. })
    ));
}

fn batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (2usize..=5).prop_flat_map(|k| {
        let row = prop::collection::vec(0.0f64..1.0, k).prop_map(|raw| {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9 * raw.len() as f64;
            raw.iter().map(|v| (v + 1e-9) / total).collect::<Vec<f64>>()
        });
        let c = prop::collection::vec(0.0f64..1.0, k).prop_map(|raw| {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9 * raw.len() as f64;
            raw.iter().map(|v| (v + 1e-9) / total).collect::<Vec<f64>>()
        });
        (prop::collection::vec(row, 1..=20), c)
    })
}

proptest! {
    #[test]
    fn scores_are_bounded((preds, c) in batch()) {
        let k = preds[0].len();
        let is = inception_score_of(&preds).unwrap();
        let am = am_score_of(&preds, &c).unwrap();
        let e = mean_entropy(&preds).unwrap();
        prop_assert!(is >= 0.0);
        prop_assert!(am >= 0.0 && am.is_finite());
        prop_assert!(e >= -1e-12 && e <= (k as f64).ln() + 1e-12);
        let m = marginal_of(&preds).unwrap();
        prop_assert!(validate_distribution(&m, k).is_ok());
        prop_assert!((is_by_kl(&preds) - is_by_entropies(&preds)).abs() < 1e-9);
    }

    #[test]
    fn statistics_are_order_free((preds, c) in batch(), rot in 0usize..20) {
        let mut other = preds.clone();
        let r = rot % other.len();
        other.rotate_left(r);
        other.reverse();
        prop_assert!((inception_score_of(&preds).unwrap() - inception_score_of(&other).unwrap()).abs() < 1e-9);
        prop_assert!((am_score_of(&preds, &c).unwrap() - am_score_of(&other, &c).unwrap()).abs() < 1e-9);
        prop_assert!((mean_entropy(&preds).unwrap() - mean_entropy(&other).unwrap()).abs() < 1e-9);
    }
}
