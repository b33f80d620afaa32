#![allow(dead_code)]

use std::sync::Mutex;

use tmlab_core::data::{Dataset, TimeSeriesSample, UNKNOWN_CLASS};
use tmlab_core::predictor::Predictor;
use tmlab_core::Result;

/// `n` single-pixel, single-channel samples named `s0, s1, ...` on days
/// `1..=t`, with labels `i % k`.
pub fn toy_dataset(n: usize, k: usize, t: usize) -> Dataset {
    let samples = (0..n)
        .map(|i| {
            let days: Vec<i32> = (1..=t as i32).collect();
            let pixels = vec![i as f32 / n.max(1) as f32; t];
            TimeSeriesSample::new(format!("s{i}"), days, pixels, 1, 1, Some(i % k)).unwrap()
        })
        .collect();
    Dataset::new(samples, class_names(k), "toy", 1).unwrap()
}

pub fn class_names(k: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..k - 1).map(|i| format!("c{i}")).collect();
    names.push(UNKNOWN_CLASS.into());
    names
}

/// Index encoded in a `toy_dataset` sample id.
pub fn index_of(s: &TimeSeriesSample) -> usize {
    s.id[1..].parse().unwrap()
}

/// Predictor defined by a closure of (sample, shift); records every
/// `predict` call's shift.
pub struct FnPredictor<F> {
    pub k: usize,
    pub max: u32,
    pub f: F,
    pub calls: Mutex<Vec<i32>>,
}

impl<F> FnPredictor<F>
where
    F: Fn(&TimeSeriesSample, i32) -> Vec<f64> + Sync,
{
    pub fn new(k: usize, max: u32, f: F) -> Self {
        Self {
            k,
            max,
            f,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<i32> {
        self.calls.lock().unwrap().clone()
    }
}

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&TimeSeriesSample, i32) -> Vec<f64> + Sync,
{
    fn num_classes(&self) -> usize {
        self.k
    }

    fn max_shift(&self) -> u32 {
        self.max
    }

    fn predict(&self, samples: &[&TimeSeriesSample], shift: i32) -> Result<Vec<Vec<f64>>> {
        self.calls.lock().unwrap().push(shift);
        Ok(samples.iter().map(|s| (self.f)(s, shift)).collect())
    }
}

/// Random point of the open simplex.
pub fn random_distribution(rng: &mut impl rand::Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}
