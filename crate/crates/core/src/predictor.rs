//! Anything that maps samples at a given shift to class probabilities.
//!
//! Shift estimation and evaluation only need predictions, so they work on
//! this trait; tests plug in fixed-output predictors.

use rayon::prelude::*;

use crate::data::TimeSeriesSample;
use crate::error::{Error, Result};
use crate::model::{DomainTag, ModelParams};

pub trait Predictor: Sync {
    fn num_classes(&self) -> usize;

    /// Largest `|shift|` accepted by [`Predictor::predict`].
    fn max_shift(&self) -> u32;

    /// One probability vector per sample.
    fn predict(&self, samples: &[&TimeSeriesSample], shift: i32) -> Result<Vec<Vec<f64>>>;

    /// Predictions for every shift in `shifts`, indexed `[shift][sample]`.
    fn predict_grid(&self, samples: &[&TimeSeriesSample], shifts: &[i32]) -> Result<Vec<Vec<Vec<f64>>>> {
        shifts.iter().map(|&s| self.predict(samples, s)).collect()
    }
}

/// Eval-mode model predictions with the running statistics of `domain`.
#[derive(Debug, Clone, Copy)]
pub struct ModelPredictor<'a> {
    pub params: &'a ModelParams<f32>,
    pub domain: DomainTag,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(params: &'a ModelParams<f32>, domain: DomainTag) -> Self {
        Self { params, domain }
    }
}

fn widen(p: Vec<f32>) -> Vec<f64> {
    p.into_iter().map(f64::from).collect()
}

impl Predictor for ModelPredictor<'_> {
    fn num_classes(&self) -> usize {
        self.params.num_classes()
    }

    fn max_shift(&self) -> u32 {
        self.params.max_shift()
    }

    fn predict(&self, samples: &[&TimeSeriesSample], shift: i32) -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<_> = samples.iter().map(|s| crate::model::Input::new(s, shift)).collect();
        let fwd = self
            .params
            .forward_batch(&inputs, self.domain, crate::model::Mode::Eval, false)?;
        Ok(fwd.probs.into_iter().map(widen).collect())
    }

    /// Embeds every sample once and reuses a per-day projection table for
    /// all shifts. Results equal repeated [`Predictor::predict`] calls bit
    /// for bit.
    fn predict_grid(&self, samples: &[&TimeSeriesSample], shifts: &[i32]) -> Result<Vec<Vec<Vec<f64>>>> {
        let p = self.params;
        for &s in shifts {
            if s.unsigned_abs() > p.max_shift() {
                return Err(Error::ShiftOutOfRange {
                    shift: s,
                    max: p.max_shift(),
                });
            }
        }
        let embedded = samples
            .par_iter()
            .map(|s| p.embed(s, self.domain))
            .collect::<Result<Vec<_>>>()?;
        let (lo, hi) = match (shifts.iter().min(), shifts.iter().max()) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => return Ok(Vec::new()),
        };
        let first = samples.iter().filter_map(|s| s.days.first()).min().copied().unwrap_or(0) as i64 + lo as i64;
        let last = samples.iter().filter_map(|s| s.days.last()).max().copied().unwrap_or(0) as i64 + hi as i64;
        let table = p.day_projections(first.max(-(p.max_shift() as i64)), last)?;
        shifts
            .iter()
            .map(|&shift| {
                embedded
                    .par_iter()
                    .map(|e| p.classify_embedded(e, shift, Some(&table)).map(widen))
                    .collect()
            })
            .collect()
    }
}
