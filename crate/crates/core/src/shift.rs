//! Temporal shift estimation from prediction statistics.
//!
//! Scores are computed from a model's predictions on a target dataset whose
//! days are moved by each candidate shift in `{-max, ..., max}`:
//!
//! * expected entropy `E_x[H(p(y|x))]` (lower is better),
//! * inception score `H(p(y)) - E_x[H(p(y|x))]` (higher is better),
//! * AM score `E_x[H(p(y|x))] + KL(C || p(y))` against a class distribution `C`
//!   (lower is better).
//!
//! Natural logarithms throughout. Ties between candidate shifts go to the
//! smallest `|shift|`, then to the negative one.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::predictor::Predictor;
use crate::rng::{hash_bytes, mix64};

/// Floor applied to the marginal inside the AM divergence.
pub const MARGINAL_FLOOR: f64 = 1e-12;
/// Tolerance for a class distribution to count as normalized.
pub const SIMPLEX_TOL: f64 = 1e-9;
pub const DEFAULT_SAMPLE_CAP: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Entropy,
    Is,
    Am,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Entropy => "entropy",
            Metric::Is => "is",
            Metric::Am => "am",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Metric::Entropy),
            "is" => Ok(Metric::Is),
            "am" => Ok(Metric::Am),
            other => Err(Error::invalid(format!("unknown metric {other:?} (expected entropy, is or am)"))),
        }
    }
}

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `KL(p || q)` with `q` floored at [`MARGINAL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - b.max(MARGINAL_FLOOR).ln()))
        .sum()
}

fn non_empty(preds: &[Vec<f64>]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset("no predictions to score".into()));
    }
    Ok(())
}

pub fn mean_entropy(preds: &[Vec<f64>]) -> Result<f64> {
    non_empty(preds)?;
    Ok(preds.iter().map(|p| entropy(p)).sum::<f64>() / preds.len() as f64)
}

pub fn marginal_of(preds: &[Vec<f64>]) -> Result<Vec<f64>> {
    non_empty(preds)?;
    let mut m = vec![0.0; preds[0].len()];
    for p in preds {
        for (a, b) in m.iter_mut().zip(p) {
            *a += b;
        }
    }
    let n = preds.len() as f64;
    Ok(m.into_iter().map(|v| v / n).collect())
}

/// Entropy of the marginal minus the mean entropy, clamped at zero.
pub fn inception_score_of(preds: &[Vec<f64>]) -> Result<f64> {
    let m = marginal_of(preds)?;
    Ok((entropy(&m) - mean_entropy(preds)?).max(0.0))
}

/// Mean divergence of each prediction from the marginal. Equals
/// [`inception_score_of`] up to rounding.
pub fn inception_score_kl_form(preds: &[Vec<f64>]) -> Result<f64> {
    let m = marginal_of(preds)?;
    Ok(preds.iter().map(|p| kl_divergence(p, &m)).sum::<f64>() / preds.len() as f64)
}

pub fn am_score_of(preds: &[Vec<f64>], class_dist: &[f64]) -> Result<f64> {
    validate_distribution(class_dist, preds.first().map_or(class_dist.len(), Vec::len))?;
    let m = marginal_of(preds)?;
    Ok(mean_entropy(preds)? + kl_divergence(class_dist, &m))
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Frequency of each argmax class.
pub fn argmax_distribution(preds: &[Vec<f64>], num_classes: usize) -> Result<Vec<f64>> {
    non_empty(preds)?;
    let mut counts = vec![0usize; num_classes];
    for p in preds {
        counts[argmax(p)] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / preds.len() as f64).collect())
}

pub fn validate_distribution(c: &[f64], num_classes: usize) -> Result<()> {
    if c.len() != num_classes {
        return Err(Error::Dimension(format!(
            "class distribution has {} entries for {num_classes} classes",
            c.len()
        )));
    }
    if c.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("class distribution has a negative or non-finite entry"));
    }
    let s: f64 = c.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("class distribution sums to {s}, not 1")));
    }
    Ok(())
}

/// Deterministic subset used for estimation: samples ordered by a seeded
/// hash of their id, first `max` kept. The selection and its order depend
/// only on the set of samples, not on their order in the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCap {
    pub max: usize,
    pub seed: u64,
}

impl Default for SampleCap {
    fn default() -> Self {
        Self {
            max: DEFAULT_SAMPLE_CAP,
            seed: 0,
        }
    }
}

impl SampleCap {
    pub fn new(max: usize, seed: u64) -> Self {
        Self { max, seed }
    }

    pub fn select<'a>(&self, dataset: &'a Dataset) -> Result<Vec<&'a TimeSeriesSample>> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset(dataset.domain_id.clone()));
        }
        if self.max == 0 {
            return Err(Error::invalid("sample cap must be positive"));
        }
        let mut keyed: Vec<(u64, &TimeSeriesSample)> = dataset
            .samples
            .iter()
            .map(|s| (mix64(self.seed ^ hash_bytes(s.id.as_bytes())), s))
            .collect();
        keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
        Ok(keyed.into_iter().take(self.max).map(|(_, s)| s).collect())
    }
}

fn predictions<P: Predictor + ?Sized>(
    model: &P,
    dataset: &Dataset,
    delta: i32,
    cap: &SampleCap,
) -> Result<Vec<Vec<f64>>> {
    let samples = cap.select(dataset)?;
    model.predict(&samples, delta)
}

pub fn expected_entropy<P: Predictor + ?Sized>(model: &P, dataset: &Dataset, delta: i32, cap: &SampleCap) -> Result<f64> {
    mean_entropy(&predictions(model, dataset, delta, cap)?)
}

pub fn marginal<P: Predictor + ?Sized>(model: &P, dataset: &Dataset, delta: i32, cap: &SampleCap) -> Result<Vec<f64>> {
    marginal_of(&predictions(model, dataset, delta, cap)?)
}

pub fn inception_score<P: Predictor + ?Sized>(model: &P, dataset: &Dataset, delta: i32, cap: &SampleCap) -> Result<f64> {
    inception_score_of(&predictions(model, dataset, delta, cap)?)
}

pub fn am_score<P: Predictor + ?Sized>(
    model: &P,
    dataset: &Dataset,
    delta: i32,
    class_dist: &[f64],
    cap: &SampleCap,
) -> Result<f64> {
    am_score_of(&predictions(model, dataset, delta, cap)?, class_dist)
}

pub fn pseudo_label_distribution<P: Predictor + ?Sized>(
    model: &P,
    dataset: &Dataset,
    delta: i32,
    cap: &SampleCap,
) -> Result<Vec<f64>> {
    argmax_distribution(&predictions(model, dataset, delta, cap)?, model.num_classes())
}

/// Number of full grid scans performed per metric.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanCounts {
    pub entropy: usize,
    pub is: usize,
    pub am: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftEstimate {
    /// Shift to add to target days to align them with the source.
    pub delta_t_to_s: i32,
    pub metric: Metric,
    /// Score of every candidate shift under `metric`.
    pub curve: BTreeMap<i32, f64>,
    pub class_distribution_used: Option<Vec<f64>>,
    pub scans: ScanCounts,
}

impl ShiftEstimate {
    pub fn delta_s_to_t(&self) -> i32 {
        -self.delta_t_to_s
    }
}

/// Per-shift statistics of one grid of predictions, from which every
/// metric can be scanned without further model calls.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftScores {
    pub shifts: Vec<i32>,
    pub entropy: Vec<f64>,
    pub inception: Vec<f64>,
    pub marginals: Vec<Vec<f64>>,
    pub pseudo_label_dists: Vec<Vec<f64>>,
    pub num_classes: usize,
}

impl ShiftScores {
    /// Forwards the capped dataset once per candidate in `{-max, ..., max}`.
    pub fn compute<P: Predictor + ?Sized>(model: &P, dataset: &Dataset, max: u32, cap: &SampleCap) -> Result<Self> {
        if max > model.max_shift() {
            return Err(Error::ShiftOutOfRange {
                shift: max as i32,
                max: model.max_shift(),
            });
        }
        let samples = cap.select(dataset)?;
        let shifts: Vec<i32> = (-(max as i32)..=max as i32).collect();
        let grid = model.predict_grid(&samples, &shifts)?;
        let k = model.num_classes();
        let mut out = Self {
            shifts,
            entropy: Vec::new(),
            inception: Vec::new(),
            marginals: Vec::new(),
            pseudo_label_dists: Vec::new(),
            num_classes: k,
        };
        for preds in &grid {
            if preds.iter().any(|p| p.len() != k) {
                return Err(Error::Dimension(format!("predictor returned vectors not of length {k}")));
            }
            if preds.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite prediction during shift estimation".into()));
            }
            out.entropy.push(mean_entropy(preds)?);
            out.inception.push(inception_score_of(preds)?);
            out.marginals.push(marginal_of(preds)?);
            out.pseudo_label_dists.push(argmax_distribution(preds, k)?);
        }
        Ok(out)
    }

    fn index(&self, shift: i32) -> usize {
        self.shifts.iter().position(|&s| s == shift).expect("shift on grid")
    }

    /// AM score of every candidate against `class_dist`.
    pub fn am(&self, class_dist: &[f64]) -> Result<Vec<f64>> {
        validate_distribution(class_dist, self.num_classes)?;
        Ok(self
            .entropy
            .iter()
            .zip(&self.marginals)
            .map(|(h, m)| h + kl_divergence(class_dist, m))
            .collect())
    }

    pub fn pseudo_label_distribution(&self, shift: i32) -> &[f64] {
        &self.pseudo_label_dists[self.index(shift)]
    }

    fn estimate(&self, metric: Metric, scores: Vec<f64>, dist: Option<Vec<f64>>, scans: ScanCounts) -> ShiftEstimate {
        let maximize = metric == Metric::Is;
        let delta = best_shift(&self.shifts, &scores, maximize);
        ShiftEstimate {
            delta_t_to_s: delta,
            metric,
            curve: self.shifts.iter().copied().zip(scores).collect(),
            class_distribution_used: dist,
            scans,
        }
    }

    pub fn estimate_entropy(&self) -> ShiftEstimate {
        let scans = ScanCounts {
            entropy: 1,
            ..Default::default()
        };
        self.estimate(Metric::Entropy, self.entropy.clone(), None, scans)
    }

    pub fn estimate_is(&self) -> ShiftEstimate {
        let scans = ScanCounts {
            is: 1,
            ..Default::default()
        };
        self.estimate(Metric::Is, self.inception.clone(), None, scans)
    }

    pub fn estimate_am(&self, class_dist: &[f64]) -> Result<ShiftEstimate> {
        let scans = ScanCounts {
            am: 1,
            ..Default::default()
        };
        Ok(self.estimate(Metric::Am, self.am(class_dist)?, Some(class_dist.to_vec()), scans))
    }

    /// Without a prior: IS estimate, pseudo-label class distribution at that
    /// shift, then AM against it. With a prior: AM against the prior.
    pub fn estimate_temporal_shift(&self, prior: Option<&[f64]>) -> Result<ShiftEstimate> {
        match prior {
            Some(c) => self.estimate_am(c),
            None => {
                let is = self.estimate_is();
                let c = self.pseudo_label_distribution(is.delta_t_to_s).to_vec();
                let mut est = self.estimate_am(&c)?;
                est.scans.is += is.scans.is;
                Ok(est)
            }
        }
    }
}

/// Candidate order used to break ties: `0, -1, 1, -2, 2, ...`.
fn preference(shift: i32) -> (u32, bool) {
    (shift.unsigned_abs(), shift > 0)
}

/// Best score over `shifts`; ties go to the preferred shift.
pub fn best_shift(shifts: &[i32], scores: &[f64], maximize: bool) -> i32 {
    let mut order: Vec<usize> = (0..shifts.len()).collect();
    order.sort_by_key(|&i| preference(shifts[i]));
    let mut best = order[0];
    for &i in &order[1..] {
        let better = if maximize {
            scores[i] > scores[best]
        } else {
            scores[i] < scores[best]
        };
        if better {
            best = i;
        }
    }
    shifts[best]
}

pub fn estimate_shift_is<P: Predictor + ?Sized>(
    model: &P,
    dataset: &Dataset,
    max: u32,
    cap: &SampleCap,
) -> Result<ShiftEstimate> {
    Ok(ShiftScores::compute(model, dataset, max, cap)?.estimate_is())
}

pub fn estimate_shift_am<P: Predictor + ?Sized>(
    model: &P,
    dataset: &Dataset,
    max: u32,
    class_dist: &[f64],
    cap: &SampleCap,
) -> Result<ShiftEstimate> {
    validate_distribution(class_dist, model.num_classes())?;
    ShiftScores::compute(model, dataset, max, cap)?.estimate_am(class_dist)
}

pub fn estimate_shift_entropy<P: Predictor + ?Sized>(
    model: &P,
    dataset: &Dataset,
    max: u32,
    cap: &SampleCap,
) -> Result<ShiftEstimate> {
    Ok(ShiftScores::compute(model, dataset, max, cap)?.estimate_entropy())
}

/// IS-bootstrapped AM estimate, or AM against `prior` when given.
pub fn estimate_temporal_shift<P: Predictor + ?Sized>(
    model: &P,
    dataset: &Dataset,
    max: u32,
    prior: Option<&[f64]>,
    cap: &SampleCap,
) -> Result<ShiftEstimate> {
    if let Some(c) = prior {
        validate_distribution(c, model.num_classes())?;
    }
    ShiftScores::compute(model, dataset, max, cap)?.estimate_temporal_shift(prior)
}
