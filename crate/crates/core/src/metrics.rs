//! Confusion-matrix metrics and full-resolution evaluation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::predictor::Predictor;
use crate::shift::{argmax, SampleCap};

/// Confusion counts, rows = truth, columns = prediction.
pub type Confusion = Vec<Vec<u64>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Class neither present nor predicted; its F1 is defined as 0.
    pub absent: bool,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn class_scores(confusion: &Confusion) -> Vec<ClassScores> {
    let k = confusion.len();
    (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let truth: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, truth);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                absent: truth == 0 && predicted == 0,
            }
        })
        .collect()
}

pub fn per_class_f1(confusion: &Confusion) -> Vec<f64> {
    class_scores(confusion).iter().map(|s| s.f1).collect()
}

/// Unweighted mean of the per-class F1 over all classes.
pub fn macro_f1(confusion: &Confusion) -> f64 {
    let f = per_class_f1(confusion);
    if f.is_empty() {
        return 0.0;
    }
    f.iter().sum::<f64>() / f.len() as f64
}

pub fn accuracy(confusion: &Confusion) -> f64 {
    let total: u64 = confusion.iter().flatten().sum();
    let trace: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    ratio(trace, total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub classes: Vec<String>,
    pub confusion: Confusion,
    pub per_class: Vec<ClassScores>,
    /// Mean F1 over all classes including unknown.
    pub macro_f1: f64,
    /// Mean F1 over all classes except unknown.
    pub macro_f1_known: f64,
    pub accuracy: f64,
    pub n: u64,
    pub shift: i32,
}

impl EvalResult {
    pub fn from_confusion(classes: Vec<String>, confusion: Confusion, shift: i32) -> Self {
        let per_class = class_scores(&confusion);
        let unknown = classes.iter().position(|c| c == crate::data::UNKNOWN_CLASS);
        let known: Vec<f64> = per_class
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != unknown)
            .map(|(_, s)| s.f1)
            .collect();
        let macro_f1_known = if known.is_empty() {
            0.0
        } else {
            known.iter().sum::<f64>() / known.len() as f64
        };
        Self {
            macro_f1: macro_f1(&confusion),
            macro_f1_known,
            accuracy: accuracy(&confusion),
            n: confusion.iter().flatten().sum(),
            per_class,
            classes,
            confusion,
            shift,
        }
    }

    /// Macro F1 with or without the unknown class.
    pub fn macro_f1_with(&self, include_unknown: bool) -> f64 {
        if include_unknown {
            self.macro_f1
        } else {
            self.macro_f1_known
        }
    }

    /// Confusion matrix as CSV with a header row of predicted class names.
    pub fn write_confusion_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "truth,{}", self.classes.join(","))?;
        for (name, row) in self.classes.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(w, "{name},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Predictions at `shift` over every sample, all timesteps and pixels.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, dataset: &Dataset, shift: i32) -> Result<EvalResult> {
    let k = model.num_classes();
    if dataset.num_classes() != k {
        return Err(Error::Dimension(format!(
            "dataset {} has {} classes, model predicts {k}",
            dataset.domain_id,
            dataset.num_classes()
        )));
    }
    let labels = dataset
        .samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Unlabeled(s.id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = dataset.samples.iter().collect();
    let mut confusion = vec![vec![0u64; k]; k];
    // bounded chunks keep memory flat on large datasets
    for (chunk, lab) in refs.chunks(1024).zip(labels.chunks(1024)) {
        let preds = model.predict(chunk, shift)?;
        for (p, &y) in preds.iter().zip(lab) {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite prediction during evaluation".into()));
            }
            confusion[y][argmax(p)] += 1;
        }
    }
    Ok(EvalResult::from_confusion(dataset.class_names.clone(), confusion, shift))
}

/// Evaluation at every shift in `shifts` (all samples, no cap), sharing
/// embeddings across shifts.
pub fn evaluate_sweep<P: Predictor + ?Sized>(model: &P, dataset: &Dataset, shifts: &[i32]) -> Result<Vec<EvalResult>> {
    let k = model.num_classes();
    if dataset.num_classes() != k {
        return Err(Error::Dimension(format!(
            "dataset {} has {} classes, model predicts {k}",
            dataset.domain_id,
            dataset.num_classes()
        )));
    }
    let cap = SampleCap::new(dataset.len().max(1), 0);
    let samples = cap.select(dataset)?;
    let labels = samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Unlabeled(s.id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let grid = model.predict_grid(&samples, shifts)?;
    Ok(grid
        .iter()
        .zip(shifts)
        .map(|(preds, &shift)| {
            let mut confusion = vec![vec![0u64; k]; k];
            for (p, &y) in preds.iter().zip(&labels) {
                confusion[y][argmax(p)] += 1;
            }
            EvalResult::from_confusion(dataset.class_names.clone(), confusion, shift)
        })
        .collect())
}
