//! Source pre-training and target adaptation.
//!
//! Adaptation runs a student and an EMA teacher. Each epoch the teacher
//! estimates the shift `d_ts` that aligns target days with the source; the
//! source-to-target shift `d_st = -d_ts` is fixed after the first epoch.
//! Each iteration the student minimizes
//! `L_src(source shifted by d_st) + lambda * L_tgt(target, teacher pseudo-labels)`,
//! where pseudo-labels come from the teacher on the target shifted by `d_ts`
//! and only those with confidence above the threshold contribute.

use std::io::Write;

use log::{info, warn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{subsample_pixels, subsample_timesteps, BalancedSampler, Dataset, TimeSeriesSample, UniformSampler};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{
    adam_step, ema_update, focal_loss, CosineSchedule, DomainTag, Gradients, Input, Mode, ModelDims, ModelParams,
    OptimizerState, PosEncConfig,
};
use crate::predictor::ModelPredictor;
use crate::rng::{derive_seed, stream, Rng};
use crate::shift::{argmax, Metric, SampleCap, ShiftEstimate, ShiftScores};

/// Layer widths not determined by the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed: usize,
    pub key: usize,
    pub value: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embed: 64,
            key: 16,
            value: 64,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, channels: usize, classes: usize) -> ModelDims {
        ModelDims {
            channels,
            hidden: self.hidden,
            embed: self.embed,
            key: self.key,
            value: self.value,
            classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Largest shift in days, both for estimation and for the encoding offset.
    pub max_shift: u32,
    /// Weight of the target loss.
    pub lambda: f64,
    /// EMA decay of the teacher.
    pub ema_decay: f64,
    /// Pseudo-label confidence threshold. Values above 1 disable pseudo-labels.
    pub threshold: f64,
    pub focal_gamma: f64,
    /// Size of each source batch and of each target batch.
    pub batch_size: usize,
    pub pixel_sample: usize,
    /// Timesteps kept by the strong augmentation.
    pub timestep_sample: usize,
    pub pretrain_epochs: usize,
    /// Iterations per pre-training epoch; 0 means one pass over the data.
    pub pretrain_iterations: usize,
    pub pretrain_lr: f64,
    pub adapt_epochs: usize,
    pub iterations_per_epoch: usize,
    pub adapt_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub sample_cap: usize,
    pub balanced_source: bool,
    /// Separate normalization statistics for target batches.
    pub domain_specific_norm: bool,
    /// Score minimized or maximized by the per-epoch shift estimation.
    pub metric: Metric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_shift: 60,
            lambda: 2.0,
            ema_decay: 0.9999,
            threshold: 0.9,
            focal_gamma: 1.0,
            batch_size: 128,
            pixel_sample: 64,
            timestep_sample: 30,
            pretrain_epochs: 100,
            pretrain_iterations: 0,
            pretrain_lr: 1e-3,
            adapt_epochs: 20,
            iterations_per_epoch: 500,
            adapt_lr: 1e-4,
            weight_decay: 1e-4,
            seed: 0,
            sample_cap: 5000,
            balanced_source: true,
            domain_specific_norm: true,
            metric: Metric::Am,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return bad("threshold must be finite and nonnegative");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and nonnegative");
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return bad("focal_gamma must be finite and nonnegative");
        }
        if self.batch_size == 0 || self.pixel_sample == 0 || self.timestep_sample == 0 {
            return bad("batch_size, pixel_sample and timestep_sample must be positive");
        }
        for lr in [self.pretrain_lr, self.adapt_lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("learning rates must be positive");
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be nonnegative");
        }
        if self.sample_cap == 0 {
            return bad("sample_cap must be positive");
        }
        if self.max_shift > 366 {
            return bad("max_shift above 366 days");
        }
        Ok(())
    }

    pub fn estimation_cap(&self) -> SampleCap {
        SampleCap::new(self.sample_cap, derive_seed(self.seed, "estimate"))
    }

    fn target_tag(&self) -> DomainTag {
        if self.domain_specific_norm {
            DomainTag::Target
        } else {
            DomainTag::Source
        }
    }
}

/// Pixel subsampling followed by the strong timestep augmentation.
fn strong(sample: &TimeSeriesSample, cfg: &TrainConfig, rng: &mut Rng) -> TimeSeriesSample {
    let s = subsample_pixels(sample, cfg.pixel_sample, rng);
    subsample_timesteps(&s, cfg.timestep_sample, rng)
}

enum SourceSampler {
    Balanced(BalancedSampler),
    Uniform(UniformSampler),
}

impl SourceSampler {
    fn new(ds: &Dataset, cfg: &TrainConfig, rng: Rng) -> Result<Self> {
        Ok(if cfg.balanced_source {
            SourceSampler::Balanced(BalancedSampler::new(ds, cfg.batch_size, rng)?)
        } else {
            SourceSampler::Uniform(UniformSampler::new(ds, cfg.batch_size, rng)?)
        })
    }

    fn next_batch(&mut self) -> Vec<usize> {
        match self {
            SourceSampler::Balanced(s) => s.next_batch(),
            SourceSampler::Uniform(s) => s.next_batch(),
        }
    }
}

fn require_labels(ds: &Dataset) -> Result<Vec<usize>> {
    ds.samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::Unlabeled(s.id.clone())))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

fn mean_focal(probs: &[Vec<f32>], labels: &[usize], weights: &[f64], gamma: f64) -> f64 {
    probs
        .iter()
        .zip(labels)
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|((p, &y), &w)| {
            let p: Vec<f64> = p.iter().map(|&v| v as f64).collect();
            w * focal_loss(&p, y, gamma)
        })
        .fold(0.0, |a, x| a + x)
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} is {v}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy of the training-mode predictions on the augmented batches.
    pub batch_accuracy: f64,
    pub val_macro_f1: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub shiftaug: bool,
    pub classes: Vec<String>,
    pub epochs: Vec<PretrainEpoch>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
}

/// Trains a source classifier on class-balanced, augmented batches.
///
/// With `shiftaug`, every presented example is shifted by an independent
/// uniform integer in `[-max_shift, max_shift]`, drawn from its own random
/// stream so that batches and augmentation are unchanged otherwise. The
/// epoch with the best validation macro F1 is kept (the last epoch without
/// validation data). Target statistics are copied from the source ones.
pub fn pretrain_source(
    train: &Dataset,
    val: Option<&Dataset>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    shiftaug: bool,
) -> Result<(ModelParams<f32>, PretrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset(train.domain_id.clone()));
    }
    let labels = require_labels(train)?;
    if let Some(v) = val {
        require_labels(v)?;
        if v.class_names != train.class_names || v.channels != train.channels {
            return Err(Error::Dimension("validation classes or channels differ from training".into()));
        }
    }
    let dims = model_cfg.dims(train.channels, train.num_classes());
    let posenc = PosEncConfig::new(model_cfg.embed, cfg.max_shift);
    let mut params = ModelParams::init(dims, posenc, train.class_names.clone(), &mut stream(cfg.seed, "init"))?;

    let iterations = if cfg.pretrain_iterations > 0 {
        cfg.pretrain_iterations
    } else {
        train.len().div_ceil(cfg.batch_size)
    };
    let total = (iterations * cfg.pretrain_epochs) as u64;
    let mut opt = OptimizerState::new(&params.weights, CosineSchedule::new(cfg.pretrain_lr, total));
    let mut sampler = SourceSampler::new(train, cfg, stream(cfg.seed, "batches.source"))?;
    let mut aug_rng = stream(cfg.seed, "augment.source");
    let mut shift_rng = stream(cfg.seed, "shiftaug");
    let b = cfg.batch_size;
    let weights = vec![1.0 / b as f64; b];
    let max = cfg.max_shift as i32;

    let mut report = PretrainReport {
        shiftaug,
        classes: train.class_names.clone(),
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, ModelParams<f32>)> = None;
    for epoch in 1..=cfg.pretrain_epochs {
        let lr = opt.current_lr();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for _ in 0..iterations {
            let idx = sampler.next_batch();
            let batch: Vec<TimeSeriesSample> = idx.iter().map(|&i| strong(&train.samples[i], cfg, &mut aug_rng)).collect();
            let shifts: Vec<i32> = idx
                .iter()
                .map(|_| if shiftaug { shift_rng.random_range(-max..=max) } else { 0 })
                .collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let inputs: Vec<Input> = batch.iter().zip(&shifts).map(|(s, &d)| Input::new(s, d)).collect();
            let fwd = params.forward_batch(&inputs, DomainTag::Source, Mode::Train, true)?;
            loss_sum += check_finite(mean_focal(&fwd.probs, &y, &weights, cfg.focal_gamma), "source loss")?;
            correct += fwd
                .probs
                .iter()
                .zip(&y)
                .filter(|(p, &l)| argmax(&p.iter().map(|&v| v as f64).collect::<Vec<_>>()) == l)
                .count();
            let grads = params.backward(&fwd, &y, &weights, cfg.focal_gamma)?;
            adam_step(&mut params.weights, &grads, &mut opt, cfg.weight_decay)?;
            if let Some(st) = &fwd.batch_stats {
                params.update_running_stats(DomainTag::Source, st);
            }
        }
        let val_macro_f1 = match val {
            Some(v) if !v.is_empty() => Some(evaluate(&ModelPredictor::new(&params, DomainTag::Source), v, 0)?.macro_f1),
            _ => None,
        };
        let rec = PretrainEpoch {
            epoch,
            loss: loss_sum / iterations as f64,
            batch_accuracy: correct as f64 / (iterations * b) as f64,
            val_macro_f1,
            lr,
        };
        info!(
            "pretrain epoch {epoch}: loss {:.4} batch acc {:.3} val f1 {}",
            rec.loss,
            rec.batch_accuracy,
            fmt_opt(rec.val_macro_f1)
        );
        report.epochs.push(rec);
        let score = val_macro_f1.unwrap_or(f64::NEG_INFINITY);
        if val_macro_f1.is_none() || best.as_ref().is_none_or(|(s, _)| score >= *s) {
            best = Some((score, params.clone()));
            report.best_epoch = epoch;
        }
    }
    let mut params = best.map(|(_, p)| p).unwrap_or(params);
    params.norms.target = params.norms.source.clone();
    if !params.is_finite() {
        return Err(Error::Numeric("pre-trained parameters are not finite".into()));
    }
    Ok((params, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Timematch,
    Fixmatch,
    SourceOnly,
    ShiftaugSource,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Timematch => "timematch",
            Method::Fixmatch => "fixmatch",
            Method::SourceOnly => "source_only",
            Method::ShiftaugSource => "shiftaug_source",
        }
    }

    /// Whether the method trains on the target at all.
    pub fn adapts(self) -> bool {
        matches!(self, Method::Timematch | Method::Fixmatch)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "timematch" => Ok(Method::Timematch),
            "fixmatch" => Ok(Method::Fixmatch),
            "source_only" => Ok(Method::SourceOnly),
            "shiftaug_source" => Ok(Method::ShiftaugSource),
            other => Err(Error::invalid(format!(
                "unknown method {other:?} (expected timematch, fixmatch, source_only or shiftaug_source)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Shift applied to target days for pseudo-labeling.
    pub delta_t_to_s: i32,
    /// Shift applied to source days for the supervised loss.
    pub delta_s_to_t: i32,
    /// Fraction of the epoch's pseudo-labels above the threshold.
    pub pass_fraction: f64,
    /// Agreement of pseudo-labels with target labels, when those exist.
    /// Diagnostic only; never used for training.
    pub pseudo_label_accuracy: Option<f64>,
    pub loss_source: f64,
    pub loss_target: f64,
    pub loss_target_max: f64,
    /// Frequency of every pseudo-label of the epoch.
    pub class_distribution: Vec<f64>,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub method: Method,
    pub epochs: Vec<EpochReport>,
    pub estimation_calls: usize,
    pub delta_s_to_t: i32,
    pub iterations: usize,
    pub checkpoint: Option<String>,
}

#[derive(Serialize)]
struct Summary<'a> {
    summary: SummaryBody<'a>,
}

#[derive(Serialize)]
struct SummaryBody<'a> {
    method: Method,
    epochs: usize,
    estimation_calls: usize,
    delta_s_to_t: i32,
    iterations: usize,
    final_delta_t_to_s: Option<i32>,
    checkpoint: &'a Option<String>,
}

impl AdaptReport {
    /// One JSON object per epoch followed by a summary object.
    pub fn write_json_lines(&self, mut w: impl Write) -> std::io::Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        let summary = Summary {
            summary: SummaryBody {
                method: self.method,
                epochs: self.epochs.len(),
                estimation_calls: self.estimation_calls,
                delta_s_to_t: self.delta_s_to_t,
                iterations: self.iterations,
                final_delta_t_to_s: self.epochs.last().map(|e| e.delta_t_to_s),
                checkpoint: &self.checkpoint,
            },
        };
        serde_json::to_writer(&mut w, &summary)?;
        w.write_all(b"\n")
    }
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub student: ModelParams<f32>,
    pub teacher: ModelParams<f32>,
    pub report: AdaptReport,
    /// Per-iteration source and target losses.
    pub source_losses: Vec<f64>,
    pub target_losses: Vec<f64>,
    /// Shift estimates of each epoch (empty without estimation).
    pub estimates: Vec<ShiftEstimate>,
}

fn check_domains(source: &Dataset, target: &Dataset, init: &ModelParams<f32>) -> Result<()> {
    if source.is_empty() {
        return Err(Error::EmptyDataset(source.domain_id.clone()));
    }
    if target.is_empty() {
        return Err(Error::EmptyDataset(target.domain_id.clone()));
    }
    init.check_dataset(source)?;
    init.check_dataset(target)?;
    if source.class_names != init.classes || target.class_names != init.classes {
        return Err(Error::Dimension("class lists of source, target and model differ".into()));
    }
    Ok(())
}

/// Teacher shift estimate on the target with the configured metric.
pub fn estimate_with_teacher(
    teacher: &ModelParams<f32>,
    target: &Dataset,
    prior: Option<&[f64]>,
    cfg: &TrainConfig,
) -> Result<ShiftEstimate> {
    let pred = ModelPredictor::new(teacher, cfg.target_tag());
    let scores = ShiftScores::compute(&pred, target, cfg.max_shift, &cfg.estimation_cap())?;
    match cfg.metric {
        Metric::Am => scores.estimate_temporal_shift(prior),
        Metric::Is => Ok(scores.estimate_is()),
        Metric::Entropy => Ok(scores.estimate_entropy()),
    }
}

/// Runs `method` from the source-trained `init`. `source_only` and
/// `shiftaug_source` return `init` unchanged without any iteration.
pub fn adapt(method: Method, source: &Dataset, target: &Dataset, init: &ModelParams<f32>, cfg: &TrainConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    check_domains(source, target, init)?;
    if init.max_shift() < cfg.max_shift {
        return Err(Error::ShiftOutOfRange {
            shift: cfg.max_shift as i32,
            max: init.max_shift(),
        });
    }
    if !method.adapts() {
        return Ok(AdaptOutcome {
            student: init.clone(),
            teacher: init.clone(),
            report: AdaptReport {
                method,
                epochs: Vec::new(),
                estimation_calls: 0,
                delta_s_to_t: 0,
                iterations: 0,
                checkpoint: None,
            },
            source_losses: Vec::new(),
            target_losses: Vec::new(),
            estimates: Vec::new(),
        });
    }
    let src_labels = require_labels(source)?;
    let k = init.num_classes();
    let b = cfg.batch_size;
    let m = cfg.iterations_per_epoch;
    let tgt_tag = cfg.target_tag();

    let mut student = init.clone();
    let mut teacher = init.clone();
    let total = (cfg.adapt_epochs * m) as u64;
    let mut opt = OptimizerState::new(&student.weights, CosineSchedule::new(cfg.adapt_lr, total));
    let mut src_sampler = SourceSampler::new(source, cfg, stream(cfg.seed, "batches.source"))?;
    let mut tgt_sampler = UniformSampler::new(target, b, stream(cfg.seed, "batches.target"))?;
    let mut src_rng = stream(cfg.seed, "augment.source");
    let mut tgt_rng = stream(cfg.seed, "augment.target");
    let src_weights = vec![1.0 / b as f64; b];

    let mut out = AdaptOutcome {
        student: init.clone(),
        teacher: init.clone(),
        report: AdaptReport {
            method,
            epochs: Vec::new(),
            estimation_calls: 0,
            delta_s_to_t: 0,
            iterations: 0,
            checkpoint: None,
        },
        source_losses: Vec::new(),
        target_losses: Vec::new(),
        estimates: Vec::new(),
    };
    let mut class_dist: Option<Vec<f64>> = None;
    let mut delta_st = 0;

    for epoch in 1..=cfg.adapt_epochs {
        let delta_ts = if method == Method::Timematch {
            let est = estimate_with_teacher(&teacher, target, class_dist.as_deref(), cfg)?;
            out.report.estimation_calls += 1;
            let flat = est.curve.values().all(|v| Some(v) == est.curve.values().next());
            if epoch == 1 {
                if flat {
                    warn!("first shift estimate has a flat score curve; proceeding with shift 0");
                }
                delta_st = -est.delta_t_to_s;
            }
            let d = est.delta_t_to_s;
            out.estimates.push(est);
            d
        } else {
            0
        };
        out.report.delta_s_to_t = delta_st;

        let lr = opt.current_lr();
        let mut counts = vec![0usize; k];
        let (mut passed, mut agree, mut labeled) = (0usize, 0usize, 0usize);
        let (mut ls_sum, mut lt_sum, mut lt_max) = (0.0, 0.0, 0.0f64);
        for _ in 0..m {
            let s_idx = src_sampler.next_batch();
            let t_idx = tgt_sampler.next_batch();

            let s_batch: Vec<TimeSeriesSample> = s_idx.iter().map(|&i| strong(&source.samples[i], cfg, &mut src_rng)).collect();
            let s_y: Vec<usize> = s_idx.iter().map(|&i| src_labels[i]).collect();
            // weak view: pixel set only; strong view adds timestep subsampling
            let t_weak: Vec<TimeSeriesSample> = t_idx
                .iter()
                .map(|&i| subsample_pixels(&target.samples[i], cfg.pixel_sample, &mut tgt_rng))
                .collect();
            let t_strong: Vec<TimeSeriesSample> = t_weak
                .iter()
                .map(|s| subsample_timesteps(s, cfg.timestep_sample, &mut tgt_rng))
                .collect();

            // teacher pseudo-labels on the target moved to source time
            let t_inputs: Vec<Input> = t_weak.iter().map(|s| Input::new(s, delta_ts)).collect();
            let q = teacher.forward_batch(&t_inputs, tgt_tag, Mode::Eval, false)?;
            let mut pseudo = Vec::with_capacity(b);
            let mut t_weights = Vec::with_capacity(b);
            for (p, &i) in q.probs.iter().zip(&t_idx) {
                let p: Vec<f64> = p.iter().map(|&v| v as f64).collect();
                let y = argmax(&p);
                counts[y] += 1;
                if let Some(l) = target.samples[i].label {
                    labeled += 1;
                    agree += usize::from(l == y);
                }
                let confident = p[y] > cfg.threshold;
                passed += usize::from(confident);
                pseudo.push(y);
                t_weights.push(if confident { cfg.lambda / b as f64 } else { 0.0 });
            }

            // student on shifted source
            let s_inputs: Vec<Input> = s_batch.iter().map(|s| Input::new(s, delta_st)).collect();
            let fs = student.forward_batch(&s_inputs, DomainTag::Source, Mode::Train, true)?;
            let ls = check_finite(mean_focal(&fs.probs, &s_y, &src_weights, cfg.focal_gamma), "source loss")?;
            let mut grads: Gradients<f32> = student.backward(&fs, &s_y, &src_weights, cfg.focal_gamma)?;

            // student on strongly augmented target with pseudo-labels
            let active = t_weights.iter().any(|&w| w != 0.0);
            let st_inputs: Vec<Input> = t_strong.iter().map(|s| Input::new(s, 0)).collect();
            let ft = student.forward_batch(&st_inputs, tgt_tag, Mode::Train, active)?;
            let unit: Vec<f64> = t_weights.iter().map(|&w| if w != 0.0 { 1.0 / b as f64 } else { 0.0 }).collect();
            let lt = check_finite(mean_focal(&ft.probs, &pseudo, &unit, cfg.focal_gamma), "target loss")?;
            if active {
                let gt = student.backward(&ft, &pseudo, &t_weights, cfg.focal_gamma)?;
                grads.0.add_scaled(&gt.0, 1.0);
            }

            adam_step(&mut student.weights, &grads, &mut opt, cfg.weight_decay)?;
            if let Some(st) = &fs.batch_stats {
                student.update_running_stats(DomainTag::Source, st);
            }
            if let Some(st) = &ft.batch_stats {
                student.update_running_stats(tgt_tag, st);
            }
            ema_update(&mut teacher, &student, cfg.ema_decay)?;

            ls_sum += ls;
            lt_sum += lt;
            lt_max = lt_max.max(lt);
            out.source_losses.push(ls);
            out.target_losses.push(lt);
            out.report.iterations += 1;
        }
        let n = (m * b) as f64;
        let dist: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        let rec = EpochReport {
            epoch,
            delta_t_to_s: delta_ts,
            delta_s_to_t: delta_st,
            pass_fraction: passed as f64 / n,
            pseudo_label_accuracy: (labeled > 0).then(|| agree as f64 / labeled as f64),
            loss_source: ls_sum / m as f64,
            loss_target: lt_sum / m as f64,
            loss_target_max: lt_max,
            class_distribution: dist.clone(),
            lr,
        };
        info!(
            "{} epoch {epoch}: d_ts {delta_ts} pass {:.3} pl acc {} L_src {:.4} L_tgt {:.4}",
            method.name(),
            rec.pass_fraction,
            fmt_opt(rec.pseudo_label_accuracy),
            rec.loss_source,
            rec.loss_target
        );
        out.report.epochs.push(rec);
        if m > 0 {
            class_dist = Some(dist);
        }
    }
    if !student.is_finite() || !teacher.is_finite() {
        return Err(Error::Numeric("adapted parameters are not finite".into()));
    }
    out.student = student;
    out.teacher = teacher;
    Ok(out)
}

/// Algorithm-2 self-training with per-epoch shift estimation.
pub fn timematch(source: &Dataset, target: &Dataset, init: &ModelParams<f32>, cfg: &TrainConfig) -> Result<AdaptOutcome> {
    adapt(Method::Timematch, source, target, init, cfg)
}

/// The same loop with both shifts fixed at zero and no estimation.
pub fn fixmatch_baseline(source: &Dataset, target: &Dataset, init: &ModelParams<f32>, cfg: &TrainConfig) -> Result<AdaptOutcome> {
    adapt(Method::Fixmatch, source, target, init, cfg)
}
