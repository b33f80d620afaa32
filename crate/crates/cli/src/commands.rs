//! Implementations of the `tmlab` subcommands. Each writes its primary
//! output to `out` and files to the given paths.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::json;
use tmlab_core::adapt::{adapt, pretrain_source, Method};
use tmlab_core::data::{generate_domain, load_dataset, save_dataset, Dataset, ScenarioSpec};
use tmlab_core::metrics::{evaluate, evaluate_sweep};
use tmlab_core::model::{load_checkpoint, save_checkpoint, DomainTag, ModelParams};
use tmlab_core::predictor::ModelPredictor;
use tmlab_core::rng::{derive_seed, stream};
use tmlab_core::shift::{Metric, SampleCap, ShiftScores};
use tmlab_core::Error;

use crate::config::RunConfig;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    ensure_parent(path)?;
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_json_line(w: &mut impl Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// `path` itself when it is a file, else `path/<split>.jsonl`.
pub fn split_path(path: &Path, split: &str) -> PathBuf {
    if path.is_dir() {
        path.join(format!("{split}.jsonl"))
    } else {
        path.to_path_buf()
    }
}

fn load_split(path: &Path, split: &str) -> Result<Dataset> {
    let p = split_path(path, split);
    load_dataset(&p).with_context(|| format!("loading {}", p.display()))
}

/// Relabels `ds` onto the model's classes; classes the model dropped fold
/// into unknown. Fails when the data lack one of the model's classes or
/// differ in channel count.
pub fn align_classes(ds: Dataset, model: &ModelParams<f32>) -> Result<Dataset> {
    let ds = if ds.class_names == model.classes {
        ds
    } else {
        ds.remap_classes(&model.classes)?
    };
    model.check_dataset(&ds)?;
    Ok(ds)
}

fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    let (p, _) = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(p)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::InvalidInput(format!("{name} is required (flag or paths.{name} in the config)")).into())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub struct GenerateArgs {
    pub scenario: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
}

/// Writes `<out>/<domain>.jsonl` and `<out>/<domain>/{train,val,test}.jsonl`
/// for every domain of the scenario.
pub fn generate(args: &GenerateArgs, out: &mut impl Write) -> Result<()> {
    let text = std::fs::read_to_string(&args.scenario).map_err(io_err(&args.scenario))?;
    let scenario: ScenarioSpec = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidInput(format!("scenario {}: {e}", args.scenario.display())))?;
    scenario.validate()?;
    for domain in &scenario.domains {
        let ds = generate_domain(&scenario, &domain.id, derive_seed(args.seed, &format!("data.{}", domain.id)))?;
        let dir = args.out.join(&domain.id);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        save_dataset(&ds, args.out.join(format!("{}.jsonl", domain.id)))?;

        let n = ds.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(args.seed, &format!("split.{}", domain.id)));
        let n_train = n * 7 / 10;
        let n_val = n / 10;
        let parts = [
            ("train", &order[..n_train]),
            ("val", &order[n_train..n_train + n_val]),
            ("test", &order[n_train + n_val..]),
        ];
        let mut sizes = serde_json::Map::new();
        for (name, idx) in parts {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            save_dataset(&ds.subset(&idx), dir.join(format!("{name}.jsonl")))?;
            sizes.insert(name.into(), idx.len().into());
        }
        write_json_line(
            out,
            &json!({"domain": domain.id, "samples": n, "shift": domain.shift, "splits": sizes}),
        )?;
    }
    Ok(())
}

pub enum Preset {
    Standard { shifts: Vec<i32> },
    Confusable { shift: i32 },
    Mirrored { shift: i32 },
}

pub fn preset(kind: &Preset, samples: usize, out: &mut impl Write) -> Result<()> {
    let spec = match kind {
        Preset::Standard { shifts } => ScenarioSpec::standard(shifts, samples),
        Preset::Confusable { shift } => ScenarioSpec::confusable_pair(*shift, samples),
        Preset::Mirrored { shift } => ScenarioSpec::mirrored(*shift, samples),
    };
    spec.validate()?;
    serde_json::to_writer_pretty(&mut *out, &spec)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub struct PretrainArgs {
    pub config: Option<PathBuf>,
    pub source: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub shiftaug: bool,
    pub log: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn pretrain(args: &PretrainArgs, out: &mut impl Write) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    let source = required(args.source.clone(), &cfg.paths.source, "source")?;
    let ckpt = required(args.out.clone(), &cfg.paths.out, "out")?;

    let raw = load_split(&source, "train")?;
    let train = raw.select_frequent_classes(cfg.min_class_examples)?;
    let folded: Vec<&String> = raw.class_names.iter().filter(|c| !train.class_names.contains(c)).collect();
    let val_path = split_path(&source, "val");
    let val = if source.is_dir() && val_path.exists() {
        Some(load_dataset(&val_path)?.remap_classes(&train.class_names)?)
    } else {
        None
    };
    info!(
        "pretraining on {} samples, classes {:?}, folded into unknown {:?}",
        train.len(),
        train.class_names,
        folded
    );
    let (params, report) = pretrain_source(&train, val.as_ref(), &cfg.model, &cfg.train, args.shiftaug)?;
    ensure_parent(&ckpt)?;
    save_checkpoint(&params, None, &ckpt)?;

    let log_path = args.log.clone().unwrap_or_else(|| with_suffix(&ckpt, ".log.jsonl"));
    let mut log = create(&log_path)?;
    for e in &report.epochs {
        write_json_line(&mut log, e)?;
    }
    let summary = json!({"summary": {
        "shiftaug": report.shiftaug,
        "best_epoch": report.best_epoch,
        "classes": report.classes,
        "folded_into_unknown": folded,
        "train_samples": train.len(),
        "val_samples": val.as_ref().map(Dataset::len),
        "checkpoint": ckpt.display().to_string(),
    }});
    write_json_line(&mut log, &summary)?;
    log.flush()?;
    write_json_line(out, &summary)
}

pub struct EstimateArgs {
    pub model: PathBuf,
    pub target: PathBuf,
    pub metric: Metric,
    pub cap: usize,
    pub max_shift: Option<u32>,
    pub curve: PathBuf,
    pub domain: DomainTag,
    pub seed: u64,
}

/// Score curve over every candidate shift plus the estimate of the chosen
/// metric. The AM column uses the class distribution of the pseudo-labels
/// at the IS optimum.
pub fn estimate_shift(args: &EstimateArgs, out: &mut impl Write) -> Result<()> {
    let model = load_model(&args.model)?;
    let target = align_classes(load_split(&args.target, "train")?, &model)?;
    let max = args.max_shift.unwrap_or(model.max_shift());
    let pred = ModelPredictor::new(&model, args.domain);
    let cap = SampleCap::new(args.cap, derive_seed(args.seed, "estimate"));
    let scores = ShiftScores::compute(&pred, &target, max, &cap)?;
    let is = scores.estimate_is();
    let c = scores.pseudo_label_distribution(is.delta_t_to_s).to_vec();
    let am = scores.am(&c)?;
    let estimate = match args.metric {
        Metric::Am => scores.estimate_temporal_shift(None)?,
        Metric::Is => is,
        Metric::Entropy => scores.estimate_entropy(),
    };

    let mut w = create(&args.curve)?;
    writeln!(w, "shift,entropy,is,am")?;
    for (i, s) in scores.shifts.iter().enumerate() {
        writeln!(w, "{s},{},{},{}", scores.entropy[i], scores.inception[i], am[i])?;
    }
    w.flush()?;
    write_json_line(
        out,
        &json!({
            "delta": estimate.delta_t_to_s,
            "delta_s_to_t": estimate.delta_s_to_t(),
            "metric": estimate.metric,
            "class_distribution": estimate.class_distribution_used,
            "max_shift": max,
            "samples": target.len().min(args.cap),
            "curve": args.curve.display().to_string(),
        }),
    )
}

pub struct AdaptArgs {
    pub config: Option<PathBuf>,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub method: Option<Method>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub teacher_out: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn adapt_cmd(args: &AdaptArgs, out: &mut impl Write) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    let method = args.method.unwrap_or(cfg.method);
    let source = required(args.source.clone(), &cfg.paths.source, "source")?;
    let target = required(args.target.clone(), &cfg.paths.target, "target")?;
    let init_path = required(args.init.clone(), &cfg.paths.init, "init")?;
    let ckpt = required(args.out.clone(), &cfg.paths.out, "out")?;

    let init = load_model(&init_path)?;
    let src = align_classes(load_split(&source, "train")?, &init)?;
    let tgt = align_classes(load_split(&target, "train")?, &init)?;
    let outcome = adapt(method, &src, &tgt, &init, &cfg.train)?;
    ensure_parent(&ckpt)?;
    save_checkpoint(&outcome.student, None, &ckpt)?;
    if let Some(t) = &args.teacher_out {
        save_checkpoint(&outcome.teacher, None, t)?;
    }
    let mut report = outcome.report;
    report.checkpoint = Some(ckpt.display().to_string());
    let report_path = args.report.clone().unwrap_or_else(|| with_suffix(&ckpt, ".report.jsonl"));
    let mut w = create(&report_path)?;
    report.write_json_lines(&mut w)?;
    w.flush()?;
    write_json_line(
        out,
        &json!({
            "method": method,
            "epochs": report.epochs.len(),
            "iterations": report.iterations,
            "estimation_calls": report.estimation_calls,
            "delta_s_to_t": report.delta_s_to_t,
            "checkpoint": ckpt.display().to_string(),
            "report": report_path.display().to_string(),
        }),
    )
}

pub struct EvaluateArgs {
    pub model: PathBuf,
    pub data: PathBuf,
    pub split: String,
    pub shift: i32,
    pub sweep: bool,
    pub domain: DomainTag,
    pub confusion: Option<PathBuf>,
}

pub fn evaluate_cmd(args: &EvaluateArgs, out: &mut impl Write) -> Result<()> {
    let model = load_model(&args.model)?;
    let data = align_classes(load_split(&args.data, &args.split)?, &model)?;
    let pred = ModelPredictor::new(&model, args.domain);
    if args.sweep {
        let max = model.max_shift() as i32;
        let shifts: Vec<i32> = (-max..=max).collect();
        let results = evaluate_sweep(&pred, &data, &shifts)?;
        for r in &results {
            write_json_line(
                out,
                &json!({"shift": r.shift, "accuracy": r.accuracy, "macro_f1": r.macro_f1, "macro_f1_known": r.macro_f1_known}),
            )?;
        }
        return Ok(());
    }
    let result = evaluate(&pred, &data, args.shift)?;
    if let Some(p) = &args.confusion {
        let mut w = create(p)?;
        result.write_confusion_csv(&mut w)?;
        w.flush()?;
    }
    write_json_line(out, &result)
}
