use rand::Rng;
use tmlab_core::adapt::*;
use tmlab_core::data::*;
use tmlab_core::metrics::evaluate;
use tmlab_core::model::{DomainTag, ModelParams, PosEncConfig};
use tmlab_core::predictor::ModelPredictor;
use tmlab_core::rng::rng_from;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        embed: 8,
        key: 4,
        value: 8,
    }
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        max_shift: 10,
        batch_size: 8,
        pixel_sample: 4,
        timestep_sample: 10,
        pretrain_epochs: 2,
        adapt_epochs: 2,
        iterations_per_epoch: 3,
        adapt_lr: 1e-3,
        sample_cap: 20,
        seed: 5,
        ..Default::default()
    }
}

fn pair(n: usize) -> (Dataset, Dataset) {
    let sc = ScenarioSpec::confusable_pair(6, n);
    (
        generate_domain(&sc, "source", 1).unwrap(),
        generate_domain(&sc, "target", 2).unwrap(),
    )
}

fn random_init(ds: &Dataset, cfg: &TrainConfig) -> ModelParams<f32> {
    let dims = tiny_model().dims(ds.channels, ds.num_classes());
    ModelParams::init(dims, PosEncConfig::new(8, cfg.max_shift), ds.class_names.clone(), &mut rng_from(3)).unwrap()
}

#[test]
fn separable_classes_are_learned() {
    let mut rng = rng_from(17);
    let samples = (0..200)
        .map(|i| {
            let label = i % 2;
            let level = if label == 0 { 0.25 } else { 0.75 };
            let days: Vec<i32> = (1..=8).map(|d| d * 30).collect();
            let pixels: Vec<f32> = (0..8 * 5 * 2).map(|_| level + rng.random_range(-0.1..0.1)).collect();
            TimeSeriesSample::new(format!("x{i}"), days, pixels, 5, 2, Some(label)).unwrap()
        })
        .collect();
    let ds = Dataset::new(samples, vec!["bright".into(), UNKNOWN_CLASS.into()], "sep", 2).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        pretrain_epochs: 10,
        max_shift: 0,
        ..quick_cfg()
    };
    let (p, report) = pretrain_source(&ds, None, &tiny_model(), &cfg, false).unwrap();
    assert_eq!(report.epochs.len(), 10);
    assert_eq!(report.best_epoch, 10);
    let acc = evaluate(&ModelPredictor::new(&p, DomainTag::Source), &ds, 0).unwrap().accuracy;
    assert!(acc > 0.95, "training accuracy {acc}");
}

#[test]
fn shiftaug_without_range_changes_nothing() {
    let (src, _) = pair(40);
    let cfg = TrainConfig {
        max_shift: 0,
        ..quick_cfg()
    };
    let (a, ra) = pretrain_source(&src, None, &tiny_model(), &cfg, false).unwrap();
    let (b, rb) = pretrain_source(&src, None, &tiny_model(), &cfg, true).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.epochs, rb.epochs);
    assert!(rb.shiftaug && !ra.shiftaug);
}

#[test]
fn pretraining_selects_on_validation_and_copies_statistics() {
    let (src, _) = pair(60);
    let train = src.subset(&(0..45).collect::<Vec<_>>());
    let val = src.subset(&(45..60).collect::<Vec<_>>());
    let cfg = TrainConfig {
        pretrain_epochs: 4,
        ..quick_cfg()
    };
    let (p, report) = pretrain_source(&train, Some(&val), &tiny_model(), &cfg, true).unwrap();
    let best = report
        .epochs
        .iter()
        .map(|e| e.val_macro_f1.unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(report.epochs[report.best_epoch - 1].val_macro_f1, Some(best));
    assert_eq!(p.norms.source, p.norms.target);
    assert!(pretrain_source(&train.without_labels(), None, &tiny_model(), &cfg, false).is_err());
}

#[test]
fn degenerate_switches_freeze_the_teacher() {
    let (src, tgt) = pair(40);
    let cfg = TrainConfig {
        ema_decay: 1.0,
        threshold: 1.5,
        lambda: 0.0,
        ..quick_cfg()
    };
    let init = random_init(&src, &cfg);
    let out = timematch(&src, &tgt, &init, &cfg).unwrap();
    assert_eq!(out.teacher, init);
    assert_ne!(out.student, init);
    assert!(out.target_losses.iter().all(|&l| l == 0.0));
    assert_eq!(out.target_losses.len(), 6);
    assert!(out.report.epochs.iter().all(|e| e.pass_fraction == 0.0 && e.loss_target == 0.0));
}

#[test]
fn unconfident_batches_add_nothing_to_the_update() {
    let (src, tgt) = pair(40);
    let base = TrainConfig {
        threshold: 1.5,
        lambda: 0.0,
        ..quick_cfg()
    };
    let init = random_init(&src, &base);
    let a = timematch(&src, &tgt, &init, &base).unwrap();
    let b = timematch(&src, &tgt, &init, &TrainConfig { lambda: 2.0, ..base.clone() }).unwrap();
    assert_eq!(a.student.weights, b.student.weights);
    assert_eq!(a.source_losses, b.source_losses);
}

#[test]
fn pass_fraction_falls_with_the_threshold() {
    let (src, tgt) = pair(40);
    let base = TrainConfig {
        adapt_epochs: 1,
        iterations_per_epoch: 1,
        batch_size: 32,
        ..quick_cfg()
    };
    let init = random_init(&src, &base);
    let mut last = f64::INFINITY;
    for eps in [0.0, 0.2, 0.3, 0.4, 0.6, 0.9, 1.0] {
        let out = fixmatch_baseline(&src, &tgt, &init, &TrainConfig { threshold: eps, ..base.clone() }).unwrap();
        let f = out.report.epochs[0].pass_fraction;
        assert!((0.0..=1.0).contains(&f));
        assert!(f <= last, "threshold {eps}: {f} after {last}");
        last = f;
    }
    assert_eq!(last, 0.0);
}

#[test]
fn timematch_report_contract() {
    let (src, tgt) = pair(40);
    let cfg = TrainConfig {
        adapt_epochs: 3,
        ..quick_cfg()
    };
    let init = random_init(&src, &cfg);
    let out = timematch(&src, &tgt, &init, &cfg).unwrap();
    let r = &out.report;
    assert_eq!(r.epochs.len(), 3);
    assert_eq!(r.estimation_calls, 3);
    assert_eq!(r.iterations, 9);
    let first = r.epochs[0].delta_t_to_s;
    assert_eq!(r.delta_s_to_t, -first);
    assert!(r.epochs.iter().all(|e| e.delta_s_to_t == -first));
    assert!(r.epochs.iter().all(|e| e.delta_t_to_s.unsigned_abs() <= cfg.max_shift));
    for e in &r.epochs {
        assert!((e.class_distribution.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(e.pseudo_label_accuracy.is_some());
    }
    assert!(out.estimates[0].class_distribution_used.is_some());
    assert_eq!(out.estimates[0].scans.is, 1);
    assert_eq!(out.estimates[1].scans.is, 0);
    assert_eq!(out.estimates[1].class_distribution_used.as_deref(), Some(&r.epochs[0].class_distribution[..]));

    let mut lines = Vec::new();
    r.write_json_lines(&mut lines).unwrap();
    let text = String::from_utf8(lines).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().last().unwrap().starts_with("{\"summary\""));
}

#[test]
fn baselines_skip_estimation() {
    let (src, tgt) = pair(40);
    let cfg = quick_cfg();
    let init = random_init(&src, &cfg);
    let fm = fixmatch_baseline(&src, &tgt, &init, &cfg).unwrap();
    assert_eq!(fm.report.estimation_calls, 0);
    assert!(fm.estimates.is_empty());
    assert!(fm.report.epochs.iter().all(|e| e.delta_t_to_s == 0 && e.delta_s_to_t == 0));
    assert_eq!(fm.report.epochs.len(), cfg.adapt_epochs);
    for m in [Method::SourceOnly, Method::ShiftaugSource] {
        let out = adapt(m, &src, &tgt, &init, &cfg).unwrap();
        assert_eq!(out.student, init);
        assert_eq!(out.report.iterations, 0);
        assert_eq!(out.report.estimation_calls, 0);
    }
}

#[test]
fn runs_are_reproducible() {
    let (src, tgt) = pair(40);
    let cfg = quick_cfg();
    let init = random_init(&src, &cfg);
    let a = timematch(&src, &tgt, &init, &cfg).unwrap();
    let b = timematch(&src, &tgt, &init, &cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.student, b.student);
    assert_eq!(a.teacher, b.teacher);
    let c = timematch(&src, &tgt, &init, &TrainConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a.student, c.student);
}

#[test]
fn invalid_settings_are_rejected() {
    let (src, tgt) = pair(20);
    let cfg = quick_cfg();
    let init = random_init(&src, &cfg);
    for bad in [
        TrainConfig { ema_decay: 1.1, ..cfg.clone() },
        TrainConfig { lambda: -1.0, ..cfg.clone() },
        TrainConfig { threshold: -0.1, ..cfg.clone() },
        TrainConfig { batch_size: 0, ..cfg.clone() },
    ] {
        assert!(timematch(&src, &tgt, &init, &bad).is_err());
    }
    let wide = TrainConfig { max_shift: 11, ..cfg.clone() };
    assert!(matches!(
        timematch(&src, &tgt, &init, &wide),
        Err(tmlab_core::Error::ShiftOutOfRange { .. })
    ));
    let empty = tgt.subset(&[]);
    assert!(matches!(
        timematch(&src, &empty, &init, &cfg),
        Err(tmlab_core::Error::EmptyDataset(_))
    ));
}
