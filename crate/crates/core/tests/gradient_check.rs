use rand::Rng;
use tmlab_core::data::TimeSeriesSample;
use tmlab_core::model::{focal_loss, DomainTag, Input, Mode, ModelDims, ModelParams, PosEncConfig};
use tmlab_core::rng::rng_from;

const STEP: f64 = 1e-4;
const FLOOR: f64 = 1e-5;

fn instance(seed: u64) -> (ModelParams<f64>, Vec<TimeSeriesSample>, Vec<usize>) {
    let dims = ModelDims {
        channels: 3,
        hidden: 6,
        embed: 8,
        key: 4,
        value: 5,
        classes: 3,
    };
    let mut rng = rng_from(seed);
    let classes = vec!["a".into(), "b".into(), "unknown".into()];
    let p32 = ModelParams::<f32>::init(dims, PosEncConfig::new(8, 30), classes, &mut rng).unwrap();
    let mut p = p32.cast::<f64>();
    // move away from the identity normalization so every term matters
    for g in p.weights.bn1_gamma.data.iter_mut().chain(p.weights.bn2_gamma.data.iter_mut()) {
        *g = rng.random_range(0.5..1.5);
    }
    for b in p.weights.bn1_beta.data.iter_mut().chain(p.weights.bn2_beta.data.iter_mut()) {
        *b = rng.random_range(-0.3..0.3);
    }
    for v in p.norms.source.var1.iter_mut().chain(p.norms.source.var2.iter_mut()) {
        *v = rng.random_range(0.5..2.0);
    }
    let samples: Vec<TimeSeriesSample> = (0..3)
        .map(|i| {
            let mut days = Vec::new();
            let mut d = 0;
            for _ in 0..5 {
                d += rng.random_range(1..40);
                days.push(d);
            }
            let pixels = (0..5 * 4 * 3).map(|_| rng.random::<f32>()).collect();
            TimeSeriesSample::new(format!("g{i}"), days, pixels, 4, 3, None).unwrap()
        })
        .collect();
    let labels = (0..3).map(|_| rng.random_range(0..3)).collect();
    (p, samples, labels)
}

fn objective(p: &ModelParams<f64>, inputs: &[Input], labels: &[usize], weights: &[f64], mode: Mode) -> f64 {
    let f = p.forward_batch(inputs, DomainTag::Source, mode, false).unwrap();
    (0..inputs.len())
        .map(|i| weights[i] * focal_loss(&f.probs_f64(i), labels[i], 1.0))
        .sum()
}

/// Largest relative error over every coordinate of every tensor.
fn max_relative_error(seed: u64, mode: Mode, weights: &[f64]) -> (f64, String) {
    let (p, samples, labels) = instance(seed);
    let inputs: Vec<Input> = samples.iter().zip([-7, 0, 12]).map(|(s, d)| Input::new(s, d)).collect();
    let fwd = p.forward_batch(&inputs, DomainTag::Source, mode, true).unwrap();
    let grads = p.backward(&fwd, &labels, weights, 1.0).unwrap();

    let mut worst = (0.0f64, String::new());
    for (ti, (name, t)) in grads.0.tensors().into_iter().enumerate() {
        for k in 0..t.data.len() {
            let mut plus = p.clone();
            plus.weights.tensors_mut()[ti].1.data[k] += STEP;
            let mut minus = p.clone();
            minus.weights.tensors_mut()[ti].1.data[k] -= STEP;
            let numeric = (objective(&plus, &inputs, &labels, weights, mode)
                - objective(&minus, &inputs, &labels, weights, mode))
                / (2.0 * STEP);
            let analytic = t.data[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}]: analytic {analytic:e} numeric {numeric:e}"));
            }
        }
    }
    worst
}

#[test]
fn analytic_gradients_match_central_differences_in_train_mode() {
    for seed in 0..20 {
        let (err, at) = max_relative_error(seed, Mode::Train, &[1.0 / 3.0; 3]);
        assert!(err < 1e-3, "seed {seed}: relative error {err:e} at {at}");
    }
}

#[test]
fn zero_weight_samples_still_act_through_batch_statistics() {
    for seed in 100..104 {
        let (err, at) = max_relative_error(seed, Mode::Train, &[0.5, 0.0, 1.5]);
        assert!(err < 1e-3, "seed {seed}: relative error {err:e} at {at}");
    }
}

#[test]
fn eval_mode_gradients_match_central_differences() {
    for seed in 200..204 {
        let (err, at) = max_relative_error(seed, Mode::Eval, &[0.2, 0.3, 0.5]);
        assert!(err < 1e-3, "seed {seed}: relative error {err:e} at {at}");
    }
}

#[test]
fn zero_loss_weight_gives_zero_gradient() {
    let (p, samples, labels) = instance(7);
    let inputs: Vec<Input> = samples.iter().map(|s| Input::new(s, 0)).collect();
    let fwd = p.forward_batch(&inputs, DomainTag::Source, Mode::Train, true).unwrap();
    let g = p.backward(&fwd, &labels, &[0.0; 3], 1.0).unwrap();
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn duplicated_batch_gives_the_same_mean_gradient() {
    let (p, samples, labels) = instance(8);
    let inputs: Vec<Input> = samples.iter().map(|s| Input::new(s, 3)).collect();
    let fwd = p.forward_batch(&inputs, DomainTag::Source, Mode::Train, true).unwrap();
    let single = p.backward(&fwd, &labels, &[1.0 / 3.0; 3], 1.0).unwrap();

    let doubled: Vec<Input> = inputs.iter().chain(&inputs).copied().collect();
    let labels2: Vec<usize> = labels.iter().chain(&labels).copied().collect();
    let fwd2 = p.forward_batch(&doubled, DomainTag::Source, Mode::Train, true).unwrap();
    let double = p.backward(&fwd2, &labels2, &[1.0 / 6.0; 6], 1.0).unwrap();

    for ((name, a), (_, b)) in single.0.tensors().into_iter().zip(double.0.tensors()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{name}: {x} vs {y}");
        }
    }
}
