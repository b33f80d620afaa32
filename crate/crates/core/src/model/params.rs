use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::posenc::PosEncConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scalar type the network is evaluated in. Weights live in `f32`; `f64`
/// is used for finite-difference checks.
pub trait Real: Float + FromPrimitive + ToPrimitive + Sum + Debug + Default + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub fn cast<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("finite conversion")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub channels: usize,
    /// Width of the per-pixel hidden layer and of the classifier hidden layer.
    pub hidden: usize,
    /// Pixel-set embedding width; also the positional encoding width.
    pub embed: usize,
    pub key: usize,
    pub value: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let d = self;
        if [d.channels, d.hidden, d.embed, d.key, d.value, d.classes].contains(&0) {
            return Err(Error::invalid(format!("model dimensions must be positive: {d:?}")));
        }
        if !d.embed.is_multiple_of(2) {
            return Err(Error::invalid("embedding width must be even"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| cast(rng.random_range(-bound..bound))).collect(),
        }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| cast(v.to_f64().unwrap())).collect(),
        }
    }
}

macro_rules! define_weights {
    ($($field:ident => $name:literal),* $(,)?) => {
        /// Every learnable tensor of the network. Dense weights are stored
        /// `[out, in]` row-major.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Weights<F> {
            $(pub $field: Tensor<F>,)*
        }

        impl<F: Real> Weights<F> {
            pub const NAMES: &'static [&'static str] = &[$($name),*];

            pub fn tensors(&self) -> Vec<(&'static str, &Tensor<F>)> {
                vec![$(($name, &self.$field)),*]
            }

            pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<F>)> {
                vec![$(($name, &mut self.$field)),*]
            }

            pub fn map<G: Real>(&self, f: impl Fn(&Tensor<F>) -> Tensor<G>) -> Weights<G> {
                Weights { $($field: f(&self.$field)),* }
            }
        }
    };
}

define_weights! {
    pse_w1 => "pse.dense1.weight",
    bn1_gamma => "pse.norm1.gamma",
    bn1_beta => "pse.norm1.beta",
    pse_w2 => "pse.dense2.weight",
    bn2_gamma => "pse.norm2.gamma",
    bn2_beta => "pse.norm2.beta",
    pool_w => "pse.pool.weight",
    pool_b => "pse.pool.bias",
    key_w => "attention.key.weight",
    key_b => "attention.key.bias",
    value_w => "attention.value.weight",
    value_b => "attention.value.bias",
    query => "attention.query",
    head_w1 => "head.dense1.weight",
    head_b1 => "head.dense1.bias",
    head_w2 => "head.dense2.weight",
    head_b2 => "head.dense2.bias",
}

impl<F: Real> Weights<F> {
    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(&t.shape))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    /// Elementwise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Weights<F>, scale: F) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + scale * *y;
            }
        }
    }
}

/// Gradient of an objective with respect to every [`Weights`] tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F>(pub Weights<F>);

impl<F: Real> Gradients<F> {
    pub fn max_abs(&self) -> f64 {
        self.0
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|v| v.abs().to_f64().unwrap())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.tensors().iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Running normalization statistics of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats<F> {
    pub mean1: Vec<F>,
    pub var1: Vec<F>,
    pub mean2: Vec<F>,
    pub var2: Vec<F>,
}

impl<F: Real> NormStats<F> {
    pub fn initial(hidden: usize, embed: usize) -> Self {
        Self {
            mean1: vec![F::zero(); hidden],
            var1: vec![F::one(); hidden],
            mean2: vec![F::zero(); embed],
            var2: vec![F::one(); embed],
        }
    }

    pub const NAMES: [&'static str; 4] = ["mean1", "var1", "mean2", "var2"];

    pub fn vectors(&self) -> [&Vec<F>; 4] {
        [&self.mean1, &self.var1, &self.mean2, &self.var2]
    }

    pub fn vectors_mut(&mut self) -> [&mut Vec<F>; 4] {
        [&mut self.mean1, &mut self.var1, &mut self.mean2, &mut self.var2]
    }

    /// `self <- keep * self + (1 - keep) * batch`.
    pub fn absorb(&mut self, batch: &NormStats<F>, keep: f64) {
        let keep = cast::<F>(keep);
        let fresh = F::one() - keep;
        for (r, b) in self.vectors_mut().into_iter().zip(batch.vectors()) {
            for (x, y) in r.iter_mut().zip(b) {
                *x = keep * *x + fresh * *y;
            }
        }
    }

    pub fn cast<G: Real>(&self) -> NormStats<G> {
        let c = |v: &Vec<F>| v.iter().map(|x| cast::<G>(x.to_f64().unwrap())).collect();
        NormStats {
            mean1: c(&self.mean1),
            var1: c(&self.var1),
            mean2: c(&self.mean2),
            var2: c(&self.var2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn name(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }
}

impl std::str::FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(DomainTag::Source),
            "target" => Ok(DomainTag::Target),
            other => Err(Error::invalid(format!("unknown domain tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainNorms<F> {
    pub source: NormStats<F>,
    pub target: NormStats<F>,
}

impl<F> DomainNorms<F> {
    pub fn get(&self, tag: DomainTag) -> &NormStats<F> {
        match tag {
            DomainTag::Source => &self.source,
            DomainTag::Target => &self.target,
        }
    }

    pub fn get_mut(&mut self, tag: DomainTag) -> &mut NormStats<F> {
        match tag {
            DomainTag::Source => &mut self.source,
            DomainTag::Target => &mut self.target,
        }
    }
}

/// Learnable weights plus per-domain normalization statistics and the
/// metadata needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub dims: ModelDims,
    pub posenc: PosEncConfig,
    pub classes: Vec<String>,
    pub weights: Weights<F>,
    pub norms: DomainNorms<F>,
}

impl<F: Real> ModelParams<F> {
    /// Uniform fan-in initialization for dense layers, unit-normal master
    /// query scaled by `1/sqrt(d_k)`, identity normalization.
    pub fn init(dims: ModelDims, posenc: PosEncConfig, classes: Vec<String>, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        posenc.validate()?;
        if posenc.dim != dims.embed {
            return Err(Error::Dimension(format!(
                "positional encoding width {} differs from embedding width {}",
                posenc.dim, dims.embed
            )));
        }
        if classes.len() != dims.classes {
            return Err(Error::Dimension(format!(
                "{} class names for {} outputs",
                classes.len(),
                dims.classes
            )));
        }
        Dataset::validate_classes(&classes)?;
        let ModelDims {
            channels: c,
            hidden: h,
            embed: e,
            key: dk,
            value: dv,
            classes: k,
        } = dims;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let query = Tensor {
            shape: vec![dk],
            data: (0..dk)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    cast(z * fan(dk))
                })
                .collect(),
        };
        let weights = Weights {
            pse_w1: Tensor::uniform(&[h, c], fan(c), rng),
            bn1_gamma: Tensor::filled(&[h], F::one()),
            bn1_beta: Tensor::zeros(&[h]),
            pse_w2: Tensor::uniform(&[e, h], fan(h), rng),
            bn2_gamma: Tensor::filled(&[e], F::one()),
            bn2_beta: Tensor::zeros(&[e]),
            pool_w: Tensor::uniform(&[e, 2 * e], fan(2 * e), rng),
            pool_b: Tensor::uniform(&[e], fan(2 * e), rng),
            key_w: Tensor::uniform(&[dk, e], fan(e), rng),
            key_b: Tensor::uniform(&[dk], fan(e), rng),
            value_w: Tensor::uniform(&[dv, e], fan(e), rng),
            value_b: Tensor::uniform(&[dv], fan(e), rng),
            query,
            head_w1: Tensor::uniform(&[h, dv], fan(dv), rng),
            head_b1: Tensor::uniform(&[h], fan(dv), rng),
            head_w2: Tensor::uniform(&[k, h], fan(h), rng),
            head_b2: Tensor::uniform(&[k], fan(h), rng),
        };
        Ok(Self {
            dims,
            posenc,
            classes,
            weights,
            norms: DomainNorms {
                source: NormStats::initial(h, e),
                target: NormStats::initial(h, e),
            },
        })
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            dims: self.dims,
            posenc: self.posenc,
            classes: self.classes.clone(),
            weights: self.weights.map(|t| t.cast()),
            norms: DomainNorms {
                source: self.norms.source.cast(),
                target: self.norms.target.cast(),
            },
        }
    }

    pub fn num_classes(&self) -> usize {
        self.dims.classes
    }

    pub fn max_shift(&self) -> u32 {
        self.posenc.max_shift
    }

    /// Folds the batch statistics of a training forward into the running
    /// statistics of `domain`.
    pub fn update_running_stats(&mut self, domain: DomainTag, batch: &NormStats<F>) {
        self.norms.get_mut(domain).absorb(batch, super::network::NORM_MOMENTUM);
    }

    /// Checks that this model can classify `dataset` as is.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.channels != self.dims.channels {
            return Err(Error::Dimension(format!(
                "dataset {} has {} channels, model expects {}",
                dataset.domain_id, dataset.channels, self.dims.channels
            )));
        }
        if dataset.num_classes() != self.dims.classes {
            return Err(Error::Dimension(format!(
                "dataset {} has {} classes, model predicts {}",
                dataset.domain_id,
                dataset.num_classes(),
                self.dims.classes
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.tensors().iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
            && [&self.norms.source, &self.norms.target]
                .iter()
                .all(|n| n.vectors().iter().all(|v| v.iter().all(|x| x.is_finite())))
    }
}

/// Exponential moving average `teacher <- (1 - alpha) * student + alpha * teacher`,
/// applied to every weight and to both domains' running statistics.
pub fn ema_update<F: Real>(teacher: &mut ModelParams<F>, student: &ModelParams<F>, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("EMA decay {alpha} outside [0, 1]")));
    }
    if teacher.dims != student.dims {
        return Err(Error::Dimension("teacher and student dimensions differ".into()));
    }
    if alpha == 1.0 {
        return Ok(());
    }
    if alpha == 0.0 {
        teacher.weights = student.weights.clone();
        teacher.norms = student.norms.clone();
        return Ok(());
    }
    let keep = cast::<F>(alpha);
    let fresh = cast::<F>(1.0 - alpha);
    let blend = |t: &mut [F], s: &[F]| {
        for (a, b) in t.iter_mut().zip(s) {
            *a = fresh * *b + keep * *a;
        }
    };
    for ((_, t), (_, s)) in teacher.weights.tensors_mut().into_iter().zip(student.weights.tensors()) {
        blend(&mut t.data, &s.data);
    }
    for tag in [DomainTag::Source, DomainTag::Target] {
        let s = student.norms.get(tag).clone();
        for (t, s) in teacher.norms.get_mut(tag).vectors_mut().into_iter().zip(s.vectors()) {
            blend(t, s);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    pub(crate) fn tiny(seed: u64) -> ModelParams<f32> {
        let dims = ModelDims {
            channels: 3,
            hidden: 6,
            embed: 4,
            key: 3,
            value: 5,
            classes: 3,
        };
        let classes = vec!["a".into(), "b".into(), "unknown".into()];
        ModelParams::init(dims, PosEncConfig::new(4, 10), classes, &mut rng_from(seed)).unwrap()
    }

    fn constant(mut p: ModelParams<f32>, v: f32) -> ModelParams<f32> {
        for (_, t) in p.weights.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = v);
        }
        for tag in [DomainTag::Source, DomainTag::Target] {
            for vec in p.norms.get_mut(tag).vectors_mut() {
                vec.iter_mut().for_each(|x| *x = v);
            }
        }
        p
    }

    #[test]
    fn ema_extremes() {
        let student = tiny(1);
        let init = tiny(2);

        let mut teacher = init.clone();
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher, init);

        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher.weights, student.weights);
        assert_eq!(teacher.norms, student.norms);
    }

    #[test]
    fn ema_midpoint() {
        let student = constant(tiny(1), 2.0);
        let mut teacher = constant(tiny(1), 0.0);
        ema_update(&mut teacher, &student, 0.5).unwrap();
        assert_eq!(teacher, constant(tiny(1), 1.0));
    }

    #[test]
    fn ema_rejects_bad_decay() {
        let s = tiny(1);
        let mut t = tiny(2);
        assert!(ema_update(&mut t, &s, 1.5).is_err());
    }

    #[test]
    fn init_checks_dimensions() {
        let mut dims = tiny(0).dims;
        dims.embed = 5;
        let r = ModelParams::<f32>::init(dims, PosEncConfig::new(5, 1), vec!["unknown".into()], &mut rng_from(0));
        assert!(r.is_err());
    }
}
