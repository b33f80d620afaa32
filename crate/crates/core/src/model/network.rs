//! Forward and backward passes of the pixel-set temporal classifier.
//!
//! Per pixel: `dense -> norm -> gelu -> dense -> norm -> gelu`. Per timestep:
//! mean and standard deviation over pixels, concatenated and projected back
//! to the embedding width, plus the day encoding. Over time: single-query
//! softmax attention. Head: `dense -> gelu -> dense -> softmax`.
//!
//! In training mode the normalization layers use statistics of the whole
//! batch (every pixel of every timestep of every sample), so samples are
//! processed in stages with a deterministic reduction in between. Work inside
//! a stage runs in parallel across samples; reductions always run in sample
//! order, which keeps results independent of the thread count.

use rayon::prelude::*;

use super::loss::focal_logit_grad;
use super::params::{cast, DomainTag, Gradients, ModelParams, NormStats, Real, Weights};
use crate::data::TimeSeriesSample;
use crate::error::{Error, Result};

/// Weight of the old running statistics in each update.
pub const NORM_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
/// Added to the pixel variance before the square root in std pooling.
pub const STD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the caller folds them into the running statistics.
    Train,
    /// Frozen running statistics of the requested domain.
    Eval,
}

/// One sample together with the shift added to its days before encoding.
#[derive(Debug, Clone, Copy)]
pub struct Input<'a> {
    pub sample: &'a TimeSeriesSample,
    pub shift: i32,
}

impl<'a> Input<'a> {
    pub fn new(sample: &'a TimeSeriesSample, shift: i32) -> Self {
        Self { sample, shift }
    }
}

#[derive(Debug, Clone)]
pub struct BatchForward<F> {
    pub probs: Vec<Vec<F>>,
    /// Attention weights over timesteps, one vector per sample.
    pub attention: Vec<Vec<F>>,
    /// Statistics of this batch (training mode only).
    pub batch_stats: Option<NormStats<F>>,
    cache: Option<BatchCache<F>>,
}

impl<F: Real> BatchForward<F> {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn drop_cache(&mut self) {
        self.cache = None;
    }

    pub fn probs_f64(&self, i: usize) -> Vec<f64> {
        self.probs[i].iter().map(|p| p.to_f64().unwrap()).collect()
    }
}

#[derive(Debug, Clone)]
struct BatchCache<F> {
    mode: Mode,
    rows: usize,
    inv1: Vec<F>,
    inv2: Vec<F>,
    samples: Vec<SampleCache<F>>,
}

#[derive(Debug, Clone)]
struct SampleCache<F> {
    t: usize,
    n: usize,
    x: Vec<F>,
    xhat1: Vec<F>,
    a1: Vec<F>,
    xhat2: Vec<F>,
    a2: Vec<F>,
    tail: Tail<F>,
}

/// Everything after the per-pixel layers.
#[derive(Debug, Clone)]
struct Tail<F> {
    /// `t x 2e`: pixel mean then pixel std per timestep.
    ms: Vec<F>,
    /// `t x e`: pooled projection plus day encoding.
    h: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    attn: Vec<F>,
    o: Vec<F>,
    g_pre: Vec<F>,
    g: Vec<F>,
    probs: Vec<F>,
}

/// Shift-independent part of an eval-mode forward: key and value
/// projections of the pooled timestep embeddings. Running
/// [`ModelParams::classify_embedded`] on it gives the same result as a full
/// eval-mode forward.
#[derive(Debug, Clone)]
pub struct Embedded<F> {
    pub days: Vec<i32>,
    ku: Vec<F>,
    vu: Vec<F>,
}

#[derive(Debug, Clone)]
struct DayTerms<F> {
    pe: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
}

/// Key/value projections of the day encoding for a contiguous day range.
#[derive(Debug, Clone)]
pub struct DayProjections<F> {
    first_day: i64,
    days: usize,
    key: usize,
    value: usize,
    k: Vec<F>,
    v: Vec<F>,
}

impl<F: Real> DayProjections<F> {
    pub fn covers(&self, day: i64) -> bool {
        day >= self.first_day && ((day - self.first_day) as usize) < self.days
    }

    fn rows(&self, day: i64) -> (&[F], &[F]) {
        let i = (day - self.first_day) as usize;
        (
            &self.k[i * self.key..(i + 1) * self.key],
            &self.v[i * self.value..(i + 1) * self.value],
        )
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let c = cast::<F>(GELU_C);
    let a = cast::<F>(GELU_A);
    let half = cast::<F>(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = cast::<F>(GELU_C);
    let a = cast::<F>(GELU_A);
    let half = cast::<F>(0.5);
    let three = cast::<F>(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] = acc[0] + x[0] * y[0];
        acc[1] = acc[1] + x[1] * y[1];
        acc[2] = acc[2] + x[2] * y[2];
        acc[3] = acc[3] + x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s = s + *x * *y;
    }
    s
}

#[inline]
fn axpy<F: Real>(y: &mut [F], a: F, x: &[F]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * *xi;
    }
}

/// `out = W x (+ b)` with `W` stored `[out, in]`.
fn affine<F: Real>(w: &[F], b: Option<&[F]>, x: &[F], out: &mut [F]) {
    let d_in = x.len();
    for (o, r) in out.iter_mut().enumerate() {
        let v = dot(&w[o * d_in..(o + 1) * d_in], x);
        *r = match b {
            Some(b) => v + b[o],
            None => v,
        };
    }
}

/// Row-wise `affine` over a row-major matrix.
fn affine_rows<F: Real>(w: &[F], x: &[F], d_in: usize, d_out: usize, out: &mut [F]) {
    for (xr, or) in x.chunks_exact(d_in).zip(out.chunks_exact_mut(d_out)) {
        affine(w, None, xr, or);
    }
}

/// `dw += dout x^T`.
fn outer_acc<F: Real>(dw: &mut [F], dout: &[F], x: &[F]) {
    let d_in = x.len();
    for (o, &g) in dout.iter().enumerate() {
        if g != F::zero() {
            axpy(&mut dw[o * d_in..(o + 1) * d_in], g, x);
        }
    }
}

/// `dx += W^T dout`.
fn transpose_acc<F: Real>(w: &[F], dout: &[F], dx: &mut [F]) {
    let d_in = dx.len();
    for (o, &g) in dout.iter().enumerate() {
        if g != F::zero() {
            axpy(dx, g, &w[o * d_in..(o + 1) * d_in]);
        }
    }
}

fn softmax_in_place<F: Real>(z: &mut [F]) {
    let m = z.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    for v in z.iter_mut() {
        *v = *v / s;
    }
}

/// Normalizes `z` in place into `xhat` and writes `gelu(gamma * xhat + beta)`
/// into `a`.
fn norm_act<F: Real>(z: &mut [F], a: &mut [F], mean: &[F], inv: &[F], gamma: &[F], beta: &[F]) {
    let d = mean.len();
    for (zr, ar) in z.chunks_exact_mut(d).zip(a.chunks_exact_mut(d)) {
        for j in 0..d {
            let xh = (zr[j] - mean[j]) * inv[j];
            zr[j] = xh;
            ar[j] = gelu(gamma[j] * xh + beta[j]);
        }
    }
}

/// Column means and biased variances over every row of every block, in f64.
fn moments<F: Real>(blocks: &[&[F]], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0f64; d];
    let mut rows = 0usize;
    for b in blocks {
        for r in b.chunks_exact(d) {
            for (s, v) in sum.iter_mut().zip(r) {
                *s += v.to_f64().unwrap();
            }
            rows += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
    let mut sq = vec![0.0f64; d];
    for b in blocks {
        for r in b.chunks_exact(d) {
            for ((s, v), m) in sq.iter_mut().zip(r).zip(&mean) {
                let dv = v.to_f64().unwrap() - m;
                *s += dv * dv;
            }
        }
    }
    let var = sq.iter().map(|s| s / rows as f64).collect();
    (mean, var)
}

fn inv_std<F: Real>(var: &[f64]) -> Vec<F> {
    var.iter().map(|v| cast(1.0 / (v + BN_EPS).sqrt())).collect()
}

fn to_f<F: Real>(v: &[f64]) -> Vec<F> {
    v.iter().map(|&x| cast(x)).collect()
}

impl<F: Real> ModelParams<F> {
    fn check_input(&self, input: &Input) -> Result<()> {
        let max = self.posenc.max_shift;
        if input.shift.unsigned_abs() > max {
            return Err(Error::ShiftOutOfRange {
                shift: input.shift,
                max,
            });
        }
        if input.sample.channels != self.dims.channels {
            return Err(Error::Dimension(format!(
                "sample {} has {} channels, model expects {}",
                input.sample.id, input.sample.channels, self.dims.channels
            )));
        }
        Ok(())
    }

    /// Day encodings of `days + shift` and their key/value projections
    /// (without bias). Projections are read from `table` when it covers the
    /// day. `pe` is only filled when `want_pe` is set.
    fn day_terms(
        &self,
        days: &[i32],
        shift: i32,
        want_pe: bool,
        table: Option<&DayProjections<F>>,
    ) -> Result<DayTerms<F>> {
        let d = self.dims;
        let t = days.len();
        let mut terms = DayTerms {
            pe: if want_pe { vec![F::zero(); t * d.embed] } else { Vec::new() },
            k: vec![F::zero(); t * d.key],
            v: vec![F::zero(); t * d.value],
        };
        let mut scratch = vec![F::zero(); d.embed];
        for (j, &day) in days.iter().enumerate() {
            let day = day as i64 + shift as i64;
            let kj = &mut terms.k[j * d.key..(j + 1) * d.key];
            let vj = &mut terms.v[j * d.value..(j + 1) * d.value];
            match table {
                Some(tb) if tb.covers(day) && !want_pe => {
                    let (k, v) = tb.rows(day);
                    kj.copy_from_slice(k);
                    vj.copy_from_slice(v);
                }
                _ => {
                    let pe = if want_pe {
                        &mut terms.pe[j * d.embed..(j + 1) * d.embed]
                    } else {
                        &mut scratch[..]
                    };
                    self.posenc.encode_into(day, pe)?;
                    affine(&self.weights.key_w.data, None, pe, kj);
                    affine(&self.weights.value_w.data, None, pe, vj);
                }
            }
        }
        Ok(terms)
    }

    /// Key/value projections of the day encodings for every day in
    /// `first_day..=last_day`, for repeated classification at many shifts.
    pub fn day_projections(&self, first_day: i64, last_day: i64) -> Result<DayProjections<F>> {
        let d = self.dims;
        let n = (last_day - first_day + 1).max(0) as usize;
        let mut k = vec![F::zero(); n * d.key];
        let mut v = vec![F::zero(); n * d.value];
        let mut pe = vec![F::zero(); d.embed];
        for i in 0..n {
            self.posenc.encode_into(first_day + i as i64, &mut pe)?;
            affine(&self.weights.key_w.data, None, &pe, &mut k[i * d.key..(i + 1) * d.key]);
            affine(&self.weights.value_w.data, None, &pe, &mut v[i * d.value..(i + 1) * d.value]);
        }
        Ok(DayProjections {
            first_day,
            days: n,
            key: d.key,
            value: d.value,
            k,
            v,
        })
    }

    /// Key/value projections of the pooled embeddings (without bias).
    fn project_u(&self, u: &[F], t: usize) -> (Vec<F>, Vec<F>) {
        let d = self.dims;
        let mut ku = vec![F::zero(); t * d.key];
        let mut vu = vec![F::zero(); t * d.value];
        affine_rows(&self.weights.key_w.data, u, d.embed, d.key, &mut ku);
        affine_rows(&self.weights.value_w.data, u, d.embed, d.value, &mut vu);
        (ku, vu)
    }

    /// Mean/std pooling per timestep and the pooled projection.
    fn pool_project(&self, a2: &[F], t: usize, n: usize) -> (Vec<F>, Vec<F>) {
        let e = self.dims.embed;
        let w = &self.weights;
        let nf = cast::<F>(n as f64);
        let eps = cast::<F>(STD_EPS);
        let mut ms = vec![F::zero(); t * 2 * e];
        let mut u = vec![F::zero(); t * e];
        for j in 0..t {
            let block = &a2[j * n * e..(j + 1) * n * e];
            let row = &mut ms[j * 2 * e..(j + 1) * 2 * e];
            let (mean, std) = row.split_at_mut(e);
            for r in block.chunks_exact(e) {
                for (m, v) in mean.iter_mut().zip(r) {
                    *m = *m + *v;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / nf);
            for r in block.chunks_exact(e) {
                for ((s, v), m) in std.iter_mut().zip(r).zip(mean.iter()) {
                    let d = *v - *m;
                    *s = *s + d * d;
                }
            }
            std.iter_mut().for_each(|s| *s = (*s / nf + eps).sqrt());
            affine(&w.pool_w.data, Some(&w.pool_b.data), row, &mut u[j * e..(j + 1) * e]);
        }
        (ms, u)
    }

    /// Attention pooling and classifier head. Keys and values are
    /// `W u + W pe + b`, summed in that order on every path so that shifting
    /// through a table or through direct encoding gives identical bits.
    fn tail(&self, ms: Vec<F>, u: &[F], ku: &[F], vu: &[F], day: &DayTerms<F>, t: usize) -> Tail<F> {
        let d = self.dims;
        let w = &self.weights;
        let h: Vec<F> = if day.pe.is_empty() {
            Vec::new()
        } else {
            u.iter().zip(&day.pe).map(|(a, b)| *a + *b).collect()
        };
        let mut k = vec![F::zero(); t * d.key];
        let mut v = vec![F::zero(); t * d.value];
        for (i, x) in k.iter_mut().enumerate() {
            *x = (ku[i] + day.k[i]) + w.key_b.data[i % d.key];
        }
        for (i, x) in v.iter_mut().enumerate() {
            *x = (vu[i] + day.v[i]) + w.value_b.data[i % d.value];
        }
        let scale = cast::<F>(1.0 / (d.key as f64).sqrt());
        let mut attn: Vec<F> = k.chunks_exact(d.key).map(|kj| dot(&w.query.data, kj) * scale).collect();
        softmax_in_place(&mut attn);
        let mut o = vec![F::zero(); d.value];
        for j in 0..t {
            axpy(&mut o, attn[j], &v[j * d.value..(j + 1) * d.value]);
        }
        let mut g_pre = vec![F::zero(); d.hidden];
        affine(&w.head_w1.data, Some(&w.head_b1.data), &o, &mut g_pre);
        let g: Vec<F> = g_pre.iter().map(|&x| gelu(x)).collect();
        let mut probs = vec![F::zero(); d.classes];
        affine(&w.head_w2.data, Some(&w.head_b2.data), &g, &mut probs);
        softmax_in_place(&mut probs);
        Tail {
            ms,
            h,
            k,
            v,
            attn,
            o,
            g_pre,
            g,
            probs,
        }
    }

    fn sample_x(sample: &TimeSeriesSample) -> Vec<F> {
        sample.pixels.iter().map(|&p| cast(p as f64)).collect()
    }

    /// Eval-mode per-pixel layers, pooling and projection.
    fn embed_rows(&self, sample: &TimeSeriesSample, domain: DomainTag) -> Vec<F> {
        let d = self.dims;
        let w = &self.weights;
        let stats = self.norms.get(domain);
        let rows = sample.timesteps() * sample.n_pixels;
        let x = Self::sample_x(sample);
        let inv1 = inv_std::<F>(&stats.var1.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>());
        let inv2 = inv_std::<F>(&stats.var2.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>());
        let mut z1 = vec![F::zero(); rows * d.hidden];
        affine_rows(&w.pse_w1.data, &x, d.channels, d.hidden, &mut z1);
        let mut a1 = vec![F::zero(); rows * d.hidden];
        norm_act(&mut z1, &mut a1, &stats.mean1, &inv1, &w.bn1_gamma.data, &w.bn1_beta.data);
        let mut z2 = vec![F::zero(); rows * d.embed];
        affine_rows(&w.pse_w2.data, &a1, d.hidden, d.embed, &mut z2);
        let mut a2 = vec![F::zero(); rows * d.embed];
        norm_act(&mut z2, &mut a2, &stats.mean2, &inv2, &w.bn2_gamma.data, &w.bn2_beta.data);
        self.pool_project(&a2, sample.timesteps(), sample.n_pixels).1
    }

    /// Eval-mode embedding of `sample`, independent of any shift.
    pub fn embed(&self, sample: &TimeSeriesSample, domain: DomainTag) -> Result<Embedded<F>> {
        self.check_input(&Input::new(sample, 0))?;
        let u = self.embed_rows(sample, domain);
        let (ku, vu) = self.project_u(&u, sample.timesteps());
        Ok(Embedded {
            days: sample.days.clone(),
            ku,
            vu,
        })
    }

    /// Class probabilities of an embedded sample at `shift`. Day projections
    /// are read from `table` when it covers the shifted day.
    pub fn classify_embedded(
        &self,
        emb: &Embedded<F>,
        shift: i32,
        table: Option<&DayProjections<F>>,
    ) -> Result<Vec<F>> {
        let max = self.posenc.max_shift;
        if shift.unsigned_abs() > max {
            return Err(Error::ShiftOutOfRange { shift, max });
        }
        let t = emb.days.len();
        let day = self.day_terms(&emb.days, shift, false, table)?;
        Ok(self.tail(Vec::new(), &[], &emb.ku, &emb.vu, &day, t).probs)
    }

    /// Forward pass over a batch.
    ///
    /// Training mode normalizes with statistics of this batch and returns
    /// them in [`BatchForward::batch_stats`]; the parameters are not
    /// modified. Eval mode uses the running statistics of `domain`.
    /// `keep_cache` retains the activations needed by [`Self::backward`].
    pub fn forward_batch(
        &self,
        inputs: &[Input],
        domain: DomainTag,
        mode: Mode,
        keep_cache: bool,
    ) -> Result<BatchForward<F>> {
        for inp in inputs {
            self.check_input(inp)?;
        }
        if inputs.is_empty() {
            return Ok(BatchForward {
                probs: vec![],
                attention: vec![],
                batch_stats: None,
                cache: None,
            });
        }
        let d = self.dims;
        let w = &self.weights;
        let pes: Vec<DayTerms<F>> = inputs
            .iter()
            .map(|inp| self.day_terms(&inp.sample.days, inp.shift, keep_cache, None))
            .collect::<Result<_>>()?;

        if mode == Mode::Eval && !keep_cache {
            let tails: Vec<Tail<F>> = inputs
                .par_iter()
                .zip(&pes)
                .map(|(inp, pe)| {
                    let t = inp.sample.timesteps();
                    let u = self.embed_rows(inp.sample, domain);
                    let (ku, vu) = self.project_u(&u, t);
                    self.tail(Vec::new(), &u, &ku, &vu, pe, t)
                })
                .collect();
            return Ok(BatchForward {
                probs: tails.iter().map(|t| t.probs.clone()).collect(),
                attention: tails.into_iter().map(|t| t.attn).collect(),
                batch_stats: None,
                cache: None,
            });
        }

        // layer 1 pre-activations
        let mut stage: Vec<(Vec<F>, Vec<F>)> = inputs
            .par_iter()
            .map(|inp| {
                let x = Self::sample_x(inp.sample);
                let rows = inp.sample.timesteps() * inp.sample.n_pixels;
                let mut z1 = vec![F::zero(); rows * d.hidden];
                affine_rows(&w.pse_w1.data, &x, d.channels, d.hidden, &mut z1);
                (x, z1)
            })
            .collect();
        let rows: usize = inputs.iter().map(|i| i.sample.timesteps() * i.sample.n_pixels).sum();

        let stats = self.norms.get(domain);
        let running = |v: &[F]| v.iter().map(|x| x.to_f64().unwrap()).collect::<Vec<f64>>();
        let (mean1, var1) = match mode {
            Mode::Train => moments(&stage.iter().map(|s| &s.1[..]).collect::<Vec<_>>(), d.hidden),
            Mode::Eval => (running(&stats.mean1), running(&stats.var1)),
        };
        let (m1, inv1) = (to_f::<F>(&mean1), inv_std::<F>(&var1));

        // layer 1 activations and layer 2 pre-activations
        let mut stage2: Vec<(Vec<F>, Vec<F>, Vec<F>, Vec<F>)> = stage
            .par_iter_mut()
            .map(|(x, z1)| {
                let x = std::mem::take(x);
                let mut xhat1 = std::mem::take(z1);
                let mut a1 = vec![F::zero(); xhat1.len()];
                norm_act(&mut xhat1, &mut a1, &m1, &inv1, &w.bn1_gamma.data, &w.bn1_beta.data);
                let rows = a1.len() / d.hidden;
                let mut z2 = vec![F::zero(); rows * d.embed];
                affine_rows(&w.pse_w2.data, &a1, d.hidden, d.embed, &mut z2);
                (x, xhat1, a1, z2)
            })
            .collect();
        drop(stage);

        let (mean2, var2) = match mode {
            Mode::Train => moments(&stage2.iter().map(|s| &s.3[..]).collect::<Vec<_>>(), d.embed),
            Mode::Eval => (running(&stats.mean2), running(&stats.var2)),
        };
        let (m2, inv2) = (to_f::<F>(&mean2), inv_std::<F>(&var2));

        let samples: Vec<SampleCache<F>> = stage2
            .par_iter_mut()
            .zip(inputs)
            .zip(&pes)
            .map(|(((x, xhat1, a1, z2), inp), pe)| {
                let mut xhat2 = std::mem::take(z2);
                let mut a2 = vec![F::zero(); xhat2.len()];
                norm_act(&mut xhat2, &mut a2, &m2, &inv2, &w.bn2_gamma.data, &w.bn2_beta.data);
                let (t, n) = (inp.sample.timesteps(), inp.sample.n_pixels);
                let (ms, u) = self.pool_project(&a2, t, n);
                let (ku, vu) = self.project_u(&u, t);
                let tail = self.tail(ms, &u, &ku, &vu, pe, t);
                SampleCache {
                    t,
                    n,
                    x: std::mem::take(x),
                    xhat1: std::mem::take(xhat1),
                    a1: std::mem::take(a1),
                    xhat2,
                    a2,
                    tail,
                }
            })
            .collect();

        let batch_stats = (mode == Mode::Train).then(|| NormStats {
            mean1: m1.clone(),
            var1: to_f(&var1),
            mean2: m2.clone(),
            var2: to_f(&var2),
        });
        let probs = samples.iter().map(|s| s.tail.probs.clone()).collect();
        let attention = samples.iter().map(|s| s.tail.attn.clone()).collect();
        Ok(BatchForward {
            probs,
            attention,
            batch_stats,
            cache: keep_cache.then_some(BatchCache {
                mode,
                rows,
                inv1,
                inv2,
                samples,
            }),
        })
    }

    /// Eval-mode class probabilities of one sample.
    pub fn predict_one(&self, sample: &TimeSeriesSample, shift: i32, domain: DomainTag) -> Result<Vec<F>> {
        let inp = [Input::new(sample, shift)];
        Ok(self.forward_batch(&inp, domain, Mode::Eval, false)?.probs.remove(0))
    }

    /// Gradient of `sum_i weights[i] * focal(probs_i, labels[i], gamma)`.
    ///
    /// Pass `1 / B` as every weight for a mean over the batch. Samples with
    /// zero weight add no loss but, in training mode, still influence the
    /// gradient through the shared normalization statistics.
    pub fn backward(&self, fwd: &BatchForward<F>, labels: &[usize], weights: &[f64], gamma: f64) -> Result<Gradients<F>> {
        let cache = fwd.cache.as_ref().ok_or(Error::MissingCache)?;
        let b = cache.samples.len();
        if labels.len() != b || weights.len() != b {
            return Err(Error::Dimension(format!(
                "{} labels and {} weights for a batch of {b}",
                labels.len(),
                weights.len()
            )));
        }
        for (&l, &wt) in labels.iter().zip(weights) {
            if wt != 0.0 && l >= self.dims.classes {
                return Err(Error::Dimension(format!("label {l} for {} classes", self.dims.classes)));
            }
        }
        let mut grads = self.weights.zeros_like();
        if weights.iter().all(|&w| w == 0.0) {
            return Ok(Gradients(grads));
        }
        let d = self.dims;
        let w = &self.weights;
        let train = cache.mode == Mode::Train;
        let mf = cache.rows as f64;

        // stage A: head, attention, pooling; produces dL/dy2 per pixel row
        struct Partial<F> {
            g: Weights<F>,
            dy: Option<Vec<F>>,
        }
        let mut partials: Vec<Partial<F>> = cache
            .samples
            .par_iter()
            .zip(labels)
            .zip(weights)
            .map(|((s, &label), &wt)| {
                let mut g = self.weights.zeros_like();
                if wt == 0.0 {
                    return Partial { g, dy: None };
                }
                let dy2 = self.backward_tail(s, label, wt, gamma, &mut g);
                Partial { g, dy: Some(dy2) }
            })
            .collect();

        let (s_dy2, s_dyx2) = bn_sums(
            partials.iter().zip(&cache.samples).filter_map(|(p, s)| p.dy.as_deref().map(|dy| (dy, &s.xhat2[..]))),
            d.embed,
        );

        // stage B: second normalization and dense layer; produces dL/dy1
        partials
            .par_iter_mut()
            .zip(&cache.samples)
            .for_each(|(p, s)| {
                if !train && p.dy.is_none() {
                    return;
                }
                let dz2 = bn_input_grad(
                    p.dy.as_deref(),
                    &s.xhat2,
                    &w.bn2_gamma.data,
                    &cache.inv2,
                    train.then_some((&s_dy2[..], &s_dyx2[..], mf)),
                );
                let rows = s.t * s.n;
                let mut dy1 = vec![F::zero(); rows * d.hidden];
                for r in 0..rows {
                    let dz = &dz2[r * d.embed..(r + 1) * d.embed];
                    let a1 = &s.a1[r * d.hidden..(r + 1) * d.hidden];
                    outer_acc(&mut p.g.pse_w2.data, dz, a1);
                    let da1 = &mut dy1[r * d.hidden..(r + 1) * d.hidden];
                    transpose_acc(&w.pse_w2.data, dz, da1);
                    let xh = &s.xhat1[r * d.hidden..(r + 1) * d.hidden];
                    for j in 0..d.hidden {
                        let y = w.bn1_gamma.data[j] * xh[j] + w.bn1_beta.data[j];
                        da1[j] = da1[j] * gelu_grad(y);
                    }
                }
                p.dy = Some(dy1);
            });

        let (s_dy1, s_dyx1) = bn_sums(
            partials.iter().zip(&cache.samples).filter_map(|(p, s)| p.dy.as_deref().map(|dy| (dy, &s.xhat1[..]))),
            d.hidden,
        );

        // stage C: first normalization and dense layer
        partials
            .par_iter_mut()
            .zip(&cache.samples)
            .for_each(|(p, s)| {
                if !train && p.dy.is_none() {
                    return;
                }
                let dz1 = bn_input_grad(
                    p.dy.as_deref(),
                    &s.xhat1,
                    &w.bn1_gamma.data,
                    &cache.inv1,
                    train.then_some((&s_dy1[..], &s_dyx1[..], mf)),
                );
                for (dz, x) in dz1.chunks_exact(d.hidden).zip(s.x.chunks_exact(d.channels)) {
                    outer_acc(&mut p.g.pse_w1.data, dz, x);
                }
                p.dy = None;
            });

        for p in &partials {
            grads.add_scaled(&p.g, F::one());
        }
        grads.bn2_gamma.data = to_f(&s_dyx2);
        grads.bn2_beta.data = to_f(&s_dy2);
        grads.bn1_gamma.data = to_f(&s_dyx1);
        grads.bn1_beta.data = to_f(&s_dy1);
        Ok(Gradients(grads))
    }

    /// Head, attention and pooling backward for one sample. Accumulates the
    /// corresponding weight gradients into `g` and returns dL/dy2.
    fn backward_tail(&self, s: &SampleCache<F>, label: usize, wt: f64, gamma: f64, g: &mut Weights<F>) -> Vec<F> {
        let d = self.dims;
        let w = &self.weights;
        let tl = &s.tail;
        let (t, n, e) = (s.t, s.n, d.embed);

        let probs: Vec<f64> = tl.probs.iter().map(|p| p.to_f64().unwrap()).collect();
        let dlogit: Vec<F> = focal_logit_grad(&probs, label, gamma).iter().map(|v| cast(v * wt)).collect();

        outer_acc(&mut g.head_w2.data, &dlogit, &tl.g);
        axpy(&mut g.head_b2.data, F::one(), &dlogit);
        let mut dg = vec![F::zero(); d.hidden];
        transpose_acc(&w.head_w2.data, &dlogit, &mut dg);
        let dg_pre: Vec<F> = dg.iter().zip(&tl.g_pre).map(|(a, x)| *a * gelu_grad(*x)).collect();
        outer_acc(&mut g.head_w1.data, &dg_pre, &tl.o);
        axpy(&mut g.head_b1.data, F::one(), &dg_pre);
        let mut d_o = vec![F::zero(); d.value];
        transpose_acc(&w.head_w1.data, &dg_pre, &mut d_o);

        // attention
        let scale = cast::<F>(1.0 / (d.key as f64).sqrt());
        let da: Vec<F> = (0..t).map(|j| dot(&d_o, &tl.v[j * d.value..(j + 1) * d.value])).collect();
        let mix = dot(&tl.attn, &da);
        let mut dh = vec![F::zero(); t * e];
        for j in 0..t {
            let dscore = tl.attn[j] * (da[j] - mix) * scale;
            let kj = &tl.k[j * d.key..(j + 1) * d.key];
            let hj = &tl.h[j * e..(j + 1) * e];
            axpy(&mut g.query.data, dscore, kj);
            let dk: Vec<F> = w.query.data.iter().map(|q| *q * dscore).collect();
            let dv: Vec<F> = d_o.iter().map(|x| *x * tl.attn[j]).collect();
            outer_acc(&mut g.key_w.data, &dk, hj);
            axpy(&mut g.key_b.data, F::one(), &dk);
            outer_acc(&mut g.value_w.data, &dv, hj);
            axpy(&mut g.value_b.data, F::one(), &dv);
            let dhj = &mut dh[j * e..(j + 1) * e];
            transpose_acc(&w.key_w.data, &dk, dhj);
            transpose_acc(&w.value_w.data, &dv, dhj);
        }

        // pooled projection and mean/std pooling
        let nf = cast::<F>(n as f64);
        let mut dy2 = vec![F::zero(); t * n * e];
        for j in 0..t {
            let du = &dh[j * e..(j + 1) * e];
            let ms = &tl.ms[j * 2 * e..(j + 1) * 2 * e];
            outer_acc(&mut g.pool_w.data, du, ms);
            axpy(&mut g.pool_b.data, F::one(), du);
            let mut dms = vec![F::zero(); 2 * e];
            transpose_acc(&w.pool_w.data, du, &mut dms);
            let (dmean, dstd) = dms.split_at(e);
            let (mean, std) = ms.split_at(e);
            for p in 0..n {
                let r = j * n + p;
                let a2 = &s.a2[r * e..(r + 1) * e];
                let xh = &s.xhat2[r * e..(r + 1) * e];
                let out = &mut dy2[r * e..(r + 1) * e];
                for c in 0..e {
                    let da2 = dmean[c] / nf + dstd[c] * (a2[c] - mean[c]) / (nf * std[c]);
                    let y = w.bn2_gamma.data[c] * xh[c] + w.bn2_beta.data[c];
                    out[c] = da2 * gelu_grad(y);
                }
            }
        }
        dy2
    }
}

/// Column sums of `dy` and `dy * xhat` over every row, in sample order.
fn bn_sums<'a, F: Real>(blocks: impl Iterator<Item = (&'a [F], &'a [F])>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut s_dy = vec![0.0f64; d];
    let mut s_dyx = vec![0.0f64; d];
    for (dy, xh) in blocks {
        for (r_dy, r_xh) in dy.chunks_exact(d).zip(xh.chunks_exact(d)) {
            for j in 0..d {
                let g = r_dy[j].to_f64().unwrap();
                s_dy[j] += g;
                s_dyx[j] += g * r_xh[j].to_f64().unwrap();
            }
        }
    }
    (s_dy, s_dyx)
}

/// dL/dz for `y = gamma * (z - mean) * inv + beta`. With batch statistics,
/// `batch = (sum dy, sum dy * xhat, rows)` adds the terms through the mean
/// and variance. A sample without its own loss (`dy = None`) still receives
/// those terms.
fn bn_input_grad<F: Real>(
    dy: Option<&[F]>,
    xhat: &[F],
    gamma: &[F],
    inv: &[F],
    batch: Option<(&[f64], &[f64], f64)>,
) -> Vec<F> {
    let d = gamma.len();
    let scale: Vec<F> = gamma.iter().zip(inv).map(|(g, i)| *g * *i).collect();
    let (mean_dy, mean_dyx): (Vec<F>, Vec<F>) = match batch {
        Some((s, sx, m)) => (s.iter().map(|v| cast(v / m)).collect(), sx.iter().map(|v| cast(v / m)).collect()),
        None => (vec![F::zero(); d], vec![F::zero(); d]),
    };
    let mut out = vec![F::zero(); xhat.len()];
    for (r, (o, xh)) in out.chunks_exact_mut(d).zip(xhat.chunks_exact(d)).enumerate() {
        for j in 0..d {
            let g = dy.map_or(F::zero(), |dy| dy[r * d + j]);
            o[j] = scale[j] * (g - mean_dy[j] - xh[j] * mean_dyx[j]);
        }
    }
    out
}
