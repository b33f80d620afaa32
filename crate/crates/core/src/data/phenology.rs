//! Synthetic phenology-driven pixel-set time series.
//!
//! Each real class follows a double-logistic seasonal curve scaled per
//! channel. A domain displaces every class curve by its `shift`, so a
//! domain with `shift = d` looks like the reference phenology `d` days
//! earlier: adding `d` to its acquisition days realigns it with a domain of
//! shift 0. The "unknown" class is colored noise around a random baseline.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::sample::{Dataset, TimeSeriesSample, MAX_DAY, MIN_DAY, UNKNOWN_CLASS};
use crate::error::{Error, Result};
use crate::rng::{indexed_seed, rng_from};

/// Largest supported injected shift in days.
pub const MAX_SCENARIO_SHIFT: i32 = 120;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenologyClassSpec {
    pub name: String,
    /// Start-of-season day (rising inflection).
    pub t_sos: f64,
    /// End-of-season day (falling inflection).
    pub t_eos: f64,
    pub amplitude: f64,
    pub baseline: f64,
    pub k1: f64,
    pub k2: f64,
    /// Per-channel scale, one entry per channel.
    pub mix: Vec<f64>,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl PhenologyClassSpec {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(self.t_sos < self.t_eos) {
            return Err(Error::invalid(format!("class {}: t_sos must precede t_eos", self.name)));
        }
        if !(self.amplitude > 0.0 && self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::invalid(format!(
                "class {}: amplitude, k1 and k2 must be positive",
                self.name
            )));
        }
        if self.mix.len() != channels {
            return Err(Error::Dimension(format!(
                "class {}: {} mixing weights for {channels} channels",
                self.name,
                self.mix.len()
            )));
        }
        Ok(())
    }

    /// Seasonal curve value before channel mixing.
    pub fn curve(&self, day: f64) -> f64 {
        self.baseline
            + self.amplitude * (logistic(self.k1 * (day - self.t_sos)) - logistic(self.k2 * (day - self.t_eos)))
    }

    /// The same class with both season edges moved by `days`.
    pub fn displaced(&self, days: f64) -> Self {
        Self {
            t_sos: self.t_sos + days,
            t_eos: self.t_eos + days,
            ..self.clone()
        }
    }
}

/// Channel values of `spec` on `day`.
pub fn phenology_value(spec: &PhenologyClassSpec, day: i32) -> Vec<f64> {
    let v = spec.curve(day as f64);
    spec.mix.iter().map(|m| m * v).collect()
}

/// Broadband "unknown" signal: AR(1) noise around a per-parcel baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnknownSpec {
    pub baseline_min: f64,
    pub baseline_max: f64,
    /// Standard deviation of the temporal noise.
    pub amplitude: f64,
    /// Lag-one correlation of the temporal noise, in `[0, 1)`.
    pub correlation: f64,
}

impl Default for UnknownSpec {
    fn default() -> Self {
        Self {
            baseline_min: 0.1,
            baseline_max: 0.5,
            amplitude: 0.08,
            correlation: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalendarSpec {
    /// Candidate acquisition days, strictly increasing within `[1, 366]`.
    pub days: Vec<i32>,
    /// Per-day probability that an acquisition is missing for a parcel.
    pub dropout: f64,
}

impl CalendarSpec {
    /// Every `step` days starting at `first`.
    pub fn regular(first: i32, step: i32, dropout: f64) -> Self {
        Self {
            days: (first..=MAX_DAY).step_by(step.max(1) as usize).collect(),
            dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    /// Injected temporal shift: the number of days to add to this domain's
    /// acquisition days to align it with the reference phenology.
    pub shift: i32,
    pub calendar: CalendarSpec,
    /// One frequency per class, unknown last; sums to 1.
    pub class_frequencies: Vec<f64>,
    pub min_pixels: usize,
    pub max_pixels: usize,
    pub pixel_noise: f64,
    /// Standard deviation of the per-parcel season offset, in days.
    pub day_jitter: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub channels: usize,
    /// The `K - 1` real classes; "unknown" is appended as the last class.
    pub classes: Vec<PhenologyClassSpec>,
    #[serde(default)]
    pub unknown: UnknownSpec,
    pub domains: Vec<DomainSpec>,
}

impl ScenarioSpec {
    pub fn class_names(&self) -> Vec<String> {
        self.classes
            .iter()
            .map(|c| c.name.clone())
            .chain(std::iter::once(UNKNOWN_CLASS.to_string()))
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn domain(&self, id: &str) -> Result<&DomainSpec> {
        self.domains
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::invalid(format!("scenario has no domain {id:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("scenario needs at least one channel"));
        }
        Dataset::validate_classes(&self.class_names())?;
        for c in &self.classes {
            c.validate(self.channels)?;
        }
        let u = &self.unknown;
        if !(u.baseline_min <= u.baseline_max && u.amplitude >= 0.0 && (0.0..1.0).contains(&u.correlation)) {
            return Err(Error::invalid("unknown-class spec out of range"));
        }
        let k = self.num_classes();
        for d in &self.domains {
            let bad = |msg: &str| Error::invalid(format!("domain {}: {msg}", d.id));
            if d.shift.abs() > MAX_SCENARIO_SHIFT {
                return Err(bad("|shift| exceeds 120 days"));
            }
            if d.class_frequencies.len() != k {
                return Err(Error::Dimension(format!(
                    "domain {}: {} class frequencies for {k} classes",
                    d.id,
                    d.class_frequencies.len()
                )));
            }
            if d.class_frequencies.iter().any(|f| !(*f >= 0.0)) {
                return Err(bad("class frequencies must be nonnegative"));
            }
            let total: f64 = d.class_frequencies.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(bad("class frequencies must sum to 1"));
            }
            let cal = &d.calendar;
            if cal.days.is_empty() || !(0.0..1.0).contains(&cal.dropout) {
                return Err(bad("calendar is empty after dropout"));
            }
            if cal.days.windows(2).any(|w| w[0] >= w[1])
                || cal.days.iter().any(|d| !(MIN_DAY..=MAX_DAY).contains(d))
            {
                return Err(bad("calendar days must be strictly increasing within [1, 366]"));
            }
            if d.min_pixels == 0 || d.min_pixels > d.max_pixels {
                return Err(bad("pixel range must satisfy 1 <= min <= max"));
            }
            if !(d.pixel_noise >= 0.0 && d.day_jitter >= 0.0) {
                return Err(bad("noise levels must be nonnegative"));
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut crate::rng::Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_class(rng: &mut crate::rng::Rng, frequencies: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, f) in frequencies.iter().enumerate() {
        acc += f;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last class with nonzero frequency
    frequencies.iter().rposition(|f| *f > 0.0).unwrap_or(0)
}

/// Generates the domain `domain_id` of `scenario`.
///
/// Sample `i` draws all of its randomness from `indexed_seed(seed, i)`, so
/// the result is a pure function of the arguments, and two domains with the
/// same settings and seed produce the same samples.
pub fn generate_domain(scenario: &ScenarioSpec, domain_id: &str, seed: u64) -> Result<Dataset> {
    scenario.validate()?;
    let domain = scenario.domain(domain_id)?;
    let unknown = scenario.classes.len();
    let channels = scenario.channels;

    let samples = (0..domain.samples)
        .map(|i| {
            let mut rng = rng_from(indexed_seed(seed, i as u64));
            let label = draw_class(&mut rng, &domain.class_frequencies);

            let mut days: Vec<i32> = domain
                .calendar
                .days
                .iter()
                .copied()
                .filter(|_| rng.random::<f64>() >= domain.calendar.dropout)
                .collect();
            if days.is_empty() {
                let pick = rng.random_range(0..domain.calendar.days.len());
                days.push(domain.calendar.days[pick]);
            }
            let n = rng.random_range(domain.min_pixels..=domain.max_pixels);
            let t = days.len();

            // noise-free per-timestep signal, channel-major per timestep
            let mut signal = vec![0.0f64; t * channels];
            if label < unknown {
                let offset = -(domain.shift as f64) + domain.day_jitter * gaussian(&mut rng);
                let class = scenario.classes[label].displaced(offset);
                for (j, &day) in days.iter().enumerate() {
                    let v = class.curve(day as f64);
                    for c in 0..channels {
                        signal[j * channels + c] = class.mix[c] * v;
                    }
                }
            } else {
                let u = &scenario.unknown;
                let base = u.baseline_min + (u.baseline_max - u.baseline_min) * rng.random::<f64>();
                let scales: Vec<f64> = (0..channels).map(|_| 0.8 + 0.4 * rng.random::<f64>()).collect();
                let innovation = (1.0 - u.correlation * u.correlation).sqrt();
                let mut state = u.amplitude * gaussian(&mut rng);
                for j in 0..t {
                    if j > 0 {
                        state = u.correlation * state + innovation * u.amplitude * gaussian(&mut rng);
                    }
                    for c in 0..channels {
                        signal[j * channels + c] = scales[c] * (base + state);
                    }
                }
            }

            let mut pixels = Vec::with_capacity(t * n * channels);
            for j in 0..t {
                for _ in 0..n {
                    for c in 0..channels {
                        let noise = if domain.pixel_noise > 0.0 {
                            domain.pixel_noise * gaussian(&mut rng)
                        } else {
                            0.0
                        };
                        pixels.push((signal[j * channels + c] + noise).clamp(0.0, 1.0) as f32);
                    }
                }
            }
            TimeSeriesSample::new(format!("s{i:06}"), days, pixels, n, channels, Some(label))
        })
        .collect::<Result<Vec<_>>>()?;

    Dataset::new(samples, scenario.class_names(), domain_id, channels)
}

fn class(name: &str, t_sos: f64, t_eos: f64, amplitude: f64, baseline: f64, k: (f64, f64), mix: [f64; 4]) -> PhenologyClassSpec {
    PhenologyClassSpec {
        name: name.into(),
        t_sos,
        t_eos,
        amplitude,
        baseline,
        k1: k.0,
        k2: k.1,
        mix: mix.to_vec(),
    }
}

fn domain(id: &str, shift: i32, calendar: CalendarSpec, frequencies: &[f64], samples: usize) -> DomainSpec {
    DomainSpec {
        id: id.into(),
        shift,
        calendar,
        class_frequencies: frequencies.to_vec(),
        min_pixels: 8,
        max_pixels: 24,
        pixel_noise: 0.02,
        day_jitter: 2.0,
        samples,
    }
}

const MIX_GREEN: [f64; 4] = [0.45, 0.35, 1.0, 0.6];
const MIX_LATE: [f64; 4] = [0.6, 0.5, 0.9, 0.8];
const MIX_GRASS: [f64; 4] = [0.7, 0.6, 0.8, 0.9];
const MIX_ROW: [f64; 4] = [0.9, 0.8, 0.7, 0.5];

impl ScenarioSpec {
    /// Four crop classes plus unknown, one source domain (shift 0) and one
    /// target domain per entry of `target_shifts`, named `target_<shift>`
    /// with `m` for negative shifts (e.g. `target_m20`).
    pub fn standard(target_shifts: &[i32], samples: usize) -> Self {
        let mut domains = vec![domain(
            "source",
            0,
            CalendarSpec::regular(1, 1, 0.86),
            &[0.26, 0.24, 0.2, 0.18, 0.12],
            samples,
        )];
        for &shift in target_shifts {
            domains.push(domain(
                &target_domain_name(shift),
                shift,
                CalendarSpec::regular(1, 1, 0.89),
                &[0.26, 0.24, 0.2, 0.18, 0.12],
                samples,
            ));
        }
        Self {
            channels: 4,
            classes: vec![
                class("spring_cereal", 80.0, 170.0, 0.6, 0.15, (0.12, 0.1), MIX_GREEN),
                class("summer_crop", 120.0, 210.0, 0.6, 0.15, (0.12, 0.1), MIX_GREEN),
                class("late_crop", 160.0, 260.0, 0.55, 0.12, (0.15, 0.12), MIX_LATE),
                class("grassland", 70.0, 280.0, 0.35, 0.25, (0.06, 0.06), MIX_GRASS),
            ],
            unknown: UnknownSpec::default(),
            domains,
        }
    }

    /// Two classes that differ only by a 25-day displacement, two classes
    /// with distinct spectra, and unknown. Domains `source` (shift 0) and
    /// `target` (shift `target_shift`).
    pub fn confusable_pair(target_shift: i32, samples: usize) -> Self {
        Self {
            channels: 4,
            classes: vec![
                class("crop_a", 100.0, 200.0, 0.6, 0.15, (0.12, 0.1), MIX_GREEN),
                class("crop_b", 125.0, 225.0, 0.6, 0.15, (0.12, 0.1), MIX_GREEN),
                class("row_crop", 130.0, 240.0, 0.5, 0.12, (0.1, 0.1), MIX_ROW),
                class("grassland", 70.0, 280.0, 0.35, 0.25, (0.06, 0.06), MIX_GRASS),
            ],
            unknown: UnknownSpec::default(),
            domains: vec![
                domain("source", 0, CalendarSpec::regular(1, 1, 0.86), &[0.22, 0.22, 0.2, 0.2, 0.16], samples),
                domain(
                    "target",
                    target_shift,
                    CalendarSpec::regular(1, 1, 0.89),
                    &[0.22, 0.22, 0.2, 0.2, 0.16],
                    samples,
                ),
            ],
        }
    }

    /// Domains `a` (shift 0) and `b` (shift `shift`) with identical class
    /// frequencies and calendars of equal density, for checking that the
    /// shifts estimated in both directions are opposite.
    pub fn mirrored(shift: i32, samples: usize) -> Self {
        let freqs = [0.22, 0.22, 0.2, 0.2, 0.16];
        let mut spec = Self::standard(&[], samples);
        spec.domains = vec![
            domain("a", 0, CalendarSpec::regular(1, 1, 0.86), &freqs, samples),
            domain("b", shift, CalendarSpec::regular(1, 1, 0.87), &freqs, samples),
        ];
        spec
    }
}

pub fn target_domain_name(shift: i32) -> String {
    if shift < 0 {
        format!("target_m{}", -shift)
    } else {
        format!("target_{shift}")
    }
}
