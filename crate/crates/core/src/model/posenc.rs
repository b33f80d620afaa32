//! Sinusoidal day-of-year encoding.
//!
//! Positions are offset by the maximum shift so that every shifted day in
//! `[1 - max_shift, ...]` maps to a nonnegative position.

use serde::{Deserialize, Serialize};

use super::params::{cast, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosEncConfig {
    pub dim: usize,
    pub max_shift: u32,
    pub base: f64,
}

impl PosEncConfig {
    pub fn new(dim: usize, max_shift: u32) -> Self {
        Self {
            dim,
            max_shift,
            base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(Error::invalid(format!("encoding width {} must be even and positive", self.dim)));
        }
        if !(self.base > 1.0) {
            return Err(Error::invalid("encoding base must exceed 1"));
        }
        Ok(())
    }

    /// Position fed to the sinusoids for `day`.
    pub fn position(&self, day: i64) -> Result<i64> {
        let pos = day + self.max_shift as i64;
        if pos < 0 {
            return Err(Error::Encoding {
                day,
                offset: self.max_shift,
            });
        }
        Ok(pos)
    }

    /// Writes the encoding of `day` into `out` (length `dim`).
    pub fn encode_into<F: Real>(&self, day: i64, out: &mut [F]) -> Result<()> {
        let pos = self.position(day)? as f64;
        for m in 0..self.dim / 2 {
            let angle = pos / self.base.powf(2.0 * m as f64 / self.dim as f64);
            out[2 * m] = cast(angle.sin());
            out[2 * m + 1] = cast(angle.cos());
        }
        Ok(())
    }
}

/// `T x dim` encoding of `days`, row-major.
pub fn positional_encoding<F: Real>(days: &[i64], cfg: &PosEncConfig) -> Result<Vec<F>> {
    let mut out = vec![F::zero(); days.len() * cfg.dim];
    for (row, &d) in out.chunks_exact_mut(cfg.dim).zip(days) {
        cfg.encode_into(d, row)?;
    }
    Ok(out)
}

/// Precomputed encodings for a contiguous day range.
#[derive(Debug, Clone)]
pub struct EncodingTable<F> {
    first_day: i64,
    dim: usize,
    rows: Vec<F>,
}

impl<F: Real> EncodingTable<F> {
    pub fn new(cfg: &PosEncConfig, first_day: i64, last_day: i64) -> Result<Self> {
        let days: Vec<i64> = (first_day..=last_day).collect();
        Ok(Self {
            first_day,
            dim: cfg.dim,
            rows: positional_encoding(&days, cfg)?,
        })
    }

    pub fn covers(&self, day: i64) -> bool {
        day >= self.first_day && ((day - self.first_day) as usize) < self.rows.len() / self.dim
    }

    pub fn row(&self, day: i64) -> &[F] {
        let i = (day - self.first_day) as usize;
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}
