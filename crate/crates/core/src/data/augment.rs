//! Sample-level transforms: temporal shifting and random subsampling.

use rand::seq::index;
use rand::Rng as _;

use super::sample::TimeSeriesSample;
use crate::rng::Rng;

/// Adds `delta` to every acquisition day. Days may leave `[1, 366]`.
pub fn shift_days(sample: &TimeSeriesSample, delta: i32) -> TimeSeriesSample {
    TimeSeriesSample {
        days: sample.days.iter().map(|d| d + delta).collect(),
        ..sample.clone()
    }
}

/// Keeps `k` uniformly chosen timesteps in their original order. Samples with
/// `T <= k` are returned unchanged.
pub fn subsample_timesteps(sample: &TimeSeriesSample, k: usize, rng: &mut Rng) -> TimeSeriesSample {
    assert!(k >= 1, "timestep subsample size must be positive");
    let t = sample.timesteps();
    if t <= k {
        return sample.clone();
    }
    let mut keep = index::sample(rng, t, k).into_vec();
    keep.sort_unstable();
    let mut pixels = Vec::with_capacity(k * sample.n_pixels * sample.channels);
    for &j in &keep {
        pixels.extend_from_slice(sample.timestep(j));
    }
    TimeSeriesSample {
        id: sample.id.clone(),
        days: keep.iter().map(|&j| sample.days[j]).collect(),
        pixels,
        n_pixels: sample.n_pixels,
        channels: sample.channels,
        label: sample.label,
    }
}

/// Draws a pixel set of size `s`: without replacement when `N >= s`,
/// with replacement otherwise. The same pixel subset is used at every timestep.
pub fn subsample_pixels(sample: &TimeSeriesSample, s: usize, rng: &mut Rng) -> TimeSeriesSample {
    assert!(s >= 1, "pixel set size must be positive");
    let n = sample.n_pixels;
    let chosen: Vec<usize> = if n >= s {
        let mut v = index::sample(rng, n, s).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..s).map(|_| rng.random_range(0..n)).collect()
    };
    let c = sample.channels;
    let mut pixels = Vec::with_capacity(sample.timesteps() * s * c);
    for t in 0..sample.timesteps() {
        for &p in &chosen {
            pixels.extend_from_slice(sample.pixel(t, p));
        }
    }
    TimeSeriesSample {
        id: sample.id.clone(),
        days: sample.days.clone(),
        pixels,
        n_pixels: s,
        channels: c,
        label: sample.label,
    }
}
