//! Mini-batch index streams.

use rand::seq::SliceRandom;

use super::sample::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Cycles through a shuffled pool, reshuffling whenever it runs dry.
#[derive(Debug, Clone)]
struct Pool {
    items: Vec<usize>,
    queue: Vec<usize>,
}

impl Pool {
    fn new(items: Vec<usize>) -> Self {
        Self { items, queue: Vec::new() }
    }

    fn next(&mut self, rng: &mut Rng) -> usize {
        if self.queue.is_empty() {
            self.queue = self.items.clone();
            self.queue.shuffle(rng);
        }
        self.queue.pop().expect("pool is non-empty")
    }
}

/// Class-balanced batches: per-class counts within a batch differ by at most
/// one. Classes run out of fresh samples at different rates; a class with
/// fewer samples than requested is cycled, i.e. drawn with replacement
/// across batches.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    pools: Vec<Pool>,
    batch_size: usize,
    rng: Rng,
}

impl BalancedSampler {
    /// Balances over every class that has at least one labeled sample.
    pub fn new(dataset: &Dataset, batch_size: usize, rng: Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let mut by_class = vec![Vec::new(); dataset.num_classes()];
        for (i, s) in dataset.samples.iter().enumerate() {
            if let Some(l) = s.label {
                by_class[l].push(i);
            }
        }
        let pools: Vec<Pool> = by_class.into_iter().filter(|v| !v.is_empty()).map(Pool::new).collect();
        if pools.is_empty() {
            return Err(Error::invalid(format!(
                "dataset {} has no labeled samples to balance",
                dataset.domain_id
            )));
        }
        Ok(Self { pools, batch_size, rng })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let k = self.pools.len();
        let base = self.batch_size / k;
        let mut counts = vec![base; k];
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut self.rng);
        for &c in order.iter().take(self.batch_size % k) {
            counts[c] += 1;
        }
        let mut batch = Vec::with_capacity(self.batch_size);
        for (pool, &count) in self.pools.iter_mut().zip(&counts) {
            for _ in 0..count {
                batch.push(pool.next(&mut self.rng));
            }
        }
        batch.shuffle(&mut self.rng);
        batch
    }
}

impl Iterator for BalancedSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

/// Uniform batches over all samples, without class information.
#[derive(Debug, Clone)]
pub struct UniformSampler {
    pool: Pool,
    batch_size: usize,
    rng: Rng,
}

impl UniformSampler {
    pub fn new(dataset: &Dataset, batch_size: usize, rng: Rng) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset(dataset.domain_id.clone()));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(Self {
            pool: Pool::new((0..dataset.len()).collect()),
            batch_size,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        (0..self.batch_size).map(|_| self.pool.next(&mut self.rng)).collect()
    }
}

impl Iterator for UniformSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

/// Convenience wrapper returning a balanced batch stream.
pub fn balanced_batches(dataset: &Dataset, batch_size: usize, rng: Rng) -> Result<BalancedSampler> {
    BalancedSampler::new(dataset, batch_size, rng)
}
