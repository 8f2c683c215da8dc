use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{class_code, DatasetManifest, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Every draw picks a class uniformly, then a record of that class uniformly.
    Replacement,
    /// Every batch holds `batch_size / C` draws per class; the remainder rotates
    /// across classes from batch to batch.
    Stratified,
}

/// Endless stream of class-balanced index batches. Minority classes are
/// oversampled by drawing with replacement.
#[derive(Debug, Clone)]
pub struct BalancedSampler<R> {
    by_class: Vec<Vec<usize>>,
    batch_size: usize,
    mode: SamplingMode,
    rng: R,
    batches: usize,
}

impl<R: Rng> BalancedSampler<R> {
    /// `items` are `(index, label)` pairs; every class in `0..class_count` needs
    /// at least one item.
    pub fn new(
        items: impl IntoIterator<Item = (usize, usize)>,
        class_count: usize,
        batch_size: usize,
        mode: SamplingMode,
        rng: R,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Sampler("batch size must be positive".into()));
        }
        let mut by_class = vec![Vec::new(); class_count];
        for (idx, label) in items {
            let slot = by_class.get_mut(label).ok_or_else(|| {
                Error::Sampler(format!("label {label} outside {class_count} classes"))
            })?;
            slot.push(idx);
        }
        if let Some(empty) = by_class.iter().position(|c| c.is_empty()) {
            return Err(Error::Sampler(format!(
                "class {} has no training records",
                class_code(empty)
            )));
        }
        Ok(BalancedSampler {
            by_class,
            batch_size,
            mode,
            rng,
            batches: 0,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let c = self.by_class.len();
        let mut batch = Vec::with_capacity(self.batch_size);
        match self.mode {
            SamplingMode::Replacement => {
                for _ in 0..self.batch_size {
                    let class = &self.by_class[self.rng.gen_range(0..c)];
                    batch.push(class[self.rng.gen_range(0..class.len())]);
                }
            }
            SamplingMode::Stratified => {
                let (base, extra) = (self.batch_size / c, self.batch_size % c);
                let start = (self.batches * extra) % c;
                for k in 0..c {
                    let bonus = ((k + c - start) % c) < extra;
                    let class = &self.by_class[k];
                    for _ in 0..base + bonus as usize {
                        batch.push(class[self.rng.gen_range(0..class.len())]);
                    }
                }
                batch.shuffle(&mut self.rng);
            }
        }
        self.batches += 1;
        batch
    }
}

impl<R: Rng> Iterator for BalancedSampler<R> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

/// Balanced sampler over the training split of `manifest`, yielding record indices.
pub fn balanced_batches<R: Rng>(
    manifest: &DatasetManifest,
    class_count: usize,
    batch_size: usize,
    mode: SamplingMode,
    rng: R,
) -> Result<BalancedSampler<R>> {
    let items = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train)
        .map(|(i, r)| (i, r.label));
    BalancedSampler::new(items, class_count, batch_size, mode, rng)
}
