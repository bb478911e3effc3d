//! Exemplar storage replayed into later increments.
//!
//! After an increment is trained, a seeded uniform subset of its training
//! samples is stored per class. Later increments mix every stored exemplar
//! into their epoch batches so the retention terms have old rows to work on.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::BatchPartition;
use crate::matrix::Matrix;
use crate::seed::derive_seed;

/// One stored training sample. `source` is `(increment index, row index)`
/// within that increment's training set, kept so a run manifest can list the
/// exact exemplars that were replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub features: Vec<f64>,
    pub label: usize,
    pub domain: usize,
    pub source: (usize, usize),
}

/// Per-class exemplar store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RehearsalMemory {
    buckets: BTreeMap<usize, Vec<Exemplar>>,
    selection_seed: u64,
}

impl RehearsalMemory {
    pub fn new(selection_seed: u64) -> Self {
        RehearsalMemory { buckets: BTreeMap::new(), selection_seed }
    }

    pub fn total(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.buckets.get(&class).map_or(0, Vec::len)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.buckets.keys().copied()
    }

    pub fn exemplars(&self) -> impl Iterator<Item = &Exemplar> + '_ {
        self.buckets.values().flatten()
    }

    /// Source indices per class, for the run manifest.
    pub fn exemplar_sources(&self) -> BTreeMap<usize, Vec<(usize, usize)>> {
        self.buckets
            .iter()
            .map(|(&class, exs)| (class, exs.iter().map(|e| e.source).collect()))
            .collect()
    }
}

/// Stores up to `quota` seeded uniform-without-replacement exemplars for
/// each class in `classes`, drawn from `data` rows carrying that label.
///
/// Buckets of other classes are untouched. A declared class with zero
/// samples gets an empty bucket and a warning rather than an error.
pub fn update_memory(
    memory: &mut RehearsalMemory,
    increment: usize,
    classes: &[usize],
    data: &[Sample],
    quota: usize,
) -> Result<()> {
    if quota == 0 {
        return Err(Error::Domain("exemplar quota must be >= 1".into()));
    }
    for &class in classes {
        let indices: Vec<usize> =
            data.iter().enumerate().filter(|(_, s)| s.label == class).map(|(i, _)| i).collect();
        if indices.is_empty() {
            log::warn!("class {class} has no samples; storing an empty exemplar bucket");
            memory.buckets.entry(class).or_default();
            continue;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(memory.selection_seed, "exemplar", class as u64));
        let mut picked = indices;
        picked.shuffle(&mut rng);
        picked.truncate(quota);
        picked.sort_unstable();
        let bucket = memory.buckets.entry(class).or_default();
        for idx in picked {
            let s = &data[idx];
            bucket.push(Exemplar {
                features: s.features.clone(),
                label: s.label,
                domain: s.domain,
                source: (increment, idx),
            });
        }
    }
    Ok(())
}

/// One training batch: features, labels, and the old/new row partition.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub partition: BatchPartition,
}

/// Builds one epoch of batches over the new-class samples plus every stored
/// exemplar, shuffled by `shuffle_seed`.
///
/// Every sample appears exactly once per epoch. Each batch carries its
/// old/new partition; a batch missing one side is detectable through
/// `partition.has_old()` / `partition.has_new()` so the caller can skip the
/// terms that need the missing side.
pub fn build_increment_batches(
    new_data: &[Sample],
    memory: &RehearsalMemory,
    c_o: usize,
    c_n: usize,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>> {
    if new_data.is_empty() {
        return Err(Error::Domain("an increment needs at least one new-class sample".into()));
    }
    if batch_size < 2 {
        return Err(Error::Domain(format!("batch_size must be >= 2, got {batch_size}")));
    }
    let dim = new_data[0].features.len();
    let mut pool: Vec<(&[f64], usize)> = Vec::with_capacity(new_data.len() + memory.total());
    for s in new_data {
        pool.push((&s.features, s.label));
    }
    for e in memory.exemplars() {
        pool.push((&e.features, e.label));
    }
    if pool.iter().any(|(f, _)| f.len() != dim) {
        return Err(Error::Shape("inconsistent feature dimension in batch pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    pool.shuffle(&mut rng);

    let mut batches = Vec::with_capacity(pool.len().div_ceil(batch_size));
    for chunk in pool.chunks(batch_size) {
        let mut flat = Vec::with_capacity(chunk.len() * dim);
        let mut labels = Vec::with_capacity(chunk.len());
        for (f, lab) in chunk {
            flat.extend_from_slice(f);
            labels.push(*lab);
        }
        let features = Matrix::from_vec(chunk.len(), dim, flat)?;
        let partition = BatchPartition::from_labels(&labels, c_o, c_n)?;
        batches.push(Batch { features, labels, partition });
    }
    Ok(batches)
}
