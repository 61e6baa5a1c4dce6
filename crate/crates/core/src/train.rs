//! Shared training-loop plumbing: hyperparameters, deterministic batching
//! and ordered gradient reduction.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::Gradients;
use crate::error::Result;
use crate::params::{Adam, AdamConfig, GradBuffer, ParamStore};
use crate::util::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHyperparams {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Keep encoder weights fixed; only heads are updated.
    pub freeze_encoder: bool,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        Self { lr: 1e-4, batch_size: 64, epochs: 30, seed: 0, freeze_encoder: false }
    }
}

impl TrainHyperparams {
    /// Batch size, reduced to the corpus size for tiny corpora.
    pub fn effective_batch(&self, n: usize) -> usize {
        if n < self.batch_size {
            log::warn!("batch size {} exceeds corpus size {n}; using {n}", self.batch_size);
            n.max(1)
        } else {
            self.batch_size.max(1)
        }
    }
}

/// Shuffled mini-batches of `0..n` for one epoch, reproducible from
/// `(seed, stage, epoch)`.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, stage: &str, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, stage, &[epoch as u64]));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Runs `per_item` over a batch (in parallel), then sums gradients in
/// batch order so the result does not depend on thread scheduling.
/// `per_item` returns `None` to skip an item.
pub fn batch_gradients<S, F>(items: &[usize], stores: &[&ParamStore], per_item: F) -> Result<(GradBuffer, Vec<S>)>
where
    S: Send,
    F: Fn(usize) -> Result<Option<(Gradients, S)>> + Sync,
{
    let results: Vec<Result<Option<(GradBuffer, S)>>> = items
        .par_iter()
        .map(|&i| {
            Ok(per_item(i)?.map(|(grads, stats)| {
                let mut buf = GradBuffer::zeros_like(stores);
                buf.add(&grads);
                (buf, stats)
            }))
        })
        .collect();
    let mut total = GradBuffer::zeros_like(stores);
    let mut stats = Vec::with_capacity(items.len());
    for r in results {
        if let Some((buf, s)) = r? {
            total.merge(&buf);
            stats.push(s);
        }
    }
    Ok((total, stats))
}

/// One Adam optimizer per parameter group.
pub struct Optimizers {
    adams: Vec<Option<Adam>>,
}

impl Optimizers {
    /// `trainable[i] == false` freezes group `i`.
    pub fn new(lr: f64, stores: &[&ParamStore], trainable: &[bool]) -> Self {
        let adams = stores
            .iter()
            .zip(trainable)
            .map(|(s, &t)| t.then(|| Adam::new(AdamConfig::with_lr(lr), s)))
            .collect();
        Self { adams }
    }

    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &GradBuffer) {
        for (i, (adam, store)) in self.adams.iter_mut().zip(stores.iter_mut()).enumerate() {
            if let Some(adam) = adam {
                adam.step(store, grads.group(i));
            }
        }
    }
}

/// Minimal CSV accumulator for training logs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CsvLog {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvLog {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.column(name)?.last().copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, v)| if i == 0 { format!("{}", *v as u64) } else { format!("{v}") })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_item_once() {
        let b = epoch_batches(10, 4, 1, "s", 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 4, 1, "s", 0));
        assert_ne!(b, epoch_batches(10, 4, 1, "s", 1));
    }

    #[test]
    fn tiny_corpus_reduces_batch() {
        let hp = TrainHyperparams::default();
        assert_eq!(hp.effective_batch(10), 10);
        assert_eq!(hp.effective_batch(1000), 64);
    }

    #[test]
    fn csv_layout() {
        let mut log = CsvLog::new(&["step", "loss"]);
        log.push(vec![1.0, 0.5]);
        assert_eq!(log.to_csv(), "step,loss\n1,0.5\n");
    }
}
