use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EmbeddingDataset;
use crate::error::{Error, Result};

/// One mini-batch: the record indices and their embeddings as a `B x d` matrix.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub x: Array2<f64>,
}

pub struct BatchIter<'a> {
    dataset: &'a EmbeddingDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let x = self.dataset.matrix(&indices);
        Some(Batch { indices, x })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

/// Shuffles `indices` with a permutation keyed on `(seed, epoch)` and yields
/// consecutive batches; the last batch may be short.
pub fn iterate_batches<'a>(
    dataset: &'a EmbeddingDataset,
    indices: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if indices.is_empty() {
        return Err(Error::Invalid("cannot batch an empty id set".into()));
    }
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(BatchIter {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::testutil::record;

    fn ds(n: usize) -> EmbeddingDataset {
        let recs = (0..n)
            .map(|i| record(&format!("r{i:03}"), vec![i as f32, -(i as f32)]))
            .collect();
        EmbeddingDataset::new(2, recs).unwrap()
    }

    #[test]
    fn five_ids_batch_two() {
        let d = ds(5);
        let sizes: Vec<usize> = iterate_batches(&d, &d.all_indices(), 2, 0, 0)
            .unwrap()
            .map(|b| b.x.nrows())
            .collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn epochs_permute_differently_over_same_multiset() {
        let d = ds(100);
        let ids = d.all_indices();
        let e0: Vec<usize> = iterate_batches(&d, &ids, 7, 9, 0).unwrap().flat_map(|b| b.indices).collect();
        let e1: Vec<usize> = iterate_batches(&d, &ids, 7, 9, 1).unwrap().flat_map(|b| b.indices).collect();
        assert_ne!(e0, e1);
        let (mut s0, mut s1) = (e0.clone(), e1);
        s0.sort_unstable();
        s1.sort_unstable();
        assert_eq!(s0, ids);
        assert_eq!(s1, ids);
        let again: Vec<usize> = iterate_batches(&d, &ids, 7, 9, 0).unwrap().flat_map(|b| b.indices).collect();
        assert_eq!(e0, again);
    }

    #[test]
    fn rows_match_records() {
        let d = ds(4);
        for b in iterate_batches(&d, &[1, 3], 8, 2, 0).unwrap() {
            for (row, &i) in b.x.rows().into_iter().zip(&b.indices) {
                assert_eq!(row[0], i as f64);
            }
        }
    }

    #[test]
    fn zero_batch_size_rejected() {
        let d = ds(3);
        assert!(iterate_batches(&d, &[0], 0, 0, 0).is_err());
    }
}
