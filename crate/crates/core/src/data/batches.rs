use rand::seq::SliceRandom;

use super::{EncodedRecord, FoldPlan, Split};
use crate::seed::{rng_for, stream};

/// Splits `indices` into batches of at most `batch_size`. With a shuffle
/// seed the order is permuted by a stream derived from `(seed, epoch)`.
/// The last batch may be short; nothing is padded or dropped.
pub fn batch_indices(indices: &[usize], batch_size: usize, shuffle: Option<(u64, u64)>) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order = indices.to_vec();
    if let Some((seed, epoch)) = shuffle {
        order.shuffle(&mut rng_for(seed, &[stream::SHUFFLE, epoch]));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Iterator over encoded batches of one fold split.
pub struct Batches<'a> {
    records: &'a [EncodedRecord],
    chunks: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Vec<&'a EncodedRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        self.chunks
            .next()
            .map(|c| c.into_iter().map(|i| &self.records[i]).collect())
    }
}

/// Batches for `fold`: the train split is every other fold, reshuffled per
/// epoch; the test split keeps record order.
pub fn batches<'a>(
    records: &'a [EncodedRecord],
    plan: &FoldPlan,
    fold: usize,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Batches<'a> {
    assert!(fold < plan.k, "fold {fold} out of range for k = {}", plan.k);
    let idx = plan.indices(fold, split);
    let shuffle = (split == Split::Train).then_some((seed, epoch));
    Batches {
        records,
        chunks: batch_indices(&idx, batch_size, shuffle).into_iter(),
    }
}
