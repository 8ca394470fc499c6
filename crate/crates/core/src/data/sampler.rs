use super::{DataError, DatasetSplit, Interaction, InteractionGraph};
use crate::rng::{keyed_rng, keys};
use rand::seq::SliceRandom;
use rand::Rng;

/// Per-user sorted item lists for one interaction subset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserItemIndex {
    num_items: usize,
    items: Vec<Vec<usize>>,
}

impl UserItemIndex {
    pub fn new(interactions: &[Interaction], num_users: usize, num_items: usize) -> Self {
        let mut items = vec![Vec::new(); num_users];
        for it in interactions {
            items[it.user].push(it.item);
        }
        for v in &mut items {
            v.sort_unstable();
            v.dedup();
        }
        Self { num_items, items }
    }

    pub fn num_users(&self) -> usize {
        self.items.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn items(&self, user: usize) -> &[usize] {
        &self.items[user]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.items[user].binary_search(&item).is_ok()
    }
}

/// Aligned `(user, positive, negative)` index arrays.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripleBatch {
    pub users: Vec<usize>,
    pub pos_items: Vec<usize>,
    pub neg_items: Vec<usize>,
}

impl TripleBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Distinct users in first-appearance order.
    pub fn unique_users(&self) -> Vec<usize> {
        unique(&self.users)
    }

    /// Distinct positive items in first-appearance order.
    pub fn unique_pos_items(&self) -> Vec<usize> {
        unique(&self.pos_items)
    }
}

fn unique(xs: &[usize]) -> Vec<usize> {
    let mut seen = std::collections::HashSet::with_capacity(xs.len());
    xs.iter().copied().filter(|x| seen.insert(*x)).collect()
}

/// One epoch of BPR triples: every training interaction appears once as a
/// positive, in a seeded order, and each batch draws its negatives from its
/// own stream keyed by `(seed, epoch, batch)`. Batches can therefore be
/// produced in any order or concurrently with identical results.
#[derive(Clone, Debug)]
pub struct EpochSampler<'a> {
    train: &'a [Interaction],
    index: &'a UserItemIndex,
    order: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
}

impl<'a> EpochSampler<'a> {
    pub fn new(
        train: &'a [Interaction],
        index: &'a UserItemIndex,
        batch_size: usize,
        seed: u64,
        epoch: u64,
    ) -> Result<Self, DataError> {
        if train.is_empty() {
            return Err(DataError::EmptyTrainSplit);
        }
        for it in train {
            if index.items(it.user).len() >= index.num_items() {
                return Err(DataError::SaturatedUser { user: it.user });
            }
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut keyed_rng(seed, keys::EPOCH_ORDER, epoch, 0));
        Ok(Self { train, index, order, batch_size: batch_size.max(1), seed, epoch })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn batch(&self, b: usize) -> TripleBatch {
        let lo = b * self.batch_size;
        let hi = (lo + self.batch_size).min(self.order.len());
        let mut rng = keyed_rng(self.seed, keys::EPOCH_ORDER, self.epoch, b as u64 + 1);
        let n_items = self.index.num_items();
        let mut out = TripleBatch {
            users: Vec::with_capacity(hi - lo),
            pos_items: Vec::with_capacity(hi - lo),
            neg_items: Vec::with_capacity(hi - lo),
        };
        for &k in &self.order[lo..hi] {
            let it = self.train[k];
            let neg = loop {
                let j = rng.random_range(0..n_items);
                if !self.index.contains(it.user, j) {
                    break j;
                }
            };
            out.users.push(it.user);
            out.pos_items.push(it.item);
            out.neg_items.push(neg);
        }
        out
    }

    pub fn batches(&self) -> impl Iterator<Item = TripleBatch> + '_ {
        (0..self.num_batches()).map(move |b| self.batch(b))
    }
}

/// All batches of one epoch over the training split.
pub fn sample_triples(
    split: &DatasetSplit,
    graph: &InteractionGraph,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<TripleBatch>, DataError> {
    let index = UserItemIndex::new(&split.train, graph.num_users(), graph.num_items());
    let sampler = EpochSampler::new(&split.train, &index, batch_size, seed, epoch)?;
    Ok(sampler.batches().collect())
}
