use super::{Interaction, InteractionGraph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Train / test / validation partition of an interaction set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<Interaction>,
    pub valid: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub seed: u64,
}

/// Sizes of the (train, test, valid) blocks for `n` interactions: train and
/// test are 80% and 10% rounded half-up, validation takes the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (8 * n + 5) / 10;
    let test = ((n + 5) / 10).min(n - train);
    (train, test, n - train - test)
}

/// Seeded shuffle, then consecutive train / test / valid blocks in that order.
pub fn build_split(graph: &InteractionGraph, seed: u64) -> DatasetSplit {
    let mut order: Vec<Interaction> = graph.interactions().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let (n_train, n_test, _) = split_sizes(order.len());
    let valid = order.split_off(n_train + n_test);
    let test = order.split_off(n_train);
    DatasetSplit { train: order, valid, test, seed }
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
