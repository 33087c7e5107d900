//! Pair-structured batches: sample `i` of the first half and sample
//! `i + b/2` always share a label.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dataset indices of one batch; `indices[i]` and `indices[i + b/2]` have the
/// same label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn half(&self) -> usize {
        self.indices.len() / 2
    }

    pub fn is_paired(&self) -> bool {
        let h = self.half();
        self.len() % 2 == 0 && (0..h).all(|i| self.labels[i] == self.labels[i + h])
    }
}

#[derive(Debug, Clone)]
pub struct PairSampler {
    labels: Vec<usize>,
    by_class: Vec<Vec<usize>>,
    batch_size: usize,
    seed: u64,
}

/// Per-epoch generator: stream `epoch` of the ChaCha keyed by `seed`.
pub fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

impl PairSampler {
    pub fn new(labels: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch_size must be even and positive, got {batch_size}")));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut by_class = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        if let Some(k) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Dataset(format!("class {k} has no images")));
        }
        Ok(Self {
            labels: labels.to_vec(),
            by_class,
            batch_size,
            seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.labels.len().div_ceil(self.batch_size / 2)
    }

    fn partner(&self, i: usize, rng: &mut impl Rng) -> usize {
        let members = &self.by_class[self.labels[i]];
        if members.len() == 1 {
            return i;
        }
        // uniform over the other members of the class
        let pick = rng.random_range(0..members.len() - 1);
        let own = members.binary_search(&i).expect("member of own class");
        members[if pick >= own { pick + 1 } else { pick }]
    }

    /// All batches of one epoch. Every image appears exactly once in a first
    /// half; the last batch may be smaller.
    pub fn epoch(&self, epoch: u64) -> Vec<PairBatch> {
        crate::instrument::bump(|c| c.pair_epochs += 1);
        let mut rng = epoch_rng(self.seed, epoch);
        let mut order: Vec<usize> = (0..self.labels.len()).collect();
        order.shuffle(&mut rng);
        order
            .chunks(self.batch_size / 2)
            .map(|first| {
                let second: Vec<usize> = first.iter().map(|&i| self.partner(i, &mut rng)).collect();
                let indices: Vec<usize> = first.iter().copied().chain(second).collect();
                let labels = indices.iter().map(|&i| self.labels[i]).collect();
                PairBatch { indices, labels }
            })
            .collect()
    }
}
