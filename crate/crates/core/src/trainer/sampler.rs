//! Mini-batch construction for head training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::config::SamplerKind;

/// Index batches for one epoch. Every epoch has `ceil(n / batch_size)` batches.
///
/// `Balanced` gives each non-empty (label, site) stratum an equal share of
/// every batch, cycling through a reshuffled copy of the stratum whenever it
/// runs out; small strata are therefore oversampled.
pub fn epoch_batches<R: Rng + ?Sized>(
    labels: &[bool],
    sites: &[usize],
    batch_size: usize,
    kind: SamplerKind,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let n = labels.len();
    if n == 0 || batch_size == 0 {
        return vec![];
    }
    match kind {
        SamplerKind::Shuffled => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            order.chunks(batch_size).map(<[usize]>::to_vec).collect()
        }
        SamplerKind::Balanced => {
            let mut strata: BTreeMap<(bool, usize), Vec<usize>> = BTreeMap::new();
            for i in 0..n {
                strata.entry((labels[i], sites[i])).or_default().push(i);
            }
            let mut streams: Vec<Stream> = strata.into_values().map(|m| Stream::new(m, rng)).collect();
            let n_batches = n.div_ceil(batch_size);
            let k = streams.len();
            let mut rotation = 0;
            (0..n_batches)
                .map(|_| {
                    let mut batch = Vec::with_capacity(batch_size);
                    for slot in 0..batch_size {
                        let s = (rotation + slot) % k;
                        batch.push(streams[s].next(rng));
                    }
                    rotation = (rotation + batch_size) % k;
                    batch
                })
                .collect()
        }
    }
}

struct Stream {
    members: Vec<usize>,
    pos: usize,
}

impl Stream {
    fn new<R: Rng + ?Sized>(mut members: Vec<usize>, rng: &mut R) -> Self {
        members.shuffle(rng);
        Self { members, pos: 0 }
    }

    fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.pos == self.members.len() {
            self.members.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.members[self.pos - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shuffled_is_a_permutation() {
        let labels = vec![true; 10];
        let sites = vec![0; 10];
        let b = epoch_batches(
            &labels,
            &sites,
            4,
            SamplerKind::Shuffled,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn balanced_gives_each_stratum_equal_share() {
        // one large and three tiny strata
        let labels: Vec<bool> = (0..40).map(|i| i < 34 || i >= 37).collect();
        let sites: Vec<usize> = (0..40).map(|i| usize::from(i >= 34)).collect();
        let b = epoch_batches(
            &labels,
            &sites,
            8,
            SamplerKind::Balanced,
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        assert_eq!(b.len(), 5);
        for batch in &b {
            let mut counts = BTreeMap::new();
            for &i in batch {
                *counts.entry((labels[i], sites[i])).or_insert(0) += 1;
            }
            assert_eq!(counts.len(), 3);
            let max = counts.values().max().unwrap();
            let min = counts.values().min().unwrap();
            assert!(max - min <= 1, "{counts:?}");
        }
    }
}
