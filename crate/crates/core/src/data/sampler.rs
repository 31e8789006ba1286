use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PahError, Result};

/// Identity-balanced batches: `p` distinct identities with `k` images each.
#[derive(Debug, Clone)]
pub struct PkSampler {
    by_label: BTreeMap<usize, Vec<usize>>,
    items: usize,
    p: usize,
    k: usize,
    seed: u64,
}

impl PkSampler {
    /// `labels[i]` is the identity of item `i`.
    pub fn new(labels: &[usize], p: usize, k: usize, seed: u64) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(PahError::Config("batch P and K must be >= 1".into()));
        }
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(i);
        }
        if by_label.len() < p {
            return Err(PahError::Config(format!(
                "PK sampling needs at least {p} identities, found {}",
                by_label.len()
            )));
        }
        Ok(PkSampler {
            by_label,
            items: labels.len(),
            p,
            k,
            seed,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// Enough batches to cover every identity and, on average, every item.
    pub fn batches_per_epoch(&self) -> usize {
        self.by_label
            .len()
            .div_ceil(self.p)
            .max(self.items.div_ceil(self.batch_size()))
    }

    /// Item indices of every batch in `epoch`. Identities with fewer than
    /// `k` items are topped up by sampling with replacement.
    pub fn epoch(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        let ids: Vec<usize> = self.by_label.keys().copied().collect();
        let mut queue: Vec<usize> = Vec::new();
        let mut batches = Vec::with_capacity(self.batches_per_epoch());
        for _ in 0..self.batches_per_epoch() {
            if queue.len() < self.p {
                let mut fresh = ids.clone();
                fresh.shuffle(&mut rng);
                queue.extend(fresh);
            }
            let mut chosen: Vec<usize> = Vec::with_capacity(self.p);
            let mut i = 0;
            while chosen.len() < self.p {
                if !chosen.contains(&queue[i]) {
                    chosen.push(queue.remove(i));
                } else {
                    i += 1;
                }
            }
            let mut batch = Vec::with_capacity(self.batch_size());
            for id in chosen {
                let mut pool = self.by_label[&id].clone();
                pool.shuffle(&mut rng);
                let take = pool.len().min(self.k);
                batch.extend_from_slice(&pool[..take]);
                for _ in take..self.k {
                    batch.push(pool[rng.gen_range(0..pool.len())]);
                }
            }
            batches.push(batch);
        }
        batches
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn labels(ids: usize, per: usize) -> Vec<usize> {
        (0..ids * per).map(|i| i / per).collect()
    }

    #[test]
    fn six_by_seven() {
        let l = labels(8, 12);
        let s = PkSampler::new(&l, 6, 7, 0).unwrap();
        for b in s.epoch(0) {
            assert_eq!(b.len(), 42);
            let ids: BTreeSet<_> = b.iter().map(|&i| l[i]).collect();
            assert_eq!(ids.len(), 6);
            for id in ids {
                assert_eq!(b.iter().filter(|&&i| l[i] == id).count(), 7);
            }
        }
    }

    #[test]
    fn two_by_one() {
        let l = labels(3, 2);
        let s = PkSampler::new(&l, 2, 1, 4).unwrap();
        for b in s.epoch(1) {
            assert_eq!(b.len(), 2);
            assert_ne!(l[b[0]], l[b[1]]);
        }
    }

    #[test]
    fn covers_all_identities_and_is_deterministic() {
        let l = labels(13, 3);
        let s = PkSampler::new(&l, 4, 5, 9).unwrap();
        for e in 0..5 {
            let seen: BTreeSet<_> = s.epoch(e).iter().flatten().map(|&i| l[i]).collect();
            assert_eq!(seen.len(), 13);
            assert_eq!(s.epoch(e), PkSampler::new(&l, 4, 5, 9).unwrap().epoch(e));
        }
        assert_ne!(s.epoch(0), s.epoch(1));
    }

    #[test]
    fn too_few_identities() {
        assert!(PkSampler::new(&labels(3, 4), 6, 2, 0).is_err());
    }
}
