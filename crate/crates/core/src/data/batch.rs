use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Yields index batches covering `0..len` exactly once; the last batch may
/// be short.
#[derive(Clone, Debug)]
pub struct BatchIter {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

/// Batches for one epoch. With a shuffle seed the order is a permutation
/// determined by `(seed, epoch)`; without one rows keep their file order.
pub fn batch_iter(len: usize, batch_size: usize, shuffle_seed: Option<u64>, epoch: usize) -> BatchIter {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        let mixed = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
    }
    BatchIter {
        order,
        batch_size: batch_size.max(1),
        pos: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_with_partial_tail() {
        let sizes: Vec<usize> = batch_iter(10, 4, None, 0).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn covers_every_row_once() {
        let mut all: Vec<usize> = batch_iter(103, 8, Some(7), 2).flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
    }

    #[test]
    fn seeded_order_is_reproducible() {
        let a: Vec<Vec<usize>> = batch_iter(50, 7, Some(3), 1).collect();
        let b: Vec<Vec<usize>> = batch_iter(50, 7, Some(3), 1).collect();
        let c: Vec<Vec<usize>> = batch_iter(50, 7, Some(3), 2).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
