//! Deterministic random primitives ("chacha8-v1").
//!
//! All randomness in the crate flows through ChaCha8 plus the two mappings
//! below, so splits, initializations and toy encodings reproduce bit-for-bit
//! across machines regardless of what `rand` does internally with its
//! distribution code.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fresh generator for a 64-bit seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform f64 in [0, 1) using the top 53 bits of the stream.
pub fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform f64 in [-scale, scale).
pub fn uniform_sym(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    (uniform01(rng) * 2.0 - 1.0) * scale
}

/// Unbiased index in [0, n) by rejection sampling. Panics if n == 0.
pub fn uniform_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    assert!(n > 0, "uniform_index needs n > 0");
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

/// Partial Fisher-Yates: the first `take` slots of a shuffled 0..n.
pub fn sample_indices(rng: &mut ChaCha8Rng, n: usize, take: usize) -> Vec<usize> {
    assert!(take <= n, "cannot take {take} from {n}");
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..take {
        let j = i + uniform_index(rng, n - i);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}

/// Full in-place shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    let n = items.len();
    if n < 2 {
        return;
    }
    for i in 0..n - 1 {
        let j = i + uniform_index(rng, n - i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_across_instances() {
        let mut a = rng(7);
        let mut b = rng(7);
        for _ in 0..32 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn uniform01_in_range() {
        let mut r = rng(1);
        for _ in 0..1000 {
            let v = uniform01(&mut r);
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn sample_is_subset_without_replacement() {
        let mut r = rng(3);
        let picked = sample_indices(&mut r, 50, 20);
        assert_eq!(picked.len(), 20);
        let mut seen = std::collections::HashSet::new();
        for &i in &picked {
            assert!(i < 50);
            assert!(seen.insert(i), "duplicate index {i}");
        }
    }

    #[test]
    fn index_covers_domain() {
        let mut r = rng(5);
        let mut hit = [false; 7];
        for _ in 0..500 {
            hit[uniform_index(&mut r, 7)] = true;
        }
        assert!(hit.iter().all(|&h| h));
    }
}
