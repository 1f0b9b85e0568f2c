//! Deterministic random streams.
//!
//! Every consumer of randomness gets its own named ChaCha stream derived from
//! the run seed, so adding draws in one place never shifts another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use rand_chacha::ChaCha8Rng as StreamRng;

fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Stream `label` of the run seeded with `seed`.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    indexed_stream(seed, label, 0)
}

/// Stream `label`/`index`, e.g. one per concept or per environment.
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = fnv1a(label.as_bytes(), FNV_OFFSET);
    rng.set_stream(fnv1a(&index.to_le_bytes(), h));
    rng
}

/// A fresh seed drawn from `rng`, for handing to child streams.
pub fn child_seed<R: Rng + ?Sized>(rng: &mut R) -> u64 {
    rng.next_u64()
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform integer in `0..n`; `n` must be positive.
pub fn below<R: Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    rng.random_range(0..n)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

/// Uniform random permutation of `0..n` (Fisher-Yates).
pub fn permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> alloc::vec::Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: alloc::vec::Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a = stream(7, "data").next_u64();
        assert_eq!(a, stream(7, "data").next_u64());
        assert_ne!(a, stream(7, "bank").next_u64());
        assert_ne!(a, stream(8, "data").next_u64());
        assert_ne!(indexed_stream(7, "cav", 1).next_u64(), indexed_stream(7, "cav", 2).next_u64());
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut rng = stream(1, "p");
        let mut p = permutation(&mut rng, 50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<alloc::vec::Vec<_>>());
    }
}
