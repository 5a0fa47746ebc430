//! Portable PRNG and shuffle.
//!
//! SplitMix64: `state += 0x9E3779B97F4A7C15`, output `mix64(state)`.
//! Shuffle `k` of a run seeded with `s` starts from `s ^ mix64(k + 1)` and
//! applies Fisher-Yates from the back, drawing `j = next_u64() % (i + 1)`.
//! Both are fixed so permutations can be reproduced in any language.

use crate::embedding::mix64;

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, n)`; `n` must be positive. Uses plain modulo, so the
    /// tiny bias for huge `n` is part of the pinned behavior.
    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }
}

pub fn shuffle_seed(seed: u64, shuffle_index: u64) -> u64 {
    seed ^ mix64(shuffle_index + 1)
}

pub fn fisher_yates<T>(items: &mut [T], rng: &mut SplitMix64) {
    for i in (1..items.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// Order in which shuffle `shuffle_index` visits `n` items.
pub fn permutation(seed: u64, shuffle_index: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    fisher_yates(&mut order, &mut SplitMix64::new(shuffle_seed(seed, shuffle_index)));
    order
}
