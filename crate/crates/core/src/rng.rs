//! Seeded randomness with a pinned consumption pattern.
//!
//! Every random decision in this crate flows through this module so that a
//! `(seed, stream, index)` triple maps to the same bytes on every platform
//! and every build. The generator is ChaCha8 keyed through a SplitMix64
//! expansion; shuffling and bounded sampling are implemented here rather
//! than borrowed from a library so the exact draw sequence is owned by this
//! repository and cannot drift underneath a dependency upgrade.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// SplitMix64 increment (golden-ratio constant).
const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stream tags keep derived seeds from colliding across sub-systems.
/// Values are the little-endian bytes of a short ASCII name, which makes
/// them stable, greppable, and obviously distinct.
pub mod stream {
    /// Per-epoch plan construction.
    pub const EPOCH: u64 = u64::from_le_bytes(*b"epoch\0\0\0");
    /// In-memory reshuffle of one fetch set.
    pub const FETCH_SHUFFLE: u64 = u64::from_le_bytes(*b"fetchshf");
    /// Shuffle-buffer emission for buffered streaming.
    pub const BUFFER: u64 = u64::from_le_bytes(*b"bufemit\0");
    /// Monte Carlo shards in the entropy simulator.
    pub const SIM_SHARD: u64 = u64::from_le_bytes(*b"simshard");
    /// Synthetic corpus generation.
    pub const SYNTH: u64 = u64::from_le_bytes(*b"synthgen");
    /// Classifier weight initialization.
    pub const MODEL_INIT: u64 = u64::from_le_bytes(*b"mdlinit\0");
}

/// SplitMix64 finalizer. Bijective on u64.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed for a tagged stream.
///
/// The chain is documented so external tools can reproduce it:
/// `mix64(mix64(seed ^ tag) ^ index)`.
#[inline]
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ tag) ^ index)
}

/// ChaCha8 generator keyed from a single u64.
///
/// The 256-bit key is the first four outputs of SplitMix64 seeded with
/// `seed`, so the expansion is fixed by this crate, not by `rand_core`'s
/// `seed_from_u64`.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = seed;
    for chunk in key.chunks_exact_mut(8) {
        let out = mix64(state);
        state = state.wrapping_add(GOLDEN);
        chunk.copy_from_slice(&out.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Uniform integer in `[0, bound)` without modulo bias
/// (Lemire's multiply-shift rejection method).
///
/// Panics if `bound == 0`.
#[inline]
pub fn bounded(rng: &mut impl RngCore, bound: u64) -> u64 {
    assert!(bound > 0, "bounded() requires a positive bound");
    let mut x = rng.next_u64();
    let mut m = (x as u128) * (bound as u128);
    let mut lo = m as u64;
    if lo < bound {
        let threshold = bound.wrapping_neg() % bound;
        while lo < threshold {
            x = rng.next_u64();
            m = (x as u128) * (bound as u128);
            lo = m as u64;
        }
    }
    (m >> 64) as u64
}

/// Uniform f64 in `[0, 1)` using the top 53 bits of one draw.
#[inline]
pub fn uniform_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box-Muller (cosine branch).
pub fn normal_f64(rng: &mut impl RngCore) -> f64 {
    let u1 = 1.0 - uniform_f64(rng);
    let u2 = uniform_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut impl RngCore, xs: &mut [T]) {
    for i in (1..xs.len()).rev() {
        let j = bounded(rng, (i + 1) as u64) as usize;
        xs.swap(i, j);
    }
}

/// Partial Fisher-Yates: after the call, `xs[..take]` holds `take` elements
/// drawn uniformly without replacement from the original slice.
pub fn partial_shuffle<T>(rng: &mut impl RngCore, xs: &mut [T], take: usize) {
    let n = xs.len();
    assert!(take <= n, "cannot take {take} of {n}");
    for i in 0..take {
        let j = i + bounded(rng, (n - i) as u64) as usize;
        xs.swap(i, j);
    }
}

/// Sequential weighted sampling without replacement over a fixed set of
/// items, backed by a Fenwick tree of f64 weights.
///
/// Draws use only addition, multiplication, and comparison on f64, so the
/// selection sequence for a given seed is identical across platforms. Items
/// whose weight is zero (or that remain after the total weight underflows
/// to zero) are yielded last, in ascending index order.
pub struct WeightedSampler {
    tree: Vec<f64>,
    remaining: usize,
    drawn: Vec<bool>,
}

impl WeightedSampler {
    /// Builds the sampler. Negative or non-finite weights are rejected by
    /// the caller (see `SamplerConfig::validate`); here they would corrupt
    /// the tree, so debug builds assert.
    pub fn new(weights: &[f64]) -> Self {
        debug_assert!(weights.iter().all(|w| w.is_finite() && *w >= 0.0));
        let n = weights.len();
        let mut tree = vec![0.0f64; n + 1];
        for (i, &w) in weights.iter().enumerate() {
            let mut idx = i + 1;
            while idx <= n {
                tree[idx] += w;
                idx += idx & idx.wrapping_neg();
            }
        }
        WeightedSampler {
            tree,
            remaining: n,
            drawn: vec![false; n],
        }
    }

    fn total(&self) -> f64 {
        let n = self.tree.len() - 1;
        let mut idx = n;
        let mut sum = 0.0;
        while idx > 0 {
            sum += self.tree[idx];
            idx &= idx - 1;
        }
        sum
    }

    fn subtract(&mut self, item: usize, w: f64) {
        let n = self.tree.len() - 1;
        let mut idx = item + 1;
        while idx <= n {
            self.tree[idx] -= w;
            idx += idx & idx.wrapping_neg();
        }
    }

    fn weight_of(&self, item: usize) -> f64 {
        // prefix(item + 1) - prefix(item), reconstructed from the tree
        let prefix = |mut idx: usize| {
            let mut s = 0.0;
            while idx > 0 {
                s += self.tree[idx];
                idx &= idx - 1;
            }
            s
        };
        prefix(item + 1) - prefix(item)
    }

    /// Draws the next item, or None when all items are exhausted.
    pub fn draw(&mut self, rng: &mut impl RngCore) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        let total = self.total();
        if total > 0.0 {
            let target = uniform_f64(rng) * total;
            // descend the implicit tree for the smallest index whose
            // prefix sum exceeds target
            let n = self.tree.len() - 1;
            let mut pos = 0usize;
            let mut rem = target;
            let mut half = n.next_power_of_two();
            while half > 0 {
                let next = pos + half;
                if next <= n && self.tree[next] <= rem {
                    rem -= self.tree[next];
                    pos = next;
                }
                half >>= 1;
            }
            // pos is now the count of items whose cumulative weight is
            // below target; the item index is pos itself (clamped against
            // rounding at the upper edge and against already-drawn items
            // whose residual weight rounded negative)
            let mut item = pos.min(n - 1);
            if self.drawn[item] || self.weight_of(item) <= 0.0 {
                match (0..n).find(|&i| !self.drawn[i] && self.weight_of(i) > 0.0) {
                    Some(i) => item = i,
                    None => {
                        return self.draw_zero_weight();
                    }
                }
            }
            let w = self.weight_of(item);
            self.subtract(item, w);
            self.drawn[item] = true;
            self.remaining -= 1;
            Some(item)
        } else {
            self.draw_zero_weight()
        }
    }

    fn draw_zero_weight(&mut self) -> Option<usize> {
        let item = self.drawn.iter().position(|d| !d)?;
        self.drawn[item] = true;
        self.remaining -= 1;
        Some(item)
    }
}
