//! Deterministic random number generation.
//!
//! Every random choice in the crate flows through [`SplitMix64`], the
//! 64-bit-state generator of Steele, Lea and Flood ("Fast splittable
//! pseudorandom number generators", OOPSLA 2014). It was chosen over an
//! external RNG crate because the splits and synthetic corpora must be
//! reproducible bit-for-bit across implementations, so the full algorithm
//! is documented here:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! output = z ^ (z >> 31)
//! ```
//!
//! Derived conventions, all fixed:
//! - uniform doubles take the top 53 bits, mapped to `[0, 1)`;
//! - Gaussians use the Box-Muller transform and consume exactly two raw
//!   draws per sample (`u1` is shifted into `(0, 1]` before the log);
//! - bounded integers use rejection sampling to remove modulo bias;
//! - independent streams are derived from a base seed plus integer salts
//!   via [`stream`], so parallel work (ensemble members, MC passes,
//!   bootstrap replicates) never shares a generator.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 generator with 64 bits of state.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform double in `[0, 1)` from the top 53 bits of one draw.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in `[lo, hi)`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller; always consumes two raw draws.
    pub fn gaussian(&mut self) -> f64 {
        // shift into (0, 1] so the log is finite
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Unbiased integer in `[0, n)` via rejection sampling.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below requires n > 0");
        let threshold = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < threshold {
                return x % n;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Derive an independent generator from a base seed and integer salts.
///
/// Streams for distinct salt sequences are decorrelated by running each
/// salt through the SplitMix64 finalizer before folding it into the state.
pub fn stream(seed: u64, salts: &[u64]) -> SplitMix64 {
    let mut acc = mix64(seed ^ GOLDEN_GAMMA);
    for (i, &s) in salts.iter().enumerate() {
        acc = mix64(
            acc.wrapping_add(GOLDEN_GAMMA)
                .wrapping_add(mix64(s.wrapping_add(i as u64 + 1))),
        );
    }
    SplitMix64::new(acc)
}
