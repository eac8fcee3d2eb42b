//! SplitMix64 and the stream-derivation rule used to build synthetic specs.
//!
//! Every random quantity in a synthetic spec comes from its own stream,
//! keyed by `(seed, question id, field tag)`:
//!
//! ```text
//! state0 = mix(seed ^ mix(question ^ mix(tag)))
//! ```
//!
//! where `mix` is the SplitMix64 output finalizer. Uniform reals use the top
//! 53 bits: `u = (next >> 11) * 2^-53`, so `u` lies in `[0, 1)`. Another
//! implementation reproduces a spec bit-for-bit by following these two rules.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// The stream for one field of one question.
    pub fn stream(seed: u64, question: u64, tag: u64) -> Self {
        Self::new(mix(seed ^ mix(question ^ mix(tag))))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n` (modulo reduction; bias is irrelevant at
    /// the sizes used here and keeps the rule trivially portable).
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        self.next_u64() % n
    }
}

/// SplitMix64 output finalizer.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
