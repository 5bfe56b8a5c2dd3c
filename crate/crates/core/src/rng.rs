//! Deterministic randomness.
//!
//! Every stochastic operation derives its generator from an [`RngState`]: a
//! (seed, stream) pair mapped onto ChaCha8. Equal pairs give bit-identical
//! draw sequences on every platform, so decode paths, particle systems and
//! vote draws are exactly reproducible.
//!
//! Stream layout, relative to the caller's base stream:
//! trace m uses `base + m`; the answer decode loop uses `base +
//! ANSWER_STREAM_OFFSET`; particle p of the importance sampler uses `base +
//! ANSWER_STREAM_OFFSET + p`, which makes particle 0 draw the same variates
//! as the plain decoder; vote draw j uses `base + VOTE_STREAM_OFFSET + j`.
//! The remaining offsets keep fallback completions, resampling and final
//! particle selection off every other stream.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Answer decoding, and particle p at `+ p`.
pub const ANSWER_STREAM_OFFSET: u64 = 1 << 62;
/// Base completion drawn when the decoder falls back.
pub const FALLBACK_STREAM_OFFSET: u64 = (1 << 62) | (1 << 61);
/// Majority-vote completion draws, one stream per draw.
pub const VOTE_STREAM_OFFSET: u64 = 1 << 61;
/// Multinomial offspring selection at resample events.
pub const RESAMPLE_STREAM_OFFSET: u64 = (1 << 62) | (1 << 60);
/// Final weighted particle selection.
pub const SELECT_STREAM_OFFSET: u64 = (1 << 62) | (1 << 59);

/// A reproducible generator identity. Copyable; the materialized generator is
/// moved to the single consumer that advances it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngState { seed, stream }
    }

    /// Same seed, stream displaced by `offset` (wrapping).
    pub fn offset(self, offset: u64) -> Self {
        RngState { seed: self.seed, stream: self.stream.wrapping_add(offset) }
    }

    pub fn into_rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}
