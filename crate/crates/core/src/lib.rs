//! Decoding engine for sampling answers from the sharpened answer marginal of a
//! latent-reasoning autoregressive model.
//!
//! A completion is a reasoning trace followed by an answer segment. The answer
//! marginal sums the trace variable out; raising it to an integer power K and
//! renormalizing concentrates mass on well-supported answers. The [`decoder`]
//! module samples from that target approximately with a prefix-weighted
//! product-of-experts token rule over S groups of K traces; [`sis`] corrects
//! the same proposal with particle importance weights; [`oracle`] computes
//! every target exactly on tabular toy models by brute-force enumeration, and
//! is the ground truth the test suite compares against.
//!
//! Everything is deterministic given a [`rng::RngState`]: traces, decode
//! paths, particle systems and baselines each draw from fixed derived streams.

pub mod backend;
pub mod baselines;
pub mod decoder;
pub mod model;
pub mod numeric;
pub mod oracle;
pub mod rng;
pub mod seq;
pub mod sis;
pub mod toy;

pub use backend::{BackendError, ModelBackend};
pub use model::{Context, LogProbVector, TabularModel};
pub use seq::{ParsedCompletion, TokenId, TokenSeq, Vocab};
