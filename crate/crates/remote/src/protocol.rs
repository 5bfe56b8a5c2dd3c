//! Wire types for the log-probability service.
//!
//! JSON has no encoding for negative infinity, so zero-mass tokens are
//! expressed by omission: `exhaustive: true` marks a result whose absent
//! tokens are known zeros, while a truncated result leaves them unknown.

use serde::{Deserialize, Serialize};

use sharpen_core::model::LogProbVector;

/// Batched evaluation request: every prefix is evaluated against the same
/// prompt. `top_l = 0` asks for the full vocabulary.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TopLRequest {
    pub prompt_id: String,
    pub prefixes: Vec<Vec<u32>>,
    #[serde(default)]
    pub top_l: usize,
}

/// One prefix's result: finite log-probabilities sorted by descending value
/// (ties by ascending token id), plus the coverage marker.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PrefixLogProbs {
    pub entries: Vec<(u32, f64)>,
    pub exhaustive: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TopLResponse {
    pub results: Vec<PrefixLogProbs>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

/// Served model metadata, fetched once per client connection.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Meta {
    pub vocab: Vec<String>,
    pub max_len: usize,
}

/// Converts an exhaustive in-process vector into wire entries, keeping the
/// `top_l` largest finite values (0 keeps all). The result is exhaustive
/// exactly when no finite entry was dropped.
pub fn to_wire(lp: &LogProbVector, top_l: usize) -> PrefixLogProbs {
    let mut entries: Vec<(u32, f64)> = lp
        .supported()
        .map(|(t, v)| (t.0, v))
        .collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let finite = entries.len();
    let exhaustive = top_l == 0 || top_l >= finite;
    if !exhaustive {
        entries.truncate(top_l);
    }
    PrefixLogProbs { entries, exhaustive }
}

/// Rebuilds a support-masked vector from wire entries.
pub fn from_wire(result: &PrefixLogProbs, vocab_size: usize) -> LogProbVector {
    LogProbVector::from_sparse(vocab_size, &result.entries, result.exhaustive)
}
