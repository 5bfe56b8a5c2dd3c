//! Comparison methods: plain temperature-1 sampling, majority voting over k
//! completions, and exact joint-sharpened sampling (the power-sampling target
//! drawn by enumeration rather than by Markov chain).

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backend::{BackendError, ModelBackend, base_completion};
use crate::model::TabularModel;
use crate::numeric;
use crate::oracle::{self, OracleError};
use crate::rng::{RngState, VOTE_STREAM_OFFSET};
use crate::seq::{ParsedCompletion, TokenSeq, Vocab};

/// Maps answers to canonical keys for vote counting. Answers with equal keys
/// pool their votes; ties between keys break to the smaller string.
#[derive(Clone)]
pub struct AnswerEquiv {
    canonicalizer: Arc<dyn Fn(&TokenSeq, &Vocab) -> String + Send + Sync>,
}

impl AnswerEquiv {
    /// One key per distinct answer sequence: its token names joined by
    /// spaces, so key order is name order.
    pub fn identity() -> Self {
        AnswerEquiv { canonicalizer: Arc::new(|a, v| v.render(a)) }
    }

    pub fn with_canonicalizer<F>(f: F) -> Self
    where
        F: Fn(&TokenSeq, &Vocab) -> String + Send + Sync + 'static,
    {
        AnswerEquiv { canonicalizer: Arc::new(f) }
    }

    pub fn key(&self, answer: &TokenSeq, vocab: &Vocab) -> String {
        (self.canonicalizer)(answer, vocab)
    }
}

impl std::fmt::Debug for AnswerEquiv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AnswerEquiv")
    }
}

#[derive(Debug, Error)]
pub enum VoteError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("all {k} completions were truncated; no votes to count")]
    AllTruncated { k: usize },
}

/// Temperature-1.0 ancestral sampling, the plain baseline. Nothing more than
/// one base completion, named so runs can select it as a method.
pub fn temperature_sample_answer(
    backend: &dyn ModelBackend,
    prompt_id: &str,
    l: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParsedCompletion, BackendError> {
    base_completion(backend, prompt_id, l, rng)
}

/// Draws k completions on per-vote streams, pools answers by canonical key,
/// and returns a representative of the plurality class. Truncated completions
/// do not vote.
pub fn majority_vote(
    backend: &dyn ModelBackend,
    prompt_id: &str,
    k: usize,
    l: usize,
    equiv: &AnswerEquiv,
    rng: RngState,
) -> Result<TokenSeq, VoteError> {
    assert!(k >= 1, "votes require at least one completion");
    let vocab = backend.vocab();
    // BTreeMap gives key-order iteration, which is the tie rule.
    let mut ballots: BTreeMap<String, (usize, TokenSeq)> = BTreeMap::new();
    for j in 0..k {
        let mut vote_rng = rng.offset(VOTE_STREAM_OFFSET.wrapping_add(j as u64)).into_rng();
        let completion = base_completion(backend, prompt_id, l, &mut vote_rng)?;
        if completion.truncated {
            continue;
        }
        let key = equiv.key(&completion.answer, vocab);
        ballots
            .entry(key)
            .and_modify(|(count, _)| *count += 1)
            .or_insert((1, completion.answer));
    }
    let winner = ballots
        .into_iter()
        .max_by(|(ka, (ca, _)), (kb, (cb, _))| ca.cmp(cb).then_with(|| kb.cmp(ka)))
        .map(|(_, (_, answer))| answer);
    winner.ok_or(VoteError::AllTruncated { k })
}

/// One exact draw from the joint power-sharpened distribution over
/// (trace, answer) pairs, computed by full enumeration.
pub fn joint_sharpened_sample(
    model: &TabularModel,
    prompt_id: &str,
    alpha: f64,
    rng: RngState,
) -> Result<(TokenSeq, TokenSeq), OracleError> {
    let dist = oracle::exact_joint_sharpened(model, prompt_id, alpha)?;
    let weights: Vec<f64> = dist.log_entries().map(|(_, lm)| lm).collect();
    let mut draw_rng = rng.into_rng();
    let idx = numeric::sample_categorical(&weights, &mut draw_rng)?;
    let (trace, answer) = dist
        .entries()
        .nth(idx)
        .map(|(pair, _)| pair.clone())
        .expect("sampled index is in support");
    Ok((trace, answer))
}
