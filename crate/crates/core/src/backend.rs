//! The abstract next-token log-probability provider.
//!
//! Both the in-process tabular model and the remote client implement
//! [`ModelBackend`], so the decoders run unchanged against either. Backends
//! count how many contexts they evaluate; the decoders report those counts so
//! the K·S-evaluations-per-token cost model is checkable.

use std::sync::Arc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{Context, LogProbVector, TabularModel};
use crate::numeric::{self, NumericError};
use crate::seq::{ParsedCompletion, TokenSeq, Vocab, parse_completion};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("unknown prompt id {0:?}")]
    UnknownPrompt(String),
    #[error("prefix [{prefix}] is unreachable under prompt {prompt_id:?} (zero-probability path)")]
    UnreachablePrefix { prompt_id: String, prefix: String },
    #[error("prefix length {len} exceeds the model's maximum sequence length {max_len}")]
    LengthOverflow { len: usize, max_len: usize },
    #[error("transport failure after {attempts} attempts: {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("numeric failure in sampling: {0}")]
    Numeric(#[from] NumericError),
}

/// Next-token conditionals for a model, plus the vocabulary metadata the
/// decoders need to parse and stop.
pub trait ModelBackend: Send + Sync {
    fn vocab(&self) -> &Vocab;

    /// Upper bound on total sequence length (trace plus answer).
    fn max_len(&self) -> usize;

    fn next_token_logprobs(&self, ctx: &Context) -> Result<LogProbVector, BackendError>;

    /// Evaluates many contexts at once; the result order matches the request
    /// order. The default issues one call per context.
    fn batch_next_token_logprobs(&self, ctxs: &[Context]) -> Result<Vec<LogProbVector>, BackendError> {
        ctxs.iter().map(|c| self.next_token_logprobs(c)).collect()
    }

    /// Contexts evaluated since construction (cache hits excluded).
    fn eval_count(&self) -> u64;
}

/// Directly wraps a [`TabularModel`] table lookup.
pub struct InProcessBackend {
    model: Arc<TabularModel>,
    evals: AtomicU64,
}

impl InProcessBackend {
    pub fn new(model: TabularModel) -> Self {
        InProcessBackend { model: Arc::new(model), evals: AtomicU64::new(0) }
    }

    pub fn from_arc(model: Arc<TabularModel>) -> Self {
        InProcessBackend { model, evals: AtomicU64::new(0) }
    }

    pub fn model(&self) -> &TabularModel {
        &self.model
    }
}

impl ModelBackend for InProcessBackend {
    fn vocab(&self) -> &Vocab {
        self.model.vocab()
    }

    fn max_len(&self) -> usize {
        self.model.max_len()
    }

    fn next_token_logprobs(&self, ctx: &Context) -> Result<LogProbVector, BackendError> {
        self.evals.fetch_add(1, Ordering::Relaxed);
        self.model.next_token_logprobs(ctx)
    }

    fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }
}

/// Samples one token from an exhaustive conditional.
fn sample_token(lp: &LogProbVector, rng: &mut ChaCha8Rng) -> Result<crate::seq::TokenId, BackendError> {
    let idx = numeric::sample_categorical(lp.dense(), rng)?;
    Ok(crate::seq::TokenId(idx as u32))
}

/// Ancestral sampling stopped right after the answer-boundary delimiter. The
/// returned completion has an empty answer; `truncated` is set when the
/// delimiter did not appear within `cap` tokens (or an early eos ended the
/// sequence without one).
pub fn sample_trace(
    backend: &dyn ModelBackend,
    prompt_id: &str,
    cap: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParsedCompletion, BackendError> {
    let vocab = backend.vocab().clone();
    let cap = cap.min(backend.max_len());
    let mut seq = TokenSeq::new();
    while seq.len() < cap {
        let lp = backend.next_token_logprobs(&Context::new(prompt_id, seq.clone()))?;
        let t = sample_token(&lp, rng)?;
        seq.push(t);
        if t == vocab.think_end() || t == vocab.eos() {
            break;
        }
    }
    Ok(parse_completion(&seq, &vocab))
}

/// Full ancestral sample (trace then answer) up to eos or `l` tokens, parsed
/// at the delimiter. Marked truncated when the delimiter never appeared or
/// the answer did not reach eos within budget.
pub fn base_completion(
    backend: &dyn ModelBackend,
    prompt_id: &str,
    l: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ParsedCompletion, BackendError> {
    let vocab = backend.vocab().clone();
    let cap = l.min(backend.max_len());
    let mut seq = TokenSeq::new();
    while seq.len() < cap {
        let lp = backend.next_token_logprobs(&Context::new(prompt_id, seq.clone()))?;
        let t = sample_token(&lp, rng)?;
        seq.push(t);
        if t == vocab.eos() {
            break;
        }
    }
    let mut parsed = parse_completion(&seq, &vocab);
    parsed.truncated |= !parsed.answer.ends_with(vocab.eos());
    Ok(parsed)
}
