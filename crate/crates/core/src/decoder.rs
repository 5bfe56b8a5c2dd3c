//! The prefix-weighted product-of-experts token decoder.
//!
//! S groups of K traces act as experts. At step t the next-token rule mixes,
//! over groups, the product of each group's K conditionals, weighted by the
//! log-likelihood ell_s the group assigned to the answer prefix decoded so far:
//!
//! ```text
//! q_t(v) proportional to sum_s exp( ell_s + sum_i log pi(v | x, z_i^(s), a_<t) )
//! ```
//!
//! After a token is emitted every ell_s grows by its group's log-probability
//! of that token and the vector is shifted by its maximum, which leaves q_t
//! unchanged. Groups that assign the prefix zero mass drop out and are never
//! queried again. If fewer than the minimum usable traces survive sampling,
//! or the length budget is non-positive, the decoder falls back to one plain
//! base completion on a dedicated stream.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::backend::{BackendError, ModelBackend, base_completion, sample_trace};
use crate::model::{Context, LogProbVector};
use crate::numeric::{self, NumericError};
use crate::oracle::{OracleError, TraceGroup};
use crate::rng::{ANSWER_STREAM_OFFSET, FALLBACK_STREAM_OFFSET, RngState};
use crate::seq::{ParsedCompletion, TokenId, TokenSeq, Vocab};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    /// Sharpening strength: traces per group.
    pub k: usize,
    /// Trace groups mixed by prefix weight.
    pub s: usize,
    /// Maximum total sequence length, traces and answer alike.
    pub l: usize,
    /// Below this many usable traces the decoder falls back.
    pub min_usable_traces: usize,
    /// Stand-in log-probability for tokens a truncated backend did not
    /// report. Irrelevant for exhaustive backends.
    pub support_floor_logprob: f64,
}

pub const DEFAULT_SUPPORT_FLOOR: f64 = -30.0;

impl DecoderConfig {
    pub fn new(k: usize, s: usize, l: usize) -> Self {
        DecoderConfig {
            k,
            s,
            l,
            min_usable_traces: 2,
            support_floor_logprob: DEFAULT_SUPPORT_FLOOR,
        }
    }

    pub fn traces_requested(&self) -> usize {
        self.k * self.s
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig::new(4, 8, 32)
    }
}

/// Why a decode abandoned the product-of-experts path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FallbackReason {
    /// Fewer usable (untruncated) traces than the configured minimum.
    TooFewUsableTraces { usable: usize },
    /// The answer budget came out below one token.
    NonPositiveBudget { budget: i64 },
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Group(#[from] OracleError),
    #[error("decode dead end at step {step}: every token has zero mass under every group")]
    DeadEnd { step: usize },
}

/// S groups of K traces plus the sample indices each slot came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceGroupSet {
    pub groups: Vec<TraceGroup>,
    /// provenance[s][i] = index into the original sample of traces.
    pub provenance: Vec<Vec<usize>>,
}

impl TraceGroupSet {
    pub fn s(&self) -> usize {
        self.groups.len()
    }

    pub fn k(&self) -> usize {
        self.groups.first().map_or(0, TraceGroup::k)
    }

    /// A single pre-built group, for running the decoder loop on fixed traces.
    pub fn single(group: TraceGroup) -> Self {
        let k = group.k();
        TraceGroupSet { groups: vec![group], provenance: vec![(0..k).collect()] }
    }
}

/// Assigns usable traces to S groups of K in sample order. A shortfall
/// (at least `min_usable` but fewer than K*S usable) is filled by round-robin
/// reuse, so K and S stay as configured; below `min_usable` the caller gets
/// the fallback signal instead.
pub fn group_traces(
    traces: &[ParsedCompletion],
    k: usize,
    s: usize,
    min_usable: usize,
    vocab: &Vocab,
) -> Result<TraceGroupSet, FallbackReason> {
    let usable: Vec<(usize, &ParsedCompletion)> =
        traces.iter().enumerate().filter(|(_, t)| t.is_usable()).collect();
    if usable.len() < min_usable {
        return Err(FallbackReason::TooFewUsableTraces { usable: usable.len() });
    }
    let mut groups = Vec::with_capacity(s);
    let mut provenance = Vec::with_capacity(s);
    for g in 0..s {
        let mut members = Vec::with_capacity(k);
        let mut indices = Vec::with_capacity(k);
        for slot in 0..k {
            let (idx, t) = usable[(g * k + slot) % usable.len()];
            members.push((*t).clone());
            indices.push(idx);
        }
        groups.push(
            TraceGroup::new(members, vocab).expect("usable traces always form a valid group"),
        );
        provenance.push(indices);
    }
    Ok(TraceGroupSet { groups, provenance })
}

/// Answer-token budget: floor(L − mean sampled trace length), over all M
/// sampled traces, truncated ones included. Below one token the decode is
/// not attempted.
pub fn compute_budget(l: usize, traces: &[ParsedCompletion]) -> Result<usize, FallbackReason> {
    assert!(!traces.is_empty(), "budget needs at least one trace");
    let m = traces.len() as i64;
    let total: i64 = traces.iter().map(|t| t.full().len() as i64).sum();
    let budget = (l as i64 * m - total).div_euclid(m);
    if budget < 1 {
        Err(FallbackReason::NonPositiveBudget { budget })
    } else {
        Ok(budget as usize)
    }
}

/// The per-group log prefix weights ell_s, shifted so max_s ell_s = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixWeights {
    ell: Vec<f64>,
    step: usize,
}

impl PrefixWeights {
    /// All weights log 1 at the empty prefix.
    pub fn new(s: usize) -> Self {
        assert!(s >= 1);
        PrefixWeights { ell: vec![0.0; s], step: 0 }
    }

    pub fn ell(&self) -> &[f64] {
        &self.ell
    }

    /// Tokens emitted so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Normalized group weights w_s.
    pub fn normalized(&self) -> Result<Vec<f64>, NumericError> {
        numeric::normalize_log(&self.ell)
    }

    /// Folds in each group's log-probability of the emitted token, then
    /// shifts all weights by the new maximum. The shift cannot change any
    /// future q_t, which depends on the weights only through their ratios.
    pub fn update(&mut self, per_group_token_logprob: &[f64]) {
        assert_eq!(per_group_token_logprob.len(), self.ell.len());
        for (e, d) in self.ell.iter_mut().zip(per_group_token_logprob) {
            *e += d;
        }
        let max = self.ell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(max > f64::NEG_INFINITY, "emitted token had zero mass under every group");
        for e in &mut self.ell {
            *e -= max;
        }
        self.step += 1;
    }
}

/// One decode step's worth of scores.
pub(crate) struct StepScores {
    /// Normalized log-distribution over the vocabulary.
    pub q: Vec<f64>,
    /// Per group: sum over the group's experts of the token log-probability
    /// (floor-substituted where a truncated backend omitted the token);
    /// `−∞` rows for groups already at zero weight.
    pub group_token_logprob: Vec<Vec<f64>>,
    /// Per live expert, in group-major order: the dense token row after
    /// candidate masking and floor substitution. The importance sampler's
    /// normalizer correction is computed from exactly these rows.
    pub expert_token_logprob: Vec<Vec<f64>>,
    /// Backend contexts evaluated for this step.
    pub evals: u64,
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Evaluates all live groups' experts at the current prefix (one batched
/// backend call) and forms the mixture scores.
pub(crate) fn step_scores(
    backend: &dyn ModelBackend,
    prompt_id: &str,
    groups: &TraceGroupSet,
    weights: &PrefixWeights,
    answer_prefix: &TokenSeq,
    floor: f64,
) -> Result<StepScores, DecodeError> {
    let vsize = backend.vocab().size();
    let live: Vec<usize> =
        (0..groups.s()).filter(|&s| weights.ell()[s] > f64::NEG_INFINITY).collect();

    let mut contexts = Vec::with_capacity(live.len() * groups.k());
    for &s in &live {
        for t in groups.groups[s].traces() {
            contexts.push(Context::new(prompt_id, t.trace.concat(answer_prefix)));
        }
    }
    let vectors = backend.batch_next_token_logprobs(&contexts)?;
    let evals = contexts.len() as u64;

    // Candidate set: union of reported positive-mass tokens across experts.
    let mut candidate = vec![false; vsize];
    for lp in &vectors {
        for (t, _) in lp.supported() {
            candidate[t.index()] = true;
        }
    }

    let mut group_token_logprob = vec![vec![f64::NEG_INFINITY; vsize]; groups.s()];
    let mut expert_token_logprob = Vec::with_capacity(vectors.len());
    let mut scores = vec![f64::NEG_INFINITY; vsize];
    for (pos, &s) in live.iter().enumerate() {
        let experts = &vectors[pos * groups.k()..(pos + 1) * groups.k()];
        let row = &mut group_token_logprob[s];
        let mut expert_rows = vec![vec![f64::NEG_INFINITY; vsize]; experts.len()];
        for v in 0..vsize {
            if !candidate[v] {
                continue;
            }
            let t = TokenId(v as u32);
            let mut sum = 0.0;
            for (e, er) in experts.iter().zip(&mut expert_rows) {
                let lp = e.known_or(t, floor);
                er[v] = lp;
                sum += lp;
            }
            row[v] = sum;
            if sum > f64::NEG_INFINITY {
                scores[v] = lse2(scores[v], weights.ell()[s] + sum);
            }
        }
        expert_token_logprob.extend(expert_rows);
    }

    let q = numeric::normalize_log(&scores)
        .map_err(|_| DecodeError::DeadEnd { step: weights.step() })?;
    Ok(StepScores { q, group_token_logprob, expert_token_logprob, evals })
}

/// The prefix-weighted product-of-experts next-token distribution at the
/// given answer prefix. `weights.step()` must equal the prefix length.
pub fn poe_step(
    backend: &dyn ModelBackend,
    prompt_id: &str,
    groups: &TraceGroupSet,
    weights: &PrefixWeights,
    answer_prefix: &TokenSeq,
    floor: f64,
) -> Result<LogProbVector, DecodeError> {
    assert_eq!(
        weights.step(),
        answer_prefix.len(),
        "prefix weights are out of step with the answer prefix"
    );
    let scores = step_scores(backend, prompt_id, groups, weights, answer_prefix, floor)?;
    Ok(LogProbVector::exhaustive(scores.q))
}

/// Per-step decoder diagnostics. `entropy` and `effective_groups` describe
/// the mixture that produced the step; `ell` is the weight vector after the
/// token was folded in (shifted, so its maximum is 0).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepDiag {
    pub token: TokenId,
    pub entropy: f64,
    pub effective_groups: f64,
    pub ell: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// All M sampled traces, truncated ones included.
    pub traces: Vec<ParsedCompletion>,
    pub answer: TokenSeq,
    pub fallback_used: bool,
    pub fallback_reason: Option<FallbackReason>,
    /// Budget ran out before eos.
    pub truncated: bool,
    pub steps: Vec<StepDiag>,
    /// Backend contexts evaluated by the answer loop (trace sampling and
    /// fallback completions not included): K·S per emitted token while all
    /// groups are live.
    pub loop_evals: u64,
}

pub(crate) struct LoopOutcome {
    pub answer: TokenSeq,
    pub steps: Vec<StepDiag>,
    pub truncated: bool,
    pub evals: u64,
}

/// The answer loop on fixed groups: score, sample, update weights, stop at
/// eos or after `budget` tokens.
pub(crate) fn decode_loop(
    backend: &dyn ModelBackend,
    prompt_id: &str,
    groups: &TraceGroupSet,
    budget: usize,
    floor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LoopOutcome, DecodeError> {
    let eos = backend.vocab().eos();
    let mut weights = PrefixWeights::new(groups.s());
    let mut answer = TokenSeq::new();
    let mut steps = Vec::new();
    let mut evals = 0u64;
    for _ in 0..budget {
        let scores = step_scores(backend, prompt_id, groups, &weights, &answer, floor)?;
        evals += scores.evals;
        let entropy = numeric::entropy_nats(&scores.q);
        let w = weights.normalized()?;
        let effective_groups = 1.0 / w.iter().map(|lw| lw.exp().powi(2)).sum::<f64>();
        let idx = numeric::sample_categorical(&scores.q, rng)?;
        let token = TokenId(idx as u32);
        let deltas: Vec<f64> =
            scores.group_token_logprob.iter().map(|row| row[idx]).collect();
        weights.update(&deltas);
        answer.push(token);
        steps.push(StepDiag { token, entropy, effective_groups, ell: weights.ell().to_vec() });
        if token == eos {
            break;
        }
    }
    let truncated = !answer.ends_with(eos);
    Ok(LoopOutcome { answer, steps, truncated, evals })
}

/// Runs the answer loop on caller-supplied groups, skipping trace sampling
/// and the budget rule. The oracle comparisons and the backend-equivalence
/// checks drive the decoder through this entry.
pub fn decode_with_groups(
    backend: &dyn ModelBackend,
    prompt_id: &str,
    groups: &TraceGroupSet,
    budget: usize,
    floor: f64,
    rng: RngState,
) -> Result<DecodeResult, DecodeError> {
    let mut answer_rng = rng.offset(ANSWER_STREAM_OFFSET).into_rng();
    let out = decode_loop(backend, prompt_id, groups, budget, floor, &mut answer_rng)?;
    let traces =
        groups.groups.iter().flat_map(|g| g.traces().iter().cloned()).collect();
    Ok(DecodeResult {
        traces,
        answer: out.answer,
        fallback_used: false,
        fallback_reason: None,
        truncated: out.truncated,
        steps: out.steps,
        loop_evals: out.evals,
    })
}

/// The full decoding algorithm: sample M = K·S traces capped at L tokens,
/// group them, compute the answer budget, then run the product-of-experts
/// loop; on too few usable traces or a non-positive budget, return one base
/// completion drawn on the fallback stream instead.
pub fn marginal_sharpen_decode(
    backend: &dyn ModelBackend,
    prompt_id: &str,
    cfg: &DecoderConfig,
    rng: RngState,
) -> Result<DecodeResult, DecodeError> {
    assert!(cfg.k >= 1 && cfg.s >= 1 && cfg.l >= 1, "decoder config fields must be positive");
    let m = cfg.traces_requested();
    let mut traces = Vec::with_capacity(m);
    for i in 0..m {
        let mut trace_rng = rng.offset(i as u64).into_rng();
        traces.push(sample_trace(backend, prompt_id, cfg.l, &mut trace_rng)?);
    }

    let fallback = |reason: FallbackReason, traces: Vec<ParsedCompletion>| {
        let mut fb_rng = rng.offset(FALLBACK_STREAM_OFFSET).into_rng();
        let completion = base_completion(backend, prompt_id, cfg.l, &mut fb_rng)?;
        Ok(DecodeResult {
            traces,
            answer: completion.answer,
            fallback_used: true,
            fallback_reason: Some(reason),
            truncated: completion.truncated,
            steps: Vec::new(),
            loop_evals: 0,
        })
    };

    let groups = match group_traces(&traces, cfg.k, cfg.s, cfg.min_usable_traces, backend.vocab())
    {
        Ok(g) => g,
        Err(reason) => return fallback(reason, traces),
    };
    let budget = match compute_budget(cfg.l, &traces) {
        Ok(b) => b,
        Err(reason) => return fallback(reason, traces),
    };

    let mut answer_rng = rng.offset(ANSWER_STREAM_OFFSET).into_rng();
    let out = decode_loop(backend, prompt_id, &groups, budget, cfg.support_floor_logprob, &mut answer_rng)?;
    Ok(DecodeResult {
        traces,
        answer: out.answer,
        fallback_used: false,
        fallback_reason: None,
        truncated: out.truncated,
        steps: out.steps,
        loop_evals: out.evals,
    })
}
