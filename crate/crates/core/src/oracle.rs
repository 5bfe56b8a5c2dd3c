//! Brute-force exact computation of every distribution the decoders target.
//!
//! Everything here enumerates tabular models directly and stays in log space.
//! The decoder-law routine recomputes prefix weights from scratch at every
//! node of the answer-prefix tree, so it shares no code path with the
//! incremental decoder it is used to check.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::model::TabularModel;
use crate::numeric::{self, NumericError};
use crate::seq::{ParsedCompletion, TokenId, TokenSeq, Vocab};

/// Sum-over-tuples guard for the integer-power expansion.
pub const DEFAULT_TUPLE_CAP: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("unknown prompt id {0:?}")]
    UnknownPrompt(String),
    #[error("sharpening strength must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("K-tuple enumeration needs {tuples} tuples, above the cap {cap}; use a smaller K")]
    TupleCap { tuples: usize, cap: usize },
    #[error("trace groups must share a single K")]
    MixedGroupSizes,
    #[error("no trace groups given")]
    EmptyGroups,
    #[error("every answer has zero mass under this trace group")]
    ZeroMassGroup,
    #[error("trace group is invalid: {0}")]
    BadGroup(String),
    #[error("model admits a completion with no trace delimiter: [{0}]")]
    DelimiterMissing(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// A normalized finite distribution over complete answers (each ends in eos).
/// Support is sorted and distinct; masses are log-space.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerDist {
    support: Vec<TokenSeq>,
    log_mass: Vec<f64>,
}

impl AnswerDist {
    /// Normalizes raw log-masses, dropping zero-mass answers.
    pub fn from_log_masses(masses: BTreeMap<TokenSeq, f64>) -> Result<Self, OracleError> {
        let kept: Vec<(TokenSeq, f64)> =
            masses.into_iter().filter(|&(_, m)| m > f64::NEG_INFINITY).collect();
        let raw: Vec<f64> = kept.iter().map(|&(_, m)| m).collect();
        let norm = numeric::normalize_log(&raw)?;
        Ok(AnswerDist {
            support: kept.into_iter().map(|(a, _)| a).collect(),
            log_mass: norm,
        })
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    /// `(answer, probability)` pairs in support order.
    pub fn entries(&self) -> impl Iterator<Item = (&TokenSeq, f64)> + '_ {
        self.support.iter().zip(self.log_mass.iter().map(|&m| m.exp()))
    }

    pub fn log_entries(&self) -> impl Iterator<Item = (&TokenSeq, f64)> + '_ {
        self.support.iter().zip(self.log_mass.iter().copied())
    }

    pub fn prob(&self, answer: &TokenSeq) -> f64 {
        match self.support.binary_search(answer) {
            Ok(i) => self.log_mass[i].exp(),
            Err(_) => 0.0,
        }
    }

    /// Highest-probability answer; ties go to the smaller sequence.
    pub fn argmax(&self) -> (&TokenSeq, f64) {
        let mut best = 0;
        for i in 1..self.support.len() {
            if self.log_mass[i] > self.log_mass[best] {
                best = i;
            }
        }
        (&self.support[best], self.log_mass[best].exp())
    }

    /// Total mass in linear space; 1 within tolerance by construction.
    pub fn total(&self) -> f64 {
        self.log_mass.iter().map(|&m| m.exp()).sum()
    }

    /// Serializable view: token names with linear probabilities.
    pub fn to_rows(&self, vocab: &Vocab) -> Vec<AnswerProbRow> {
        self.entries()
            .map(|(a, p)| AnswerProbRow {
                answer: a.iter().map(|t| vocab.name(t).to_string()).collect(),
                prob: p,
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AnswerProbRow {
    pub answer: Vec<String>,
    pub prob: f64,
}

/// A normalized distribution over (trace, answer) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDist {
    support: Vec<(TokenSeq, TokenSeq)>,
    log_mass: Vec<f64>,
}

impl JointDist {
    pub fn from_log_masses(
        masses: BTreeMap<(TokenSeq, TokenSeq), f64>,
    ) -> Result<Self, OracleError> {
        let kept: Vec<((TokenSeq, TokenSeq), f64)> =
            masses.into_iter().filter(|&(_, m)| m > f64::NEG_INFINITY).collect();
        let raw: Vec<f64> = kept.iter().map(|&(_, m)| m).collect();
        let norm = numeric::normalize_log(&raw)?;
        Ok(JointDist {
            support: kept.into_iter().map(|(p, _)| p).collect(),
            log_mass: norm,
        })
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(TokenSeq, TokenSeq), f64)> + '_ {
        self.support.iter().zip(self.log_mass.iter().map(|&m| m.exp()))
    }

    pub fn log_entries(&self) -> impl Iterator<Item = (&(TokenSeq, TokenSeq), f64)> + '_ {
        self.support.iter().zip(self.log_mass.iter().copied())
    }

    pub fn total(&self) -> f64 {
        self.log_mass.iter().map(|&m| m.exp()).sum()
    }

    /// Sums the trace out.
    pub fn answer_marginal(&self) -> Result<AnswerDist, OracleError> {
        let mut acc: BTreeMap<TokenSeq, Vec<f64>> = BTreeMap::new();
        for ((_, a), lm) in self.log_entries() {
            acc.entry(a.clone()).or_default().push(lm);
        }
        let mut masses = BTreeMap::new();
        for (a, parts) in acc {
            masses.insert(a, numeric::log_sum_exp(&parts)?);
        }
        AnswerDist::from_log_masses(masses)
    }
}

/// Exactly K untruncated traces acting as the experts of one group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceGroup {
    traces: Vec<ParsedCompletion>,
}

impl TraceGroup {
    pub fn new(traces: Vec<ParsedCompletion>, vocab: &Vocab) -> Result<Self, OracleError> {
        if traces.is_empty() {
            return Err(OracleError::BadGroup("empty group".into()));
        }
        for t in &traces {
            if t.truncated {
                return Err(OracleError::BadGroup("contains a truncated trace".into()));
            }
            if !t.trace.ends_with(vocab.think_end()) {
                return Err(OracleError::BadGroup("trace does not end with think_end".into()));
            }
        }
        Ok(TraceGroup { traces })
    }

    pub fn k(&self) -> usize {
        self.traces.len()
    }

    pub fn traces(&self) -> &[ParsedCompletion] {
        &self.traces
    }
}

fn require_prompt(model: &TabularModel, prompt_id: &str) -> Result<(), OracleError> {
    if model.has_prompt(prompt_id) {
        Ok(())
    } else {
        Err(OracleError::UnknownPrompt(prompt_id.to_string()))
    }
}

/// All traces with positive mass: sequences ending at the delimiter, with
/// their log-probability. Sorted for determinism.
pub fn enumerate_traces(
    model: &TabularModel,
    prompt_id: &str,
) -> Result<Vec<(TokenSeq, f64)>, OracleError> {
    require_prompt(model, prompt_id)?;
    let vocab = model.vocab();
    let mut out = BTreeMap::new();
    let mut stack: Vec<(TokenSeq, f64)> = vec![(TokenSeq::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let row = model
            .row(prompt_id, &prefix)
            .expect("positive-mass prefix has a row (loader invariant)");
        for (i, &step_lp) in row.iter().enumerate() {
            if step_lp == f64::NEG_INFINITY {
                continue;
            }
            let t = TokenId(i as u32);
            let mut child = prefix.clone();
            child.push(t);
            let mass = lp + step_lp;
            if t == vocab.think_end() {
                out.insert(child, mass);
            } else if t == vocab.eos() {
                return Err(OracleError::DelimiterMissing(vocab.render(&child)));
            } else {
                stack.push((child, mass));
            }
        }
    }
    Ok(out.into_iter().collect())
}

/// Conditional log-mass of every complete answer continuation after `stem`
/// (a trace, or a trace plus answer tokens). Sorted by answer.
fn enumerate_continuations(
    model: &TabularModel,
    prompt_id: &str,
    stem: &TokenSeq,
) -> Vec<(TokenSeq, f64)> {
    let vocab = model.vocab();
    let mut out = BTreeMap::new();
    let mut stack: Vec<(TokenSeq, f64)> = vec![(TokenSeq::new(), 0.0)];
    while let Some((suffix, lp)) = stack.pop() {
        let full = stem.concat(&suffix);
        let row = model
            .row(prompt_id, &full)
            .expect("positive-mass prefix has a row (loader invariant)");
        for (i, &step_lp) in row.iter().enumerate() {
            if step_lp == f64::NEG_INFINITY {
                continue;
            }
            let t = TokenId(i as u32);
            let mut child = suffix.clone();
            child.push(t);
            if t == vocab.eos() {
                out.insert(child, lp + step_lp);
            } else {
                stack.push((child, lp + step_lp));
            }
        }
    }
    out.into_iter().collect()
}

/// Answers reachable from a given trace, with conditional log-mass.
pub fn answers_given_trace(
    model: &TabularModel,
    prompt_id: &str,
    trace: &TokenSeq,
) -> Result<Vec<(TokenSeq, f64)>, OracleError> {
    require_prompt(model, prompt_id)?;
    Ok(enumerate_continuations(model, prompt_id, trace))
}

/// Log-probability the model assigns to the answer prefix `answer_prefix`
/// after `trace`: the product of the stepwise conditionals. Zero-mass steps
/// give `−∞` without touching unreachable table rows.
pub fn answer_prefix_logprob(
    model: &TabularModel,
    prompt_id: &str,
    trace: &TokenSeq,
    answer_prefix: &TokenSeq,
) -> f64 {
    let mut lp = 0.0;
    let mut ctx = trace.clone();
    for t in answer_prefix.iter() {
        let Some(row) = model.row(prompt_id, &ctx) else {
            return f64::NEG_INFINITY;
        };
        let step = row[t.index()];
        if step == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        lp += step;
        ctx.push(t);
    }
    lp
}

/// Every positive-probability complete sequence, parsed into (trace, answer).
pub fn enumerate_completions(
    model: &TabularModel,
    prompt_id: &str,
) -> Result<JointDist, OracleError> {
    let traces = enumerate_traces(model, prompt_id)?;
    let mut masses = BTreeMap::new();
    for (z, lz) in &traces {
        for (a, la) in enumerate_continuations(model, prompt_id, z) {
            masses.insert((z.clone(), a), lz + la);
        }
    }
    JointDist::from_log_masses(masses)
}

/// The answer marginal: trace summed out of the completion distribution.
pub fn exact_answer_marginal(
    model: &TabularModel,
    prompt_id: &str,
) -> Result<AnswerDist, OracleError> {
    enumerate_completions(model, prompt_id)?.answer_marginal()
}

/// The sharpened answer marginal: the marginal raised to `alpha` and
/// renormalized. `alpha` need not be an integer here.
pub fn exact_marginal_sharpened(
    model: &TabularModel,
    prompt_id: &str,
    alpha: f64,
) -> Result<AnswerDist, OracleError> {
    if !(alpha > 0.0) {
        return Err(OracleError::InvalidAlpha(alpha));
    }
    let marginal = exact_answer_marginal(model, prompt_id)?;
    let masses: BTreeMap<TokenSeq, f64> =
        marginal.log_entries().map(|(a, lm)| (a.clone(), alpha * lm)).collect();
    AnswerDist::from_log_masses(masses)
}

/// The powered joint over (trace, answer) pairs.
pub fn exact_joint_sharpened(
    model: &TabularModel,
    prompt_id: &str,
    alpha: f64,
) -> Result<JointDist, OracleError> {
    if !(alpha > 0.0) {
        return Err(OracleError::InvalidAlpha(alpha));
    }
    let joint = enumerate_completions(model, prompt_id)?;
    let masses: BTreeMap<(TokenSeq, TokenSeq), f64> =
        joint.log_entries().map(|(p, lm)| (p.clone(), alpha * lm)).collect();
    JointDist::from_log_masses(masses)
}

/// Per-trace answer conditionals over the union answer universe, the shared
/// ingredient of the group-based estimators.
struct TraceConditionals {
    answers: Vec<TokenSeq>,
    /// log π(answer | trace), −∞ where unreachable; keyed by trace sequence.
    by_trace: HashMap<TokenSeq, Vec<f64>>,
}

fn trace_conditionals<'a>(
    model: &TabularModel,
    prompt_id: &str,
    traces: impl Iterator<Item = &'a TokenSeq>,
) -> Result<TraceConditionals, OracleError> {
    require_prompt(model, prompt_id)?;
    let mut per_trace: HashMap<TokenSeq, Vec<(TokenSeq, f64)>> = HashMap::new();
    let mut universe: BTreeSet<TokenSeq> = BTreeSet::new();
    for z in traces {
        if per_trace.contains_key(z) {
            continue;
        }
        let answers = enumerate_continuations(model, prompt_id, z);
        universe.extend(answers.iter().map(|(a, _)| a.clone()));
        per_trace.insert(z.clone(), answers);
    }
    let answers: Vec<TokenSeq> = universe.into_iter().collect();
    let index: HashMap<&TokenSeq, usize> =
        answers.iter().enumerate().map(|(i, a)| (a, i)).collect();
    let mut by_trace = HashMap::new();
    for (z, listed) in per_trace {
        let mut row = vec![f64::NEG_INFINITY; answers.len()];
        for (a, lm) in listed {
            row[index[&a]] = lm;
        }
        by_trace.insert(z, row);
    }
    Ok(TraceConditionals { answers, by_trace })
}

/// The integer-power expansion of the sharpened marginal: the expectation of
/// the product of K answer conditionals under K independent trace copies,
/// computed by explicit summation over all K-tuples and then normalized.
pub fn integer_expansion_marginal(
    model: &TabularModel,
    prompt_id: &str,
    k: usize,
    tuple_cap: Option<usize>,
) -> Result<AnswerDist, OracleError> {
    if k == 0 {
        return Err(OracleError::InvalidAlpha(0.0));
    }
    let traces = enumerate_traces(model, prompt_id)?;
    let cap = tuple_cap.unwrap_or(DEFAULT_TUPLE_CAP);
    let tuples = traces.len().checked_pow(k as u32).filter(|&n| n <= cap);
    let Some(_) = tuples else {
        return Err(OracleError::TupleCap {
            tuples: traces.len().saturating_pow(k as u32),
            cap,
        });
    };

    let conds = trace_conditionals(model, prompt_id, traces.iter().map(|(z, _)| z))?;
    let rows: Vec<(&Vec<f64>, f64)> =
        traces.iter().map(|(z, lz)| (&conds.by_trace[z], *lz)).collect();

    let mut per_answer: Vec<Vec<f64>> = vec![Vec::new(); conds.answers.len()];
    let mut odometer = vec![0usize; k];
    loop {
        let tuple_lp: f64 = odometer.iter().map(|&i| rows[i].1).sum();
        for (ai, parts) in per_answer.iter_mut().enumerate() {
            let product: f64 = odometer.iter().map(|&i| rows[i].0[ai]).sum();
            if product > f64::NEG_INFINITY {
                parts.push(tuple_lp + product);
            }
        }
        let mut pos = 0;
        loop {
            if pos == k {
                break;
            }
            odometer[pos] += 1;
            if odometer[pos] < rows.len() {
                break;
            }
            odometer[pos] = 0;
            pos += 1;
        }
        if pos == k {
            break;
        }
    }

    let mut masses = BTreeMap::new();
    for (ai, parts) in per_answer.into_iter().enumerate() {
        if !parts.is_empty() {
            masses.insert(conds.answers[ai].clone(), numeric::log_sum_exp(&parts)?);
        }
    }
    AnswerDist::from_log_masses(masses)
}

fn group_rows<'a>(
    conds: &'a TraceConditionals,
    groups: &[TraceGroup],
) -> Result<Vec<Vec<&'a Vec<f64>>>, OracleError> {
    if groups.is_empty() {
        return Err(OracleError::EmptyGroups);
    }
    let k = groups[0].k();
    if groups.iter().any(|g| g.k() != k) {
        return Err(OracleError::MixedGroupSizes);
    }
    Ok(groups
        .iter()
        .map(|g| g.traces().iter().map(|t| &conds.by_trace[&t.trace]).collect())
        .collect())
}

/// The sample-based estimator of the sharpened marginal: for each answer,
/// the sum over groups of the product of that group's K answer conditionals,
/// renormalized over the enumerated answer space.
pub fn empirical_rb_estimate(
    model: &TabularModel,
    prompt_id: &str,
    groups: &[TraceGroup],
) -> Result<AnswerDist, OracleError> {
    let conds = trace_conditionals(
        model,
        prompt_id,
        groups.iter().flat_map(|g| g.traces().iter().map(|t| &t.trace)),
    )?;
    let rows = group_rows(&conds, groups)?;
    let mut masses = BTreeMap::new();
    for (ai, answer) in conds.answers.iter().enumerate() {
        let parts: Vec<f64> = rows
            .iter()
            .map(|group| group.iter().map(|r| r[ai]).sum::<f64>())
            .filter(|&p| p > f64::NEG_INFINITY)
            .collect();
        if !parts.is_empty() {
            masses.insert(answer.clone(), numeric::log_sum_exp(&parts)?);
        }
    }
    if masses.is_empty() {
        return Err(OracleError::ZeroMassGroup);
    }
    AnswerDist::from_log_masses(masses)
}

/// The exact answer conditional for one fixed trace group: the normalized
/// product of the K per-trace conditionals.
pub fn exact_conditional_given_traces(
    model: &TabularModel,
    prompt_id: &str,
    group: &TraceGroup,
) -> Result<AnswerDist, OracleError> {
    empirical_rb_estimate(model, prompt_id, std::slice::from_ref(group))
}

/// The exact law of the token-level decoder's answer for fixed groups,
/// obtained by enumerating the induced prefix Markov chain: at each answer
/// prefix, the per-group prefix weights are recomputed from sequence
/// probabilities and the next-token rule is applied; path products give the
/// answer distribution the decoder actually samples from.
pub fn decoder_induced_distribution(
    model: &TabularModel,
    prompt_id: &str,
    groups: &[TraceGroup],
) -> Result<AnswerDist, OracleError> {
    require_prompt(model, prompt_id)?;
    if groups.is_empty() {
        return Err(OracleError::EmptyGroups);
    }
    let k = groups[0].k();
    if groups.iter().any(|g| g.k() != k) {
        return Err(OracleError::MixedGroupSizes);
    }
    let vocab = model.vocab().clone();
    let vsize = vocab.size();

    let mut masses: BTreeMap<TokenSeq, f64> = BTreeMap::new();
    // (answer prefix, accumulated log-mass under the induced chain)
    let mut stack: Vec<(TokenSeq, f64)> = vec![(TokenSeq::new(), 0.0)];
    while let Some((prefix, path_lp)) = stack.pop() {
        assert!(prefix.len() <= model.max_len(), "induced chain exceeded max_len");
        // Group scores: ell_s + sum_i log pi(v | z_i, prefix), fresh each node.
        let mut scores = vec![f64::NEG_INFINITY; vsize];
        for group in groups {
            let ell: f64 = group
                .traces()
                .iter()
                .map(|t| answer_prefix_logprob(model, prompt_id, &t.trace, &prefix))
                .sum();
            if ell == f64::NEG_INFINITY {
                continue;
            }
            let mut token_sums = vec![0.0f64; vsize];
            for t in group.traces() {
                let ctx = t.trace.concat(&prefix);
                let row = model
                    .row(prompt_id, &ctx)
                    .expect("positive-weight group prefix has a row (loader invariant)");
                for (v, acc) in token_sums.iter_mut().enumerate() {
                    *acc += row[v];
                }
            }
            for (v, acc) in token_sums.into_iter().enumerate() {
                if acc > f64::NEG_INFINITY {
                    scores[v] = numeric::log_sum_exp(&[scores[v], ell + acc])?;
                }
            }
        }
        let q = numeric::normalize_log(&scores).map_err(|_| OracleError::ZeroMassGroup)?;
        for (v, &lq) in q.iter().enumerate() {
            if lq == f64::NEG_INFINITY {
                continue;
            }
            let t = TokenId(v as u32);
            let mut child = prefix.clone();
            child.push(t);
            if t == vocab.eos() {
                masses.insert(child, path_lp + lq);
            } else {
                stack.push((child, path_lp + lq));
            }
        }
    }
    AnswerDist::from_log_masses(masses)
}

/// Half the L1 distance between two answer distributions; supports unioned,
/// missing answers counted as zero mass.
pub fn tv_distance(p: &AnswerDist, q: &AnswerDist) -> f64 {
    let mut answers: BTreeSet<&TokenSeq> = p.support.iter().collect();
    answers.extend(q.support.iter());
    answers.iter().map(|a| (p.prob(a) - q.prob(a)).abs()).sum::<f64>() / 2.0
}

/// Largest per-answer probability difference, the metric of the exact
/// identity checks.
pub fn max_abs_prob_diff(p: &AnswerDist, q: &AnswerDist) -> f64 {
    let mut answers: BTreeSet<&TokenSeq> = p.support.iter().collect();
    answers.extend(q.support.iter());
    answers
        .iter()
        .map(|a| (p.prob(a) - q.prob(a)).abs())
        .fold(0.0, f64::max)
}
