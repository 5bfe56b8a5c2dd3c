//! Tabular toy models: explicit next-token tables over every reachable prefix,
//! small enough for the oracle to enumerate exactly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::seq::{TokenId, TokenSeq, Vocab, VocabError};

/// A conditioning point: which prompt, and the full generated history so far
/// (trace tokens, then answer tokens).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Context {
    pub prompt_id: String,
    pub prefix: TokenSeq,
}

impl Context {
    pub fn new(prompt_id: impl Into<String>, prefix: TokenSeq) -> Self {
        Context { prompt_id: prompt_id.into(), prefix }
    }
}

/// Per-token log-probabilities (nats) with a support mask.
///
/// A masked-in entry of `−∞` is a known zero. A masked-out entry is unknown:
/// truncated remote backends return only their top tokens, and the decoder
/// substitutes a floor for the rest. In-process backends always produce
/// exhaustive vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbVector {
    entries: Vec<f64>,
    mask: Vec<bool>,
}

impl LogProbVector {
    /// A fully known vector; `entries` must be normalized in log space.
    pub fn exhaustive(entries: Vec<f64>) -> Self {
        let mask = vec![true; entries.len()];
        LogProbVector { entries, mask }
    }

    /// Builds from `(token id, logprob)` pairs. When `exhaustive`, absent
    /// tokens are known zeros; otherwise they are unknown.
    pub fn from_sparse(size: usize, pairs: &[(u32, f64)], exhaustive: bool) -> Self {
        let mut entries = vec![f64::NEG_INFINITY; size];
        let mut mask = vec![exhaustive; size];
        for &(id, lp) in pairs {
            let i = id as usize;
            entries[i] = lp;
            mask[i] = true;
        }
        LogProbVector { entries, mask }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_exhaustive(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// The log-probability of `t` if the backend reported it.
    pub fn known(&self, t: TokenId) -> Option<f64> {
        if self.mask[t.index()] { Some(self.entries[t.index()]) } else { None }
    }

    /// Known value, or `floor` for tokens the backend did not report.
    pub fn known_or(&self, t: TokenId, floor: f64) -> f64 {
        if self.mask[t.index()] { self.entries[t.index()] } else { floor }
    }

    /// Tokens with known positive mass.
    pub fn supported(&self) -> impl Iterator<Item = (TokenId, f64)> + '_ {
        self.entries.iter().enumerate().filter_map(|(i, &lp)| {
            (self.mask[i] && lp > f64::NEG_INFINITY).then_some((TokenId(i as u32), lp))
        })
    }

    /// Dense nats view; only meaningful for exhaustive vectors.
    pub fn dense(&self) -> &[f64] {
        &self.entries
    }

    /// `log Σ exp` over known entries, which must be 0 for a distribution.
    pub fn log_total(&self) -> f64 {
        let known: Vec<f64> = self
            .entries
            .iter()
            .zip(&self.mask)
            .filter_map(|(&e, &m)| m.then_some(e))
            .collect();
        crate::numeric::log_sum_exp(&known).unwrap_or(f64::NEG_INFINITY)
    }
}

/// On-disk toy model: decimal probability rows per prompt, one row for every
/// reachable non-terminal prefix. See the repository README for the format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyModelFile {
    pub vocab: Vec<String>,
    pub max_len: usize,
    pub prompts: BTreeMap<String, Vec<ToyModelRow>>,
    #[serde(default)]
    pub answer_keys: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyModelRow {
    pub prefix: Vec<String>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("reading model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing model file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("max_len must be at least 2")]
    MaxLenTooSmall,
    #[error("model file declares no prompts")]
    NoPrompts,
    #[error("prompt {prompt:?}: row [{prefix}] has {got} probabilities, vocabulary has {want}")]
    BadRowLength { prompt: String, prefix: String, got: usize, want: usize },
    #[error("prompt {prompt:?}: row [{prefix}] has a negative or non-finite probability")]
    BadProbability { prompt: String, prefix: String },
    #[error("prompt {prompt:?}: row [{prefix}] sums to {sum} (must be 1 within 1e-9)")]
    NotNormalized { prompt: String, prefix: String, sum: f64 },
    #[error("prompt {prompt:?}: duplicate row for prefix [{prefix}]")]
    DuplicateRow { prompt: String, prefix: String },
    #[error("prompt {prompt:?}: reachable prefix [{prefix}] has no row")]
    MissingRow { prompt: String, prefix: String },
    #[error("prompt {prompt:?}: row for unreachable prefix [{prefix}]")]
    UnreachableRow { prompt: String, prefix: String },
    #[error(
        "prompt {prompt:?}: prefix [{prefix}] is one token short of max_len but does not force eos"
    )]
    NoForcedTermination { prompt: String, prefix: String },
    #[error("prompt {prompt:?}: answer key {reason}")]
    BadAnswerKey { prompt: String, reason: String },
}

/// A loaded, validated tabular model. Immutable and freely shareable.
#[derive(Clone, Debug)]
pub struct TabularModel {
    vocab: Vocab,
    max_len: usize,
    tables: HashMap<String, HashMap<TokenSeq, Vec<f64>>>,
    answer_keys: HashMap<String, TokenSeq>,
}

impl TabularModel {
    pub fn from_path(path: &Path) -> Result<Self, LoadError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, LoadError> {
        let file: ToyModelFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }

    /// Validates and indexes a parsed file: every row normalized, every
    /// reachable prefix covered, no unreachable rows, and termination forced
    /// one token before `max_len` so the completion space is finite.
    pub fn from_file(file: ToyModelFile) -> Result<Self, LoadError> {
        let vocab = Vocab::new(file.vocab)?;
        if file.max_len < 2 {
            return Err(LoadError::MaxLenTooSmall);
        }
        if file.prompts.is_empty() {
            return Err(LoadError::NoPrompts);
        }
        let eos = vocab.eos();

        let mut tables = HashMap::new();
        for (prompt, rows) in &file.prompts {
            let mut table: HashMap<TokenSeq, Vec<f64>> = HashMap::new();
            for row in rows {
                let names: Vec<&str> = row.prefix.iter().map(String::as_str).collect();
                let prefix = TokenSeq::from_names(&names, &vocab)?;
                let pretty = || row.prefix.join(" ");
                if row.probs.len() != vocab.size() {
                    return Err(LoadError::BadRowLength {
                        prompt: prompt.clone(),
                        prefix: pretty(),
                        got: row.probs.len(),
                        want: vocab.size(),
                    });
                }
                if row.probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
                    return Err(LoadError::BadProbability { prompt: prompt.clone(), prefix: pretty() });
                }
                let sum: f64 = row.probs.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(LoadError::NotNormalized {
                        prompt: prompt.clone(),
                        prefix: pretty(),
                        sum,
                    });
                }
                let mut probs = row.probs.clone();
                if prefix.len() == file.max_len - 1 {
                    if probs[eos.index()] < 1.0 - 1e-9 {
                        return Err(LoadError::NoForcedTermination {
                            prompt: prompt.clone(),
                            prefix: pretty(),
                        });
                    }
                    // Canonicalize so the enumerable space is exactly finite.
                    probs.iter_mut().for_each(|p| *p = 0.0);
                    probs[eos.index()] = 1.0;
                }
                let nats: Vec<f64> =
                    probs.iter().map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY }).collect();
                if table.insert(prefix, nats).is_some() {
                    return Err(LoadError::DuplicateRow { prompt: prompt.clone(), prefix: pretty() });
                }
            }

            // Reachability: walk positive-probability paths from the empty
            // prefix; every non-terminal point needs a row, and no row may
            // sit off those paths.
            let mut visited: HashSet<TokenSeq> = HashSet::new();
            let mut stack = vec![TokenSeq::new()];
            while let Some(prefix) = stack.pop() {
                let pretty = |p: &TokenSeq| {
                    p.iter().map(|t| vocab.name(t).to_string()).collect::<Vec<_>>().join(" ")
                };
                let Some(nats) = table.get(&prefix) else {
                    return Err(LoadError::MissingRow {
                        prompt: prompt.clone(),
                        prefix: pretty(&prefix),
                    });
                };
                visited.insert(prefix.clone());
                for (i, &lp) in nats.iter().enumerate() {
                    if lp == f64::NEG_INFINITY || i == eos.index() {
                        continue;
                    }
                    let mut child = prefix.clone();
                    child.push(TokenId(i as u32));
                    stack.push(child);
                }
            }
            if visited.len() != table.len() {
                let mut unreachable: Vec<&TokenSeq> =
                    table.keys().filter(|p| !visited.contains(p)).collect();
                unreachable.sort();
                let p = unreachable[0];
                return Err(LoadError::UnreachableRow {
                    prompt: prompt.clone(),
                    prefix: p.iter().map(|t| vocab.name(t).to_string()).collect::<Vec<_>>().join(" "),
                });
            }
            tables.insert(prompt.clone(), table);
        }

        let mut answer_keys = HashMap::new();
        for (prompt, names) in &file.answer_keys {
            if !file.prompts.contains_key(prompt) {
                return Err(LoadError::BadAnswerKey {
                    prompt: prompt.clone(),
                    reason: "names a prompt the file does not define".into(),
                });
            }
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let key = TokenSeq::from_names(&refs, &vocab)?;
            if !key.ends_with(eos) {
                return Err(LoadError::BadAnswerKey {
                    prompt: prompt.clone(),
                    reason: "must end with eos".into(),
                });
            }
            answer_keys.insert(prompt.clone(), key);
        }

        Ok(TabularModel { vocab, max_len: file.max_len, tables, answer_keys })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn prompt_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.tables.keys().map(String::as_str).collect();
        ids.sort_unstable();
        ids
    }

    pub fn answer_key(&self, prompt_id: &str) -> Option<&TokenSeq> {
        self.answer_keys.get(prompt_id)
    }

    pub fn has_prompt(&self, prompt_id: &str) -> bool {
        self.tables.contains_key(prompt_id)
    }

    /// The raw nats row for a prefix, if that prefix is reachable.
    pub fn row(&self, prompt_id: &str, prefix: &TokenSeq) -> Option<&[f64]> {
        self.tables.get(prompt_id).and_then(|t| t.get(prefix)).map(Vec::as_slice)
    }

    /// The model conditional at `ctx`. Pure: equal contexts give bit-identical
    /// vectors.
    pub fn next_token_logprobs(&self, ctx: &Context) -> Result<LogProbVector, BackendError> {
        let table = self
            .tables
            .get(&ctx.prompt_id)
            .ok_or_else(|| BackendError::UnknownPrompt(ctx.prompt_id.clone()))?;
        if ctx.prefix.len() >= self.max_len {
            return Err(BackendError::LengthOverflow {
                len: ctx.prefix.len(),
                max_len: self.max_len,
            });
        }
        let nats = table.get(&ctx.prefix).ok_or_else(|| BackendError::UnreachablePrefix {
            prompt_id: ctx.prompt_id.clone(),
            prefix: self.vocab.render(&ctx.prefix),
        })?;
        Ok(LogProbVector::exhaustive(nats.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_file() -> ToyModelFile {
        serde_json::from_value(serde_json::json!({
            "vocab": ["x", "think_end", "eos"],
            "max_len": 3,
            "prompts": {
                "q0": [
                    {"prefix": [], "probs": [0.0, 1.0, 0.0]},
                    {"prefix": ["think_end"], "probs": [0.25, 0.0, 0.75]},
                    {"prefix": ["think_end", "x"], "probs": [0.0, 0.0, 1.0]}
                ]
            }
        }))
        .unwrap()
    }

    #[test]
    fn loads_and_converts_to_nats() {
        let m = TabularModel::from_file(minimal_file()).unwrap();
        let v = m.vocab().clone();
        let ctx = Context::new("q0", TokenSeq::from_names(&["think_end"], &v).unwrap());
        let lp = m.next_token_logprobs(&ctx).unwrap();
        assert_eq!(lp.known(v.id_of("x").unwrap()), Some(0.25_f64.ln()));
        assert_eq!(lp.known(v.eos()), Some(0.75_f64.ln()));
        assert_eq!(lp.known(v.think_end()), Some(f64::NEG_INFINITY));
        assert!(lp.is_exhaustive());
        assert!(lp.log_total().abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_row_naming_the_prefix() {
        let mut f = minimal_file();
        f.prompts.get_mut("q0").unwrap()[1].probs = vec![0.25, 0.0, 0.65];
        match TabularModel::from_file(f) {
            Err(LoadError::NotNormalized { prefix, sum, .. }) => {
                assert_eq!(prefix, "think_end");
                assert!((sum - 0.9).abs() < 1e-12);
            }
            other => panic!("expected normalization error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_missing_reachable_row() {
        let mut f = minimal_file();
        f.prompts.get_mut("q0").unwrap().remove(2);
        match TabularModel::from_file(f) {
            Err(LoadError::MissingRow { prefix, .. }) => assert_eq!(prefix, "think_end x"),
            other => panic!("expected missing-row error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_row_not_forcing_eos_at_the_length_limit() {
        let mut f = minimal_file();
        f.prompts.get_mut("q0").unwrap()[2].probs = vec![0.5, 0.0, 0.5];
        assert!(matches!(
            TabularModel::from_file(f),
            Err(LoadError::NoForcedTermination { .. })
        ));
    }

    #[test]
    fn rejects_unreachable_row() {
        let mut f = minimal_file();
        f.prompts
            .get_mut("q0")
            .unwrap()
            .push(ToyModelRow { prefix: vec!["x".into()], probs: vec![0.0, 0.0, 1.0] });
        assert!(matches!(TabularModel::from_file(f), Err(LoadError::UnreachableRow { .. })));
    }

    #[test]
    fn unreachable_prefix_and_overflow_are_distinct_errors() {
        let m = TabularModel::from_file(minimal_file()).unwrap();
        let v = m.vocab().clone();
        let dead = Context::new("q0", TokenSeq::from_names(&["x"], &v).unwrap());
        assert!(matches!(
            m.next_token_logprobs(&dead),
            Err(BackendError::UnreachablePrefix { .. })
        ));
        let long = Context::new(
            "q0",
            TokenSeq::from_names(&["think_end", "x", "eos"], &v).unwrap(),
        );
        assert!(matches!(m.next_token_logprobs(&long), Err(BackendError::LengthOverflow { .. })));
        let unknown = Context::new("nope", TokenSeq::new());
        assert!(matches!(m.next_token_logprobs(&unknown), Err(BackendError::UnknownPrompt(_))));
    }

    #[test]
    fn repeated_lookups_are_bit_identical() {
        let m = TabularModel::from_file(minimal_file()).unwrap();
        let ctx = Context::new("q0", TokenSeq::new());
        let a = m.next_token_logprobs(&ctx).unwrap();
        let b = m.next_token_logprobs(&ctx).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sparse_vectors_distinguish_unknown_from_zero() {
        let lp = LogProbVector::from_sparse(4, &[(1, -0.5)], false);
        assert_eq!(lp.known(TokenId(1)), Some(-0.5));
        assert_eq!(lp.known(TokenId(0)), None);
        assert_eq!(lp.known_or(TokenId(0), -30.0), -30.0);
        assert!(!lp.is_exhaustive());
        let full = LogProbVector::from_sparse(4, &[(1, 0.0)], true);
        assert_eq!(full.known(TokenId(0)), Some(f64::NEG_INFINITY));
        assert!(full.is_exhaustive());
    }
}
