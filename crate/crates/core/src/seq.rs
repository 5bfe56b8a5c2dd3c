//! Token sequences and the trace/answer split.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into a [`Vocab`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary must name the reserved token {0:?} exactly once")]
    MissingReserved(&'static str),
    #[error("duplicate token name {0:?}")]
    DuplicateName(String),
    #[error("token name {0:?} is not in the vocabulary")]
    UnknownName(String),
}

/// Token name table with the two distinguished tokens every model must carry:
/// `eos` terminates a completion, `think_end` closes the reasoning trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    eos: TokenId,
    think_end: TokenId,
}

impl Vocab {
    /// Builds a vocabulary from token names. The reserved names `"eos"` and
    /// `"think_end"` must each appear exactly once; all names must be distinct.
    pub fn new(names: Vec<String>) -> Result<Self, VocabError> {
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(VocabError::DuplicateName(n.clone()));
            }
        }
        let find = |name: &'static str| {
            names
                .iter()
                .position(|n| n == name)
                .map(|i| TokenId(i as u32))
                .ok_or(VocabError::MissingReserved(name))
        };
        let eos = find("eos")?;
        let think_end = find("think_end")?;
        Ok(Vocab { names, eos, think_end })
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn think_end(&self) -> TokenId {
        self.think_end
    }

    pub fn name(&self, id: TokenId) -> &str {
        &self.names[id.index()]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Result<TokenId, VocabError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| TokenId(i as u32))
            .ok_or_else(|| VocabError::UnknownName(name.to_string()))
    }

    /// Renders a sequence as space-joined token names.
    pub fn render(&self, seq: &TokenSeq) -> String {
        let parts: Vec<&str> = seq.iter().map(|t| self.name(t)).collect();
        parts.join(" ")
    }
}

/// An ordered run of tokens. If `eos` appears it is the final token; sequence
/// builders uphold this by never extending past it.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new() -> Self {
        TokenSeq(Vec::new())
    }

    pub fn from_ids(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }

    pub fn from_names(names: &[&str], vocab: &Vocab) -> Result<Self, VocabError> {
        let ids = names.iter().map(|n| vocab.id_of(n)).collect::<Result<_, _>>()?;
        Ok(TokenSeq(ids))
    }

    pub fn push(&mut self, t: TokenId) {
        self.0.push(t);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn last(&self) -> Option<TokenId> {
        self.0.last().copied()
    }

    pub fn ends_with(&self, t: TokenId) -> bool {
        self.last() == Some(t)
    }

    /// Concatenation, for rebuilding a full completion from its parsed halves.
    pub fn concat(&self, other: &TokenSeq) -> TokenSeq {
        let mut ids = self.0.clone();
        ids.extend_from_slice(&other.0);
        TokenSeq(ids)
    }

    pub fn to_u32s(&self) -> Vec<u32> {
        self.0.iter().map(|t| t.0).collect()
    }
}

impl FromIterator<TokenId> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        TokenSeq(iter.into_iter().collect())
    }
}

/// A completion split at the answer boundary: `trace` runs up to and including
/// the first `think_end`, `answer` is everything after it.
///
/// `truncated` means the completion is not usable for its purpose: the
/// delimiter never appeared, or (for full completions produced by sampling)
/// the answer segment did not reach `eos` within budget.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCompletion {
    pub trace: TokenSeq,
    pub answer: TokenSeq,
    pub truncated: bool,
}

impl ParsedCompletion {
    pub fn is_usable(&self) -> bool {
        !self.truncated
    }

    /// The original sequence the parse came from.
    pub fn full(&self) -> TokenSeq {
        self.trace.concat(&self.answer)
    }
}

/// Splits a sequence at the first `think_end`, which stays with the trace.
/// A sequence with no delimiter parses to an empty answer with `truncated`
/// set; downstream code decides whether that matters.
pub fn parse_completion(seq: &TokenSeq, vocab: &Vocab) -> ParsedCompletion {
    match seq.iter().position(|t| t == vocab.think_end()) {
        Some(pos) => {
            let ids = seq.as_slice();
            ParsedCompletion {
                trace: TokenSeq(ids[..=pos].to_vec()),
                answer: TokenSeq(ids[pos + 1..].to_vec()),
                truncated: false,
            }
        }
        None => ParsedCompletion {
            trace: seq.clone(),
            answer: TokenSeq::new(),
            truncated: true,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(
            ["t1", "t2", "a1", "think_end", "eos"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn parse_splits_at_first_delimiter() {
        let v = vocab();
        let seq = TokenSeq::from_names(&["t1", "think_end", "a1", "eos"], &v).unwrap();
        let p = parse_completion(&seq, &v);
        assert_eq!(p.trace, TokenSeq::from_names(&["t1", "think_end"], &v).unwrap());
        assert_eq!(p.answer, TokenSeq::from_names(&["a1", "eos"], &v).unwrap());
        assert!(!p.truncated);
    }

    #[test]
    fn parse_without_delimiter_is_truncated() {
        let v = vocab();
        let seq = TokenSeq::from_names(&["t1", "t2"], &v).unwrap();
        let p = parse_completion(&seq, &v);
        assert_eq!(p.trace, seq);
        assert!(p.answer.is_empty());
        assert!(p.truncated);
    }

    #[test]
    fn parse_allows_empty_reasoning() {
        let v = vocab();
        let seq = TokenSeq::from_names(&["think_end", "eos"], &v).unwrap();
        let p = parse_completion(&seq, &v);
        assert_eq!(p.trace, TokenSeq::from_names(&["think_end"], &v).unwrap());
        assert_eq!(p.answer, TokenSeq::from_names(&["eos"], &v).unwrap());
        assert!(!p.truncated);
    }

    #[test]
    fn vocab_rejects_duplicates_and_requires_reserved_names() {
        let dup = Vocab::new(vec!["a".into(), "a".into(), "eos".into(), "think_end".into()]);
        assert!(matches!(dup, Err(VocabError::DuplicateName(_))));
        let missing = Vocab::new(vec!["a".into(), "eos".into()]);
        assert!(matches!(missing, Err(VocabError::MissingReserved("think_end"))));
    }
}
