//! Blocking HTTP client that implements [`ModelBackend`].
//!
//! One POST carries every uncached prefix of a batch, so a decode step costs
//! a single round trip. Responses are cached under (prompt id, prefix); the
//! cache is shared across threads and only ever stores values the server
//! returned, so concurrent fills are idempotent.

use std::collections::HashMap;
use std::sync::Mutex;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use sharpen_core::backend::{BackendError, ModelBackend};
use sharpen_core::model::{Context, LogProbVector};
use sharpen_core::seq::{TokenSeq, Vocab};

use crate::protocol::{ErrorBody, Meta, PrefixLogProbs, TopLRequest, TopLResponse, from_wire};

#[derive(Clone, Debug)]
pub struct RemoteConfig {
    /// Entries requested per prefix; 0 asks for the full vocabulary.
    pub top_l: usize,
    /// Total attempts per request; clamped to at least one.
    pub retries: u32,
    /// Delay before the first retry; doubles after each failure.
    pub backoff: Duration,
    pub cache_enabled: bool,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            top_l: 0,
            retries: 3,
            backoff: Duration::from_millis(100),
            cache_enabled: true,
        }
    }
}

enum Attempt<T> {
    Done(T),
    Fatal(BackendError),
    Retry(String),
}

fn with_retry<T>(cfg: &RemoteConfig, mut attempt: impl FnMut() -> Attempt<T>) -> Result<T, BackendError> {
    let attempts = cfg.retries.max(1);
    let mut delay = cfg.backoff;
    let mut last = String::from("no attempt made");
    for round in 1..=attempts {
        match attempt() {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Retry(detail) => last = detail,
        }
        if round < attempts {
            std::thread::sleep(delay);
            delay = delay.saturating_mul(2);
        }
    }
    Err(BackendError::Transport { attempts, detail: last })
}

/// Classifies one HTTP exchange: 5xx and send failures retry, 4xx carry a
/// server verdict and fail fast, 2xx parses as `T`.
fn classify<T: serde::de::DeserializeOwned>(
    sent: Result<reqwest::blocking::Response, reqwest::Error>,
    prompt_id: Option<&str>,
) -> Attempt<T> {
    let resp = match sent {
        Ok(r) => r,
        Err(e) => return Attempt::Retry(e.to_string()),
    };
    let status = resp.status();
    if status.is_success() {
        return match resp.json::<T>() {
            Ok(body) => Attempt::Done(body),
            Err(e) => Attempt::Fatal(BackendError::Protocol(format!("unparseable response body: {e}"))),
        };
    }
    if status.is_server_error() {
        return Attempt::Retry(format!("server error {status}"));
    }
    match resp.json::<ErrorBody>() {
        Ok(err) if err.code == "unknown_prompt" => {
            Attempt::Fatal(BackendError::UnknownPrompt(prompt_id.unwrap_or("?").to_string()))
        }
        Ok(err) => Attempt::Fatal(BackendError::Protocol(format!(
            "server rejected request ({}): {}",
            err.code, err.message
        ))),
        Err(e) => Attempt::Fatal(BackendError::Protocol(format!(
            "undecodable error body for status {status}: {e}"
        ))),
    }
}

#[derive(Debug)]
pub struct RemoteBackend {
    base: String,
    cfg: RemoteConfig,
    http: reqwest::blocking::Client,
    vocab: Vocab,
    max_len: usize,
    cache: Mutex<HashMap<(String, TokenSeq), LogProbVector>>,
    evals: AtomicU64,
    requests: AtomicU64,
}

impl RemoteBackend {
    /// Fetches the served metadata and builds a ready backend. The metadata
    /// fetch obeys the same retry policy as evaluation requests.
    pub fn connect(url: &str, cfg: RemoteConfig) -> Result<Self, BackendError> {
        let base = url.trim_end_matches('/').to_string();
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| BackendError::Transport { attempts: 0, detail: e.to_string() })?;
        let meta_url = format!("{base}/v1/meta");
        let meta: Meta = with_retry(&cfg, || classify(http.get(&meta_url).send(), None))?;
        let vocab = Vocab::new(meta.vocab)
            .map_err(|e| BackendError::Protocol(format!("served vocabulary is unusable: {e}")))?;
        Ok(RemoteBackend {
            base,
            cfg,
            http,
            vocab,
            max_len: meta.max_len,
            cache: Mutex::new(HashMap::new()),
            evals: AtomicU64::new(0),
            requests: AtomicU64::new(0),
        })
    }

    /// Batched POSTs issued so far, including ones that ultimately failed.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn post_logprobs(&self, prompt_id: &str, prefixes: Vec<Vec<u32>>) -> Result<TopLResponse, BackendError> {
        let req = TopLRequest {
            prompt_id: prompt_id.to_string(),
            prefixes,
            top_l: self.cfg.top_l,
        };
        let url = format!("{}/v1/logprobs", self.base);
        self.requests.fetch_add(1, Ordering::Relaxed);
        with_retry(&self.cfg, || classify(self.http.post(&url).json(&req).send(), Some(prompt_id)))
    }

    /// Checks the protocol invariants before trusting a result: known ids,
    /// no duplicates, finite values, descending order, and unit mass when
    /// the server claims exhaustiveness.
    fn vector_from(&self, result: &PrefixLogProbs) -> Result<LogProbVector, BackendError> {
        let size = self.vocab.size();
        let mut seen = vec![false; size];
        let mut prev = f64::INFINITY;
        for &(id, lp) in &result.entries {
            let i = id as usize;
            if i >= size {
                return Err(BackendError::Protocol(format!(
                    "entry id {id} outside vocabulary of size {size}"
                )));
            }
            if seen[i] {
                return Err(BackendError::Protocol(format!("duplicate entry id {id}")));
            }
            seen[i] = true;
            if !lp.is_finite() {
                return Err(BackendError::Protocol(format!("non-finite entry for id {id}: {lp}")));
            }
            if lp > prev {
                return Err(BackendError::Protocol("entries not sorted by descending value".into()));
            }
            prev = lp;
        }
        if result.exhaustive {
            let values: Vec<f64> = result.entries.iter().map(|e| e.1).collect();
            let total = sharpen_core::numeric::log_sum_exp(&values)
                .map_err(|e| BackendError::Protocol(format!("exhaustive result sums to nothing: {e}")))?;
            if total.abs() > 1e-6 {
                return Err(BackendError::Protocol(format!(
                    "exhaustive result has log-mass {total:.3e}, expected 0"
                )));
            }
        }
        Ok(from_wire(result, size))
    }
}

impl ModelBackend for RemoteBackend {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn next_token_logprobs(&self, ctx: &Context) -> Result<LogProbVector, BackendError> {
        let mut v = self.batch_next_token_logprobs(std::slice::from_ref(ctx))?;
        Ok(v.pop().expect("one result for one context"))
    }

    fn batch_next_token_logprobs(&self, ctxs: &[Context]) -> Result<Vec<LogProbVector>, BackendError> {
        let mut out: Vec<Option<LogProbVector>> = vec![None; ctxs.len()];
        let mut misses: Vec<usize> = Vec::new();
        {
            let cache = self.cache.lock().expect("cache lock");
            for (i, ctx) in ctxs.iter().enumerate() {
                if ctx.prefix.len() >= self.max_len {
                    return Err(BackendError::LengthOverflow {
                        len: ctx.prefix.len(),
                        max_len: self.max_len,
                    });
                }
                if self.cfg.cache_enabled {
                    if let Some(hit) = cache.get(&(ctx.prompt_id.clone(), ctx.prefix.clone())) {
                        out[i] = Some(hit.clone());
                        continue;
                    }
                }
                misses.push(i);
            }
        }

        // One POST per distinct prompt in the batch; decoders use a single
        // prompt, so the common case is one request.
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for &i in &misses {
            match groups.iter_mut().find(|(p, _)| *p == ctxs[i].prompt_id) {
                Some((_, idxs)) => idxs.push(i),
                None => groups.push((ctxs[i].prompt_id.clone(), vec![i])),
            }
        }
        for (prompt_id, idxs) in groups {
            let prefixes: Vec<Vec<u32>> = idxs.iter().map(|&i| ctxs[i].prefix.to_u32s()).collect();
            let resp = self.post_logprobs(&prompt_id, prefixes)?;
            if resp.results.len() != idxs.len() {
                return Err(BackendError::Protocol(format!(
                    "asked for {} prefixes, server answered {}",
                    idxs.len(),
                    resp.results.len()
                )));
            }
            self.evals.fetch_add(idxs.len() as u64, Ordering::Relaxed);
            let mut cache = self.cache.lock().expect("cache lock");
            for (result, &i) in resp.results.iter().zip(&idxs) {
                let lp = self.vector_from(result)?;
                if self.cfg.cache_enabled {
                    cache.insert((prompt_id.clone(), ctxs[i].prefix.clone()), lp.clone());
                }
                out[i] = Some(lp);
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every context resolved")).collect())
    }

    fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instant_cfg(retries: u32) -> RemoteConfig {
        RemoteConfig { retries, backoff: Duration::ZERO, ..RemoteConfig::default() }
    }

    #[test]
    fn defaults_match_the_documented_policy() {
        let cfg = RemoteConfig::default();
        assert_eq!(cfg.top_l, 0);
        assert_eq!(cfg.retries, 3);
        assert_eq!(cfg.backoff, Duration::from_millis(100));
        assert!(cfg.cache_enabled);
    }

    #[test]
    fn retry_exhaustion_reports_the_attempt_count_and_last_detail() {
        let mut calls = 0u32;
        let err = with_retry::<()>(&instant_cfg(3), || {
            calls += 1;
            Attempt::Retry(format!("boom {calls}"))
        })
        .unwrap_err();
        assert_eq!(calls, 3);
        match err {
            BackendError::Transport { attempts, detail } => {
                assert_eq!(attempts, 3);
                assert_eq!(detail, "boom 3");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn fatal_outcomes_do_not_retry() {
        let mut calls = 0u32;
        let err = with_retry::<()>(&instant_cfg(5), || {
            calls += 1;
            Attempt::Fatal(BackendError::Protocol("bad".into()))
        })
        .unwrap_err();
        assert_eq!(calls, 1);
        assert!(matches!(err, BackendError::Protocol(_)));
    }

    #[test]
    fn zero_retries_still_attempts_once() {
        let mut calls = 0u32;
        let ok = with_retry(&instant_cfg(0), || {
            calls += 1;
            Attempt::Done(7)
        })
        .unwrap();
        assert_eq!((ok, calls), (7, 1));
    }
}
