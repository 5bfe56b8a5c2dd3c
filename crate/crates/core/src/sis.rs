//! Sequential importance sampling over answer particles.
//!
//! For one fixed trace group the product-of-experts token rule is a proposal
//! whose per-step normalizer rho_t was dropped. Each of P particles extends
//! by one token from that proposal and accumulates log rho_t into its weight:
//!
//! ```text
//! log rho_t = log sum_v exp( sum_i l_i(v) ) - sum_i log sum_v exp( l_i(v) )
//! ```
//!
//! so a terminated particle's weight telescopes to the exact group
//! conditional over its answer divided by the proposal's path probability.
//! When the effective sample size falls below a fraction of P the particles
//! are resampled multinomially; one particle is finally selected by
//! normalized weight. With P = 1 nothing corrects anything: the particle
//! follows the same sampled path as the plain token-level decoder.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::backend::ModelBackend;
use crate::decoder::{self, DecodeError, FallbackReason, PrefixWeights, TraceGroupSet};
use crate::numeric::{self, NumericError};
use crate::oracle::TraceGroup;
use crate::rng::{ANSWER_STREAM_OFFSET, RESAMPLE_STREAM_OFFSET, RngState, SELECT_STREAM_OFFSET};
use crate::seq::{TokenSeq, TokenId};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SisConfig {
    /// Particle count.
    pub p: usize,
    /// Traces in the (single) group; recorded for reporting.
    pub k: usize,
    /// Maximum total sequence length, shared with the decoder's budget rule.
    pub l: usize,
    /// Resample when ESS < fraction * P. The default 0.5 is the P/2 rule.
    pub ess_threshold_fraction: f64,
    /// Resampling on/off; off makes the run a plain self-normalized sampler.
    pub resampling: bool,
    pub support_floor_logprob: f64,
}

impl SisConfig {
    pub fn new(p: usize, k: usize, l: usize) -> Self {
        SisConfig {
            p,
            k,
            l,
            ess_threshold_fraction: 0.5,
            resampling: true,
            support_floor_logprob: decoder::DEFAULT_SUPPORT_FLOOR,
        }
    }
}

#[derive(Debug, Error)]
pub enum SisError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("answer budget not positive: {0:?}")]
    Budget(FallbackReason),
    #[error("group size {got} does not match configured K {want}")]
    GroupSize { got: usize, want: usize },
}

/// One answer hypothesis: its prefix, accumulated log-weight, and a private
/// generator so particle advancement order never affects the draws.
#[derive(Clone, Debug)]
pub struct Particle {
    pub prefix: TokenSeq,
    pub log_weight: f64,
    pub terminated: bool,
    rng: ChaCha8Rng,
}

/// The missing-normalizer correction for one step, from the K per-expert
/// log-probability rows (dense over the vocabulary, `−∞` for zero mass).
pub fn log_rho(rows: &[Vec<f64>]) -> Result<f64, NumericError> {
    assert!(!rows.is_empty(), "log_rho needs at least one expert row");
    let v = rows[0].len();
    let mut sum_row = vec![0.0f64; v];
    for row in rows {
        assert_eq!(row.len(), v);
        for (acc, &lp) in sum_row.iter_mut().zip(row) {
            *acc += lp;
        }
    }
    let joint = numeric::log_sum_exp(&sum_row)?;
    let mut marginals = 0.0;
    for row in rows {
        marginals += numeric::log_sum_exp(row)?;
    }
    Ok(joint - marginals)
}

/// Effective sample size of the normalized weights: (Σw)²/Σw².
pub fn ess(log_weights: &[f64]) -> Result<f64, NumericError> {
    let norm = numeric::normalize_log(log_weights)?;
    Ok(1.0 / norm.iter().map(|&lw| (2.0 * lw).exp()).sum::<f64>())
}

/// Multinomial resampling: P draws with replacement by normalized weight.
/// Offspring restart at weight 1/P and receive fresh particle streams from
/// `fresh`, a counter the caller advances across events.
pub fn resample_multinomial(
    particles: &[Particle],
    rng: &mut ChaCha8Rng,
    base: RngState,
    fresh: &mut u64,
) -> Result<Vec<Particle>, NumericError> {
    let weights: Vec<f64> = particles.iter().map(|p| p.log_weight).collect();
    let p = particles.len();
    let reset = -(p as f64).ln();
    let mut offspring = Vec::with_capacity(p);
    for _ in 0..p {
        let idx = numeric::sample_categorical(&weights, rng)?;
        let mut child = particles[idx].clone();
        child.log_weight = reset;
        child.rng = base.offset(ANSWER_STREAM_OFFSET.wrapping_add(*fresh)).into_rng();
        *fresh += 1;
        offspring.push(child);
    }
    Ok(offspring)
}

#[derive(Clone, Debug, Serialize)]
pub struct SisDiagnostics {
    /// ESS after each step's weight updates.
    pub ess_per_step: Vec<f64>,
    pub resample_events: u32,
    /// Normalized final log-weights, in particle order.
    pub final_log_weights: Vec<f64>,
    /// Each particle's answer and whether it reached eos.
    pub answers: Vec<TokenSeq>,
    pub terminated: Vec<bool>,
    /// Index of the particle chosen by the final weighted draw.
    pub selected: usize,
    /// Backend contexts evaluated.
    pub evals: u64,
}

/// Runs the particle system on one fixed trace group and returns the selected
/// answer with per-run diagnostics.
pub fn sis_decode(
    backend: &dyn ModelBackend,
    prompt_id: &str,
    group: &TraceGroup,
    cfg: &SisConfig,
    rng: RngState,
) -> Result<(TokenSeq, SisDiagnostics), SisError> {
    assert!(cfg.p >= 1, "particle count must be positive");
    assert!(
        cfg.ess_threshold_fraction > 0.0 && cfg.ess_threshold_fraction <= 1.0,
        "ESS threshold fraction must lie in (0, 1]"
    );
    if group.k() != cfg.k {
        return Err(SisError::GroupSize { got: group.k(), want: cfg.k });
    }
    let budget = decoder::compute_budget(cfg.l, group.traces()).map_err(SisError::Budget)?;
    let eos = backend.vocab().eos();
    let groups = TraceGroupSet::single(group.clone());
    let flat = PrefixWeights::new(1);

    let mut particles: Vec<Particle> = (0..cfg.p)
        .map(|i| Particle {
            prefix: TokenSeq::new(),
            log_weight: 0.0,
            terminated: false,
            rng: rng.offset(ANSWER_STREAM_OFFSET.wrapping_add(i as u64)).into_rng(),
        })
        .collect();
    let mut fresh = cfg.p as u64;
    let mut resample_rng = rng.offset(RESAMPLE_STREAM_OFFSET).into_rng();

    let mut ess_per_step = Vec::new();
    let mut resample_events = 0u32;
    let mut evals = 0u64;

    for _ in 0..budget {
        if particles.iter().all(|p| p.terminated) {
            break;
        }
        for particle in &mut particles {
            if particle.terminated {
                continue;
            }
            let scores = decoder::step_scores(
                backend,
                prompt_id,
                &groups,
                &flat,
                &particle.prefix,
                cfg.support_floor_logprob,
            )?;
            evals += scores.evals;
            let idx = numeric::sample_categorical(&scores.q, &mut particle.rng)
                .map_err(DecodeError::Numeric)?;
            let token = TokenId(idx as u32);
            particle.log_weight += log_rho(&scores.expert_token_logprob)?;
            particle.prefix.push(token);
            if token == eos {
                particle.terminated = true;
            }
        }
        let weights: Vec<f64> = particles.iter().map(|p| p.log_weight).collect();
        let e = ess(&weights)?;
        ess_per_step.push(e);
        if cfg.resampling && e < cfg.ess_threshold_fraction * cfg.p as f64 {
            particles = resample_multinomial(&particles, &mut resample_rng, rng, &mut fresh)?;
            resample_events += 1;
        }
    }

    let weights: Vec<f64> = particles.iter().map(|p| p.log_weight).collect();
    let normalized = numeric::normalize_log(&weights)?;
    let mut select_rng = rng.offset(SELECT_STREAM_OFFSET).into_rng();
    let selected = numeric::sample_categorical(&normalized, &mut select_rng)?;

    let diag = SisDiagnostics {
        ess_per_step,
        resample_events,
        final_log_weights: normalized,
        answers: particles.iter().map(|p| p.prefix.clone()).collect(),
        terminated: particles.iter().map(|p| p.terminated).collect(),
        selected,
        evals,
    };
    Ok((particles[selected].prefix.clone(), diag))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_vanishes_for_a_single_expert() {
        let row = vec![0.8_f64.ln(), 0.2_f64.ln(), f64::NEG_INFINITY];
        let rho = log_rho(std::slice::from_ref(&row)).unwrap();
        assert!(rho.abs() < 1e-12, "rho {rho}");
    }

    #[test]
    fn rho_of_identical_normalized_experts_is_the_power_sum() {
        // Two copies of T1's answer row: rho = log(0.8^2 + 0.2^2).
        let row = vec![0.8_f64.ln(), 0.2_f64.ln()];
        let rho = log_rho(&[row.clone(), row]).unwrap();
        assert!((rho - (0.64f64 + 0.04).ln()).abs() < 1e-12);
    }

    #[test]
    fn ess_spans_uniform_to_degenerate() {
        let p = 8;
        let uniform = vec![0.0; p];
        assert!((ess(&uniform).unwrap() - p as f64).abs() < 1e-12);
        let mut one = vec![f64::NEG_INFINITY; p];
        one[3] = -2.0;
        assert!((ess(&one).unwrap() - 1.0).abs() < 1e-12);
        let pair = [0.75_f64.ln(), 0.25_f64.ln()];
        assert!((ess(&pair).unwrap() - 1.6).abs() < 1e-12);
    }

    #[test]
    fn resampling_copies_the_dominant_particle_and_resets_weights() {
        let base = RngState::new(9, 0);
        let mk = |tok: u32, w: f64, stream: u64| Particle {
            prefix: TokenSeq::from_ids(vec![TokenId(tok)]),
            log_weight: w,
            terminated: false,
            rng: base.offset(stream).into_rng(),
        };
        let particles = vec![mk(0, 0.0, 0), mk(1, -800.0, 1), mk(2, -900.0, 2)];
        let mut rng = base.offset(RESAMPLE_STREAM_OFFSET).into_rng();
        let mut fresh = 3u64;
        let out = resample_multinomial(&particles, &mut rng, base, &mut fresh).unwrap();
        assert_eq!(fresh, 6);
        for child in &out {
            assert_eq!(child.prefix.as_slice(), &[TokenId(0)]);
            assert!((child.log_weight - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
        let total = numeric::log_sum_exp(&out.iter().map(|p| p.log_weight).collect::<Vec<_>>())
            .unwrap();
        assert!(total.abs() < 1e-12);
    }
}
