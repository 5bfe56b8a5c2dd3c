//! Experiment execution: method dispatch, K/S sweeps, trial parallelism and
//! report aggregation.
//!
//! Trials are embarrassingly parallel: trial t derives every draw from seed +
//! t, so the aggregate is independent of scheduling order.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context as _, bail, ensure};
use rayon::prelude::*;

use sharpen_core::backend::{
    BackendError, InProcessBackend, ModelBackend, base_completion, sample_trace,
};
use sharpen_core::baselines::{
    AnswerEquiv, joint_sharpened_sample, majority_vote, temperature_sample_answer,
};
use sharpen_core::decoder::{DecoderConfig, group_traces, marginal_sharpen_decode};
use sharpen_core::oracle::{
    self, AnswerDist, exact_answer_marginal, exact_joint_sharpened, exact_marginal_sharpened,
};
use sharpen_core::rng::{FALLBACK_STREAM_OFFSET, RngState};
use sharpen_core::seq::TokenSeq;
use sharpen_core::sis::{SisConfig, SisError, sis_decode};
use sharpen_core::toy;
use sharpen_core::{TabularModel, Vocab};
use sharpen_remote::{RemoteBackend, RemoteConfig};

use crate::report::{AnswerCount, RunReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    /// Plain ancestral sampling at temperature 1.
    Temperature,
    /// k completions, plurality answer wins.
    MajorityVote,
    /// Prefix-weighted product-of-experts decoding toward the power marginal.
    Marginal,
    /// The same proposal corrected by sequential importance sampling.
    Sis,
    /// Exact enumeration draw from the power-sharpened joint.
    JointExact,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Temperature => "temperature",
            Method::MajorityVote => "majority-vote",
            Method::Marginal => "marginal",
            Method::Sis => "sis",
            Method::JointExact => "joint-exact",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    /// Builtin name (t1, t2, t3) or a model JSON path. Defaults to t1 when no
    /// server is given. With a server, supplies the oracle targets.
    pub model: Option<String>,
    /// Server URL; when set, decoding goes over the wire.
    pub server: Option<String>,
    pub method: Method,
    /// Sharpening strengths to sweep.
    pub k_values: Vec<usize>,
    /// Group counts to sweep.
    pub s_values: Vec<usize>,
    /// Expand all K·S factorizations of this budget instead of the K/S lists.
    pub ks_budget: Option<usize>,
    pub l: usize,
    pub votes: usize,
    pub particles: usize,
    pub alpha: Option<f64>,
    pub trials: usize,
    pub seed: u64,
    pub top_l: usize,
    /// Prompt ids; empty means every prompt of the local model (or "q0").
    pub prompts: Vec<String>,
}

impl ExperimentConfig {
    pub fn new(method: Method) -> Self {
        ExperimentConfig {
            model: None,
            server: None,
            method,
            k_values: vec![2],
            s_values: vec![1],
            ks_budget: None,
            l: 32,
            votes: 16,
            particles: 8,
            alpha: None,
            trials: 200,
            seed: 0,
            top_l: 0,
            prompts: Vec::new(),
        }
    }
}

/// Builtin model by name, else a JSON file path.
pub fn load_model(spec: &str) -> anyhow::Result<TabularModel> {
    if let Some(m) = toy::builtin(spec) {
        return Ok(m);
    }
    TabularModel::from_path(Path::new(spec)).with_context(|| format!("loading model {spec:?}"))
}

fn validate(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    ensure!(cfg.trials >= 1, "--trials must be at least 1");
    ensure!(cfg.l >= 1, "--L must be at least 1");
    ensure!(!cfg.k_values.is_empty(), "--K needs at least one value");
    ensure!(!cfg.s_values.is_empty(), "--S needs at least one value");
    ensure!(cfg.k_values.iter().all(|&k| k >= 1), "--K values must be at least 1");
    ensure!(cfg.s_values.iter().all(|&s| s >= 1), "--S values must be at least 1");
    if let Some(n) = cfg.ks_budget {
        ensure!(n >= 1, "--ks-budget must be at least 1");
        ensure!(
            cfg.method == Method::Marginal,
            "--ks-budget expands K*S factorizations, which only the marginal method sweeps"
        );
    }
    let single_combo = cfg.k_values.len() == 1 && cfg.s_values.len() == 1;
    match cfg.method {
        Method::Temperature | Method::MajorityVote | Method::JointExact => {
            ensure!(single_combo, "K/S sweeps apply to the marginal and sis methods");
        }
        Method::Sis => {
            ensure!(cfg.particles >= 1, "--P must be at least 1");
            ensure!(
                cfg.s_values == [1],
                "sis runs a single trace group; --S applies to the marginal method"
            );
        }
        Method::Marginal => {}
    }
    if cfg.method == Method::MajorityVote {
        ensure!(cfg.votes >= 1, "--k must be at least 1");
    }
    if cfg.method == Method::JointExact {
        match cfg.alpha {
            Some(a) if a > 0.0 => {}
            Some(a) => bail!("--alpha must be positive, got {a}"),
            None => bail!("joint-exact needs --alpha (for example --alpha 4)"),
        }
        ensure!(
            cfg.server.is_none() || cfg.model.is_some(),
            "joint-exact enumerates a local model; pass --model alongside --server"
        );
    }
    Ok(())
}

struct TrialOutcome {
    answer: TokenSeq,
    truncated: bool,
    fallback: bool,
    resamples: u32,
    loop_evals: u64,
    answer_tokens: u64,
}

fn fallback_trial(
    backend: &dyn ModelBackend,
    prompt: &str,
    l: usize,
    state: RngState,
) -> Result<TrialOutcome, BackendError> {
    let mut rng = state.offset(FALLBACK_STREAM_OFFSET).into_rng();
    let c = base_completion(backend, prompt, l, &mut rng)?;
    Ok(TrialOutcome {
        answer: c.answer,
        truncated: c.truncated,
        fallback: true,
        resamples: 0,
        loop_evals: 0,
        answer_tokens: 0,
    })
}

fn one_trial(
    cfg: &ExperimentConfig,
    backend: &dyn ModelBackend,
    local: Option<&TabularModel>,
    vocab: &Vocab,
    prompt: &str,
    k: usize,
    s: usize,
    trial: usize,
) -> anyhow::Result<TrialOutcome> {
    let state = RngState::new(cfg.seed.wrapping_add(trial as u64), 0);
    let outcome = match cfg.method {
        Method::Temperature => {
            let mut rng = state.into_rng();
            let c = temperature_sample_answer(backend, prompt, cfg.l, &mut rng)?;
            TrialOutcome {
                answer: c.answer,
                truncated: c.truncated,
                fallback: false,
                resamples: 0,
                loop_evals: 0,
                answer_tokens: 0,
            }
        }
        Method::MajorityVote => {
            let answer =
                majority_vote(backend, prompt, cfg.votes, cfg.l, &AnswerEquiv::identity(), state)?;
            TrialOutcome {
                answer,
                truncated: false,
                fallback: false,
                resamples: 0,
                loop_evals: 0,
                answer_tokens: 0,
            }
        }
        Method::Marginal => {
            let dcfg = DecoderConfig {
                min_usable_traces: 2.min(k * s),
                ..DecoderConfig::new(k, s, cfg.l)
            };
            let r = marginal_sharpen_decode(backend, prompt, &dcfg, state)?;
            TrialOutcome {
                answer: r.answer,
                truncated: r.truncated,
                fallback: r.fallback_used,
                resamples: 0,
                loop_evals: r.loop_evals,
                answer_tokens: r.steps.len() as u64,
            }
        }
        Method::Sis => {
            let mut traces = Vec::with_capacity(k);
            for m in 0..k {
                let mut trng = state.offset(m as u64).into_rng();
                traces.push(sample_trace(backend, prompt, cfg.l, &mut trng)?);
            }
            let Ok(set) = group_traces(&traces, k, 1, 1, vocab) else {
                return Ok(fallback_trial(backend, prompt, cfg.l, state)?);
            };
            let group = set.groups.into_iter().next().expect("one group");
            let scfg = SisConfig::new(cfg.particles, k, cfg.l);
            match sis_decode(backend, prompt, &group, &scfg, state) {
                Ok((answer, diag)) => TrialOutcome {
                    answer_tokens: answer.len() as u64,
                    truncated: !answer.ends_with(vocab.eos()),
                    answer,
                    fallback: false,
                    resamples: diag.resample_events,
                    loop_evals: diag.evals,
                },
                Err(SisError::Budget(_)) => fallback_trial(backend, prompt, cfg.l, state)?,
                Err(e) => return Err(e.into()),
            }
        }
        Method::JointExact => {
            let model = local.expect("validated: joint-exact has a local model");
            let alpha = cfg.alpha.expect("validated: joint-exact has alpha");
            let (_, answer) = joint_sharpened_sample(model, prompt, alpha, state)?;
            TrialOutcome {
                answer,
                truncated: false,
                fallback: false,
                resamples: 0,
                loop_evals: 0,
                answer_tokens: 0,
            }
        }
    };
    Ok(outcome)
}

fn empirical_dist(counts: &BTreeMap<TokenSeq, u64>) -> anyhow::Result<AnswerDist> {
    let masses: BTreeMap<TokenSeq, f64> =
        counts.iter().map(|(a, &c)| (a.clone(), (c as f64).ln())).collect();
    Ok(AnswerDist::from_log_masses(masses)?)
}

/// The per-method oracle distribution the empirical answer law is compared
/// against, when a local model makes it computable.
fn target_dist(
    cfg: &ExperimentConfig,
    model: &TabularModel,
    prompt: &str,
    k: usize,
) -> anyhow::Result<Option<AnswerDist>> {
    let d = match cfg.method {
        Method::Temperature => Some(exact_answer_marginal(model, prompt)?),
        Method::MajorityVote => None,
        Method::Marginal | Method::Sis => {
            Some(exact_marginal_sharpened(model, prompt, k as f64)?)
        }
        Method::JointExact => Some(
            exact_joint_sharpened(model, prompt, cfg.alpha.expect("validated"))?
                .answer_marginal()?,
        ),
    };
    Ok(d)
}

fn run_one(
    cfg: &ExperimentConfig,
    backend: &dyn ModelBackend,
    local: Option<&TabularModel>,
    model_label: &str,
    prompt: &str,
    k: usize,
    s: usize,
) -> anyhow::Result<RunReport> {
    let vocab = backend.vocab().clone();
    let t0 = Instant::now();
    let evals_before = backend.eval_count();
    let outcomes: Vec<TrialOutcome> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| one_trial(cfg, backend, local, &vocab, prompt, k, s, t))
        .collect::<anyhow::Result<_>>()?;
    let backend_evals = backend.eval_count() - evals_before;
    let wall_ms = t0.elapsed().as_millis() as u64;

    let mut counts: BTreeMap<TokenSeq, u64> = BTreeMap::new();
    let (mut fallbacks, mut truncations, mut resamples) = (0u64, 0u64, 0u64);
    let (mut loop_evals, mut answer_tokens) = (0u64, 0u64);
    for o in &outcomes {
        *counts.entry(o.answer.clone()).or_default() += 1;
        fallbacks += u64::from(o.fallback);
        truncations += u64::from(o.truncated);
        resamples += u64::from(o.resamples);
        loop_evals += o.loop_evals;
        answer_tokens += o.answer_tokens;
    }
    let n = cfg.trials as f64;

    let answers: Vec<AnswerCount> = counts
        .iter()
        .map(|(a, &c)| AnswerCount {
            answer: a.iter().map(|t| vocab.name(t).to_string()).collect(),
            count: c,
            frequency: c as f64 / n,
        })
        .collect();
    // Plurality answer; ties go to the smaller token sequence.
    let (argmax_seq, argmax_count) = counts
        .iter()
        .max_by(|(a1, c1), (a2, c2)| c1.cmp(c2).then_with(|| a2.cmp(a1)))
        .map(|(a, &c)| (a.clone(), c))
        .expect("at least one trial");

    let accuracy = local.and_then(|m| m.answer_key(prompt)).map(|key| {
        counts.get(key).copied().unwrap_or(0) as f64 / n
    });

    let emp = empirical_dist(&counts)?;
    let mut tv_to_exact_marginal = None;
    let mut tv_to_target = None;
    let mut tv_joint_vs_marginal = None;
    if let Some(model) = local {
        tv_to_exact_marginal =
            Some(oracle::tv_distance(&emp, &exact_answer_marginal(model, prompt)?));
        tv_to_target =
            target_dist(cfg, model, prompt, k)?.map(|d| oracle::tv_distance(&emp, &d));
        let gap_alpha = match cfg.method {
            Method::Marginal | Method::Sis => cfg.alpha.or(Some(k as f64)),
            _ => cfg.alpha,
        };
        if let Some(a) = gap_alpha {
            let joint = exact_joint_sharpened(model, prompt, a)?.answer_marginal()?;
            let marg = exact_marginal_sharpened(model, prompt, a)?;
            tv_joint_vs_marginal = Some(oracle::tv_distance(&joint, &marg));
        }
    }

    Ok(RunReport {
        method: cfg.method.name().to_string(),
        model: model_label.to_string(),
        prompt: prompt.to_string(),
        k,
        s,
        l: cfg.l,
        votes: (cfg.method == Method::MajorityVote).then_some(cfg.votes),
        particles: (cfg.method == Method::Sis).then_some(cfg.particles),
        alpha: cfg.alpha,
        trials: cfg.trials,
        seed: cfg.seed,
        answers,
        argmax_answer: argmax_seq.iter().map(|t| vocab.name(t).to_string()).collect(),
        argmax_frequency: argmax_count as f64 / n,
        accuracy,
        tv_to_exact_marginal,
        tv_to_target,
        tv_joint_vs_marginal,
        fallbacks,
        truncations,
        resample_events: resamples,
        backend_evals,
        decode_loop_evals: loop_evals,
        answer_tokens,
        evals_per_answer_token: (answer_tokens > 0)
            .then(|| loop_evals as f64 / answer_tokens as f64),
        wall_ms,
    })
}

/// Expands sweeps, runs every (prompt, K, S) cell and returns one report per
/// cell, in deterministic order.
pub fn run_experiment(cfg: &ExperimentConfig) -> anyhow::Result<Vec<RunReport>> {
    validate(cfg)?;

    let local: Option<Arc<TabularModel>> = match (&cfg.model, &cfg.server) {
        (Some(spec), _) => Some(Arc::new(load_model(spec)?)),
        (None, None) => Some(Arc::new(toy::t1())),
        (None, Some(_)) => None,
    };
    let model_label = match (&cfg.model, &cfg.server) {
        (_, Some(url)) => url.clone(),
        (Some(spec), None) => spec.clone(),
        (None, None) => "t1".to_string(),
    };

    let backend: Box<dyn ModelBackend> = match &cfg.server {
        Some(url) => {
            let rcfg = RemoteConfig { top_l: cfg.top_l, ..RemoteConfig::default() };
            Box::new(
                RemoteBackend::connect(url, rcfg)
                    .with_context(|| format!("connecting to {url}"))?,
            )
        }
        None => Box::new(InProcessBackend::from_arc(
            local.clone().expect("local backend has a model"),
        )),
    };

    let prompts: Vec<String> = if cfg.prompts.is_empty() {
        match &local {
            Some(m) => m.prompt_ids().iter().map(|s| s.to_string()).collect(),
            None => vec!["q0".to_string()],
        }
    } else {
        cfg.prompts.clone()
    };

    let combos: Vec<(usize, usize)> = match cfg.ks_budget {
        Some(n) => (1..=n).filter(|d| n % d == 0).map(|k| (k, n / k)).collect(),
        None => cfg
            .k_values
            .iter()
            .flat_map(|&k| cfg.s_values.iter().map(move |&s| (k, s)))
            .collect(),
    };

    let mut reports = Vec::with_capacity(prompts.len() * combos.len());
    for prompt in &prompts {
        for &(k, s) in &combos {
            reports.push(run_one(
                cfg,
                backend.as_ref(),
                local.as_deref(),
                &model_label,
                prompt,
                k,
                s,
            )?);
        }
    }
    Ok(reports)
}
