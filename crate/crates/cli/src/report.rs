//! Machine-readable run output: one JSON report per run plus a CSV summary
//! row per run for sweeps.
//!
//! Everything in a report except `wall_ms` is a pure function of the
//! configuration and seed.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct AnswerCount {
    pub answer: Vec<String>,
    pub count: u64,
    pub frequency: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub method: String,
    /// Model name or path, or the server URL when remote.
    pub model: String,
    pub prompt: String,
    pub k: usize,
    pub s: usize,
    pub l: usize,
    pub votes: Option<usize>,
    pub particles: Option<usize>,
    pub alpha: Option<f64>,
    pub trials: usize,
    pub seed: u64,
    /// Empirical answer distribution over all trials.
    pub answers: Vec<AnswerCount>,
    pub argmax_answer: Vec<String>,
    pub argmax_frequency: f64,
    /// Fraction of trials matching the model's answer key, when one exists.
    pub accuracy: Option<f64>,
    /// TV distance from the empirical distribution to the unsharpened answer
    /// marginal; needs a local model.
    pub tv_to_exact_marginal: Option<f64>,
    /// TV distance to the method's own oracle target (the power marginal for
    /// marginal/sis at alpha = K, the joint answer marginal for joint-exact).
    pub tv_to_target: Option<f64>,
    /// Oracle-only gap between joint and marginal sharpening at this alpha;
    /// independent of the trials.
    pub tv_joint_vs_marginal: Option<f64>,
    pub fallbacks: u64,
    pub truncations: u64,
    pub resample_events: u64,
    /// Total backend contexts evaluated during this run, trace sampling and
    /// fallbacks included.
    pub backend_evals: u64,
    /// Contexts evaluated by answer loops only: K·S per emitted token for the
    /// marginal decoder.
    pub decode_loop_evals: u64,
    /// Tokens emitted by answer loops (fallback completions not included).
    pub answer_tokens: u64,
    pub evals_per_answer_token: Option<f64>,
    pub wall_ms: u64,
}

/// Flat projection of a report for the CSV summary.
#[derive(Serialize)]
struct SummaryRow<'a> {
    method: &'a str,
    model: &'a str,
    prompt: &'a str,
    k: usize,
    s: usize,
    l: usize,
    votes: Option<usize>,
    particles: Option<usize>,
    alpha: Option<f64>,
    trials: usize,
    seed: u64,
    argmax_answer: String,
    argmax_frequency: f64,
    accuracy: Option<f64>,
    tv_to_exact_marginal: Option<f64>,
    tv_to_target: Option<f64>,
    tv_joint_vs_marginal: Option<f64>,
    fallbacks: u64,
    truncations: u64,
    resample_events: u64,
    backend_evals: u64,
    decode_loop_evals: u64,
    answer_tokens: u64,
    evals_per_answer_token: Option<f64>,
    wall_ms: u64,
}

impl<'a> From<&'a RunReport> for SummaryRow<'a> {
    fn from(r: &'a RunReport) -> Self {
        SummaryRow {
            method: &r.method,
            model: &r.model,
            prompt: &r.prompt,
            k: r.k,
            s: r.s,
            l: r.l,
            votes: r.votes,
            particles: r.particles,
            alpha: r.alpha,
            trials: r.trials,
            seed: r.seed,
            argmax_answer: r.argmax_answer.join(" "),
            argmax_frequency: r.argmax_frequency,
            accuracy: r.accuracy,
            tv_to_exact_marginal: r.tv_to_exact_marginal,
            tv_to_target: r.tv_to_target,
            tv_joint_vs_marginal: r.tv_joint_vs_marginal,
            fallbacks: r.fallbacks,
            truncations: r.truncations,
            resample_events: r.resample_events,
            backend_evals: r.backend_evals,
            decode_loop_evals: r.decode_loop_evals,
            answer_tokens: r.answer_tokens,
            evals_per_answer_token: r.evals_per_answer_token,
            wall_ms: r.wall_ms,
        }
    }
}

/// Writes `run_<i>.json` per report plus `summary.csv` into `dir`.
pub fn write_reports(reports: &[RunReport], dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, r) in reports.iter().enumerate() {
        let path = dir.join(format!("run_{i:03}.json"));
        let text = serde_json::to_string_pretty(r)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    let csv_path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&csv_path)
        .with_context(|| format!("writing {}", csv_path.display()))?;
    for r in reports {
        w.serialize(SummaryRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}
