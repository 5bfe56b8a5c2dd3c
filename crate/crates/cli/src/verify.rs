//! Self-check suite over the bundled toy models, runnable against substitute
//! fixture files so a perturbed model shows up as a regression failure.

use std::path::Path;

use anyhow::Context as _;

use sharpen_core::backend::{InProcessBackend, sample_trace};
use sharpen_core::decoder::{
    DEFAULT_SUPPORT_FLOOR, DecoderConfig, TraceGroupSet, compute_budget, decode_with_groups,
    group_traces, marginal_sharpen_decode,
};
use sharpen_core::decoder::FallbackReason;
use sharpen_core::oracle::{
    self, decoder_induced_distribution, empirical_rb_estimate, exact_answer_marginal,
    exact_conditional_given_traces, exact_joint_sharpened, exact_marginal_sharpened,
    integer_expansion_marginal, tv_distance,
};
use sharpen_core::rng::RngState;
use sharpen_core::sis::{SisConfig, log_rho, sis_decode};
use sharpen_core::toy;
use sharpen_core::{TabularModel, TokenSeq};

#[derive(Debug)]
pub struct Fixtures {
    pub t1: TabularModel,
    pub t2: TabularModel,
    pub t3: TabularModel,
}

/// Bundled toys, with any of the three replaceable by a JSON file on disk.
pub fn load_fixtures(
    t1: Option<&Path>,
    t2: Option<&Path>,
    t3: Option<&Path>,
) -> anyhow::Result<Fixtures> {
    let load = |name: &str, path: Option<&Path>| -> anyhow::Result<TabularModel> {
        match path {
            Some(p) => TabularModel::from_path(p)
                .with_context(|| format!("fixture {name} from {}", p.display())),
            None => Ok(toy::builtin(name).expect("bundled model")),
        }
    };
    Ok(Fixtures {
        t1: load("t1", t1)?,
        t2: load("t2", t2)?,
        t3: load("t3", t3)?,
    })
}

pub struct CheckRow {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, f: impl FnOnce() -> Result<String, String>) -> CheckRow {
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    CheckRow { name: name.to_string(), passed, detail }
}

fn expect_close(label: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{label}: got {got:.12}, want {want:.12} (tol {tol:.0e})"))
    }
}

fn seq(names: &[&str], model: &TabularModel) -> TokenSeq {
    TokenSeq::from_names(names, model.vocab()).expect("names in vocab")
}

/// Every check in fixed order. Identity checks pass on any valid model;
/// regression checks pin the bundled numbers and fail on perturbed fixtures.
pub fn verify_suite(fx: &Fixtures) -> Vec<CheckRow> {
    let mut rows = Vec::new();

    rows.push(check("sharpening identity (integer powers)", || {
        let mut worst = 0.0f64;
        for (name, m) in [("t1", &fx.t1), ("t2", &fx.t2), ("t3", &fx.t3)] {
            for prompt in m.prompt_ids() {
                for k in 1..=3usize {
                    let expanded = integer_expansion_marginal(m, prompt, k, None)
                        .map_err(|e| format!("{name}/{prompt} K={k}: {e}"))?;
                    let powered = exact_marginal_sharpened(m, prompt, k as f64)
                        .map_err(|e| format!("{name}/{prompt} K={k}: {e}"))?;
                    let d = oracle::max_abs_prob_diff(&expanded, &powered);
                    if d > 1e-12 {
                        return Err(format!("{name}/{prompt} K={k}: max diff {d:.3e}"));
                    }
                    worst = worst.max(d);
                }
            }
        }
        Ok(format!("max |diff| {worst:.3e} over all fixtures, K in 1..=3"))
    }));

    rows.push(check("t1 answer marginal regression", || {
        let m = exact_answer_marginal(&fx.t1, "q0").map_err(|e| e.to_string())?;
        expect_close("p(A)", m.prob(&seq(&["A", "eos"], &fx.t1)), 0.6, 1e-12)?;
        expect_close("p(B)", m.prob(&seq(&["B", "eos"], &fx.t1)), 0.4, 1e-12)?;
        Ok("p(A)=0.6, p(B)=0.4".to_string())
    }));

    rows.push(check("t2 answer marginal regression", || {
        let m = exact_answer_marginal(&fx.t2, "q0").map_err(|e| e.to_string())?;
        expect_close("p(A)", m.prob(&seq(&["A", "eos"], &fx.t2)), 0.57, 1e-12)?;
        expect_close("p(B)", m.prob(&seq(&["B", "eos"], &fx.t2)), 0.25, 1e-12)?;
        expect_close("p(C)", m.prob(&seq(&["C", "eos"], &fx.t2)), 0.18, 1e-12)?;
        Ok("p(A,B,C) = (0.57, 0.25, 0.18)".to_string())
    }));

    rows.push(check("t1 sharpened marginal regression (alpha=4)", || {
        let m = exact_marginal_sharpened(&fx.t1, "q0", 4.0).map_err(|e| e.to_string())?;
        let want = 0.1296 / 0.1552;
        expect_close("p(A)", m.prob(&seq(&["A", "eos"], &fx.t1)), want, 1e-12)?;
        Ok(format!("p(A) = 0.6^4/(0.6^4+0.4^4) = {want:.6}"))
    }));

    rows.push(check("joint vs marginal sharpening gap (t1, alpha=4)", || {
        let joint = exact_joint_sharpened(&fx.t1, "q0", 4.0)
            .and_then(|j| j.answer_marginal())
            .map_err(|e| e.to_string())?;
        let marg = exact_marginal_sharpened(&fx.t1, "q0", 4.0).map_err(|e| e.to_string())?;
        let tv = tv_distance(&joint, &marg);
        if tv > 0.01 {
            Ok(format!("tv = {tv:.5}, the two targets genuinely differ"))
        } else {
            Err(format!("tv = {tv:.5}, expected a gap above 0.01"))
        }
    }));

    rows.push(check("trace-averaged estimator converges (t1, K=2)", || {
        let backend = InProcessBackend::new(fx.t1.clone());
        let mut groups = Vec::new();
        for i in 0..2000u64 {
            let mut rng = RngState::new(40_000 + i, 0).into_rng();
            let mut members = Vec::new();
            for _ in 0..2 {
                let z = sample_trace(&backend, "q0", 8, &mut rng).map_err(|e| e.to_string())?;
                members.push(z);
            }
            let set = group_traces(&members, 2, 1, 2, fx.t1.vocab())
                .map_err(|e| format!("grouping failed: {e:?}"))?;
            groups.extend(set.groups);
        }
        let est = empirical_rb_estimate(&fx.t1, "q0", &groups).map_err(|e| e.to_string())?;
        let target = exact_marginal_sharpened(&fx.t1, "q0", 2.0).map_err(|e| e.to_string())?;
        let tv = tv_distance(&est, &target);
        if tv <= 0.03 {
            Ok(format!("tv = {tv:.5} over 2000 trace pairs"))
        } else {
            Err(format!("tv = {tv:.5} exceeds 0.03"))
        }
    }));

    rows.push(check("forced-termination decode law is exact", || {
        let mut worst = 0.0f64;
        for (name, m) in [("t1", &fx.t1), ("t2", &fx.t2)] {
            let backend = InProcessBackend::new(m.clone());
            for i in 0..20u64 {
                let mut rng = RngState::new(900 + i, 0).into_rng();
                let mut members = Vec::new();
                for _ in 0..2 {
                    members.push(
                        sample_trace(&backend, "q0", 8, &mut rng).map_err(|e| e.to_string())?,
                    );
                }
                let Ok(set) = group_traces(&members, 2, 1, 2, m.vocab()) else {
                    continue;
                };
                let induced = decoder_induced_distribution(m, "q0", &set.groups)
                    .map_err(|e| e.to_string())?;
                let rb = exact_conditional_given_traces(m, "q0", &set.groups[0])
                    .map_err(|e| e.to_string())?;
                let d = oracle::max_abs_prob_diff(&induced, &rb);
                if d > 1e-12 {
                    return Err(format!("{name} seed {i}: max diff {d:.3e}"));
                }
                worst = worst.max(d);
            }
        }
        Ok(format!("max |diff| {worst:.3e} over 40 sampled groups"))
    }));

    rows.push(check("importance weight is zero for one expert", || {
        let mut worst = 0.0f64;
        for i in 0..50u64 {
            let mut rng = RngState::new(7_000 + i, 0).into_rng();
            let v = 6usize;
            let row: Vec<f64> = (0..v)
                .map(|_| rand::Rng::random_range(&mut rng, 0.01..1.0))
                .collect();
            let total: f64 = row.iter().sum();
            let logits: Vec<f64> = row.iter().map(|p| (p / total).ln()).collect();
            let r = log_rho(&[logits]).map_err(|e| e.to_string())?;
            worst = worst.max(r.abs());
            if r.abs() > 1e-12 {
                return Err(format!("seed {i}: log rho = {r:.3e}"));
            }
        }
        Ok(format!("max |log rho| {worst:.3e} over 50 random rows"))
    }));

    rows.push(check("importance weight agrees across computation routes", || {
        let mut worst = 0.0f64;
        for i in 0..100u64 {
            let mut rng = RngState::new(8_000 + i, 0).into_rng();
            let v = 5usize;
            let rows2: Vec<Vec<f64>> = (0..2)
                .map(|_| {
                    let raw: Vec<f64> =
                        (0..v).map(|_| rand::Rng::random_range(&mut rng, 0.01..1.0)).collect();
                    let t: f64 = raw.iter().sum();
                    raw.iter().map(|p| p / t).collect()
                })
                .collect();
            let logits: Vec<Vec<f64>> =
                rows2.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
            let via_log = log_rho(&logits).map_err(|e| e.to_string())?;
            // Direct probability-space evaluation of the same ratio.
            let num: f64 = (0..v).map(|t| rows2[0][t] * rows2[1][t]).sum();
            let den: f64 = rows2[0].iter().sum::<f64>() * rows2[1].iter().sum::<f64>();
            let via_prob = (num / den).ln();
            let d = (via_log - via_prob).abs();
            worst = worst.max(d);
            if d > 1e-10 {
                return Err(format!("seed {i}: routes differ by {d:.3e}"));
            }
        }
        Ok(format!("max route gap {worst:.3e} over 100 random rows"))
    }));

    rows.push(check("single particle reproduces the decoder exactly", || {
        let backend = InProcessBackend::new(fx.t1.clone());
        for i in 0..50u64 {
            let mut trng = RngState::new(500 + i, 0).into_rng();
            let mut members = Vec::new();
            for _ in 0..2 {
                members.push(
                    sample_trace(&backend, "q0", 8, &mut trng).map_err(|e| e.to_string())?,
                );
            }
            let Ok(set) = group_traces(&members, 2, 1, 2, fx.t1.vocab()) else {
                continue;
            };
            let group = set.groups[0].clone();
            let budget = compute_budget(16, group.traces())
                .map_err(|e| format!("budget failed: {e:?}"))?;
            let state = RngState::new(1_000 + i, 0);
            let (sis_answer, _) = sis_decode(
                &backend,
                "q0",
                &group,
                &SisConfig::new(1, 2, 16),
                state,
            )
            .map_err(|e| e.to_string())?;
            let direct = decode_with_groups(
                &backend,
                "q0",
                &TraceGroupSet::single(group),
                budget,
                DEFAULT_SUPPORT_FLOOR,
                state,
            )
            .map_err(|e| e.to_string())?;
            if sis_answer != direct.answer {
                return Err(format!("seed {i}: single-particle path diverged"));
            }
        }
        Ok("identical answers across 50 seeds".to_string())
    }));

    rows.push(check("t3 trace conditioning is genuinely inexact", || {
        let set = group_traces(
            &[
                sharpen_core::seq::parse_completion(&seq(&["v0", "think_end"], &fx.t3), fx.t3.vocab()),
                sharpen_core::seq::parse_completion(&seq(&["v1", "think_end"], &fx.t3), fx.t3.vocab()),
            ],
            2,
            1,
            2,
            fx.t3.vocab(),
        )
        .map_err(|e| format!("grouping failed: {e:?}"))?;
        let induced = decoder_induced_distribution(&fx.t3, "q0", &set.groups)
            .map_err(|e| e.to_string())?;
        let target = exact_marginal_sharpened(&fx.t3, "q0", 2.0).map_err(|e| e.to_string())?;
        let tv = tv_distance(&induced, &target);
        if tv > 0.1 {
            Ok(format!("tv = {tv:.5} for the (v0, v1) group, as designed"))
        } else {
            Err(format!("tv = {tv:.5}; t3 should expose a visible gap"))
        }
    }));

    rows.push(check("budget shortfall falls back", || {
        let backend = InProcessBackend::new(fx.t1.clone());
        let cfg = DecoderConfig::new(2, 1, 2);
        let r = marginal_sharpen_decode(&backend, "q0", &cfg, RngState::new(5, 0))
            .map_err(|e| e.to_string())?;
        if !r.fallback_used {
            return Err("decode with L=2 did not fall back".to_string());
        }
        match r.fallback_reason {
            Some(FallbackReason::NonPositiveBudget { .. }) => {
                Ok("L=2 leaves no answer budget, fallback taken".to_string())
            }
            other => Err(format!("unexpected fallback reason {other:?}")),
        }
    }));

    rows
}

/// Prints the table; returns overall success.
pub fn print_table(rows: &[CheckRow]) -> bool {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in rows {
        let mark = if r.passed { "pass" } else { "FAIL" };
        println!("{mark}  {:width$}  {}", r.name, r.detail);
    }
    let failed: Vec<&str> =
        rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", rows.len());
        true
    } else {
        println!("{} of {} checks failed: {}", failed.len(), rows.len(), failed.join(", "));
        false
    }
}
