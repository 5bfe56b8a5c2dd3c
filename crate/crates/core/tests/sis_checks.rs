//! Particle-corrected decoding against the oracle: weight telescoping, the
//! single-particle identity with the plain decoder, and convergence of the
//! weighted answer law toward the exact trace conditional.

use std::collections::BTreeMap;

use sharpen_core::backend::InProcessBackend;
use sharpen_core::decoder::{
    DEFAULT_SUPPORT_FLOOR, PrefixWeights, TraceGroupSet, compute_budget, decode_with_groups,
    poe_step,
};
use sharpen_core::oracle::{
    AnswerDist, TraceGroup, answer_prefix_logprob, exact_conditional_given_traces, tv_distance,
};
use sharpen_core::rng::RngState;
use sharpen_core::seq::{TokenSeq, parse_completion};
use sharpen_core::sis::{SisConfig, SisError, sis_decode};
use sharpen_core::toy;
use sharpen_core::TabularModel;

fn group(model: &TabularModel, firsts: &[&str]) -> TraceGroup {
    let v = model.vocab();
    let traces = firsts
        .iter()
        .map(|f| {
            let seq = TokenSeq::from_names(&[f, "think_end"], v).unwrap();
            parse_completion(&seq, v)
        })
        .collect();
    TraceGroup::new(traces, v).unwrap()
}

/// Log-probability the proposal assigns to a full answer path, recomputed
/// step by step from the public single-group mixture rule.
fn proposal_path_logprob(
    backend: &InProcessBackend,
    model: &TabularModel,
    grp: &TraceGroup,
    answer: &TokenSeq,
) -> f64 {
    let groups = TraceGroupSet::single(grp.clone());
    let mut weights = PrefixWeights::new(1);
    let mut total = 0.0;
    for cut in 0..answer.len() {
        let prefix = TokenSeq::from_ids(answer.as_slice()[..cut].to_vec());
        let q = poe_step(backend, "q0", &groups, &weights, &prefix, DEFAULT_SUPPORT_FLOOR)
            .unwrap();
        total += q.known(answer.as_slice()[cut]).unwrap();
        let extended = TokenSeq::from_ids(answer.as_slice()[..cut + 1].to_vec());
        let delta: f64 = grp
            .traces()
            .iter()
            .map(|t| {
                answer_prefix_logprob(model, "q0", &t.trace, &extended)
                    - answer_prefix_logprob(model, "q0", &t.trace, &prefix)
            })
            .sum();
        weights.update(&[delta]);
    }
    total
}

#[test]
fn weights_telescope_to_target_over_proposal() {
    // Without resampling, each particle's raw weight is the product of the
    // per-step normalizer corrections, which telescopes to
    // (product of per-trace answer masses) / (proposal path probability).
    // Reported weights are normalized, so the identity is checked up to one
    // shared constant across particles.
    let model = toy::t3();
    let backend = InProcessBackend::new(model.clone());
    let grp = group(&model, &["v0", "v1"]);
    let mut cfg = SisConfig::new(6, 2, 12);
    cfg.resampling = false;
    for seed in 0..25u64 {
        let (_, diag) = sis_decode(&backend, "q0", &grp, &cfg, RngState::new(321, seed)).unwrap();
        assert_eq!(diag.resample_events, 0);
        let offsets: Vec<f64> = diag
            .answers
            .iter()
            .zip(&diag.final_log_weights)
            .map(|(answer, &normalized)| {
                let target: f64 = grp
                    .traces()
                    .iter()
                    .map(|t| answer_prefix_logprob(&model, "q0", &t.trace, answer))
                    .sum();
                let proposal = proposal_path_logprob(&backend, &model, &grp, answer);
                normalized - (target - proposal)
            })
            .collect();
        let spread = offsets.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - offsets.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-10, "seed {seed}: offsets {offsets:?}");
    }
}

#[test]
fn single_particle_follows_the_decoder_path_exactly() {
    let model = toy::t3();
    let backend = InProcessBackend::new(model.clone());
    for members in [vec!["v0", "u0"], vec!["v1", "u1"], vec!["v0", "v1", "u0"]] {
        let grp = group(&model, &members);
        let cfg = SisConfig::new(1, members.len(), 12);
        let budget = compute_budget(cfg.l, grp.traces()).unwrap();
        for seed in 0..200u64 {
            let rng = RngState::new(8_000, seed);
            let (answer, diag) = sis_decode(&backend, "q0", &grp, &cfg, rng).unwrap();
            let plain = decode_with_groups(
                &backend,
                "q0",
                &TraceGroupSet::single(grp.clone()),
                budget,
                DEFAULT_SUPPORT_FLOOR,
                rng,
            )
            .unwrap();
            assert_eq!(answer, plain.answer, "seed {seed}");
            assert_eq!(diag.selected, 0);
        }
    }
}

fn weighted_empirical(runs: Vec<(Vec<TokenSeq>, Vec<f64>)>) -> AnswerDist {
    let mut masses: BTreeMap<TokenSeq, f64> = BTreeMap::new();
    let n = runs.len() as f64;
    for (answers, log_weights) in runs {
        for (a, &lw) in answers.iter().zip(&log_weights) {
            *masses.entry(a.clone()).or_insert(0.0) += lw.exp() / n;
        }
    }
    AnswerDist::from_log_masses(masses.into_iter().map(|(a, m)| (a, m.ln())).collect()).unwrap()
}

#[test]
fn more_particles_tighten_the_weighted_law() {
    let model = toy::t3();
    let backend = InProcessBackend::new(model.clone());
    let grp = group(&model, &["v0", "v1"]);
    let exact = exact_conditional_given_traces(&model, "q0", &grp).unwrap();
    let n = 20_000usize;
    let mut tvs = Vec::new();
    for p in [1usize, 16] {
        let mut cfg = SisConfig::new(p, 2, 12);
        cfg.resampling = false;
        let runs: Vec<(Vec<TokenSeq>, Vec<f64>)> = (0..n)
            .map(|trial| {
                let rng = RngState::new(31_337, trial as u64);
                let (_, diag) = sis_decode(&backend, "q0", &grp, &cfg, rng).unwrap();
                (diag.answers, diag.final_log_weights)
            })
            .collect();
        let tv = tv_distance(&weighted_empirical(runs), &exact);
        tvs.push(tv);
    }
    assert!(
        tvs[1] < tvs[0] - 0.05,
        "16 particles should close most of the single-particle gap: {tvs:?}"
    );
    // The single-particle law is the plain decoder law; its distance to the
    // exact conditional on this group is about 0.268.
    assert!((tvs[0] - 0.268).abs() < 0.02, "unexpected base gap {tvs:?}");
}

#[test]
fn forced_termination_keeps_every_particle_weight_flat() {
    // With single-token answers and a forced eos, the proposal is already the
    // exact conditional: every correction is zero and selection is uniform.
    let model = toy::t2();
    let backend = InProcessBackend::new(model.clone());
    let grp = group(&model, &["u1", "u2"]);
    let exact = exact_conditional_given_traces(&model, "q0", &grp).unwrap();
    let cfg = SisConfig::new(8, 2, 10);
    let n = 20_000usize;
    let mut counts: BTreeMap<TokenSeq, usize> = BTreeMap::new();
    for trial in 0..n {
        let rng = RngState::new(777, trial as u64);
        let (answer, diag) = sis_decode(&backend, "q0", &grp, &cfg, rng).unwrap();
        assert_eq!(diag.resample_events, 0, "flat weights never trigger resampling");
        for &lw in &diag.final_log_weights {
            assert!((lw - (1.0f64 / 8.0).ln()).abs() < 1e-9);
        }
        *counts.entry(answer).or_insert(0) += 1;
    }
    let masses = counts
        .into_iter()
        .map(|(a, c)| (a, (c as f64 / n as f64).ln()))
        .collect();
    let empirical = AnswerDist::from_log_masses(masses).unwrap();
    let tv = tv_distance(&empirical, &exact);
    assert!(tv <= 0.02, "tv {tv}");
}

#[test]
fn collapsing_weights_trigger_recorded_resampling() {
    let model = toy::t3();
    let backend = InProcessBackend::new(model.clone());
    let grp = group(&model, &["v0", "u1"]);
    let cfg = SisConfig::new(16, 2, 12);
    let mut saw_resample = false;
    for seed in 0..50u64 {
        let (_, diag) = sis_decode(&backend, "q0", &grp, &cfg, RngState::new(13, seed)).unwrap();
        for &e in &diag.ess_per_step {
            assert!((1.0 - 1e-9..=16.0 + 1e-9).contains(&e), "ESS out of range: {e}");
        }
        let total: f64 = diag.final_log_weights.iter().map(|&lw| lw.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9, "selection weights must normalize");
        assert_eq!(diag.answers.len(), 16);
        for (answer, &term) in diag.answers.iter().zip(&diag.terminated) {
            assert_eq!(term, answer.ends_with(model.vocab().eos()));
        }
        if diag.resample_events > 0 {
            saw_resample = true;
        }
    }
    assert!(saw_resample, "divergent prefixes should collapse ESS at least once in 50 runs");
}

#[test]
fn shortfall_budget_is_an_error_not_a_fallback() {
    let model = toy::t3();
    let backend = InProcessBackend::new(model.clone());
    let grp = group(&model, &["v0", "v1"]);
    let cfg = SisConfig::new(4, 2, 2);
    let err = sis_decode(&backend, "q0", &grp, &cfg, RngState::new(0, 0)).unwrap_err();
    assert!(matches!(err, SisError::Budget(_)));
}

#[test]
fn group_size_must_match_the_configuration() {
    let model = toy::t3();
    let backend = InProcessBackend::new(model.clone());
    let grp = group(&model, &["v0", "v1"]);
    let cfg = SisConfig::new(4, 3, 12);
    let err = sis_decode(&backend, "q0", &grp, &cfg, RngState::new(0, 0)).unwrap_err();
    assert!(matches!(err, SisError::GroupSize { got: 2, want: 3 }));
}
