//! Bundled toy instances and a seeded random-model generator.
//!
//! T1 is the two-trace, two-answer instance with forced termination whose
//! numbers appear throughout the test suite. T2 widens it to four traces and
//! three answers, still forced-termination. T3 has answers up to three tokens
//! with continuation probabilities that genuinely vary across traces, so the
//! token-level decoder's local approximation is strictly inexact there.

use rand::Rng;

use crate::model::{TabularModel, ToyModelFile, ToyModelRow};
use crate::rng::RngState;

const T1_JSON: &str = include_str!("../models/t1.json");
const T2_JSON: &str = include_str!("../models/t2.json");
const T3_JSON: &str = include_str!("../models/t3.json");

fn bundled(text: &str, which: &str) -> TabularModel {
    TabularModel::from_json_str(text)
        .unwrap_or_else(|e| panic!("bundled model {which} failed validation: {e}"))
}

pub fn t1() -> TabularModel {
    bundled(T1_JSON, "t1")
}

pub fn t2() -> TabularModel {
    bundled(T2_JSON, "t2")
}

pub fn t3() -> TabularModel {
    bundled(T3_JSON, "t3")
}

/// Bundled model by short name, for CLI `--model t1|t2|t3`.
pub fn builtin(name: &str) -> Option<TabularModel> {
    match name {
        "t1" => Some(t1()),
        "t2" => Some(t2()),
        "t3" => Some(t3()),
        _ => None,
    }
}

/// The raw JSON of a bundled model, for tests that perturb fixtures.
pub fn builtin_json(name: &str) -> Option<&'static str> {
    match name {
        "t1" => Some(T1_JSON),
        "t2" => Some(T2_JSON),
        "t3" => Some(T3_JSON),
        _ => None,
    }
}

/// Generates a small random tabular model, deterministically from `seed`.
///
/// Shape: 2–3 one-token traces followed by the delimiter, answers of up to
/// two tokens before eos, every answer-region probability strictly positive.
/// Positive support under every trace keeps trace-group conditionals well
/// defined, which is what the identity and convergence suites need.
pub fn random_model(seed: u64) -> TabularModel {
    let mut rng = RngState::new(seed, 0).into_rng();
    let n_traces = 2 + (rng.random::<u64>() % 2) as usize;
    let n_answers = 2 + (rng.random::<u64>() % 2) as usize;

    let mut vocab: Vec<String> = (0..n_traces).map(|i| format!("z{i}")).collect();
    vocab.extend((0..n_answers).map(|i| format!("a{i}")));
    vocab.push("think_end".to_string());
    vocab.push("eos".to_string());
    let v = vocab.len();
    let te = v - 2;
    let eos = v - 1;
    let max_len = 5;

    let mut draw_row = |slots: &[usize], lo: f64| -> Vec<f64> {
        let mut probs = vec![0.0; v];
        let mut total = 0.0;
        for &i in slots {
            let x = lo + (1.0 - lo) * rng.random::<f64>();
            probs[i] = x;
            total += x;
        }
        probs.iter_mut().for_each(|p| *p /= total);
        probs
    };

    let trace_slots: Vec<usize> = (0..n_traces).collect();
    let answer_slots: Vec<usize> = (n_traces..n_traces + n_answers).chain([eos]).collect();

    let mut rows = vec![ToyModelRow { prefix: vec![], probs: draw_row(&trace_slots, 0.2) }];
    let mut forced = vec![0.0; v];
    forced[eos] = 1.0;
    let mut forced_te = vec![0.0; v];
    forced_te[te] = 1.0;

    for zi in 0..n_traces {
        let z = vocab[zi].clone();
        rows.push(ToyModelRow { prefix: vec![z.clone()], probs: forced_te.clone() });
        let stem = vec![z, vocab[te].clone()];
        rows.push(ToyModelRow { prefix: stem.clone(), probs: draw_row(&answer_slots, 0.1) });
        for ai in 0..n_answers {
            let mut p1 = stem.clone();
            p1.push(vocab[n_traces + ai].clone());
            rows.push(ToyModelRow { prefix: p1.clone(), probs: draw_row(&answer_slots, 0.1) });
            for aj in 0..n_answers {
                let mut p2 = p1.clone();
                p2.push(vocab[n_traces + aj].clone());
                rows.push(ToyModelRow { prefix: p2, probs: forced.clone() });
            }
        }
    }

    let file = ToyModelFile {
        vocab,
        max_len,
        prompts: [("q0".to_string(), rows)].into_iter().collect(),
        answer_keys: Default::default(),
    };
    TabularModel::from_file(file)
        .unwrap_or_else(|e| panic!("random model (seed {seed}) failed validation: {e}"))
}
