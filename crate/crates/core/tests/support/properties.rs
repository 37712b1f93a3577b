//! Randomized invariants of the hookable forward pass, runnable at any case count.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::Rng;
use rand_distr::StandardNormal;
use tvlab_core::hypothesis::{apply_task_vector, apply_with_placeholder, TaskVector, VectorSource};
use tvlab_core::model::{HookedModel, ModelConfig, PatchSpec};
use tvlab_core::rng::rng_from;
use tvlab_core::tasks::{self, Token};
use tvlab_core::TransformerModel;

/// 2-layer, d=16 model with weights perturbed well away from the init scale.
pub fn model(seed: u64) -> TransformerModel {
    let mut m = TransformerModel::init(ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: tasks::VOCAB_SIZE,
        max_seq_len: 16,
        seed,
    })
    .unwrap();
    let mut g = rng_from(seed, &[99]);
    for p in m.parameters_mut() {
        for v in p.data_mut() {
            *v += 0.2 * g.sample::<f32, _>(StandardNormal);
        }
    }
    m
}

fn tokens() -> impl Strategy<Value = Vec<Token>> {
    prop::collection::vec((0u16..54).prop_map(Token), 1..12)
}

fn gaussian(seed: u64, n: usize) -> Vec<f32> {
    let mut g = rng_from(seed, &[]);
    (0..n).map(|_| g.sample::<f32, _>(StandardNormal)).collect()
}

pub fn causality(seed: u64, prefix: &[Token], suffix: &[Token]) -> Result<(), TestCaseError> {
    let m = model(seed);
    let short = m.forward(prefix).unwrap();
    let mut long_tokens = prefix.to_vec();
    long_tokens.extend(suffix);
    long_tokens.truncate(16);
    let long = m.forward(&long_tokens).unwrap();
    for t in 0..prefix.len() {
        prop_assert_eq!(short.logits.row(t), long.logits.row(t));
    }
    Ok(())
}

pub fn patch_round_trip(seed: u64, toks: &[Token], layer: usize, pos_frac: f64) -> Result<(), TestCaseError> {
    let m = model(seed);
    let base = m.forward(toks).unwrap();
    let position = ((toks.len() as f64) * pos_frac) as usize;
    let value = base.read_hidden(layer, position).unwrap();
    let patched = m.forward_with_patch(toks, &PatchSpec { layer, position, value }).unwrap();
    prop_assert_eq!(base.logits, patched.logits);
    Ok(())
}

pub fn placeholder_independence(seed: u64, x: u16, other: u16, layer: usize, theta_seed: u64) -> Result<(), TestCaseError> {
    let m = model(seed);
    let tv = TaskVector {
        theta: gaussian(theta_seed, 16),
        layer,
        task: "t".into(),
        source: VectorSource { demos: vec![], demos_hash: 0, dummy_query: vec![], seed: 0 },
    };
    let a = apply_task_vector(&m, &[Token(x)], &tv).unwrap();
    let b = apply_with_placeholder(&m, &[Token(x)], &tv, Token(other)).unwrap();
    prop_assert_eq!(a, b);
    Ok(())
}

/// A patch leaves earlier positions alone and does change what follows it.
pub fn patch_dominance(seed: u64, toks: &[Token], v: u64) -> Result<(), TestCaseError> {
    let m = model(seed);
    let position = toks.len() / 2;
    let a = gaussian(v, 16);
    let b: Vec<f32> = a.iter().map(|x| x + 1.0).collect();
    let base = m.forward(toks).unwrap();
    let ta = m.forward_with_patch(toks, &PatchSpec { layer: 1, position, value: a }).unwrap();
    let tb = m.forward_with_patch(toks, &PatchSpec { layer: 1, position, value: b }).unwrap();
    for t in 0..position {
        prop_assert_eq!(base.logits.row(t), ta.logits.row(t));
    }
    prop_assert_ne!(ta.hidden[2].row(position), tb.hidden[2].row(position));
    Ok(())
}

pub const PROPERTIES: [&str; 4] = ["causality", "patch_round_trip", "placeholder_independence", "patch_dominance"];

/// Runs one named property for `cases` cases from a fixed generator seed.
pub fn run(name: &str, cases: u32) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let outcome = match name {
        "causality" => runner
            .run(&(0u64..4, tokens(), tokens()), |(s, p, q)| causality(s, &p, &q))
            .map_err(|e| e.to_string()),
        "patch_round_trip" => runner
            .run(&(0u64..4, tokens(), 0usize..=2, 0.0f64..1.0), |(s, t, l, f)| patch_round_trip(s, &t, l, f))
            .map_err(|e| e.to_string()),
        "placeholder_independence" => runner
            .run(&(0u64..4, 0u16..26, 0u16..54, 1usize..=2, 0u64..1000), |(s, x, o, l, t)| {
                placeholder_independence(s, x, o, l, t)
            })
            .map_err(|e| e.to_string()),
        "patch_dominance" => runner
            .run(
                &(0u64..4, prop::collection::vec((0u16..54).prop_map(Token), 2..12), 0u64..100),
                |(s, t, v)| patch_dominance(s, &t, v),
            )
            .map_err(|e| e.to_string()),
        other => Err(format!("unknown property {other}")),
    };
    outcome
}
