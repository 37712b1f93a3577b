//! Exact invariants of the hookable forward pass and the task-vector split.

mod support;

use support::properties::{self, model};
use support::reference::RefModel;
use tvlab_core::hypothesis::{apply_task_vector, extract_task_vector, run_baseline, TaskVector, VectorSource};
use tvlab_core::model::HookedModel;
use tvlab_core::tasks::{self, Token, ARROW};

fn check(name: &str) {
    properties::run(name, 64).unwrap_or_else(|e| panic!("{name}: {e}"));
}

#[test]
fn causality() {
    check("causality");
}

#[test]
fn patch_round_trip() {
    check("patch_round_trip");
}

#[test]
fn placeholder_independence() {
    check("placeholder_independence");
}

#[test]
fn patch_dominance() {
    check("patch_dominance");
}

#[test]
fn forward_matches_f64_reference() {
    let m = model(11);
    let reference = RefModel::from_model(&m);
    let toks = [Token(3), Token(52), Token(40)];
    let trace = m.forward(&toks).unwrap();
    let hidden = reference.hidden(&[toks.iter().map(|t| t.index()).collect()]);
    let logits = reference.logits(hidden.last().unwrap());
    for (a, b) in trace.logits.data().iter().zip(&logits.data) {
        assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
    }
    for (l, h) in hidden.iter().enumerate() {
        for (a, b) in trace.hidden[l].data().iter().zip(&h.data) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }
}

#[test]
fn single_token_logits_use_only_its_path() {
    let m = model(12);
    let a = m.forward(&[Token(5)]).unwrap();
    let b = m.forward(&[Token(5), Token(9)]).unwrap();
    assert_eq!(a.logits.row(0), b.logits.row(0));
    let c = m.forward(&[Token(6)]).unwrap();
    assert_ne!(a.logits.row(0), c.logits.row(0));
}

#[test]
fn distinct_tokens_give_distinct_reads() {
    let m = model(13);
    let tr = m.forward(&[Token(1), Token(2), Token(3)]).unwrap();
    assert_ne!(tr.read_hidden(1, 0).unwrap(), tr.read_hidden(1, 1).unwrap());
}

#[test]
fn baseline_equals_round_trip_application() {
    let m = model(14);
    for x in 0..26u16 {
        let q = [Token(x)];
        let trace = m.forward(&[Token(x), ARROW]).unwrap();
        for layer in 0..=2 {
            let tv = TaskVector {
                theta: trace.read_hidden(layer, 1).unwrap(),
                layer,
                task: "self".into(),
                source: VectorSource { demos: vec![], demos_hash: 0, dummy_query: vec![], seed: 0 },
            };
            assert_eq!(apply_task_vector(&m, &q, &tv).unwrap().0, run_baseline(&m, &q).unwrap());
        }
    }
}

#[test]
fn extraction_at_layer_zero_is_the_arrow_embedding() {
    let m = model(15);
    let t = tasks::task_by_name("next_symbol").unwrap();
    let ep = tasks::sample_episode(&t, 3, 0).unwrap();
    let dummy = vec![Token(((ep.query[0].0 + 13) % 26) as u16)];
    let dummy = if ep.demo_inputs().contains(&dummy.as_slice()) {
        (0..26).map(|i| vec![Token(i)]).find(|c| c != &ep.query && !ep.demo_inputs().contains(&c.as_slice())).unwrap()
    } else {
        dummy
    };
    let tv = extract_task_vector(&m, "next_symbol", &ep.demos, &dummy, 0, 0).unwrap();
    let last = ep.prompt().len() - 1;
    let expected: Vec<f32> = m.tok_emb.row(ARROW.index()).iter().zip(m.pos_emb.row(last)).map(|(a, b)| a + b).collect();
    assert_eq!(tv.theta, expected);
    assert_eq!(tv, extract_task_vector(&m, "next_symbol", &ep.demos, &dummy, 0, 0).unwrap());
    // Dummy queries colliding with a demonstration input are rejected.
    let clash = ep.demos[0].0.clone();
    assert!(extract_task_vector(&m, "next_symbol", &ep.demos, &clash, 1, 0).is_err());
}

#[test]
fn final_layer_vector_decides_prediction_alone() {
    let m = model(16);
    let t = tasks::task_by_name("to_upper").unwrap();
    let ep = tasks::sample_episode(&t, 3, 3).unwrap();
    let dummy = (0..26).map(|i| vec![Token(i)]).find(|c| c != &ep.query && !ep.demo_inputs().contains(&c.as_slice())).unwrap();
    let tv = extract_task_vector(&m, "to_upper", &ep.demos, &dummy, 2, 0).unwrap();
    let lens = m.lens_logits(&tv.theta).unwrap();
    let expected = lens.iter().enumerate().fold(0, |b, (i, v)| if *v > lens[b] { i } else { b });
    for x in 0..26 {
        assert_eq!(apply_task_vector(&m, &[Token(x)], &tv).unwrap().0, Token(expected as u16));
    }
}
