//! Reverse-mode gradients against central finite differences (h = 1e-3) of
//! the independent f64 reference.

use rand::Rng;
use rand_distr::StandardNormal;
use super::reference::{self as r, Mat};
use tvlab_core::model::ModelConfig;
use tvlab_core::rng::rng_from;
use tvlab_core::tasks::{self, sample_episode, task_by_name};
use tvlab_core::trainer::LossPositions;
use tvlab_core::{GradTape, Tensor, TransformerModel};

const H: f64 = 1e-3;
const OP_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;
/// Denominator floor for elementwise relative error.
const FLOOR: f64 = 1e-3;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut g = rng_from(seed, &[]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| g.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn weighted(out: &Mat, w: &Tensor) -> f64 {
    out.data.iter().zip(w.data()).map(|(a, &b)| a * b as f64).sum()
}

/// Tape loss `sum(w ⊙ out)`.
fn project(tape: &mut GradTape<'_>, out: tvlab_core::Var, w: &Tensor) -> tvlab_core::Var {
    let wv = tape.constant(w.clone());
    let m = tape.mul(out, wv).unwrap();
    tape.sum(m).unwrap()
}

fn assert_close(name: &str, analytic: &Tensor, numeric: &[f64], tol: f64) {
    let err = r::max_rel_err(analytic.data(), numeric, FLOOR);
    assert!(err < tol, "{name}: max relative error {err:e} >= {tol:e}");
}

pub fn matmul_gradients() {
    let a = randn(&[5, 7], 1);
    let b = randn(&[7, 3], 2);
    let w = randn(&[5, 3], 3);
    let mut tape = GradTape::new();
    let (av, bv) = (tape.param(&a), tape.param(&b));
    let c = tape.matmul(av, bv).unwrap();
    let loss = project(&mut tape, c, &w);
    let g = tape.backward(loss).unwrap();
    let fa = r::finite_diff(&f64s(&a), H, |x| weighted(&r::matmul(&Mat::new(5, 7, x.to_vec()), &Mat::from_f32(7, 3, b.data())), &w));
    let fb = r::finite_diff(&f64s(&b), H, |x| weighted(&r::matmul(&Mat::from_f32(5, 7, a.data()), &Mat::new(7, 3, x.to_vec())), &w));
    assert_close("matmul/a", &g.get(av).unwrap(), &fa, OP_TOL);
    assert_close("matmul/b", &g.get(bv).unwrap(), &fb, OP_TOL);

    // d sum(AB) / dA = ones(5,3) B^T
    let mut tape = GradTape::new();
    let (av, bv) = (tape.param(&a), tape.input(&b));
    let c = tape.matmul(av, bv).unwrap();
    let s = tape.sum(c).unwrap();
    let ga = tape.backward(s).unwrap().get(av).unwrap();
    let expected = Tensor::ones(&[5, 3]).matmul(&transpose(&b)).unwrap();
    for (x, y) in ga.data().iter().zip(expected.data()) {
        assert!((x - y).abs() < 1e-5);
    }
}

fn transpose(t: &Tensor) -> Tensor {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}

pub fn softmax_jacobian() {
    for (shape, seed) in [(vec![1, 6], 10), (vec![3, 6], 11)] {
        let x = randn(&shape, seed);
        let w = randn(&shape, seed + 100);
        let mut tape = GradTape::new();
        let xv = tape.param(&x);
        let y = tape.softmax(xv).unwrap();
        let loss = project(&mut tape, y, &w);
        let g = tape.backward(loss).unwrap();
        let f = r::finite_diff(&f64s(&x), H, |v| weighted(&r::softmax_rows(&Mat::new(shape[0], 6, v.to_vec())), &w));
        assert_close("softmax", &g.get(xv).unwrap(), &f, OP_TOL);
    }
}

pub fn layer_norm_gradients() {
    let x = randn(&[4, 8], 20);
    let gain = randn(&[8], 21);
    let bias = randn(&[8], 22);
    let w = randn(&[4, 8], 23);
    let mut tape = GradTape::new();
    let (xv, gv, bv) = (tape.param(&x), tape.param(&gain), tape.param(&bias));
    let y = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
    let loss = project(&mut tape, y, &w);
    let g = tape.backward(loss).unwrap();
    let (gx, gg, gb) = (f64s(&x), f64s(&gain), f64s(&bias));
    let fx = r::finite_diff(&gx, H, |v| weighted(&r::layer_norm(&Mat::new(4, 8, v.to_vec()), &gg, &gb), &w));
    let fg = r::finite_diff(&gg, H, |v| weighted(&r::layer_norm(&Mat::new(4, 8, gx.clone()), v, &gb), &w));
    let fb = r::finite_diff(&gb, H, |v| weighted(&r::layer_norm(&Mat::new(4, 8, gx.clone()), &gg, v), &w));
    assert_close("layer_norm/x", &g.get(xv).unwrap(), &fx, OP_TOL);
    assert_close("layer_norm/gain", &g.get(gv).unwrap(), &fg, OP_TOL);
    assert_close("layer_norm/bias", &g.get(bv).unwrap(), &fb, OP_TOL);
}

pub fn layer_norm_moments_match_f64() {
    let x = randn(&[1, 32], 24);
    let y = x.layer_norm(&Tensor::ones(&[32]), &Tensor::zeros(&[32]), 1e-5).unwrap();
    let yd = f64s(&y);
    let mean = yd.iter().sum::<f64>() / 32.0;
    let var = yd.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
    assert!(mean.abs() < 1e-5);
    assert!((var - 1.0).abs() < 1e-4);
    let reference = r::layer_norm(&Mat::from_f32(1, 32, x.data()), &[1.0; 32], &[0.0; 32]);
    for (a, b) in yd.iter().zip(&reference.data) {
        assert!((a - b).abs() < 1e-5);
    }
}

pub fn gelu_gradient_and_value() {
    let x = randn(&[10], 30);
    let w = randn(&[10], 31);
    let mut tape = GradTape::new();
    let xv = tape.param(&x);
    let y = tape.gelu(xv).unwrap();
    let loss = project(&mut tape, y, &w);
    let g = tape.backward(loss).unwrap();
    let f = r::finite_diff(&f64s(&x), H, |v| v.iter().zip(w.data()).map(|(a, &b)| r::gelu(*a) * b as f64).sum());
    assert_close("gelu", &g.get(xv).unwrap(), &f, OP_TOL);

    let one = Tensor::vector(vec![1.0]).unwrap().gelu().unwrap().data()[0] as f64;
    assert!((one - r::gelu(1.0)).abs() < 1e-6, "{one} vs {}", r::gelu(1.0));
    let xs: Vec<f32> = (-40..=40).map(|i| i as f32 * 0.1).collect();
    let ys = Tensor::vector(xs).unwrap().gelu().unwrap();
    let tail: Vec<f32> = ys.data()[34..].to_vec();
    assert!(tail.windows(2).all(|p| p[1] > p[0]), "gelu increasing on [-0.6, 4]");
}

pub fn cross_entropy_value_and_gradient() {
    let x = randn(&[3, 5], 40);
    let targets = [4, 0, 2];
    let loss32 = x.cross_entropy(&targets).unwrap() as f64;
    let loss64 = r::cross_entropy(&Mat::from_f32(3, 5, x.data()), &targets);
    assert!((loss32 - loss64).abs() < 1e-6);
    let mut tape = GradTape::new();
    let xv = tape.param(&x);
    let loss = tape.cross_entropy(xv, &targets).unwrap();
    let g = tape.backward(loss).unwrap();
    let f = r::finite_diff(&f64s(&x), H, |v| r::cross_entropy(&Mat::new(3, 5, v.to_vec()), &targets));
    assert_close("cross_entropy", &g.get(xv).unwrap(), &f, OP_TOL);
}

pub fn attention_gradients() {
    let qkv = randn(&[7, 12], 50);
    let w = randn(&[7, 4], 51);
    let segments = [0..4, 4..7];
    let mut tape = GradTape::new();
    let v = tape.param(&qkv);
    let y = tape.causal_attention(v, 2, &segments).unwrap();
    let forward: Vec<f64> = f64s(tape.value(y));
    let reference = r::attention(&Mat::from_f32(7, 12, qkv.data()), 2, &[(0, 4), (4, 7)]);
    for (a, b) in forward.iter().zip(&reference.data) {
        assert!((a - b).abs() < 1e-5);
    }
    let loss = project(&mut tape, y, &w);
    let g = tape.backward(loss).unwrap();
    let f = r::finite_diff(&f64s(&qkv), H, |x| weighted(&r::attention(&Mat::new(7, 12, x.to_vec()), 2, &[(0, 4), (4, 7)]), &w));
    assert_close("attention", &g.get(v).unwrap(), &f, OP_TOL);
}

pub fn gather_and_broadcast_gradients() {
    let table = randn(&[5, 3], 60);
    let bias = randn(&[3], 61);
    let w = randn(&[4, 3], 62);
    let ids = [3, 0, 3, 1];
    let mut tape = GradTape::new();
    let (tv, bv) = (tape.param(&table), tape.param(&bias));
    let e = tape.embedding(tv, &ids).unwrap();
    let e = tape.add_row(e, bv).unwrap();
    let e = tape.replace_row(e, 1, &[0.5, 0.5, 0.5]).unwrap();
    let e = tape.gather_rows(e, &[0, 1, 2, 2]).unwrap();
    let e = tape.scale(e, 1.5).unwrap();
    let loss = project(&mut tape, e, &w);
    let g = tape.backward(loss).unwrap();
    let eval = |t: &[f64], b: &[f64]| {
        let mut rows: Vec<Vec<f64>> = ids.iter().map(|&i| (0..3).map(|j| t[i * 3 + j] + b[j]).collect()).collect();
        rows[1] = vec![0.5; 3];
        let picked = [0, 1, 2, 2];
        picked.iter().enumerate().map(|(o, &p)| (0..3).map(|j| 1.5 * rows[p][j] * w.data()[o * 3 + j] as f64).sum::<f64>()).sum::<f64>()
    };
    let (t64, b64) = (f64s(&table), f64s(&bias));
    let ft = r::finite_diff(&t64, H, |x| eval(x, &b64));
    let fb = r::finite_diff(&b64, H, |x| eval(&t64, x));
    assert_close("embedding", &g.get(tv).unwrap(), &ft, OP_TOL);
    assert_close("add_row", &g.get(bv).unwrap(), &fb, OP_TOL);
}

fn small_model() -> TransformerModel {
    let mut m = TransformerModel::init(ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: tasks::VOCAB_SIZE,
        max_seq_len: 32,
        seed: 5,
    })
    .unwrap();
    // Larger weights than the 0.02 init so every path carries signal.
    let mut g = rng_from(77, &[]);
    for p in m.parameters_mut() {
        for v in p.data_mut() {
            *v += 0.3 * g.sample::<f32, _>(StandardNormal);
        }
    }
    m
}

pub fn full_model_gradients() {
    let model = small_model();
    let t = task_by_name("next_symbol").unwrap();
    let l = task_by_name("list_first").unwrap();
    let eps = [sample_episode(&t, 2, 1).unwrap(), sample_episode(&l, 1, 2).unwrap()];
    let seqs: Vec<Vec<usize>> = eps.iter().map(|e| e.prompt().iter().map(|t| t.index()).collect()).collect();
    let targets: Vec<(usize, usize, usize)> = eps
        .iter()
        .enumerate()
        .flat_map(|(b, e)| {
            let p = e.prompt();
            let arrows = tasks::arrow_positions(&p);
            arrows.into_iter().enumerate().map(move |(i, pos)| (b, pos, e.demos.get(i).map_or(e.answer, |d| d.1).index())).collect::<Vec<_>>()
        })
        .collect();
    let (loss32, grads) = tvlab_core::trainer::loss_and_gradients(&model, &eps, LossPositions::AllArrows).unwrap();
    let reference = r::RefModel::from_model(&model);
    let loss64 = reference.loss(&seqs, &targets);
    assert!((loss32 as f64 - loss64).abs() < 1e-4, "{loss32} vs {loss64}");

    let mut worst = (0.0, String::new());
    for (pi, name) in reference.names.clone().iter().enumerate() {
        let mut shadow = reference.clone();
        let f = r::finite_diff(&reference.params[pi], H, |x| {
            shadow.params[pi].copy_from_slice(x);
            shadow.loss(&seqs, &targets)
        });
        let analytic = Tensor::new(vec![f.len()], grads[pi].clone()).unwrap();
        let err = r::max_rel_err(analytic.data(), &f, FLOOR);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    assert!(worst.0 < MODEL_TOL, "worst parameter {} err {:e}", worst.1, worst.0);
}

/// Per-op checks, then the full model.
pub const CHECKS: &[(&str, fn())] = &[
    ("matmul_gradients", matmul_gradients),
    ("softmax_jacobian", softmax_jacobian),
    ("layer_norm_gradients", layer_norm_gradients),
    ("layer_norm_moments_match_f64", layer_norm_moments_match_f64),
    ("gelu_gradient_and_value", gelu_gradient_and_value),
    ("cross_entropy_value_and_gradient", cross_entropy_value_and_gradient),
    ("attention_gradients", attention_gradients),
    ("gather_and_broadcast_gradients", gather_and_broadcast_gradients),
    ("full_model_gradients", full_model_gradients),
];
