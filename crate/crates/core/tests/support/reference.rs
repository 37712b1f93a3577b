//! Straight-line `f64` reimplementation of the numerics and the transformer,
//! used as an oracle. It shares no code with the tape.

#![allow(dead_code)]

use tvlab_core::TransformerModel;

pub const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        Self::new(rows, cols, data.iter().map(|&v| v as f64).collect())
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for p in 0..a.cols {
                s += a.at(i, p) * b.at(p, j);
            }
            out[i * b.cols + j] = s;
        }
    }
    Mat::new(a.rows, b.cols, out)
}

pub fn add_row(a: &Mat, r: &[f64]) -> Mat {
    let mut out = a.clone();
    for i in 0..a.rows {
        for j in 0..a.cols {
            out.data[i * a.cols + j] += r[j];
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    Mat::new(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    let mut data = Vec::with_capacity(a.data.len());
    for i in 0..a.rows {
        data.extend(softmax(a.row(i)));
    }
    Mat::new(a.rows, a.cols, data)
}

pub fn layer_norm(a: &Mat, g: &[f64], b: &[f64]) -> Mat {
    let mut data = Vec::with_capacity(a.data.len());
    for i in 0..a.rows {
        let r = a.row(i);
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let rstd = 1.0 / (var + EPS).sqrt();
        for j in 0..r.len() {
            data.push((r[j] - mean) * rstd * g[j] + b[j]);
        }
    }
    Mat::new(a.rows, a.cols, data)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn gelu_mat(a: &Mat) -> Mat {
    Mat::new(a.rows, a.cols, a.data.iter().map(|&v| gelu(v)).collect())
}

pub fn cross_entropy(logits: &Mat, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let r = logits.row(i);
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - r[t];
    }
    total / targets.len() as f64
}

/// Multi-head causal attention over `qkv = [q | k | v]`, per segment.
pub fn attention(qkv: &Mat, heads: usize, segments: &[(usize, usize)]) -> Mat {
    let d = qkv.cols / 3;
    let dh = d / heads;
    let mut out = vec![0.0; qkv.rows * d];
    for &(start, end) in segments {
        for h in 0..heads {
            for t in start..end {
                let mut scores = Vec::new();
                for j in start..=t {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += qkv.at(t, h * dh + c) * qkv.at(j, d + h * dh + c);
                    }
                    scores.push(s / (dh as f64).sqrt());
                }
                let p = softmax(&scores);
                for (idx, j) in (start..=t).enumerate() {
                    for c in 0..dh {
                        out[t * d + h * dh + c] += p[idx] * qkv.at(j, 2 * d + h * dh + c);
                    }
                }
            }
        }
    }
    Mat::new(qkv.rows, d, out)
}

/// Model weights converted to `f64`, looked up by parameter name.
#[derive(Clone)]
pub struct RefModel {
    pub n_layers: usize,
    pub heads: usize,
    pub d: usize,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub params: Vec<Vec<f64>>,
}

impl RefModel {
    pub fn from_model(m: &TransformerModel) -> Self {
        let named = m.named_parameters();
        Self {
            n_layers: m.config().n_layers,
            heads: m.config().n_heads,
            d: m.config().d_model,
            names: named.iter().map(|(n, _)| n.clone()).collect(),
            shapes: named.iter().map(|(_, t)| t.shape().to_vec()).collect(),
            params: named.iter().map(|(_, t)| t.data().iter().map(|&v| v as f64).collect()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("{name}"));
        &self.params[i]
    }

    fn mat(&self, name: &str) -> Mat {
        let i = self.names.iter().position(|n| n == name).unwrap();
        let s = &self.shapes[i];
        Mat::new(s[0], s[1], self.params[i].clone())
    }

    /// Residual streams `hidden[0..=n_layers]` for concatenated sequences.
    pub fn hidden(&self, seqs: &[Vec<usize>]) -> Vec<Mat> {
        let d = self.d;
        let tok = self.get("tok_emb");
        let pos = self.get("pos_emb");
        let mut x = Vec::new();
        let mut segments = Vec::new();
        for s in seqs {
            let start = x.len() / d;
            for (p, &id) in s.iter().enumerate() {
                for j in 0..d {
                    x.push(tok[id * d + j] + pos[p * d + j]);
                }
            }
            segments.push((start, start + s.len()));
        }
        let rows = x.len() / d;
        let mut x = Mat::new(rows, d, x);
        let mut out = vec![x.clone()];
        for l in 0..self.n_layers {
            let n = |s: &str| format!("blocks.{l}.{s}");
            let h = layer_norm(&x, self.get(&n("ln1.gain")), self.get(&n("ln1.bias")));
            let qkv = add_row(&matmul(&h, &self.mat(&n("attn.w_qkv"))), self.get(&n("attn.b_qkv")));
            let att = attention(&qkv, self.heads, &segments);
            let att = add_row(&matmul(&att, &self.mat(&n("attn.w_out"))), self.get(&n("attn.b_out")));
            x = add(&x, &att);
            let h = layer_norm(&x, self.get(&n("ln2.gain")), self.get(&n("ln2.bias")));
            let h = gelu_mat(&add_row(&matmul(&h, &self.mat(&n("mlp.w_fc"))), self.get(&n("mlp.b_fc"))));
            let h = add_row(&matmul(&h, &self.mat(&n("mlp.w_proj"))), self.get(&n("mlp.b_proj")));
            x = add(&x, &h);
            out.push(x.clone());
        }
        out
    }

    pub fn logits(&self, x: &Mat) -> Mat {
        let h = layer_norm(x, self.get("ln_f.gain"), self.get("ln_f.bias"));
        matmul(&h, &self.mat("unembed"))
    }

    /// Mean cross-entropy at `(sequence, position, target)` triples.
    pub fn loss(&self, seqs: &[Vec<usize>], targets: &[(usize, usize, usize)]) -> f64 {
        let hidden = self.hidden(seqs);
        let last = hidden.last().unwrap();
        let mut starts = vec![0];
        for s in seqs {
            starts.push(starts.last().unwrap() + s.len());
        }
        let d = self.d;
        let mut picked = Vec::new();
        for &(b, p, _) in targets {
            picked.extend_from_slice(last.row(starts[b] + p));
        }
        let logits = self.logits(&Mat::new(targets.len(), d, picked));
        cross_entropy(&logits, &targets.iter().map(|t| t.2).collect::<Vec<_>>())
    }
}

/// Central difference of `f` at every coordinate of `x`.
pub fn finite_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(analytic: &[f32], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = a as f64;
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
