//! Geometry and vocabulary projection of task vectors: within/between-task
//! distances, a 2-D principal-component projection, and the logit lens.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypothesis::{extract_task_vector, sample_dummy_query, TaskVector};
use crate::math;
use crate::model::{HookedModel, TransformerModel};
use crate::rng;
use crate::tape::GradTape;
use crate::tasks::{sample_episode, TaskSpec, Token, Vocab};
use crate::tensor::{Tensor, LAYER_NORM_EPS};
use crate::trainer::episode_seed;

/// Task vectors from a single layer, grouped by task in first-seen order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorSet {
    pub layer: usize,
    pub vectors: Vec<TaskVector>,
}

impl VectorSet {
    pub fn new(vectors: Vec<TaskVector>) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::Contract("empty vector set".into()))?;
        let (layer, d) = (first.layer, first.theta.len());
        if vectors.iter().any(|v| v.layer != layer || v.theta.len() != d) {
            return Err(Error::Contract(
                "task vectors must share layer and width".into(),
            ));
        }
        Ok(Self { layer, vectors })
    }

    /// `(task, indices into vectors)` in first-seen order.
    pub fn groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, v) in self.vectors.iter().enumerate() {
            match out.iter_mut().find(|(t, _)| *t == v.task) {
                Some((_, idx)) => idx.push(i),
                None => out.push((v.task.clone(), vec![i])),
            }
        }
        out
    }
}

/// `n_per_task` vectors per task, each from its own `(S, x')` draw.
pub fn collect_task_vectors<M: HookedModel + ?Sized>(
    model: &M,
    tasks: &[TaskSpec],
    n_per_task: usize,
    layer: usize,
    k: usize,
    seed: u64,
) -> Result<VectorSet> {
    let mut vectors = Vec::with_capacity(tasks.len() * n_per_task);
    for task in tasks {
        for i in 0..n_per_task {
            let ep = sample_episode(task, k, episode_seed(seed, "geometry", &task.name, i))?;
            let mut r = rng::rng_from(seed, &[rng::label("geometry_dummy"), rng::label(&task.name), i as u64]);
            let dummy = sample_dummy_query(task, &ep, &mut r)?;
            vectors.push(extract_task_vector(model, &task.name, &ep.demos, &dummy, layer, ep.seed)?);
        }
    }
    VectorSet::new(vectors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CosineDistance,
    Euclidean,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::CosineDistance => "cosine",
            Self::Euclidean => "euclidean",
        }
    }

    pub fn distance(self, a: &[f32], b: &[f32]) -> f64 {
        match self {
            Self::Euclidean => math::sqrt(
                a.iter()
                    .zip(b)
                    .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
                    .sum(),
            ),
            Self::CosineDistance => {
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for (&x, &y) in a.iter().zip(b) {
                    let (x, y) = (f64::from(x), f64::from(y));
                    ab += x * y;
                    aa += x * x;
                    bb += y * y;
                }
                if aa == 0.0 || bb == 0.0 {
                    return 1.0;
                }
                (1.0 - ab / (math::sqrt(aa) * math::sqrt(bb))).max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDistances {
    pub task: String,
    /// All unordered pairs within the task: `n (n - 1) / 2` samples.
    pub within: Vec<f64>,
    /// All pairs with one vector here and one in another task.
    pub between: Vec<f64>,
    pub within_mean: f64,
    pub between_mean: f64,
    /// `between_mean - within_mean`
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub metric: Metric,
    pub layer: usize,
    pub tasks: Vec<TaskDistances>,
}

impl DistanceReport {
    /// Fraction of tasks whose mean within-task distance is below the mean between-task distance.
    pub fn separated_fraction(&self) -> f64 {
        let n = self.tasks.iter().filter(|t| t.within_mean < t.between_mean).count();
        n as f64 / self.tasks.len().max(1) as f64
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn distance_stats(vs: &VectorSet, metric: Metric) -> Result<DistanceReport> {
    let groups = vs.groups();
    if let Some((task, idx)) = groups.iter().find(|(_, idx)| idx.len() < 2) {
        return Err(Error::Contract(format!(
            "task {task} has {} vector(s); at least 2 are needed",
            idx.len()
        )));
    }
    let n = vs.vectors.len();
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = metric.distance(&vs.vectors[i].theta, &vs.vectors[j].theta);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let tasks = groups
        .iter()
        .map(|(task, idx)| {
            let mut within = Vec::new();
            for (a, &i) in idx.iter().enumerate() {
                for &j in &idx[a + 1..] {
                    within.push(dist[i * n + j]);
                }
            }
            let mut between = Vec::new();
            for &i in idx {
                for (j, v) in vs.vectors.iter().enumerate() {
                    if v.task != *task {
                        between.push(dist[i * n + j]);
                    }
                }
            }
            let (wm, bm) = (mean(&within), mean(&between));
            TaskDistances {
                task: task.clone(),
                within,
                between,
                within_mean: wm,
                between_mean: bm,
                margin: bm - wm,
            }
        })
        .collect();
    Ok(DistanceReport {
        metric,
        layer: vs.layer,
        tasks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub task: String,
    /// Index of the vector within its task.
    pub index: usize,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub points: Vec<ProjectedPoint>,
    /// Fraction of total variance carried by each of the two components.
    pub explained_variance: [f64; 2],
    pub components: [Vec<f64>; 2],
}

/// Projection onto the top two principal components of the mean-centred set.
/// Each component is signed so that its largest-magnitude loading is positive.
pub fn project_2d(vs: &VectorSet) -> Result<Projection> {
    let n = vs.vectors.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("need at least 3 vectors, got {n}")));
    }
    let d = vs.vectors[0].theta.len();
    let mut centre = vec![0.0f64; d];
    for v in &vs.vectors {
        for (c, &x) in centre.iter_mut().zip(&v.theta) {
            *c += f64::from(x);
        }
    }
    centre.iter_mut().for_each(|c| *c /= n as f64);
    let centred: Vec<Vec<f64>> = vs
        .vectors
        .iter()
        .map(|v| v.theta.iter().zip(&centre).map(|(&x, c)| f64::from(x) - c).collect())
        .collect();
    let mut cov = vec![0.0f64; d * d];
    for row in &centred {
        for i in 0..d {
            if row[i] == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all vectors are identical".into()));
    }
    let (values, vectors) = symmetric_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let components: [Vec<f64>; 2] = core::array::from_fn(|c| {
        let col = order[c];
        let mut v: Vec<f64> = (0..d).map(|r| vectors[r * d + col]).collect();
        let mut pivot = 0;
        for (i, x) in v.iter().enumerate() {
            if x.abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    });
    let explained = [values[order[0]].max(0.0) / total, values[order[1]].max(0.0) / total];
    let mut counters: Vec<(String, usize)> = Vec::new();
    let points = vs
        .vectors
        .iter()
        .zip(&centred)
        .map(|(v, row)| {
            let index = match counters.iter_mut().find(|(t, _)| *t == v.task) {
                Some((_, c)) => {
                    *c += 1;
                    *c - 1
                }
                None => {
                    counters.push((v.task.clone(), 1));
                    0
                }
            };
            let proj = |comp: &[f64]| comp.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            ProjectedPoint {
                task: v.task.clone(),
                index,
                x: proj(&components[0]),
                y: proj(&components[1]),
            }
        })
        .collect();
    Ok(Projection {
        points,
        explained_variance: explained,
        components,
    })
}

/// Cyclic Jacobi eigensolver for a symmetric row-major `n x n` matrix.
/// Returns eigenvalues and the row-major matrix whose columns are eigenvectors.
pub(crate) fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + math::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensToken {
    pub token: Token,
    pub name: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensEntry {
    pub task: String,
    pub layer: usize,
    pub top: Vec<LensToken>,
    /// Sum of the full distribution.
    pub total_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensReport {
    pub entries: Vec<LensEntry>,
}

/// Full vocabulary distribution induced by a residual vector: softmax of the
/// unembedded final-layer-norm output, computed in `f64`.
pub fn lens_distribution(model: &TransformerModel, hidden: &[f32]) -> Result<Vec<f64>> {
    let logits = model.lens_logits(hidden)?;
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&l| libm::exp(f64::from(l - max))).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Top-`k` tokens of the distribution induced by `tv.theta`, ties broken by token id.
pub fn logit_lens(model: &TransformerModel, tv: &TaskVector, k: usize) -> Result<LensEntry> {
    let vocab = model.config().vocab_size;
    if k > vocab {
        return Err(Error::Index {
            what: "lens top-k",
            index: k,
            limit: vocab + 1,
        });
    }
    let dist = lens_distribution(model, &tv.theta)?;
    let mut order: Vec<usize> = (0..vocab).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    Ok(LensEntry {
        task: tv.task.clone(),
        layer: tv.layer,
        top: order[..k]
            .iter()
            .map(|&i| LensToken {
                token: Token(i as u16),
                name: Vocab.name(Token(i as u16)),
                probability: dist[i],
            })
            .collect(),
        total_probability: dist.iter().sum(),
    })
}

/// Gradient ascent on `log p(token)` under the lens, starting from zero.
/// Produces a residual vector whose lens top-1 is `token`.
pub fn construct_lens_direction(
    model: &TransformerModel,
    token: Token,
    steps: usize,
    lr: f32,
) -> Result<Vec<f32>> {
    let d = model.config().d_model;
    if token.index() >= model.config().vocab_size {
        return Err(Error::Index {
            what: "token",
            index: token.index(),
            limit: model.config().vocab_size,
        });
    }
    let mut theta = vec![0.0f32; d];
    // LN has no gradient at a constant input; start from the token's unembedding column.
    for (j, t) in theta.iter_mut().enumerate() {
        *t = model.unembed.data()[j * model.config().vocab_size + token.index()];
    }
    for _ in 0..steps {
        let x = Tensor::new(vec![1, d], theta.clone())?;
        let mut tape = GradTape::new().with_finite_checks(true);
        let xv = tape.param(&x);
        let g = tape.input(&model.ln_f_gain);
        let b = tape.input(&model.ln_f_bias);
        let u = tape.input(&model.unembed);
        let h = tape.layer_norm(xv, g, b, LAYER_NORM_EPS)?;
        let logits = tape.matmul(h, u)?;
        let loss = tape.cross_entropy(logits, &[token.index()])?;
        let grads = tape.backward(loss)?;
        let gx = grads.get_slice(xv).expect("tracked");
        for (t, g) in theta.iter_mut().zip(gx) {
            *t -= lr * g;
        }
    }
    Ok(theta)
}
