//! Meta-training on a mixture of tasks: next-token cross-entropy at `→`
//! positions, Adam with cosine decay, seeded batches.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypothesis;
use crate::math;
use crate::model::{Batch, HookedModel, TransformerModel};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng;
use crate::tape::GradTape;
use crate::tasks::{self, arrow_positions, sample_episode, Episode, TaskSpec};

/// Which `→` positions contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPositions {
    /// Only the final `→` (the query).
    Final,
    /// Every `→`, each predicting its demonstration output or the answer.
    AllArrows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureEntry {
    pub task: String,
    pub weight: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Cosine decay ends at `lr * final_lr_fraction`.
    pub final_lr_fraction: f32,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `0` disables it.
    pub grad_clip: f32,
    pub k_min: usize,
    pub k_max: usize,
    pub mixture: Vec<MixtureEntry>,
    pub loss_positions: LossPositions,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_k: usize,
    /// Stop once the mean dev accuracy reaches this value.
    pub early_stop_accuracy: Option<f32>,
    pub seed: u64,
}

/// Uniform over the six algorithmic tasks and `n` training bijections, with
/// `bijection_share` of the total mass on the bijections.
pub fn default_mixture(n_bijections: usize, bijection_share: f32) -> Vec<MixtureEntry> {
    let builtin = tasks::builtin_tasks();
    let alg_w = (1.0 - bijection_share) / builtin.len() as f32;
    let mut out: Vec<MixtureEntry> = builtin
        .into_iter()
        .map(|t| MixtureEntry {
            task: t.name,
            weight: alg_w,
        })
        .collect();
    if n_bijections > 0 {
        let w = bijection_share / n_bijections as f32;
        out.extend(tasks::training_bijections(n_bijections).into_iter().map(|t| MixtureEntry {
            task: t.name,
            weight: w,
        }));
    }
    out
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            lr: 3e-4,
            final_lr_fraction: 0.1,
            warmup_steps: 0,
            grad_clip: 0.0,
            k_min: 2,
            k_max: 6,
            mixture: default_mixture(64, 64.0 / 70.0),
            loss_positions: LossPositions::Final,
            eval_every: 500,
            eval_episodes: 50,
            eval_k: 5,
            early_stop_accuracy: Some(0.9),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return Err(Error::Config(format!(
                "k range [{}, {}] is empty or starts at 0",
                self.k_min, self.k_max
            )));
        }
        if self.mixture.is_empty() || self.mixture.iter().any(|m| !(m.weight >= 0.0)) {
            return Err(Error::Config("mixture must be nonempty with nonnegative weights".into()));
        }
        if self.mixture.iter().map(|m| m.weight).sum::<f32>() <= 0.0 {
            return Err(Error::Config("mixture weights sum to zero".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        for m in &self.mixture {
            let t = tasks::task_by_name(&m.task)?;
            let longest = prompt_len(&t, self.k_max.max(self.eval_k));
            if longest > max_seq_len {
                return Err(Error::Config(format!(
                    "task {} with k={} renders {longest} tokens, above max_seq_len {max_seq_len}",
                    t.name,
                    self.k_max.max(self.eval_k)
                )));
            }
        }
        Ok(())
    }

    pub fn learning_rate(&self, step: usize) -> f32 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f32 / self.warmup_steps as f32;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = (step - self.warmup_steps) as f32 / span as f32;
        let cosine = 0.5 * (1.0 + math::cosf(core::f32::consts::PI * progress.min(1.0)));
        self.lr * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }
}

fn prompt_len(task: &TaskSpec, k: usize) -> usize {
    let span = 2 * task.input_space_len() - 1;
    k * (span + 3) + span + 1
}

impl TaskSpec {
    fn input_space_len(&self) -> usize {
        match self.input_space() {
            tasks::InputSpace::LowerList => tasks::LIST_LEN,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task: String,
    pub accuracy: f64,
    pub n: usize,
}

pub fn mean_accuracy(rows: &[TaskAccuracy]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevPoint {
    pub step: usize,
    pub accuracies: Vec<TaskAccuracy>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_curve: Vec<(usize, f32)>,
    pub dev_curve: Vec<DevPoint>,
    /// Final-position loss on a fixed batch before the first and after the last step.
    pub fixed_batch_loss: Option<(f32, f32)>,
    pub steps_run: usize,
    pub stopped_early: bool,
    /// Filled in by the caller that persists the model.
    pub checkpoint_path: Option<String>,
    /// Filled in by the caller that owns a clock.
    pub wall_clock_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent<'a> {
    Step { step: usize, loss: f32, lr: f32 },
    Dev(&'a DevPoint),
}

/// Episode `index` of the stream `(seed, purpose, task)`; identical for every procedure.
pub fn episode_seed(seed: u64, purpose: &str, task: &str, index: usize) -> u64 {
    rng::derive_seed(seed, &[rng::label(purpose), rng::label(task), index as u64])
}

/// Fraction of `n_episodes` fresh episodes per task where the final-position
/// argmax equals the gold answer.
pub fn evaluate_regular<M: HookedModel + ?Sized>(
    model: &M,
    tasks: &[TaskSpec],
    n_episodes: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<TaskAccuracy>> {
    tasks
        .iter()
        .map(|task| {
            let mut correct = 0;
            for i in 0..n_episodes {
                let ep = sample_episode(task, k, episode_seed(seed, "eval", &task.name, i))?;
                if hypothesis::run_regular(model, &ep.demos, &ep.query)? == ep.answer {
                    correct += 1;
                }
            }
            Ok(TaskAccuracy {
                task: task.name.clone(),
                accuracy: ratio(correct, n_episodes),
                n: n_episodes,
            })
        })
        .collect()
}

pub(crate) fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

struct Sampler {
    tasks: Vec<TaskSpec>,
    cumulative: Vec<f32>,
}

impl Sampler {
    fn new(mixture: &[MixtureEntry]) -> Result<Self> {
        let tasks = mixture
            .iter()
            .map(|m| tasks::task_by_name(&m.task))
            .collect::<Result<Vec<_>>>()?;
        let total: f32 = mixture.iter().map(|m| m.weight).sum();
        let mut acc = 0.0;
        let cumulative = mixture
            .iter()
            .map(|m| {
                acc += m.weight / total;
                acc
            })
            .collect();
        Ok(Self { tasks, cumulative })
    }

    fn episode(&self, cfg: &TrainConfig, stream: &[u64]) -> Result<Episode> {
        let mut r = rng::rng_from(cfg.seed, stream);
        let u: f32 = r.random();
        let idx = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.tasks.len() - 1);
        let k = r.random_range(cfg.k_min..=cfg.k_max);
        sample_episode(&self.tasks[idx], k, r.random())
    }
}

/// Token sequences and `(row within sequence, target)` pairs for one batch.
fn batch_targets(
    episodes: &[Episode],
    positions: LossPositions,
) -> (Vec<Vec<tasks::Token>>, Vec<(usize, usize, usize)>) {
    let mut seqs = Vec::with_capacity(episodes.len());
    let mut targets = Vec::new();
    for (b, ep) in episodes.iter().enumerate() {
        let prompt = ep.prompt();
        let arrows = arrow_positions(&prompt);
        let last = *arrows.last().expect("prompt ends with an arrow");
        match positions {
            LossPositions::Final => targets.push((b, last, ep.answer.index())),
            LossPositions::AllArrows => {
                for (i, &pos) in arrows.iter().enumerate() {
                    let y = ep.demos.get(i).map_or(ep.answer, |d| d.1);
                    targets.push((b, pos, y.index()));
                }
            }
        }
        seqs.push(prompt);
    }
    (seqs, targets)
}

/// Mean cross-entropy and parameter gradients for one batch.
pub(crate) fn loss_and_grads(
    model: &TransformerModel,
    episodes: &[Episode],
    positions: LossPositions,
    with_grads: bool,
) -> Result<(f32, Option<Vec<Vec<f32>>>)> {
    let (seqs, targets) = batch_targets(episodes, positions);
    let refs: Vec<&[tasks::Token]> = seqs.iter().map(Vec::as_slice).collect();
    let batch = Batch::new(&refs);
    let mut tape = GradTape::new();
    let pv = model.register(&mut tape, with_grads);
    let hidden = model.build_hidden(&mut tape, &pv, &batch, &[], &[])?;
    let rows: Vec<usize> = targets
        .iter()
        .map(|&(b, pos, _)| batch.segments[b].start + pos)
        .collect();
    let ys: Vec<usize> = targets.iter().map(|t| t.2).collect();
    let last = *hidden.last().expect("n_layers + 1");
    let picked = tape.gather_rows(last, &rows)?;
    let logits = model.build_logits(&mut tape, &pv, picked)?;
    let loss = tape.cross_entropy(logits, &ys)?;
    let value = tape.value(loss).data()[0];
    if !with_grads {
        return Ok((value, None));
    }
    let mut grads = tape.backward(loss)?;
    let out = pv
        .all
        .iter()
        .zip(model.parameters())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| alloc::vec![0.0; p.numel()]))
        .collect();
    Ok((value, Some(out)))
}

/// Mean loss over `episodes` and its gradients in parameter order.
pub fn loss_and_gradients(
    model: &TransformerModel,
    episodes: &[Episode],
    positions: LossPositions,
) -> Result<(f32, Vec<Vec<f32>>)> {
    let (loss, grads) = loss_and_grads(model, episodes, positions, true)?;
    Ok((loss, grads.expect("requested")))
}

fn dev_tasks(sampler: &Sampler) -> Vec<TaskSpec> {
    let mut out: Vec<TaskSpec> = sampler
        .tasks
        .iter()
        .filter(|t| t.category == tasks::Category::Algorithmic)
        .cloned()
        .collect();
    out.extend(
        sampler
            .tasks
            .iter()
            .filter(|t| t.category == tasks::Category::Bijection)
            .take(2)
            .cloned(),
    );
    out
}

/// Meta-trains `model` in place. Deterministic given the model and `cfg`.
pub fn train(
    mut model: TransformerModel,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<(TransformerModel, TrainReport)> {
    cfg.validate(model.config().max_seq_len)?;
    let sampler = Sampler::new(&cfg.mixture)?;
    let mut report = TrainReport {
        loss_curve: Vec::new(),
        dev_curve: Vec::new(),
        fixed_batch_loss: None,
        steps_run: 0,
        stopped_early: false,
        checkpoint_path: None,
        wall_clock_seconds: None,
    };
    if cfg.steps == 0 {
        return Ok((model, report));
    }
    let fixed: Vec<Episode> = (0..cfg.batch_size)
        .map(|b| sampler.episode(cfg, &[rng::label("fixed"), b as u64]))
        .collect::<Result<_>>()?;
    let initial_fixed = loss_and_grads(&model, &fixed, LossPositions::Final, false)?.0;
    let dev = dev_tasks(&sampler);
    let sizes: Vec<usize> = model.parameters().iter().map(|p| p.numel()).collect();
    let mut adam = AdamState::new(sizes);

    for step in 0..cfg.steps {
        let episodes: Vec<Episode> = (0..cfg.batch_size)
            .map(|b| sampler.episode(cfg, &[rng::label("train"), step as u64, b as u64]))
            .collect::<Result<_>>()?;
        let (loss, grads) = match loss_and_grads(&model, &episodes, cfg.loss_positions, true) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let mut grads = grads.expect("requested");
        if cfg.grad_clip > 0.0 {
            let norm = math::sqrtf(grads.iter().flatten().map(|g| g * g).sum::<f32>());
            if !norm.is_finite() {
                return Err(Error::Diverged { step });
            }
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                grads.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let lr = cfg.learning_rate(step);
        {
            let mut params: Vec<&mut [f32]> =
                model.parameters_mut().into_iter().map(|t| t.data_mut()).collect();
            let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            adam_step(&mut params, &grad_refs, &mut adam, lr, AdamConfig::default())?;
        }
        report.loss_curve.push((step, loss));
        report.steps_run = step + 1;
        observer(TrainEvent::Step { step, loss, lr });

        let last = step + 1 == cfg.steps;
        if cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || last) {
            let accuracies =
                evaluate_regular(&model, &dev, cfg.eval_episodes, cfg.eval_k, rng::derive_seed(cfg.seed, &[rng::label("dev")]))?;
            let point = DevPoint {
                step: step + 1,
                mean: mean_accuracy(&accuracies),
                accuracies,
            };
            observer(TrainEvent::Dev(&point));
            let stop = cfg.early_stop_accuracy.is_some_and(|t| point.mean >= f64::from(t));
            report.dev_curve.push(point);
            if stop && !last {
                report.stopped_early = true;
                break;
            }
        }
    }
    let final_fixed = loss_and_grads(&model, &fixed, LossPositions::Final, false)?.0;
    report.fixed_batch_loss = Some((initial_fixed, final_fixed));
    Ok((model, report))
}
