//! Splitting in-context learning into a learner and a rule application.
//!
//! The learner runs the first `L` layers on the demonstrations plus a dummy
//! query and keeps the residual vector at the final `→` (the task vector).
//! The rule application runs the model on `[x, →]` alone, with the task
//! vector patched in at layer `L` of the `→` position.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionKnockout, HookedModel, Interventions, PatchSpec};
use crate::rng::{self, ChaCha8Rng};
use crate::tasks::{render_input, render_prompt, sample_episode, Episode, TaskSpec, Token, ARROW};
use crate::trainer::{episode_seed, mean_accuracy, ratio, TaskAccuracy};

/// Where a task vector came from; replaying the extraction on the same model
/// reproduces `theta` exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorSource {
    pub demos: Vec<(Vec<Token>, Token)>,
    pub demos_hash: u64,
    pub dummy_query: Vec<Token>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVector {
    pub theta: Vec<f32>,
    pub layer: usize,
    pub task: String,
    pub source: VectorSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Procedure {
    Regular,
    Hypothesis,
    Baseline,
}

impl Procedure {
    pub fn name(self) -> &'static str {
        match self {
            Self::Regular => "regular",
            Self::Hypothesis => "hypothesis",
            Self::Baseline => "baseline",
        }
    }
}

/// How the learner's output is isolated from the real query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    /// Replace the query by a dummy query.
    #[default]
    DummyQuery,
    /// Keep the real query but block the final `→` from attending to it in
    /// the first `L` layers.
    BlockQueryAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureResult {
    pub procedure: Procedure,
    pub accuracies: Vec<TaskAccuracy>,
    pub n_episodes: usize,
    pub layer: Option<usize>,
}

impl ProcedureResult {
    pub fn mean(&self) -> f64 {
        mean_accuracy(&self.accuracies)
    }

    pub fn accuracy(&self, task: &str) -> Option<f64> {
        self.accuracies.iter().find(|a| a.task == task).map(|a| a.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub mean: f64,
    pub accuracies: Vec<TaskAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweepReport {
    pub rows: Vec<SweepRow>,
    pub best_layer: usize,
    pub n_episodes: usize,
}

impl LayerSweepReport {
    /// Whether the best layer lies strictly between the first and last swept layer.
    pub fn peak_is_interior(&self) -> bool {
        match (self.rows.first(), self.rows.last()) {
            (Some(first), Some(last)) => self.best_layer > first.layer && self.best_layer < last.layer,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub task_a: String,
    pub task_b: String,
    pub layer: usize,
    pub n_episodes: usize,
    pub regular_on_a: f64,
    pub conflicting_on_a: f64,
    pub conflicting_on_b: f64,
}

/// FNV-1a over the rendered demonstrations.
pub fn demos_hash(demos: &[(Vec<Token>, Token)]) -> u64 {
    render_prompt(demos, &[]).iter().fold(0xcbf2_9ce4_8422_2325u64, |h, t| {
        (h ^ u64::from(t.0)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn check_layer<M: HookedModel + ?Sized>(model: &M, layer: usize) -> Result<()> {
    let n = model.config().n_layers;
    if layer > n {
        return Err(Error::Index {
            what: "layer",
            index: layer,
            limit: n + 1,
        });
    }
    Ok(())
}

/// Task vector from `demos` and a dummy query at layer `layer`. The real query
/// is not an argument, so the result cannot depend on it.
pub fn extract_task_vector<M: HookedModel + ?Sized>(
    model: &M,
    task: &str,
    demos: &[(Vec<Token>, Token)],
    dummy_query: &[Token],
    layer: usize,
    seed: u64,
) -> Result<TaskVector> {
    check_layer(model, layer)?;
    if demos.iter().any(|(x, _)| x.as_slice() == dummy_query) {
        return Err(Error::Contract(
            "dummy query collides with a demonstration input".into(),
        ));
    }
    let prompt = render_prompt(demos, dummy_query);
    let trace = model.forward(&prompt)?;
    Ok(TaskVector {
        theta: trace.read_hidden(layer, prompt.len() - 1)?,
        layer,
        task: task.into(),
        source: VectorSource {
            demos: demos.to_vec(),
            demos_hash: demos_hash(demos),
            dummy_query: dummy_query.to_vec(),
            seed,
        },
    })
}

/// Task vectors at every layer `0..=n_layers` from a single forward pass.
pub fn extract_all_layers<M: HookedModel + ?Sized>(
    model: &M,
    task: &str,
    demos: &[(Vec<Token>, Token)],
    dummy_query: &[Token],
    seed: u64,
) -> Result<Vec<TaskVector>> {
    let base = extract_task_vector(model, task, demos, dummy_query, 0, seed)?;
    let prompt = render_prompt(demos, dummy_query);
    let trace = model.forward(&prompt)?;
    (0..=model.config().n_layers)
        .map(|layer| {
            Ok(TaskVector {
                theta: trace.read_hidden(layer, prompt.len() - 1)?,
                layer,
                ..base.clone()
            })
        })
        .collect()
}

/// Alternative learner: the real query stays in the prompt, but the final `→`
/// cannot attend to it in blocks `1..=layer`.
pub fn extract_task_vector_blocked<M: HookedModel + ?Sized>(
    model: &M,
    task: &str,
    demos: &[(Vec<Token>, Token)],
    query: &[Token],
    layer: usize,
    seed: u64,
) -> Result<TaskVector> {
    check_layer(model, layer)?;
    let prompt = render_prompt(demos, query);
    let last = prompt.len() - 1;
    let span = render_input(query).len();
    let knockouts = (last - span..last)
        .map(|key| AttentionKnockout {
            through_layer: layer,
            query: last,
            key,
        })
        .collect();
    let trace = model.run(
        &prompt,
        &Interventions {
            knockouts,
            ..Interventions::default()
        },
    )?;
    Ok(TaskVector {
        theta: trace.read_hidden(layer, last)?,
        layer,
        task: task.into(),
        source: VectorSource {
            demos: demos.to_vec(),
            demos_hash: demos_hash(demos),
            dummy_query: Vec::new(),
            seed,
        },
    })
}

/// The rule application on `[x, placeholder]` with `tv` patched at the last position.
pub fn apply_with_placeholder<M: HookedModel + ?Sized>(
    model: &M,
    query: &[Token],
    tv: &TaskVector,
    placeholder: Token,
) -> Result<(Token, Vec<f32>)> {
    check_layer(model, tv.layer)?;
    let mut input = render_input(query);
    input.push(placeholder);
    let patch = PatchSpec {
        layer: tv.layer,
        position: input.len() - 1,
        value: tv.theta.clone(),
    };
    let trace = model.forward_with_patch(&input, &patch)?;
    Ok((trace.prediction(), trace.final_logits().to_vec()))
}

/// Prediction and final logits of the model on `[x, →]` with `tv` patched in.
pub fn apply_task_vector<M: HookedModel + ?Sized>(
    model: &M,
    query: &[Token],
    tv: &TaskVector,
) -> Result<(Token, Vec<f32>)> {
    apply_with_placeholder(model, query, tv, ARROW)
}

/// Ordinary in-context prediction on `[S, x, →]`.
pub fn run_regular<M: HookedModel + ?Sized>(
    model: &M,
    demos: &[(Vec<Token>, Token)],
    query: &[Token],
) -> Result<Token> {
    Ok(model.forward(&render_prompt(demos, query))?.prediction())
}

/// Prediction on `[x, →]` without demonstrations.
pub fn run_baseline<M: HookedModel + ?Sized>(model: &M, query: &[Token]) -> Result<Token> {
    run_regular(model, &[], query)
}

/// Demonstrations for task A, query `x`, and task B's vector patched over the
/// final `→` at `tv_b.layer`.
pub fn run_conflicting<M: HookedModel + ?Sized>(
    model: &M,
    demos_a: &[(Vec<Token>, Token)],
    tv_b: &TaskVector,
    query: &[Token],
) -> Result<Token> {
    check_layer(model, tv_b.layer)?;
    let prompt = render_prompt(demos_a, query);
    let patch = PatchSpec {
        layer: tv_b.layer,
        position: prompt.len() - 1,
        value: tv_b.theta.clone(),
    };
    Ok(model.forward_with_patch(&prompt, &patch)?.prediction())
}

/// Dummy query drawn uniformly from the task's inputs, excluding the
/// demonstration inputs and the real query.
pub fn sample_dummy_query(task: &TaskSpec, episode: &Episode, rng: &mut ChaCha8Rng) -> Result<Vec<Token>> {
    let mut exclude = episode.demo_inputs();
    exclude.push(&episode.query);
    let space = task.input_space();
    space
        .sample_distinct(1, &exclude, rng)
        .and_then(|mut v| v.pop())
        .ok_or_else(|| Error::Capacity {
            task: task.name.clone(),
            needed: exclude.len() + 1,
            available: space.capacity(),
        })
}

fn dummy_rng(seed: u64, purpose: &str, task: &str, index: usize) -> ChaCha8Rng {
    rng::rng_from(seed, &[rng::label("dummy"), rng::label(purpose), rng::label(task), index as u64])
}

/// One evaluation episode with its dummy query.
pub fn hypothesis_trial<M: HookedModel + ?Sized>(
    model: &M,
    task: &TaskSpec,
    episode: &Episode,
    layer: usize,
    mode: ExtractionMode,
    dummy_seed: &mut ChaCha8Rng,
) -> Result<Token> {
    let tv = match mode {
        ExtractionMode::DummyQuery => {
            let dummy = sample_dummy_query(task, episode, dummy_seed)?;
            extract_task_vector(model, &task.name, &episode.demos, &dummy, layer, episode.seed)?
        }
        ExtractionMode::BlockQueryAttention => extract_task_vector_blocked(
            model,
            &task.name,
            &episode.demos,
            &episode.query,
            layer,
            episode.seed,
        )?,
    };
    Ok(apply_task_vector(model, &episode.query, &tv)?.0)
}

/// Hypothesis accuracy at every layer in `layers`, each episode drawing fresh
/// `S`, `x` and `x'`; the best layer is the argmax of the task-mean, ties to
/// the smallest layer.
pub fn layer_sweep<M: HookedModel + ?Sized>(
    model: &M,
    tasks: &[TaskSpec],
    n_episodes: usize,
    k: usize,
    layers: core::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<LayerSweepReport> {
    check_layer(model, *layers.end())?;
    let layers: Vec<usize> = layers.collect();
    if layers.is_empty() {
        return Err(Error::Contract("empty layer range".into()));
    }
    let mut correct = vec![vec![0usize; tasks.len()]; layers.len()];
    for (ti, task) in tasks.iter().enumerate() {
        for i in 0..n_episodes {
            let ep = sample_episode(task, k, episode_seed(seed, "sweep", &task.name, i))?;
            let dummy = sample_dummy_query(task, &ep, &mut dummy_rng(seed, "sweep", &task.name, i))?;
            let tvs = extract_all_layers(model, &task.name, &ep.demos, &dummy, ep.seed)?;
            for (li, &layer) in layers.iter().enumerate() {
                if apply_task_vector(model, &ep.query, &tvs[layer])?.0 == ep.answer {
                    correct[li][ti] += 1;
                }
            }
        }
    }
    let rows: Vec<SweepRow> = layers
        .iter()
        .zip(&correct)
        .map(|(&layer, counts)| {
            let accuracies: Vec<TaskAccuracy> = tasks
                .iter()
                .zip(counts)
                .map(|(t, &c)| TaskAccuracy {
                    task: t.name.clone(),
                    accuracy: ratio(c, n_episodes),
                    n: n_episodes,
                })
                .collect();
            SweepRow {
                layer,
                mean: mean_accuracy(&accuracies),
                accuracies,
            }
        })
        .collect();
    let mut best = &rows[0];
    for row in &rows[1..] {
        if row.mean > best.mean {
            best = row;
        }
    }
    Ok(LayerSweepReport {
        best_layer: best.layer,
        rows,
        n_episodes,
    })
}

/// Regular, Hypothesis and Baseline over identical `(S, x)` draws.
pub fn evaluate_procedures<M: HookedModel + ?Sized>(
    model: &M,
    tasks: &[TaskSpec],
    layer: usize,
    n_episodes: usize,
    k: usize,
    seed: u64,
    mode: ExtractionMode,
) -> Result<[ProcedureResult; 3]> {
    check_layer(model, layer)?;
    let mut counts = [vec![0usize; tasks.len()], vec![0; tasks.len()], vec![0; tasks.len()]];
    for (ti, task) in tasks.iter().enumerate() {
        for i in 0..n_episodes {
            let ep = sample_episode(task, k, episode_seed(seed, "eval", &task.name, i))?;
            let mut drng = dummy_rng(seed, "eval", &task.name, i);
            let preds = [
                run_regular(model, &ep.demos, &ep.query)?,
                hypothesis_trial(model, task, &ep, layer, mode, &mut drng)?,
                run_baseline(model, &ep.query)?,
            ];
            for (c, p) in counts.iter_mut().zip(preds) {
                if p == ep.answer {
                    c[ti] += 1;
                }
            }
        }
    }
    let procs = [Procedure::Regular, Procedure::Hypothesis, Procedure::Baseline];
    Ok(core::array::from_fn(|p| ProcedureResult {
        procedure: procs[p],
        accuracies: tasks
            .iter()
            .zip(&counts[p])
            .map(|(t, &c)| TaskAccuracy {
                task: t.name.clone(),
                accuracy: ratio(c, n_episodes),
                n: n_episodes,
            })
            .collect(),
        n_episodes,
        layer: (procs[p] == Procedure::Hypothesis).then_some(layer),
    }))
}

/// Demonstrations of `task_a` with `task_b`'s vector (from its own
/// demonstrations and dummy query) injected at `layer`.
pub fn evaluate_conflict<M: HookedModel + ?Sized>(
    model: &M,
    task_a: &TaskSpec,
    task_b: &TaskSpec,
    layer: usize,
    n_episodes: usize,
    k: usize,
    seed: u64,
) -> Result<ConflictReport> {
    if task_a.input_space() != task_b.input_space() {
        return Err(Error::Contract(format!(
            "tasks {} and {} do not share an input space",
            task_a.name, task_b.name
        )));
    }
    check_layer(model, layer)?;
    let pair = format!("{}|{}", task_a.name, task_b.name);
    let (mut reg_a, mut conf_a, mut conf_b) = (0, 0, 0);
    for i in 0..n_episodes {
        let ep_a = sample_episode(task_a, k, episode_seed(seed, "conflict_a", &pair, i))?;
        let ep_b = sample_episode(task_b, k, episode_seed(seed, "conflict_b", &pair, i))?;
        let probe = Episode {
            query: ep_a.query.clone(),
            ..ep_b.clone()
        };
        let dummy = sample_dummy_query(task_b, &probe, &mut dummy_rng(seed, "conflict", &pair, i))?;
        let tv_b = extract_task_vector(model, &task_b.name, &ep_b.demos, &dummy, layer, ep_b.seed)?;
        if run_regular(model, &ep_a.demos, &ep_a.query)? == ep_a.answer {
            reg_a += 1;
        }
        let pred = run_conflicting(model, &ep_a.demos, &tv_b, &ep_a.query)?;
        if pred == ep_a.answer {
            conf_a += 1;
        }
        if pred == task_b.apply(&ep_a.query)? {
            conf_b += 1;
        }
    }
    Ok(ConflictReport {
        task_a: task_a.name.clone(),
        task_b: task_b.name.clone(),
        layer,
        n_episodes,
        regular_on_a: ratio(reg_a, n_episodes),
        conflicting_on_a: ratio(conf_a, n_episodes),
        conflicting_on_b: ratio(conf_b, n_episodes),
    })
}

/// The conflict pairs used by default: each pair shares an input space.
pub fn default_conflict_pairs() -> Vec<(String, String)> {
    [
        ("next_symbol", "to_upper"),
        ("list_last", "list_first"),
        ("next_symbol", "prev_symbol"),
    ]
    .iter()
    .map(|(a, b)| (String::from(*a), String::from(*b)))
    .collect()
}
