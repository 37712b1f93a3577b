//! One function per subcommand. Each computes its report, writes the
//! artifacts into a fresh run directory and finishes with the manifest.

use std::path::{Path, PathBuf};

use serde::Serialize;
use tvlab_core::analysis::{self, DistanceReport, LensEntry, Metric, VectorSet};
use tvlab_core::hypothesis::{self, ConflictReport, LayerSweepReport, ProcedureResult};
use tvlab_core::trainer::{self, TrainEvent, TrainReport};
use tvlab_core::TransformerModel;

use crate::checkpoint;
use crate::config::LabConfig;
use crate::error::{LabError, Result};
use crate::run::RunDir;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn layer_of(cfg: &LabConfig, model: &TransformerModel) -> Result<usize> {
    let layer = cfg
        .eval
        .layer
        .ok_or_else(|| LabError::config("eval.layer", "required; pass --layer"))?;
    let n = model.config().n_layers;
    if layer > n {
        return Err(LabError::config("eval.layer", format!("{layer} exceeds the model's {n} layers")));
    }
    Ok(layer)
}

/// Loads the checkpoint and checks the layer before anything is created on disk.
fn open_run(
    cfg: &LabConfig,
    checkpoint: &Path,
    out: &Path,
    command: &str,
    needs_layer: bool,
) -> Result<(RunDir, TransformerModel)> {
    let bytes = std::fs::read(checkpoint).map_err(|e| LabError::io(checkpoint, e))?;
    let model = checkpoint::decode_model(checkpoint, &bytes)?;
    if needs_layer {
        layer_of(cfg, &model)?;
    }
    let mut run = RunDir::create(out, command, cfg)?;
    run.record_checkpoint(checkpoint.display().to_string(), &bytes);
    Ok((run, model))
}

// train

pub fn train_model(cfg: &LabConfig) -> Result<(TransformerModel, TrainReport)> {
    let model = TransformerModel::init(cfg.model_config())?;
    log::info!(
        "training {} parameters for {} steps",
        model.config().parameter_count(),
        cfg.train.steps
    );
    let mut observer = |ev: TrainEvent<'_>| match ev {
        TrainEvent::Step { step, loss, lr } if step % 100 == 0 => {
            log::info!("step {step} loss {loss:.4} lr {lr:.2e}");
        }
        TrainEvent::Dev(p) => log::info!("step {} dev mean accuracy {:.3}", p.step, p.mean),
        _ => {}
    };
    Ok(trainer::train(model, &cfg.train_config(), &mut observer)?)
}

pub fn loss_csv(report: &TrainReport) -> Vec<u8> {
    csv_bytes(
        &["step", "value"],
        report.loss_curve.iter().map(|(s, l)| vec![s.to_string(), l.to_string()]),
    )
}

pub fn dev_csv(report: &TrainReport) -> Vec<u8> {
    csv_bytes(
        &["step", "value"],
        report.dev_curve.iter().map(|p| vec![p.step.to_string(), p.mean.to_string()]),
    )
}

pub fn dev_tasks_csv(report: &TrainReport) -> Vec<u8> {
    csv_bytes(
        &["step", "task", "value"],
        report.dev_curve.iter().flat_map(|p| {
            p.accuracies
                .iter()
                .map(move |a| vec![p.step.to_string(), a.task.clone(), a.accuracy.to_string()])
        }),
    )
}

pub fn cmd_train(cfg: &LabConfig, out: &Path) -> Result<PathBuf> {
    let mut run = RunDir::create(out, "train", cfg)?;
    let (model, mut report) = train_model(cfg)?;
    let bytes = checkpoint::encode_model(&model)?;
    run.write(CHECKPOINT_FILE, &bytes)?;
    run.record_checkpoint(CHECKPOINT_FILE, &bytes);
    report.checkpoint_path = Some(CHECKPOINT_FILE.into());
    report.wall_clock_seconds = Some(run.elapsed_seconds());
    run.write_json("train_report.json", &report)?;
    run.write("loss.csv", &loss_csv(&report))?;
    run.write("dev_accuracy.csv", &dev_csv(&report))?;
    run.write("dev_accuracy_tasks.csv", &dev_tasks_csv(&report))?;
    run.finish()
}

// sweep

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary<'a> {
    pub k: usize,
    pub peak_is_interior: bool,
    #[serde(flatten)]
    pub report: &'a LayerSweepReport,
}

pub fn sweep(model: &TransformerModel, cfg: &LabConfig) -> Result<LayerSweepReport> {
    let tasks = cfg.tasks()?;
    Ok(hypothesis::layer_sweep(
        model,
        &tasks,
        cfg.eval.episodes,
        cfg.eval.k,
        1..=model.config().n_layers,
        cfg.seed.eval,
    )?)
}

/// One row per layer: `layer,mean,<task>...`.
pub fn sweep_csv(report: &LayerSweepReport) -> Vec<u8> {
    let mut header = vec!["layer".to_string(), "mean".to_string()];
    if let Some(row) = report.rows.first() {
        header.extend(row.accuracies.iter().map(|a| a.task.clone()));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_bytes(
        &header,
        report.rows.iter().map(|r| {
            let mut cells = vec![r.layer.to_string(), r.mean.to_string()];
            cells.extend(r.accuracies.iter().map(|a| a.accuracy.to_string()));
            cells
        }),
    )
}

pub fn cmd_sweep(cfg: &LabConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let (mut run, model) = open_run(cfg, checkpoint, out, "sweep", false)?;
    let report = sweep(&model, cfg)?;
    log::info!(
        "best layer {} (interior peak: {})",
        report.best_layer,
        report.peak_is_interior()
    );
    run.write("sweep.csv", &sweep_csv(&report))?;
    run.write_json(
        "sweep.json",
        &SweepSummary {
            k: cfg.eval.k,
            peak_is_interior: report.peak_is_interior(),
            report: &report,
        },
    )?;
    run.finish()
}

// eval

pub fn evaluate(model: &TransformerModel, cfg: &LabConfig) -> Result<[ProcedureResult; 3]> {
    let layer = layer_of(cfg, model)?;
    Ok(hypothesis::evaluate_procedures(
        model,
        &cfg.tasks()?,
        layer,
        cfg.eval.episodes,
        cfg.eval.k,
        cfg.seed.eval,
        cfg.eval.extraction,
    )?)
}

/// `task,procedure,accuracy,n,L`, one row per task and procedure.
pub fn report_csv(results: &[ProcedureResult; 3], layer: usize) -> Vec<u8> {
    let n_tasks = results[0].accuracies.len();
    csv_bytes(
        &["task", "procedure", "accuracy", "n", "L"],
        (0..n_tasks).flat_map(|t| {
            results.iter().map(move |r| {
                let a = &r.accuracies[t];
                vec![
                    a.task.clone(),
                    r.procedure.name().to_string(),
                    a.accuracy.to_string(),
                    a.n.to_string(),
                    layer.to_string(),
                ]
            })
        }),
    )
}

#[derive(Debug, Clone, Serialize)]
struct EvalSummary<'a> {
    layer: usize,
    k: usize,
    means: Vec<(&'static str, f64)>,
    procedures: &'a [ProcedureResult; 3],
}

pub fn cmd_eval(cfg: &LabConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let (mut run, model) = open_run(cfg, checkpoint, out, "eval", true)?;
    let layer = layer_of(cfg, &model)?;
    let results = evaluate(&model, cfg)?;
    for r in &results {
        log::info!("{} mean accuracy {:.3}", r.procedure.name(), r.mean());
    }
    run.write("report.csv", &report_csv(&results, layer))?;
    run.write_json(
        "report.json",
        &EvalSummary {
            layer,
            k: cfg.eval.k,
            means: results.iter().map(|r| (r.procedure.name(), r.mean())).collect(),
            procedures: &results,
        },
    )?;
    run.finish()
}

// conflict

pub fn conflict(model: &TransformerModel, cfg: &LabConfig) -> Result<Vec<ConflictReport>> {
    let layer = layer_of(cfg, model)?;
    cfg.conflict_tasks()?
        .iter()
        .map(|(a, b)| {
            Ok(hypothesis::evaluate_conflict(
                model,
                a,
                b,
                layer,
                cfg.eval.episodes,
                cfg.eval.k,
                cfg.seed.eval,
            )?)
        })
        .collect()
}

pub fn conflict_csv(reports: &[ConflictReport]) -> Vec<u8> {
    csv_bytes(
        &["task_a", "task_b", "L", "n", "regular_on_a", "conflicting_on_a", "conflicting_on_b"],
        reports.iter().map(|r| {
            vec![
                r.task_a.clone(),
                r.task_b.clone(),
                r.layer.to_string(),
                r.n_episodes.to_string(),
                r.regular_on_a.to_string(),
                r.conflicting_on_a.to_string(),
                r.conflicting_on_b.to_string(),
            ]
        }),
    )
}

pub fn cmd_conflict(cfg: &LabConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let (mut run, model) = open_run(cfg, checkpoint, out, "conflict", true)?;
    let reports = conflict(&model, cfg)?;
    for r in &reports {
        log::info!(
            "{} -> {}: on A {:.2}, on B {:.2}",
            r.task_a,
            r.task_b,
            r.conflicting_on_a,
            r.conflicting_on_b
        );
    }
    run.write("conflict.csv", &conflict_csv(&reports))?;
    run.write_json("conflict.json", &reports)?;
    run.finish()
}

// geometry

#[derive(Debug, Clone, Serialize)]
pub struct TaskSeparation {
    pub task: String,
    pub within_mean: f64,
    pub between_mean: f64,
    pub margin: f64,
    pub within_pairs: usize,
    pub between_pairs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub separated_fraction: f64,
    pub tasks: Vec<TaskSeparation>,
}

impl From<&DistanceReport> for MetricSummary {
    fn from(r: &DistanceReport) -> Self {
        Self {
            metric: r.metric,
            separated_fraction: r.separated_fraction(),
            tasks: r
                .tasks
                .iter()
                .map(|t| TaskSeparation {
                    task: t.task.clone(),
                    within_mean: t.within_mean,
                    between_mean: t.between_mean,
                    margin: t.margin,
                    within_pairs: t.within.len(),
                    between_pairs: t.between.len(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GeometrySummary {
    pub layer: usize,
    pub vectors_per_task: usize,
    pub k: usize,
    pub metrics: Vec<MetricSummary>,
    pub explained_variance: [f64; 2],
}

pub struct Geometry {
    pub vectors: VectorSet,
    pub reports: Vec<DistanceReport>,
    pub projection: analysis::Projection,
}

pub fn geometry(model: &TransformerModel, cfg: &LabConfig) -> Result<Geometry> {
    let layer = layer_of(cfg, model)?;
    let vectors = analysis::collect_task_vectors(
        model,
        &cfg.tasks()?,
        cfg.eval.geometry_vectors,
        layer,
        cfg.eval.k,
        cfg.seed.eval,
    )?;
    let metrics = match cfg.eval.metric {
        Some(m) => vec![m],
        None => vec![Metric::CosineDistance, Metric::Euclidean],
    };
    let reports = metrics
        .into_iter()
        .map(|m| analysis::distance_stats(&vectors, m))
        .collect::<tvlab_core::Result<Vec<_>>>()?;
    let projection = analysis::project_2d(&vectors)?;
    Ok(Geometry {
        vectors,
        reports,
        projection,
    })
}

pub fn projection_csv(p: &analysis::Projection) -> Vec<u8> {
    csv_bytes(
        &["task", "index", "x", "y"],
        p.points
            .iter()
            .map(|pt| vec![pt.task.clone(), pt.index.to_string(), pt.x.to_string(), pt.y.to_string()]),
    )
}

pub fn cmd_geometry(cfg: &LabConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let (mut run, model) = open_run(cfg, checkpoint, out, "geometry", true)?;
    let g = geometry(&model, cfg)?;
    let summary = GeometrySummary {
        layer: g.vectors.layer,
        vectors_per_task: cfg.eval.geometry_vectors,
        k: cfg.eval.k,
        metrics: g.reports.iter().map(MetricSummary::from).collect(),
        explained_variance: g.projection.explained_variance,
    };
    for m in &summary.metrics {
        log::info!("{}: {:.2} of tasks separated", m.metric.name(), m.separated_fraction);
    }
    run.write("theta.bin", &checkpoint::encode_task_vectors(&g.vectors)?)?;
    run.write_json("distances.json", &summary)?;
    run.write("projection.csv", &projection_csv(&g.projection))?;
    run.finish()
}

// lens

/// Lens of the first geometry-stream task vector of every task.
pub fn lens(model: &TransformerModel, cfg: &LabConfig) -> Result<Vec<LensEntry>> {
    let layer = layer_of(cfg, model)?;
    let tasks = cfg.tasks()?;
    let vectors = analysis::collect_task_vectors(model, &tasks, 1, layer, cfg.eval.k, cfg.seed.eval)?;
    vectors
        .vectors
        .iter()
        .map(|tv| Ok(analysis::logit_lens(model, tv, cfg.eval.lens_top)?))
        .collect()
}

pub fn cmd_lens(cfg: &LabConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let (mut run, model) = open_run(cfg, checkpoint, out, "lens", true)?;
    let entries = lens(&model, cfg)?;
    for e in &entries {
        let top: Vec<&str> = e.top.iter().take(5).map(|t| t.name.as_str()).collect();
        log::info!("{}: {}", e.task, top.join(" "));
    }
    run.write_json("lens.json", &analysis::LensReport { entries })?;
    run.finish()
}
