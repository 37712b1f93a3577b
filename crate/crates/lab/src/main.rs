use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tvlab::commands;
use tvlab::run::default_run_dir;
use tvlab::{LabConfig, LabError};

#[derive(Parser)]
#[command(name = "tvlab", version, about = "Task-vector experiments on a toy in-context learner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model and write checkpoint.bin with its training curves.
    Train(Common),
    /// Hypothesis accuracy at every layer; picks the best layer.
    Sweep(Experiment),
    /// Regular, Hypothesis and Baseline accuracy at one layer.
    Eval(Experiment),
    /// Demonstrations of task A with task B's vector injected.
    Conflict(Experiment),
    /// Within/between-task distances and a 2-D projection of task vectors.
    Geometry(Experiment),
    /// Top vocabulary tokens induced by each task's vector.
    Lens(Experiment),
}

#[derive(Args)]
struct Common {
    /// JSON config; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory [default: runs/<timestamp>-<command>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed: model and data seeds for train, the eval seed otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra config override, `dotted.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct Experiment {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task-vector layer.
    #[arg(long)]
    layer: Option<usize>,
    /// Comma-separated tasks; also `builtin`, `held_out:N`, `train_bijections:N`.
    #[arg(long)]
    tasks: Option<String>,
    /// Episodes per task.
    #[arg(long)]
    episodes: Option<usize>,
    /// Demonstrations per prompt.
    #[arg(long)]
    k: Option<usize>,
    /// Geometry: report only this metric.
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
    /// Conflict: pairs as `a/b,c/d`.
    #[arg(long)]
    pairs: Option<String>,
    /// Lens: tokens listed per task.
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    Euclidean,
}

impl Experiment {
    fn values(&self) -> Result<Vec<(String, Value)>, LabError> {
        let mut v = Vec::new();
        let mut put = |k: &str, value: Value| v.push((k.to_string(), value));
        if let Some(s) = self.common.seed {
            put("seed.eval", json!(s));
        }
        if let Some(l) = self.layer {
            put("eval.layer", json!(l));
        }
        if let Some(t) = &self.tasks {
            put("eval.tasks", json!(t));
        }
        if let Some(n) = self.episodes {
            put("eval.episodes", json!(n));
        }
        if let Some(k) = self.k {
            put("eval.k", json!(k));
        }
        if let Some(m) = self.metric {
            let name = match m {
                MetricArg::Cosine => "cosine_distance",
                MetricArg::Euclidean => "euclidean",
            };
            put("eval.metric", json!(name));
        }
        if let Some(n) = self.top {
            put("eval.lens_top", json!(n));
        }
        if let Some(p) = &self.pairs {
            let pairs = p
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.split_once('/')
                        .map(|(a, b)| json!([a, b]))
                        .ok_or_else(|| LabError::config("eval.conflict_pairs", format!("`{s}` is not a/b")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            put("eval.conflict_pairs", Value::Array(pairs));
        }
        Ok(v)
    }
}

fn load(common: &Common, values: &[(String, Value)]) -> Result<LabConfig, LabError> {
    LabConfig::load(common.config.as_deref(), values, &common.set)
}

fn out_dir(common: &Common, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| default_run_dir(command))
}

type Runner = fn(&LabConfig, &Path, &Path) -> tvlab::Result<PathBuf>;

fn run(cli: Cli) -> Result<PathBuf, LabError> {
    let (name, exp, runner): (&str, &Experiment, Runner) = match &cli.command {
        Command::Train(common) => {
            let mut values = Vec::new();
            if let Some(s) = common.seed {
                values.push(("seed.model".to_string(), json!(s)));
                values.push(("seed.data".to_string(), json!(s)));
            }
            let cfg = load(common, &values)?;
            return commands::cmd_train(&cfg, &out_dir(common, "train"));
        }
        Command::Sweep(e) => ("sweep", e, commands::cmd_sweep),
        Command::Eval(e) => ("eval", e, commands::cmd_eval),
        Command::Conflict(e) => ("conflict", e, commands::cmd_conflict),
        Command::Geometry(e) => ("geometry", e, commands::cmd_geometry),
        Command::Lens(e) => ("lens", e, commands::cmd_lens),
    };
    let cfg = load(&exp.common, &exp.values()?)?;
    runner(&cfg, &exp.checkpoint, &out_dir(&exp.common, name))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
