use std::path::{Path, PathBuf};
use std::str::FromStr;

use seta_core::blockgrid::IndexSet;
use seta_core::metrics::fixtures::{verify, Check, FixtureSet};
use seta_core::nanonet::{BaseModel, Target};
use seta_core::tasks::{generate_sequence, load_jsonl, Sample};
use seta_core::trainer::{baseline_ewc_lite, baseline_seq_train, expert_summaries, run_sequence, RunOutput, TaskSplit};

use crate::artifacts::{write_run, Metrics, RunManifest, RunStatus, TaskInfo};
use crate::{CliError, ExperimentConfig};

/// Baselines available to `seta baseline --method`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    /// Plain sequential fine-tuning of one delta set.
    Seq,
    /// Sequential fine-tuning pulled toward the previous task's deltas.
    Ewc,
}

impl Method {
    pub const NAMES: [&'static str; 2] = ["seq", "ewc"];

    pub fn name(self) -> &'static str {
        match self {
            Method::Seq => "seq",
            Method::Ewc => "ewc",
        }
    }
}

impl FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "seq" => Ok(Method::Seq),
            "ewc" => Ok(Method::Ewc),
            _ => Err(CliError::config(format!("unknown method {s:?}; valid methods: {}", Method::NAMES.join(", ")))),
        }
    }
}

pub struct LoadedTask {
    pub source: String,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub planted: Option<IndexSet>,
}

pub struct LoadedTasks {
    pub base: BaseModel,
    pub tasks: Vec<LoadedTask>,
    pub warnings: Vec<String>,
}

fn check_dataset(cfg: &ExperimentConfig, path: &Path, samples: &[Sample], dim: Option<usize>) -> Result<(), CliError> {
    let name = path.display();
    if samples.is_empty() {
        return Err(CliError::config(format!("{name} holds no samples")));
    }
    if dim != Some(cfg.model.d) {
        return Err(CliError::config(format!("{name}: inputs have {} features, model.d = {}", dim.unwrap_or(0), cfg.model.d)));
    }
    if let Some((i, c)) = samples.iter().enumerate().find_map(|(i, s)| match s.y {
        Target::Class(c) if c >= cfg.model.classes => Some((i, c)),
        _ => None,
    }) {
        return Err(CliError::config(format!("{name} line {}: class {c} but model.classes = {}", i + 1, cfg.model.classes)));
    }
    Ok(())
}

/// Build the base model and the task stream, from the generator or from files.
pub fn load_tasks(cfg: &ExperimentConfig) -> Result<LoadedTasks, CliError> {
    if cfg.tasks.files.is_empty() {
        let b = generate_sequence(&cfg.model, &cfg.task_specs(), cfg.seed())?;
        let tasks = b
            .tasks
            .into_iter()
            .map(|t| LoadedTask { source: "generated".into(), train: t.train, eval: t.eval, planted: Some(t.planted) })
            .collect();
        return Ok(LoadedTasks { base: b.base, tasks, warnings: b.warnings });
    }
    let base = cfg.model.build_base(cfg.seed())?;
    let mut tasks = Vec::new();
    let mut warnings = Vec::new();
    for f in &cfg.tasks.files {
        let train = load_jsonl(&f.train)?;
        let eval = load_jsonl(&f.eval)?;
        check_dataset(cfg, &f.train, &train.samples, train.dim)?;
        check_dataset(cfg, &f.eval, &eval.samples, eval.dim)?;
        warnings.extend(train.warnings.into_iter().chain(eval.warnings));
        tasks.push(LoadedTask {
            source: f.train.display().to_string(),
            train: train.samples,
            eval: eval.samples,
            planted: None,
        });
    }
    Ok(LoadedTasks { base, tasks, warnings })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub method: String,
    pub out_dir: PathBuf,
    pub tasks: usize,
    pub metrics: Option<Metrics>,
}

fn execute(cfg: &ExperimentConfig, method: Option<Method>, out_dir: &Path) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    let loaded = load_tasks(cfg)?;
    let splits: Vec<TaskSplit> = loaded.tasks.iter().map(|t| TaskSplit { train: &t.train, eval: &t.eval }).collect();
    let learner = cfg.learner();
    let result = match method {
        None => run_sequence(&loaded.base, &splits, &learner),
        Some(Method::Seq) => baseline_seq_train(&loaded.base, &splits, &learner),
        Some(Method::Ewc) => baseline_ewc_lite(&loaded.base, &splits, &learner, cfg.baseline.ewc_lambda),
    };
    let (output, error): (RunOutput, _) = match result {
        Ok(o) => (o, None),
        Err(p) => (*p.output, Some(p.error)),
    };
    let method_name = method.map_or("seta", Method::name).to_string();
    let metrics = Metrics::of(&output);
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        method: method_name.clone(),
        status: if error.is_some() { RunStatus::Failed } else { RunStatus::Complete },
        error: error.as_ref().map(ToString::to_string),
        seed: cfg.seed(),
        config: cfg.clone(),
        tasks: loaded
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| TaskInfo {
                task: i + 1,
                source: t.source.clone(),
                n_train: t.train.len(),
                n_eval: t.eval.len(),
                planted: t.planted.as_ref().map(|p| p.iter().copied().collect()),
            })
            .collect(),
        steps: output.steps.clone(),
        experts: output.registry.as_ref().map(expert_summaries).unwrap_or_default(),
        metrics: metrics.clone(),
        warnings: loaded.warnings.clone(),
        files: Vec::new(),
    };
    write_run(out_dir, &mut manifest, &output)?;
    if let Some(e) = error {
        let mut err = CliError::from(e);
        err.message = format!(
            "{} (stopped after {} of {} tasks; partial state in {})",
            err.message,
            output.steps.len(),
            splits.len(),
            out_dir.join(crate::artifacts::MANIFEST).display()
        );
        return Err(err);
    }
    Ok(RunSummary { method: method_name, out_dir: out_dir.to_path_buf(), tasks: splits.len(), metrics })
}

/// Train the expert learner over the configured task stream and write all artifacts to `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary, CliError> {
    execute(cfg, None, out_dir)
}

/// Same task stream and seed as [`run`], trained by a single-delta baseline.
pub fn baseline(cfg: &ExperimentConfig, method: Method, out_dir: &Path) -> Result<RunSummary, CliError> {
    execute(cfg, Some(method), out_dir)
}

/// Recompute every published metric from the bundled fixtures, or from `dir` when given.
pub fn verify_fixtures(dir: Option<&Path>) -> Result<Vec<Check>, CliError> {
    let set = match dir {
        Some(d) => FixtureSet::from_dir(d)?,
        None => FixtureSet::embedded(),
    };
    Ok(verify(&set)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for n in Method::NAMES {
            assert_eq!(n.parse::<Method>().unwrap().name(), n);
        }
        let err = "sqe".parse::<Method>().unwrap_err();
        assert_eq!(err.code, crate::EXIT_CONFIG);
        assert!(err.message.contains("seq, ewc"));
    }

    #[test]
    fn fixtures_pass_and_missing_dir_is_exit_4() {
        assert!(verify_fixtures(None).unwrap().iter().all(|c| c.passed));
        let dir = tempfile::tempdir().unwrap();
        let err = verify_fixtures(Some(dir.path())).unwrap_err();
        assert_eq!(err.code, crate::EXIT_MISSING);
    }
}
