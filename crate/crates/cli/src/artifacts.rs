//! Files written by `run` and `baseline`, and readers for them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use seta_core::blockgrid::{format_trace, BlockCoord};
use seta_core::gating::audit_csv;
use seta_core::trainer::{ExpertSummary, RunOutput, StepSummary};

use crate::{CliError, ExperimentConfig};

pub const MANIFEST: &str = "manifest.json";
pub const ACCURACY: &str = "accuracy.csv";
pub const CAPACITY: &str = "capacity.csv";
pub const AUDIT: &str = "routing_audit.csv";
pub const TRACE: &str = "selection_trace.txt";
pub const CONFIG: &str = "config.toml";
pub const EXPERTS: &str = "experts";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub task: usize,
    /// `generated` or the training file path.
    pub source: String,
    pub n_train: usize,
    pub n_eval: usize,
    /// Ground-truth support, known only for generated tasks.
    pub planted: Option<Vec<BlockCoord>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub retention: f64,
    /// Undefined for a single task.
    pub forgetting: Option<f64>,
    /// Mean accuracy over seen tasks after each step.
    pub running_accuracy: Vec<f64>,
}

impl Metrics {
    pub fn of(out: &RunOutput) -> Option<Self> {
        let m = &out.matrix;
        if m.tasks() == 0 {
            return None;
        }
        Some(Self {
            retention: m.retention_rt().ok()?,
            forgetting: m.forgetting_ft().ok(),
            running_accuracy: (1..=m.tasks()).filter_map(|t| m.acc_t(t).ok()).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub method: String,
    pub status: RunStatus,
    pub error: Option<String>,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub tasks: Vec<TaskInfo>,
    pub steps: Vec<StepSummary>,
    pub experts: Vec<ExpertSummary>,
    pub metrics: Option<Metrics>,
    pub warnings: Vec<String>,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let text = read_artifact(dir, MANIFEST)?;
        serde_json::from_str(&text).map_err(|e| CliError::new(crate::EXIT_FAILURE, format!("{MANIFEST}: {e}")))
    }
}

/// Read `name` from a run directory; a missing file maps to exit code 4.
pub fn read_artifact(dir: &Path, name: &str) -> Result<String, CliError> {
    let p = dir.join(name);
    fs::read_to_string(&p).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::missing(&p),
        _ => e.into(),
    })
}

/// Write every artifact of `out`, then the manifest listing them.
pub fn write_run(dir: &Path, manifest: &mut RunManifest, out: &RunOutput) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut files = vec![
        (ACCURACY, out.matrix.to_csv()),
        (CAPACITY, out.ledger.to_csv()),
        (AUDIT, audit_csv(&out.audit)),
        (TRACE, format_trace(&out.trace)),
        (CONFIG, manifest.config.to_toml()),
    ];
    for (name, text) in files.drain(..) {
        fs::write(dir.join(name), text)?;
        manifest.files.push(name.to_string());
    }
    if let Some(registry) = &out.registry {
        registry.save(&dir.join(EXPERTS))?;
        manifest.files.push(format!("{EXPERTS}/registry.json"));
    }
    manifest.files.push(MANIFEST.to_string());
    let json = serde_json::to_string_pretty(manifest).map_err(|e| CliError::new(crate::EXIT_FAILURE, e.to_string()))?;
    fs::write(dir.join(MANIFEST), json + "\n")?;
    Ok(())
}
