//! Experiment configuration: one TOML file with a section per stage.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seta_core::blockgrid::{SelectionConfig, TieBreak};
use seta_core::sos::SosThresholds;
use seta_core::tasks::{chain_specs, BenchmarkGeometry, TaskKind, TaskSpec, DEFAULT_OVERLAPS};
use seta_core::trainer::{GatingConfig, LearnerConfig, TrainConfig, WarmupConfig, WarmupModel};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub budget: usize,
    pub tau_block: f64,
    pub tie_break: TieBreak,
    pub warmup_fraction: f64,
    pub warmup_model: WarmupModel,
    /// Defaults to every expert-eligible layer of the model.
    pub eligible_layers: Option<Vec<usize>>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        let sel = SelectionConfig::default();
        let warm = WarmupConfig::default();
        Self {
            budget: sel.budget,
            tau_block: sel.tau_block,
            tie_break: sel.tie_break,
            warmup_fraction: warm.fraction,
            warmup_model: warm.model,
            eligible_layers: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindName {
    #[default]
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFiles {
    pub train: PathBuf,
    pub eval: PathBuf,
}

/// Either a generated planted benchmark or a list of JSONL datasets. When
/// `files` is non-empty the generator settings are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksSection {
    pub count: usize,
    /// Overlap of task `t + 1` with task `t`; needs `count - 1` entries.
    pub overlaps: Vec<f64>,
    pub kind: KindName,
    pub planted_count: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub noise_std: f64,
    pub amplitude: f64,
    pub files: Vec<TaskFiles>,
}

impl Default for TasksSection {
    fn default() -> Self {
        Self {
            count: DEFAULT_OVERLAPS.len() + 1,
            overlaps: DEFAULT_OVERLAPS.to_vec(),
            kind: KindName::Classification,
            planted_count: 12,
            n_train: 4096,
            n_eval: 512,
            noise_std: 1.0,
            amplitude: 0.5,
            files: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    /// Strength of the pull toward the previous task's deltas for `--method ewc`.
    pub ewc_lambda: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self { ewc_lambda: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/latest") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: BenchmarkGeometry,
    pub selection: SelectionSection,
    pub sos: SosThresholds,
    pub gating: GatingConfig,
    pub training: TrainConfig,
    pub baseline: BaselineSection,
    pub tasks: TasksSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Parse and validate. Relative dataset paths are resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::missing(path),
            _ => CliError::config(format!("{}: {e}", path.display())),
        })?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for f in &mut cfg.tasks.files {
            for p in [&mut f.train, &mut f.eval] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.learner().validate()?;
        let layers = self.model.hidden_layers;
        if let Some(l) = self.selection.eligible_layers.iter().flatten().find(|&&l| l >= layers) {
            return Err(CliError::config(format!(
                "selection.eligible_layers: layer {l} is not a hidden layer (model has {layers})"
            )));
        }
        let blocks_per_layer = (self.model.d / self.model.block_size).pow(2);
        let eligible = self.selection.eligible_layers.as_ref().map_or(layers, Vec::len);
        if self.selection.budget > eligible * blocks_per_layer {
            return Err(CliError::config(format!(
                "selection.budget = {} exceeds the {} eligible blocks",
                self.selection.budget,
                eligible * blocks_per_layer
            )));
        }
        if !(self.baseline.ewc_lambda.is_finite() && self.baseline.ewc_lambda >= 0.0) {
            return Err(CliError::config("baseline.ewc_lambda must be finite and >= 0"));
        }
        if self.tasks.files.is_empty() {
            if self.tasks.count == 0 {
                return Err(CliError::config("tasks.count must be at least 1"));
            }
            if self.tasks.overlaps.len() + 1 != self.tasks.count {
                return Err(CliError::config(format!(
                    "tasks.overlaps has {} entries; tasks.count = {} needs {}",
                    self.tasks.overlaps.len(),
                    self.tasks.count,
                    self.tasks.count - 1
                )));
            }
            for s in self.task_specs() {
                s.validate()?;
            }
        }
        Ok(())
    }

    pub fn learner(&self) -> LearnerConfig {
        LearnerConfig {
            selection: SelectionConfig {
                block_size: self.model.block_size,
                budget: self.selection.budget,
                tau_block: self.selection.tau_block,
                tie_break: self.selection.tie_break,
                eligible_layers: self
                    .selection
                    .eligible_layers
                    .as_ref()
                    .map(|v| v.iter().copied().collect::<BTreeSet<_>>()),
            },
            warmup: WarmupConfig { fraction: self.selection.warmup_fraction, model: self.selection.warmup_model },
            sos: self.sos,
            gating: self.gating.clone(),
            train: self.training.clone(),
        }
    }

    /// Specs for the generated benchmark (empty in file mode).
    pub fn task_specs(&self) -> Vec<TaskSpec> {
        if !self.tasks.files.is_empty() {
            return Vec::new();
        }
        let t = &self.tasks;
        let template = TaskSpec {
            task_id: 1,
            kind: match t.kind {
                KindName::Classification => TaskKind::Classification { classes: self.model.classes },
                KindName::Regression => TaskKind::Regression,
            },
            planted_count: t.planted_count,
            overlap_with: Default::default(),
            n_train: t.n_train,
            n_eval: t.n_eval,
            noise_std: t.noise_std,
            amplitude: t.amplitude,
        };
        chain_specs(&template, &t.overlaps)
    }

    pub fn seed(&self) -> u64 {
        self.training.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.training.seed = seed;
        self
    }
}
