//! Sequential training: warm-up selection, expert evolution, freezing, the
//! anchored objective, and the single-delta baselines.

mod baseline;
mod objective;

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array, Array1, Array2, ArrayView1, Dimension, Ix1, Ix2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::blockgrid::{score_blocks, select_topk, BlockCoord, IndexSet, SelectionConfig, TraceEntry};
use crate::error::{Error, Result};
use crate::experts::{ExpertId, Registry};
use crate::gating::{audit_rows, taskfree_forward, AuditRow, GateInit, GateState};
use crate::metrics::{AccuracyMatrix, CapacityLedger};
use crate::nanonet::{argmax, finite_diff_check, loss_and_grad, BaseModel, DeltaOverlay, GradCheck, Session, Target};
use crate::rng::{stream, Stream};
use crate::sos::{form_experts, plan_evolution, SosThresholds, SplitEvent};
use crate::tasks::Sample;

pub use baseline::{baseline_ewc_lite, baseline_seq_train, SingleDeltaLearner};
pub use objective::{
    composite_loss, flatten_gradient, param_list, penalty_gradient, read_params, write_params, CompositeGrad, Param,
    TrainRouting,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupModel {
    /// Gradients of the frozen base alone.
    #[default]
    Base,
    /// Base plus the experts trained so far, mixed by the router.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    /// Share of the task's batches, taken in stored order, used for importance scores.
    pub fraction: f64,
    pub model: WarmupModel,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self { fraction: 0.5, model: WarmupModel::Base }
    }
}

/// Which router rows move while a task trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateRows {
    /// Rows of the current unique expert and the shared expert; frozen experts keep theirs.
    #[default]
    Plastic,
    All,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatingConfig {
    pub top_k: usize,
    pub init: GateInit,
    pub train_routing: TrainRouting,
    pub train_rows: GateRows,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self { top_k: 2, init: GateInit::Zero, train_routing: TrainRouting::Dense, train_rows: GateRows::Plastic }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Linear learning-rate ramp over this share of each task's steps.
    pub lr_warmup_fraction: f64,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub grad_check: bool,
    pub grad_check_step: f64,
    pub grad_check_tolerance: f64,
    /// A regression prediction counts as correct within this distance.
    pub regression_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            lr_warmup_fraction: 0.0,
            epochs_per_task: 5,
            batch_size: 16,
            lambda: 0.1,
            seed: 0,
            optimizer: Optimizer::Sgd,
            momentum: 0.9,
            grad_check: true,
            grad_check_step: 1e-5,
            grad_check_tolerance: 1e-4,
            regression_tolerance: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.learning_rate,
            self.lr_warmup_fraction,
            self.lambda,
            self.momentum,
            self.grad_check_step,
            self.grad_check_tolerance,
            self.regression_tolerance,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("training values must be finite"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("training.learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_warmup_fraction) {
            return Err(Error::config("training.lr_warmup_fraction must be in [0, 1]"));
        }
        if self.epochs_per_task == 0 || self.batch_size == 0 {
            return Err(Error::config("training.epochs_per_task and training.batch_size must be at least 1"));
        }
        if self.lambda < 0.0 {
            return Err(Error::config("training.lambda must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("training.momentum must be in [0, 1)"));
        }
        if self.grad_check_step <= 0.0 || self.grad_check_tolerance <= 0.0 {
            return Err(Error::config("gradient-check step and tolerance must be positive"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = (self.lr_warmup_fraction * total as f64).ceil() as usize;
        if warm == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / warm as f64).min(1.0)
        }
    }

    /// A prediction is correct when the argmax matches (classes) or it lands within tolerance (values).
    pub fn is_correct(&self, output: ArrayView1<f64>, target: Target) -> bool {
        match target {
            Target::Class(c) => argmax(output) == c,
            Target::Value(y) => (output[0] - y).abs() <= self.regression_tolerance,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub selection: SelectionConfig,
    pub warmup: WarmupConfig,
    pub sos: SosThresholds,
    pub gating: GatingConfig,
    pub train: TrainConfig,
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        self.sos.validate()?;
        self.train.validate()?;
        if !(self.warmup.fraction > 0.0 && self.warmup.fraction <= 1.0) {
            return Err(Error::config("selection.warmup_fraction must be in (0, 1]"));
        }
        if self.gating.top_k == 0 {
            return Err(Error::config("gating.top_k must be at least 1"));
        }
        Ok(())
    }

    /// Selection settings bound to a model: block size must match and the
    /// eligible layers default to the model's.
    fn selection_for(&self, base: &BaseModel) -> Result<SelectionConfig> {
        let mut sel = self.selection.clone();
        if sel.block_size != base.block_size() {
            return Err(Error::config(format!(
                "selection block size {} differs from the model's {}",
                sel.block_size,
                base.block_size()
            )));
        }
        let model = base.eligible_layers();
        match &sel.eligible_layers {
            None => sel.eligible_layers = Some(model),
            Some(s) => {
                if let Some(l) = s.iter().find(|l| !model.contains(l)) {
                    return Err(Error::config(format!("layer {l} is not eligible in the model")));
                }
            }
        }
        Ok(sel)
    }
}

/// One pair of train/eval sets in a sequence.
#[derive(Clone, Copy, Debug)]
pub struct TaskSplit<'a> {
    pub train: &'a [Sample],
    pub eval: &'a [Sample],
}

fn batches(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Sum over warm-up batches of the batch-mean dense gradient of every layer.
fn warmup_gradients<'a, F>(base: &BaseModel, train: &[Sample], cfg: &LearnerConfig, mut mix: F) -> Result<Vec<Array2<f64>>>
where
    F: FnMut(ArrayView1<f64>) -> Result<Vec<(f64, &'a DeltaOverlay)>>,
{
    let bs = cfg.train.batch_size;
    let n_batches = (cfg.warmup.fraction * batches(train.len(), bs) as f64).ceil() as usize;
    let mut acc: Vec<Array2<f64>> = base.weights().iter().map(|w| Array2::zeros(w.dim())).collect();
    for chunk in train.chunks(bs).take(n_batches.max(1)) {
        let scale = 1.0 / chunk.len() as f64;
        for s in chunk {
            let mut session = Session::new(base, mix(s.x())?)?;
            let y = session.forward(s.x())?;
            let (_, g) = loss_and_grad(y.view(), s.y)?;
            for (a, g) in acc.iter_mut().zip(session.layer_gradients(g.view())?) {
                a.scaled_add(scale, &g);
            }
        }
    }
    Ok(acc)
}

/// Importance scores from warm-up gradients, then the top-k selection and its trace lines.
fn select_for_task(
    base: &BaseModel,
    sel: &SelectionConfig,
    task: usize,
    grads: &[Array2<f64>],
) -> Result<(IndexSet, Vec<TraceEntry>)> {
    let scores = score_blocks(grads, base.grid())?;
    let selection = select_topk(&scores, sel)?;
    let trace = selection
        .iter()
        .map(|b| TraceEntry { task, block: *b, score: scores.get(*b).unwrap_or(0.0) })
        .collect();
    Ok((selection, trace))
}

/// SGD or heavy-ball direction for one parameter block.
#[derive(Clone, Debug)]
pub(crate) struct Velocity<K: Ord, D: Dimension> {
    state: BTreeMap<K, Array<f64, D>>,
}

impl<K: Ord, D: Dimension> Default for Velocity<K, D> {
    fn default() -> Self {
        Self { state: BTreeMap::new() }
    }
}

impl<K: Ord + Copy, D: Dimension> Velocity<K, D> {
    pub(crate) fn direction(&mut self, cfg: &TrainConfig, key: K, grad: &Array<f64, D>) -> Array<f64, D> {
        match cfg.optimizer {
            Optimizer::Sgd => grad.clone(),
            Optimizer::Momentum => {
                let v = self.state.entry(key).or_insert_with(|| Array::zeros(grad.raw_dim()));
                v.mapv_inplace(|a| a * cfg.momentum);
                *v += grad;
                v.clone()
            }
        }
    }
}

/// `Δ ← Δ − lr·dir`, or with a quadratic pull of weight `c = 2·lr·λ·n` toward
/// `anchor`, the exact proximal step `(Δ − lr·dir + c·anchor) / (1 + c)`.
pub(crate) fn apply_step(delta: &mut Array2<f64>, dir: &Array2<f64>, lr: f64, pull: Option<(f64, &Array2<f64>)>) {
    delta.scaled_add(-lr, dir);
    if let Some((c, anchor)) = pull {
        delta.scaled_add(c, anchor);
        *delta /= 1.0 + c;
    }
}

/// What happened to one gate row during expert formation.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSplit {
    pub event: SplitEvent,
    /// The parent's row at the moment of the split.
    pub parent_row: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedTask {
    pub task: usize,
    pub selection: IndexSet,
    pub trace: Vec<TraceEntry>,
    pub splits: Vec<GateSplit>,
    pub new_unique: ExpertId,
    /// Prior experts whose overlap with the selection was rejected on every layer.
    pub untouched: Vec<ExpertId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskReport {
    pub task: usize,
    pub selection_size: usize,
    pub grad_check: Option<GradCheck>,
    /// `‖ΔW_s − ΔW*_s‖_F` of the shared expert at the end of training, before re-anchoring.
    pub shared_drift: f64,
    pub final_loss: f64,
    /// Per-epoch checks that frozen experts did not move.
    pub freeze_checks: usize,
}

/// The expert learner: frozen base, registry of sparse experts and the router.
#[derive(Clone, Debug)]
pub struct SetaLearner {
    base: BaseModel,
    cfg: LearnerConfig,
    selection: SelectionConfig,
    registry: Registry,
    gate: GateState,
    task: usize,
    trained: usize,
    trace: Vec<TraceEntry>,
    ledger: CapacityLedger,
}

impl SetaLearner {
    pub fn new(base: BaseModel, cfg: LearnerConfig) -> Result<Self> {
        cfg.validate()?;
        let selection = cfg.selection_for(&base)?;
        let gate = GateState::new(base.input_dim(), cfg.gating.top_k)?;
        Ok(Self {
            base,
            cfg,
            selection,
            registry: Registry::new(),
            gate,
            task: 0,
            trained: 0,
            trace: Vec::new(),
            ledger: CapacityLedger::default(),
        })
    }

    pub fn base(&self) -> &BaseModel {
        &self.base
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn gate(&self) -> &GateState {
        &self.gate
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn ledger(&self) -> &CapacityLedger {
        &self.ledger
    }

    pub fn tasks_seen(&self) -> usize {
        self.task
    }

    fn trainable(&self) -> Vec<ExpertId> {
        let mut ids: Vec<ExpertId> = self.registry.unique_for(self.task).filter(|e| !e.is_frozen()).map(|e| e.id).collect();
        ids.extend(self.registry.shared().map(|e| e.id));
        ids
    }

    fn gate_rows(&self, trainable: &[ExpertId]) -> Vec<ExpertId> {
        match self.cfg.gating.train_rows {
            GateRows::Plastic => trainable.to_vec(),
            GateRows::All => self.gate.order().to_vec(),
            GateRows::None => Vec::new(),
        }
    }

    fn mix_all(&self, x: ArrayView1<f64>) -> Result<Vec<(f64, &DeltaOverlay)>> {
        let r = self.gate.route(x)?;
        let (idx, w): (Vec<usize>, Vec<f64>) = match self.cfg.gating.train_routing {
            TrainRouting::Dense => ((0..r.experts.len()).collect(), r.probs),
            TrainRouting::Topk => (r.active, r.weights),
        };
        idx.iter()
            .zip(w)
            .map(|(&i, wi)| {
                self.registry
                    .get(r.experts[i])
                    .map(|e| (wi, e.deltas()))
                    .ok_or_else(|| Error::State(format!("routed to unknown expert {}", r.experts[i])))
            })
            .collect()
    }

    /// Warm-up, selection, expert evolution, router expansion and freezing for the next task.
    pub fn prepare_task(&mut self, train: &[Sample]) -> Result<PreparedTask> {
        if train.is_empty() {
            return Err(Error::config(format!("task {} has no training data", self.task + 1)));
        }
        if self.trained != self.task {
            return Err(Error::State(format!("task {} was prepared but not trained", self.task)));
        }
        let task = self.task + 1;
        let grads = match self.cfg.warmup.model {
            WarmupModel::Full if !self.gate.is_empty() => warmup_gradients(&self.base, train, &self.cfg, |x| self.mix_all(x))?,
            _ => warmup_gradients(&self.base, train, &self.cfg, |_| Ok(Vec::new()))?,
        };
        let (selection, trace) = select_for_task(&self.base, &self.selection, task, &grads)?;

        let mut splits = Vec::new();
        let (new_unique, untouched) = if task == 1 {
            (self.registry.init_first_task(selection.clone())?, Vec::new())
        } else {
            let outcome = plan_evolution(&self.registry, task, &selection, &self.cfg.sos)?;
            let formation = form_experts(&mut self.registry, self.base.grid(), &outcome)?;
            for event in formation.events {
                let parent_row = self
                    .gate
                    .row(event.parent)
                    .cloned()
                    .ok_or_else(|| Error::State(format!("no gate row for split parent {}", event.parent)))?;
                self.gate.expand_on_split(event.parent, &event.children)?;
                splits.push(GateSplit { event, parent_row });
            }
            (formation.new_unique, formation.untouched)
        };
        self.gate.register_new_expert(new_unique, &self.cfg.gating.init)?;
        self.registry.freeze_history(task);

        let grid = self.base.grid().clone();
        let owned: Vec<BlockCoord> = self
            .registry
            .get(new_unique)
            .map(|e| e.owned().iter().copied().collect())
            .unwrap_or_default();
        let deltas = self.registry.deltas_mut(new_unique)?;
        for b in owned {
            deltas.insert(&grid, b, Array2::zeros(grid.block_shape(b)))?;
        }
        self.gate.check_covers(&self.registry)?;
        self.task = task;
        self.trace.extend(trace.iter().copied());
        Ok(PreparedTask { task, selection, trace, splits, new_unique, untouched })
    }

    /// Finite-difference check of the full objective on the first batch.
    pub fn check_gradient(&self, batch: &[Sample]) -> Result<GradCheck> {
        let cfg = &self.cfg;
        let trainable = self.trainable();
        let rows = self.gate_rows(&trainable);
        let shared = self.registry.shared().map(|e| e.id);
        let grad = composite_loss(
            batch,
            &self.base,
            &self.registry,
            &self.gate,
            cfg.train.lambda,
            &trainable,
            cfg.gating.train_routing,
            !rows.is_empty(),
        )?;
        let params = param_list(&self.registry, &trainable, &rows, self.gate.dim());
        let start = read_params(&self.registry, &self.gate, &params);
        let analytic = flatten_gradient(&grad, &penalty_gradient(&self.registry, cfg.train.lambda), shared, &params);
        let mut registry = self.registry.clone();
        let mut gate = self.gate.clone();
        finite_diff_check(
            |p| {
                write_params(&mut registry, &mut gate, &params, p).expect("parameters exist");
                composite_loss(batch, &self.base, &registry, &gate, cfg.train.lambda, &trainable, cfg.gating.train_routing, false)
                    .map_or(f64::NAN, |g| g.total())
            },
            &start,
            &analytic,
            cfg.train.grad_check_step,
            cfg.train.grad_check_tolerance,
        )
    }

    fn frozen_checksums(&self) -> BTreeMap<ExpertId, u64> {
        self.registry.experts().iter().filter(|e| e.is_frozen()).map(|e| (e.id, e.checksum())).collect()
    }

    /// Optimize the anchored objective over the current unique expert, the shared
    /// expert and the router, then re-anchor the shared expert.
    pub fn train_task(&mut self, train: &[Sample]) -> Result<TaskReport> {
        if self.trained == self.task {
            return Err(Error::State("train_task called before prepare_task".into()));
        }
        let task = self.task;
        let cfg = self.cfg.clone();
        let tc = &cfg.train;
        let trainable = self.trainable();
        let rows = self.gate_rows(&trainable);
        let shared = self.registry.shared().map(|e| e.id);

        let grad_check = if tc.grad_check {
            let first = &train[..train.len().min(tc.batch_size)];
            let check = self.check_gradient(first)?;
            if !check.passed {
                return Err(Error::Numeric(format!(
                    "task {task}: gradient check failed, max relative error {:e} at parameter {:?}",
                    check.max_rel_error, check.worst_index
                )));
            }
            Some(check)
        } else {
            None
        };

        let frozen = self.frozen_checksums();
        let mut rng = stream(tc.seed, Stream::Shuffle, task as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let total_steps = tc.epochs_per_task * batches(train.len(), tc.batch_size);
        let mut vel: Velocity<(ExpertId, BlockCoord), Ix2> = Velocity::default();
        let mut gate_vel: Velocity<ExpertId, Ix1> = Velocity::default();
        let mut step = 0;
        let mut final_loss = f64::NAN;
        let mut freeze_checks = 0;
        for epoch in 0..tc.epochs_per_task {
            order.shuffle(&mut rng);
            for (b, idx) in order.chunks(tc.batch_size).enumerate() {
                let batch: Vec<Sample> = idx.iter().map(|&i| train[i].clone()).collect();
                let g = composite_loss(
                    &batch,
                    &self.base,
                    &self.registry,
                    &self.gate,
                    tc.lambda,
                    &trainable,
                    cfg.gating.train_routing,
                    !rows.is_empty(),
                )
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("task {task} epoch {} batch {}: {m}", epoch + 1, b + 1)),
                    other => other,
                })?;
                final_loss = g.total();
                let lr = tc.lr_at(step, total_steps);
                step += 1;
                self.apply_gradients(&g, &trainable, &rows, shared, lr, &mut vel, &mut gate_vel)?;
            }
            for (id, sum) in &frozen {
                let now = self.registry.get(*id).map(|e| e.checksum());
                if now != Some(*sum) {
                    return Err(Error::Integrity(format!("frozen expert {id} changed during task {task}")));
                }
                freeze_checks += 1;
            }
        }
        let shared_drift = self.registry.shared().map_or(0.0, |s| s.drift());
        self.registry.set_shared_anchors(self.base.grid());
        self.ledger.rows.push(self.registry.capacity_snapshot(task));
        self.trained = task;
        let selection_size = self.registry.task_selections().get(&task).map_or(0, |s| s.len());
        Ok(TaskReport { task, selection_size, grad_check, shared_drift, final_loss, freeze_checks })
    }

    fn apply_gradients(
        &mut self,
        g: &CompositeGrad,
        trainable: &[ExpertId],
        rows: &[ExpertId],
        shared: Option<ExpertId>,
        lr: f64,
        vel: &mut Velocity<(ExpertId, BlockCoord), Ix2>,
        gate_vel: &mut Velocity<ExpertId, Ix1>,
    ) -> Result<()> {
        let tc = &self.cfg.train;
        let lambda = tc.lambda;
        for id in trainable {
            let Some(blocks) = g.blocks.get(id) else { continue };
            let is_shared = Some(*id) == shared && lambda > 0.0;
            let pulls: BTreeMap<BlockCoord, (f64, Array2<f64>)> = if is_shared {
                let s = self.registry.shared().expect("shared expert exists");
                s.owned()
                    .iter()
                    .filter_map(|b| {
                        let n = f64::from(s.share_count().get(b).copied().unwrap_or(0));
                        s.anchors().get(b).map(|a| (*b, (2.0 * lr * lambda * n, a.clone())))
                    })
                    .collect()
            } else {
                BTreeMap::new()
            };
            let deltas = self.registry.deltas_mut(*id)?;
            for (b, gb) in blocks {
                let dir = vel.direction(tc, (*id, *b), gb);
                let d = deltas
                    .blocks
                    .get_mut(b)
                    .ok_or_else(|| Error::State(format!("expert {id} has no delta for {b}")))?;
                apply_step(d, &dir, lr, pulls.get(b).map(|(c, a)| (*c, a)));
            }
        }
        for (id, gr) in &g.gate {
            if !rows.contains(id) {
                continue;
            }
            let dir = gate_vel.direction(tc, *id, gr);
            let row = self
                .gate
                .row_mut(*id)
                .ok_or_else(|| Error::State(format!("no gate row for {id}")))?;
            row.scaled_add(-lr, &dir);
        }
        Ok(())
    }

    pub fn run_task(&mut self, train: &[Sample]) -> Result<(PreparedTask, TaskReport)> {
        let prepared = self.prepare_task(train)?;
        let report = self.train_task(train)?;
        Ok((prepared, report))
    }

    /// Task-free accuracy in percent.
    pub fn evaluate(&self, eval: &[Sample]) -> Result<f64> {
        if eval.is_empty() {
            return Err(Error::config("evaluation set is empty"));
        }
        let mut correct = 0usize;
        for s in eval {
            let out = taskfree_forward(&self.base, &self.registry, &self.gate, s.x())?;
            if self.cfg.train.is_correct(out.view(), s.y) {
                correct += 1;
            }
        }
        Ok(100.0 * correct as f64 / eval.len() as f64)
    }

    /// Router decisions for every sample, numbered consecutively across `sets`.
    pub fn audit(&self, sets: &[&[Sample]]) -> Result<Vec<AuditRow>> {
        let mut rows = Vec::new();
        let mut id = 0;
        for set in sets {
            for s in *set {
                rows.extend(audit_rows(&self.gate.route(s.x())?, id));
                id += 1;
            }
        }
        Ok(rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub task: usize,
    pub selection_size: usize,
    pub wall_ms: u64,
    pub grad_check_max_rel_error: Option<f64>,
    pub shared_drift: f64,
    pub split_events: usize,
    pub final_loss: f64,
    pub accuracy_row: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSummary {
    pub id: u64,
    pub kind: String,
    pub owned_blocks: usize,
    pub frozen: bool,
    pub checksum: String,
}

pub fn expert_summaries(registry: &Registry) -> Vec<ExpertSummary> {
    registry
        .experts()
        .iter()
        .map(|e| ExpertSummary {
            id: e.id.0,
            kind: e.kind.to_string(),
            owned_blocks: e.owned().len(),
            frozen: e.is_frozen(),
            checksum: format!("{:016x}", e.checksum()),
        })
        .collect()
}

/// Everything a finished (or partially finished) sequence run produced.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub method: String,
    pub matrix: AccuracyMatrix,
    pub ledger: CapacityLedger,
    pub trace: Vec<TraceEntry>,
    pub audit: Vec<AuditRow>,
    pub steps: Vec<StepSummary>,
    pub experts: Vec<ExpertSummary>,
    pub registry: Option<Registry>,
    pub gate: Option<GateState>,
}

/// A run that stopped early, with whatever it had produced.
#[derive(Debug)]
pub struct PartialRun {
    pub error: Error,
    pub output: Box<RunOutput>,
}

impl std::fmt::Display for PartialRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run stopped after {} tasks: {}", self.output.steps.len(), self.error)
    }
}

impl std::error::Error for PartialRun {}

fn elapsed_ms(t: Instant) -> u64 {
    t.elapsed().as_millis().try_into().unwrap_or(u64::MAX)
}

/// Train the expert learner over `tasks` in order and evaluate every seen task
/// after each one, without task ids.
pub fn run_sequence(base: &BaseModel, tasks: &[TaskSplit], cfg: &LearnerConfig) -> std::result::Result<RunOutput, PartialRun> {
    let mut out = RunOutput { method: "seta".into(), ..Default::default() };
    let fail = |error: Error, out: RunOutput| PartialRun { error, output: Box::new(out) };
    if tasks.is_empty() {
        return Err(fail(Error::config("task sequence is empty"), out));
    }
    let mut learner = match SetaLearner::new(base.clone(), cfg.clone()) {
        Ok(l) => l,
        Err(e) => return Err(fail(e, out)),
    };
    for (i, t) in tasks.iter().enumerate() {
        let started = Instant::now();
        let step = (|| -> Result<StepSummary> {
            let (prepared, report) = learner.run_task(t.train)?;
            let row = tasks[..=i].iter().map(|s| learner.evaluate(s.eval)).collect::<Result<Vec<_>>>()?;
            out.matrix.push_row(row.clone())?;
            Ok(StepSummary {
                task: report.task,
                selection_size: report.selection_size,
                wall_ms: elapsed_ms(started),
                grad_check_max_rel_error: report.grad_check.map(|c| c.max_rel_error),
                shared_drift: report.shared_drift,
                split_events: prepared.splits.len(),
                final_loss: report.final_loss,
                accuracy_row: row,
            })
        })();
        out.ledger = learner.ledger().clone();
        out.trace = learner.trace().to_vec();
        out.experts = expert_summaries(learner.registry());
        match step {
            Ok(s) => out.steps.push(s),
            Err(e) => {
                out.registry = Some(learner.registry().clone());
                out.gate = Some(learner.gate().clone());
                return Err(fail(e, out));
            }
        }
    }
    let evals: Vec<&[Sample]> = tasks.iter().map(|t| t.eval).collect();
    match learner.audit(&evals) {
        Ok(a) => out.audit = a,
        Err(e) => return Err(fail(e, out)),
    }
    out.registry = Some(learner.registry().clone());
    out.gate = Some(learner.gate().clone());
    Ok(out)
}

#[cfg(test)]
mod tests;
