use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, Ix2};
use rand::seq::SliceRandom;

use super::{
    apply_step, batches, elapsed_ms, select_for_task, warmup_gradients, LearnerConfig, PartialRun, RunOutput,
    StepSummary, TaskSplit, Velocity, WarmupModel,
};
use crate::blockgrid::{BlockCoord, IndexSet, SelectionConfig, TraceEntry};
use crate::error::{Error, Result};
use crate::metrics::{CapacityLedger, CapacityRow};
use crate::nanonet::{forward, loss_and_grad, ActiveSet, BaseModel, DeltaOverlay, Session};
use crate::rng::{stream, Stream};
use crate::tasks::Sample;

/// One mutable delta set shared by every task: no experts, no freezing. With a
/// positive `ewc_lambda`, each step is pulled toward the deltas left by the
/// previous task (zero before the first).
#[derive(Clone, Debug)]
pub struct SingleDeltaLearner {
    base: BaseModel,
    cfg: LearnerConfig,
    selection: SelectionConfig,
    ewc_lambda: f64,
    deltas: DeltaOverlay,
    anchor: DeltaOverlay,
    task: usize,
    trace: Vec<TraceEntry>,
    first_selected: BTreeMap<BlockCoord, usize>,
    ledger: CapacityLedger,
}

impl SingleDeltaLearner {
    pub fn new(base: BaseModel, cfg: LearnerConfig, ewc_lambda: f64) -> Result<Self> {
        cfg.validate()?;
        if !(ewc_lambda.is_finite() && ewc_lambda >= 0.0) {
            return Err(Error::config("ewc lambda must be finite and >= 0"));
        }
        let selection = cfg.selection_for(&base)?;
        Ok(Self {
            base,
            cfg,
            selection,
            ewc_lambda,
            deltas: DeltaOverlay::new(),
            anchor: DeltaOverlay::new(),
            task: 0,
            trace: Vec::new(),
            first_selected: BTreeMap::new(),
            ledger: CapacityLedger::default(),
        })
    }

    pub fn deltas(&self) -> &DeltaOverlay {
        &self.deltas
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn ledger(&self) -> &CapacityLedger {
        &self.ledger
    }

    fn batch_gradients(&self, batch: &[Sample], active: &IndexSet) -> Result<(f64, BTreeMap<BlockCoord, Array2<f64>>)> {
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut acc: BTreeMap<BlockCoord, Array2<f64>> = BTreeMap::new();
        let set = ActiveSet { blocks: BTreeMap::from([(0, active.clone())]), weights: false };
        for (i, s) in batch.iter().enumerate() {
            let mut session = Session::new(&self.base, vec![(1.0, &self.deltas)])?;
            let y = session.forward(s.x())?;
            let (l, g) = loss_and_grad(y.view(), s.y)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {l} at batch sample {i}")));
            }
            loss += l * scale;
            for (b, gb) in session.backward(g.view(), &set)?.blocks.remove(&0).unwrap_or_default() {
                match acc.get_mut(&b) {
                    Some(a) => a.scaled_add(scale, &gb),
                    None => {
                        acc.insert(b, gb * scale);
                    }
                }
            }
        }
        Ok((loss, acc))
    }

    /// Select blocks for the next task and train the shared delta set on them.
    pub fn run_task(&mut self, train: &[Sample]) -> Result<(IndexSet, f64)> {
        if train.is_empty() {
            return Err(Error::config(format!("task {} has no training data", self.task + 1)));
        }
        let task = self.task + 1;
        let grads = match self.cfg.warmup.model {
            WarmupModel::Full => warmup_gradients(&self.base, train, &self.cfg, |_| Ok(vec![(1.0, &self.deltas)]))?,
            WarmupModel::Base => warmup_gradients(&self.base, train, &self.cfg, |_| Ok(Vec::new()))?,
        };
        let (selection, trace) = select_for_task(&self.base, &self.selection, task, &grads)?;
        let grid = self.base.grid().clone();
        for b in &selection {
            if self.deltas.get(*b).is_none() {
                self.deltas.insert(&grid, *b, Array2::zeros(grid.block_shape(*b)))?;
            }
            self.first_selected.entry(*b).or_insert(task);
        }

        let tc = self.cfg.train.clone();
        let mut rng = stream(tc.seed, Stream::Shuffle, task as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let total_steps = tc.epochs_per_task * batches(train.len(), tc.batch_size);
        let mut vel: Velocity<BlockCoord, Ix2> = Velocity::default();
        let mut step = 0;
        let mut final_loss = f64::NAN;
        for epoch in 0..tc.epochs_per_task {
            order.shuffle(&mut rng);
            for (bi, idx) in order.chunks(tc.batch_size).enumerate() {
                let batch: Vec<Sample> = idx.iter().map(|&i| train[i].clone()).collect();
                let (loss, g) = self.batch_gradients(&batch, &selection).map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("task {task} epoch {} batch {}: {m}", epoch + 1, bi + 1)),
                    other => other,
                })?;
                final_loss = loss;
                let lr = tc.lr_at(step, total_steps);
                step += 1;
                let c = 2.0 * lr * self.ewc_lambda;
                for (b, gb) in &g {
                    let dir = vel.direction(&tc, *b, gb);
                    let zero;
                    let pull = if self.ewc_lambda > 0.0 {
                        let a = match self.anchor.get(*b) {
                            Some(a) => a,
                            None => {
                                zero = Array2::zeros(gb.dim());
                                &zero
                            }
                        };
                        Some((c, a))
                    } else {
                        None
                    };
                    let d = self.deltas.blocks.get_mut(b).expect("selected blocks have deltas");
                    apply_step(d, &dir, lr, pull);
                }
            }
        }
        self.anchor = self.deltas.clone();
        self.task = task;
        self.trace.extend(trace);

        let mut unique = vec![0; task];
        for t in self.first_selected.values() {
            unique[t - 1] += 1;
        }
        self.ledger.rows.push(CapacityRow {
            step: task,
            task_added: task,
            total: self.first_selected.len(),
            shared: 0,
            unique,
        });
        Ok((selection, final_loss))
    }

    pub fn evaluate(&self, eval: &[Sample]) -> Result<f64> {
        if eval.is_empty() {
            return Err(Error::config("evaluation set is empty"));
        }
        let mut correct = 0usize;
        for s in eval {
            let out = forward(&self.base, &[(1.0, &self.deltas)], s.x())?;
            if self.cfg.train.is_correct(out.view(), s.y) {
                correct += 1;
            }
        }
        Ok(100.0 * correct as f64 / eval.len() as f64)
    }
}

fn run_single(
    method: &str,
    base: &BaseModel,
    tasks: &[TaskSplit],
    cfg: &LearnerConfig,
    ewc_lambda: f64,
) -> std::result::Result<RunOutput, PartialRun> {
    let mut out = RunOutput { method: method.into(), ..Default::default() };
    let fail = |error: Error, out: RunOutput| PartialRun { error, output: Box::new(out) };
    if tasks.is_empty() {
        return Err(fail(Error::config("task sequence is empty"), out));
    }
    let mut learner = match SingleDeltaLearner::new(base.clone(), cfg.clone(), ewc_lambda) {
        Ok(l) => l,
        Err(e) => return Err(fail(e, out)),
    };
    for (i, t) in tasks.iter().enumerate() {
        let started = Instant::now();
        let step = (|| -> Result<StepSummary> {
            let (selection, final_loss) = learner.run_task(t.train)?;
            let row = tasks[..=i].iter().map(|s| learner.evaluate(s.eval)).collect::<Result<Vec<_>>>()?;
            out.matrix.push_row(row.clone())?;
            Ok(StepSummary {
                task: i + 1,
                selection_size: selection.len(),
                wall_ms: elapsed_ms(started),
                grad_check_max_rel_error: None,
                shared_drift: 0.0,
                split_events: 0,
                final_loss,
                accuracy_row: row,
            })
        })();
        out.ledger = learner.ledger().clone();
        out.trace = learner.trace().to_vec();
        match step {
            Ok(s) => out.steps.push(s),
            Err(e) => return Err(fail(e, out)),
        }
    }
    Ok(out)
}

/// Plain sequential fine-tuning of one delta set.
pub fn baseline_seq_train(base: &BaseModel, tasks: &[TaskSplit], cfg: &LearnerConfig) -> std::result::Result<RunOutput, PartialRun> {
    run_single("seq", base, tasks, cfg, 0.0)
}

/// Sequential fine-tuning with a uniform quadratic pull toward the previous task's deltas.
pub fn baseline_ewc_lite(
    base: &BaseModel,
    tasks: &[TaskSplit],
    cfg: &LearnerConfig,
    ewc_lambda: f64,
) -> std::result::Result<RunOutput, PartialRun> {
    run_single("ewc", base, tasks, cfg, ewc_lambda)
}
