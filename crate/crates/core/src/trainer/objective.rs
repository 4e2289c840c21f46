use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::blockgrid::{BlockCoord, IndexSet};
use crate::error::{Error, Result};
use crate::experts::{ExpertId, Registry};
use crate::gating::GateState;
use crate::nanonet::{loss_and_grad, ActiveSet, BaseModel, DeltaOverlay, Session};
use crate::tasks::Sample;

/// How expert outputs are mixed while training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRouting {
    /// Softmax over every expert; all gate rows get gradient.
    #[default]
    Dense,
    /// The inference rule: top-k experts with renormalized weights.
    Topk,
}

/// Loss of one batch and its gradients. Block gradients cover the data term only;
/// the anchoring penalty is handled by [`penalty_gradient`] or a proximal step.
#[derive(Clone, Debug, Default)]
pub struct CompositeGrad {
    pub data: f64,
    pub penalty: f64,
    pub blocks: BTreeMap<ExpertId, BTreeMap<BlockCoord, Array2<f64>>>,
    pub gate: BTreeMap<ExpertId, Array1<f64>>,
}

impl CompositeGrad {
    pub fn total(&self) -> f64 {
        self.data + self.penalty
    }
}

/// Mean negative log-likelihood of `batch` under base + routed experts, plus
/// `λ Σ n_j ‖ΔW_j − ΔW*_j‖²` over the shared expert when it is trainable.
/// Gradients are produced for every owned block of the `trainable` experts and,
/// with `train_gate`, for every gate row.
pub fn composite_loss(
    batch: &[Sample],
    base: &BaseModel,
    registry: &Registry,
    gate: &GateState,
    lambda: f64,
    trainable: &[ExpertId],
    routing: TrainRouting,
    train_gate: bool,
) -> Result<CompositeGrad> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let order = gate.order();
    let mut records = Vec::with_capacity(order.len());
    for id in order {
        records.push(
            registry
                .get(*id)
                .ok_or_else(|| Error::State(format!("gate routes to unknown expert {id}")))?,
        );
    }
    let owned: BTreeMap<ExpertId, &IndexSet> = trainable
        .iter()
        .map(|id| {
            registry
                .get(*id)
                .map(|e| (*id, e.owned()))
                .ok_or_else(|| Error::State(format!("trainable expert {id} does not exist")))
        })
        .collect::<Result<_>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut out = CompositeGrad::default();
    for (i, s) in batch.iter().enumerate() {
        let x = s.x();
        let r = gate.route(x)?;
        let (idx, w): (Vec<usize>, Vec<f64>) = match routing {
            TrainRouting::Dense => ((0..order.len()).collect(), r.probs.clone()),
            TrainRouting::Topk => (r.active.clone(), r.weights.clone()),
        };
        let overlays: Vec<(f64, &DeltaOverlay)> = idx.iter().zip(&w).map(|(&k, &wk)| (wk, records[k].deltas())).collect();
        let mut session = Session::new(base, overlays)?;
        let y = session.forward(x)?;
        let (loss, g) = loss_and_grad(y.view(), s.y)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} at batch sample {i}")));
        }
        out.data += loss * scale;
        let mut active = ActiveSet { blocks: BTreeMap::new(), weights: train_gate };
        for (pos, &k) in idx.iter().enumerate() {
            if let Some(set) = owned.get(&order[k]) {
                active.blocks.insert(pos, (*set).clone());
            }
        }
        let grads = session.backward(g.view(), &active)?;
        for (pos, per_block) in grads.blocks {
            let acc = out.blocks.entry(order[idx[pos]]).or_default();
            for (b, gb) in per_block {
                match acc.get_mut(&b) {
                    Some(a) => a.scaled_add(scale, &gb),
                    None => {
                        acc.insert(b, gb * scale);
                    }
                }
            }
        }
        if train_gate {
            // d logit_k = w_k (ds_k − Σ_j w_j ds_j) over the mixed experts.
            let mean: f64 = w.iter().zip(&grads.weights).map(|(a, b)| a * b).sum();
            for (pos, &k) in idx.iter().enumerate() {
                let dz = w[pos] * (grads.weights[pos] - mean) * scale;
                let row = out.gate.entry(order[k]).or_insert_with(|| Array1::zeros(x.len()));
                row.scaled_add(dz, &x);
            }
        }
    }
    if train_gate {
        for id in order {
            out.gate.entry(*id).or_insert_with(|| Array1::zeros(gate.dim()));
        }
    }
    for id in trainable {
        let acc = out.blocks.entry(*id).or_default();
        for b in owned[id].iter() {
            acc.entry(*b).or_insert_with(|| Array2::zeros(base.grid().block_shape(*b)));
        }
    }
    if let Some(shared) = registry.shared() {
        if trainable.contains(&shared.id) {
            out.penalty = shared.anchor_penalty(lambda);
        }
    }
    if !out.total().is_finite() {
        return Err(Error::Numeric(format!("non-finite objective (data {}, penalty {})", out.data, out.penalty)));
    }
    Ok(out)
}

/// `2 λ n_j (ΔW_j − ΔW*_j)` for every shared block.
pub fn penalty_gradient(registry: &Registry, lambda: f64) -> BTreeMap<BlockCoord, Array2<f64>> {
    let Some(shared) = registry.shared() else { return BTreeMap::new() };
    shared
        .owned()
        .iter()
        .filter_map(|b| {
            let d = shared.deltas().get(*b)?;
            let n = f64::from(shared.share_count().get(b).copied().unwrap_or(0));
            let diff = match shared.anchors().get(b) {
                Some(a) => d - a,
                None => d.clone(),
            };
            Some((*b, diff * (2.0 * lambda * n)))
        })
        .collect()
}

/// Address of one scalar trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Param {
    Delta { expert: ExpertId, block: BlockCoord, row: usize, col: usize },
    Gate { expert: ExpertId, index: usize },
}

/// Flat, ordered list of trainable scalars: every entry of the trainable
/// experts' deltas, then every entry of the listed gate rows.
pub fn param_list(registry: &Registry, trainable: &[ExpertId], gate_rows: &[ExpertId], gate_dim: usize) -> Vec<Param> {
    let mut out = Vec::new();
    for id in trainable {
        let Some(e) = registry.get(*id) else { continue };
        for b in e.owned() {
            if let Some(d) = e.deltas().get(*b) {
                for ((row, col), _) in d.indexed_iter() {
                    out.push(Param::Delta { expert: *id, block: *b, row, col });
                }
            }
        }
    }
    for id in gate_rows {
        out.extend((0..gate_dim).map(|index| Param::Gate { expert: *id, index }));
    }
    out
}

pub fn read_params(registry: &Registry, gate: &GateState, params: &[Param]) -> Vec<f64> {
    params
        .iter()
        .map(|p| match *p {
            Param::Delta { expert, block, row, col } => registry.get(expert).and_then(|e| e.deltas().get(block)).map_or(0.0, |d| d[[row, col]]),
            Param::Gate { expert, index } => gate.row(expert).map_or(0.0, |r| r[index]),
        })
        .collect()
}

pub fn write_params(registry: &mut Registry, gate: &mut GateState, params: &[Param], values: &[f64]) -> Result<()> {
    for (p, &v) in params.iter().zip(values) {
        match *p {
            Param::Delta { expert, block, row, col } => {
                let d = registry
                    .deltas_mut(expert)?
                    .blocks
                    .get_mut(&block)
                    .ok_or_else(|| Error::State(format!("expert {expert} has no delta for {block}")))?;
                d[[row, col]] = v;
            }
            Param::Gate { expert, index } => {
                gate.row_mut(expert).ok_or_else(|| Error::State(format!("no gate row for {expert}")))?[index] = v;
            }
        }
    }
    Ok(())
}

/// Full analytic gradient (data + penalty) in `params` order.
pub fn flatten_gradient(grad: &CompositeGrad, penalty: &BTreeMap<BlockCoord, Array2<f64>>, shared: Option<ExpertId>, params: &[Param]) -> Vec<f64> {
    params
        .iter()
        .map(|p| match *p {
            Param::Delta { expert, block, row, col } => {
                let data = grad.blocks.get(&expert).and_then(|m| m.get(&block)).map_or(0.0, |g| g[[row, col]]);
                let pen = if Some(expert) == shared { penalty.get(&block).map_or(0.0, |g| g[[row, col]]) } else { 0.0 };
                data + pen
            }
            Param::Gate { expert, index } => grad.gate.get(&expert).map_or(0.0, |g| g[index]),
        })
        .collect()
}
