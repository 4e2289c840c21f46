//! Linear router over experts: top-k routing, logit-preserving expansion on
//! splits, and the task-free forward pass.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{ExpertId, Registry};
use crate::metrics::{parse_table, write_rows};
use crate::nanonet::{forward, BaseModel, DeltaOverlay};
use crate::rng::checksum;

/// Row given to a newly registered expert.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInit {
    /// Logit 0 for every input.
    #[default]
    Zero,
    Row(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateState {
    rows: BTreeMap<ExpertId, Array1<f64>>,
    order: Vec<ExpertId>,
    top_k: usize,
    dim: usize,
}

/// Result of routing one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    /// Expert ids in registration order.
    pub experts: Vec<ExpertId>,
    pub logits: Vec<f64>,
    /// Softmax over all experts.
    pub probs: Vec<f64>,
    /// Indices into `experts`, best first.
    pub active: Vec<usize>,
    /// Softmax renormalized over `active`, aligned with it.
    pub weights: Vec<f64>,
}

impl Routing {
    pub fn weight_of(&self, id: ExpertId) -> f64 {
        self.active
            .iter()
            .zip(&self.weights)
            .find(|(&i, _)| self.experts[i] == id)
            .map_or(0.0, |(_, &w)| w)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

impl GateState {
    pub fn new(dim: usize, top_k: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("gate input dimension must be at least 1"));
        }
        if top_k == 0 {
            return Err(Error::config("gating.top_k must be at least 1"));
        }
        Ok(Self { rows: BTreeMap::new(), order: Vec::new(), top_k, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn order(&self) -> &[ExpertId] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn row(&self, id: ExpertId) -> Option<&Array1<f64>> {
        self.rows.get(&id)
    }

    pub(crate) fn row_mut(&mut self, id: ExpertId) -> Option<&mut Array1<f64>> {
        self.rows.get_mut(&id)
    }

    pub fn logit(&self, id: ExpertId, x: ArrayView1<f64>) -> Option<f64> {
        self.rows.get(&id).map(|r| x.dot(r))
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.order.iter().flat_map(|id| {
            std::iter::once(id.0 as f64).chain(self.rows[id].iter().copied())
        }))
    }

    /// Logits, full softmax and the top-k active set. With fewer experts than
    /// `top_k` every expert is active. Ties go to the earlier-registered expert.
    pub fn route(&self, x: ArrayView1<f64>) -> Result<Routing> {
        if self.order.is_empty() {
            return Err(Error::State("routing with no registered experts".into()));
        }
        if x.len() != self.dim {
            return Err(Error::shape(format!("gate input has {} entries, expected {}", x.len(), self.dim)));
        }
        let logits: Vec<f64> = self.order.iter().map(|id| x.dot(&self.rows[id])).collect();
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Numeric("non-finite routing logit".into()));
        }
        let probs = softmax(&logits);
        let mut ranked: Vec<usize> = (0..logits.len()).collect();
        ranked.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        ranked.truncate(self.top_k.min(logits.len()));
        let mass: f64 = ranked.iter().map(|&i| probs[i]).sum();
        let weights = ranked.iter().map(|&i| probs[i] / mass).collect();
        Ok(Routing { experts: self.order.clone(), logits, probs, active: ranked, weights })
    }

    /// Replace `parent` by `children`, each getting a bit-exact copy of its row.
    pub fn expand_on_split(&mut self, parent: ExpertId, children: &[ExpertId]) -> Result<()> {
        let row = self
            .rows
            .get(&parent)
            .cloned()
            .ok_or_else(|| Error::Registry(format!("gate has no row for split parent {parent}")))?;
        let mut seen = BTreeSet::new();
        for c in children {
            if self.rows.contains_key(c) || !seen.insert(*c) {
                return Err(Error::Registry(format!("duplicate gate child {c}")));
            }
        }
        self.rows.remove(&parent);
        self.order.retain(|id| *id != parent);
        for c in children {
            self.rows.insert(*c, row.clone());
            self.order.push(*c);
        }
        Ok(())
    }

    pub fn register_new_expert(&mut self, id: ExpertId, init: &GateInit) -> Result<()> {
        if self.rows.contains_key(&id) {
            return Err(Error::Registry(format!("expert {id} already has a gate row")));
        }
        let row = match init {
            GateInit::Zero => Array1::zeros(self.dim),
            GateInit::Row(v) if v.len() == self.dim => Array1::from(v.clone()),
            GateInit::Row(v) => {
                return Err(Error::shape(format!("gate row has {} entries, expected {}", v.len(), self.dim)))
            }
        };
        self.rows.insert(id, row);
        self.order.push(id);
        Ok(())
    }

    /// Gate rows and registry experts must match one to one.
    pub fn check_covers(&self, registry: &Registry) -> Result<()> {
        let gate: BTreeSet<ExpertId> = self.order.iter().copied().collect();
        let reg: BTreeSet<ExpertId> = registry.experts().iter().map(|e| e.id).collect();
        if gate != reg {
            return Err(Error::State(format!(
                "gate experts {:?} do not match registry experts {:?}",
                gate, reg
            )));
        }
        Ok(())
    }
}

/// Overlays and weights for the experts active under `routing`.
pub fn routed_overlays<'a>(registry: &'a Registry, routing: &Routing) -> Result<Vec<(f64, &'a DeltaOverlay)>> {
    routing
        .active
        .iter()
        .zip(&routing.weights)
        .map(|(&i, &w)| {
            let id = routing.experts[i];
            registry
                .get(id)
                .map(|e| (w, e.deltas()))
                .ok_or_else(|| Error::State(format!("routed to unknown expert {id}")))
        })
        .collect()
}

/// Route on the input itself and superpose the active experts. No task id is involved.
pub fn taskfree_forward(base: &BaseModel, registry: &Registry, gate: &GateState, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    gate.check_covers(registry)?;
    let routing = gate.route(x)?;
    let overlays = routed_overlays(registry, &routing)?;
    forward(base, &overlays, x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub sample_id: usize,
    pub expert_id: ExpertId,
    pub logit: f64,
    pub softmax_weight: f64,
    pub active: bool,
}

pub fn audit_rows(routing: &Routing, sample_id: usize) -> Vec<AuditRow> {
    routing
        .experts
        .iter()
        .enumerate()
        .map(|(i, &id)| AuditRow {
            sample_id,
            expert_id: id,
            logit: routing.logits[i],
            softmax_weight: routing.probs[i],
            active: routing.active.contains(&i),
        })
        .collect()
}

pub fn audit_csv(rows: &[AuditRow]) -> String {
    let header = ["sample_id", "expert_id", "logit", "softmax_weight", "active_flag"].map(String::from);
    write_rows(
        &header,
        rows.iter().map(|r| {
            vec![
                r.sample_id.to_string(),
                r.expert_id.0.to_string(),
                format!("{:?}", r.logit),
                format!("{:?}", r.softmax_weight),
                u8::from(r.active).to_string(),
            ]
        }),
    )
}

pub fn parse_audit_csv(text: &str) -> Result<Vec<AuditRow>> {
    let table = parse_table(text)?;
    let mut out = Vec::with_capacity(table.labels.len());
    for (i, (label, c)) in table.labels.iter().zip(&table.cells).enumerate() {
        let line = i + 2;
        let cell = |k: usize| c.get(k).copied().flatten().ok_or(Error::Parse { line, msg: format!("column {k} empty") });
        out.push(AuditRow {
            sample_id: label.parse().map_err(|e| Error::Parse { line, msg: format!("{e}") })?,
            expert_id: ExpertId(cell(0)? as u64),
            logit: cell(1)?,
            softmax_weight: cell(2)?,
            active: cell(3)? != 0.0,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockgrid::{BlockCoord, IndexSet};
    use crate::nanonet::Activation;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn gate_with(rows: &[Vec<f64>], top_k: usize) -> GateState {
        let mut g = GateState::new(rows[0].len(), top_k).unwrap();
        for (i, r) in rows.iter().enumerate() {
            g.register_new_expert(ExpertId(i as u64), &GateInit::Row(r.clone())).unwrap();
        }
        g
    }

    #[test]
    fn single_expert_takes_everything() {
        let g = gate_with(&[vec![0.3, -1.0]], 2);
        let r = g.route(array![1.0, 2.0].view()).unwrap();
        assert_eq!(r.probs, vec![1.0]);
        assert_eq!(r.active, vec![0]);
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn ties_go_to_registration_order() {
        let g = gate_with(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]], 2);
        let r = g.route(array![0.5, -2.0].view()).unwrap();
        assert_eq!(r.active, vec![0, 1]);
        assert_eq!(r.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn hand_softmax_example() {
        let g = gate_with(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        let r = g.route(array![2.0, 1.0].view()).unwrap();
        assert_eq!(r.logits, vec![2.0, 1.0]);
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        assert!((r.probs[0] - e2 / (e2 + e1)).abs() < 1e-15);
        assert!((r.probs[1] - e1 / (e2 + e1)).abs() < 1e-15);
    }

    #[test]
    fn empty_gate_refuses_to_route() {
        let g = GateState::new(2, 2).unwrap();
        assert!(matches!(g.route(array![1.0, 1.0].view()), Err(Error::State(_))));
    }

    #[test]
    fn split_copies_rows_and_preserves_logits() {
        let mut g = gate_with(&[vec![0.1, 0.7, -0.2], vec![1.5, -3.0, 0.25]], 2);
        let parent_row = g.row(ExpertId(1)).unwrap().clone();
        let before = g.clone();
        g.expand_on_split(ExpertId(1), &[ExpertId(5), ExpertId(6)]).unwrap();
        assert_eq!(g.order(), &[ExpertId(0), ExpertId(5), ExpertId(6)]);
        assert!(g.row(ExpertId(1)).is_none());
        for c in [ExpertId(5), ExpertId(6)] {
            let row = g.row(c).unwrap();
            assert!(row.iter().zip(parent_row.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let x = array![0.3, -0.9, 2.0];
        let parent_logit = before.logit(ExpertId(1), x.view()).unwrap();
        assert_eq!(g.logit(ExpertId(5), x.view()).unwrap().to_bits(), parent_logit.to_bits());
        let pre = before.route(x.view()).unwrap();
        let post = g.route(x.view()).unwrap();
        assert_ne!(pre.probs[1], post.probs[1]);

        assert!(g.expand_on_split(ExpertId(0), &[ExpertId(5)]).is_err());
        assert!(g.expand_on_split(ExpertId(0), &[ExpertId(8), ExpertId(8)]).is_err());
        assert!(g.expand_on_split(ExpertId(42), &[ExpertId(9)]).is_err());
    }

    #[test]
    fn register_appends_without_touching_rows() {
        let mut g = gate_with(&[vec![1.0, 2.0]], 1);
        let sum = g.checksum();
        let old = g.row(ExpertId(0)).unwrap().clone();
        g.register_new_expert(ExpertId(3), &GateInit::Zero).unwrap();
        assert_ne!(g.checksum(), sum);
        assert_eq!(g.row(ExpertId(0)).unwrap(), &old);
        assert_eq!(g.len(), 2);
        assert_eq!(g.logit(ExpertId(3), array![4.0, -7.0].view()), Some(0.0));
        assert!(g.register_new_expert(ExpertId(3), &GateInit::Zero).is_err());
    }

    #[test]
    fn taskfree_forward_with_zero_deltas_is_base() {
        let base = BaseModel::new(vec![array![[1.0, 2.0], [3.0, 4.0]]], vec![Activation::Identity], 1).unwrap();
        let mut reg = Registry::new();
        let id = reg.init_first_task(IndexSet::from([BlockCoord::new(0, 0, 0)])).unwrap();
        let mut g = GateState::new(2, 2).unwrap();
        g.register_new_expert(id, &GateInit::Zero).unwrap();
        let x = array![1.0, -1.0];
        assert_eq!(taskfree_forward(&base, &reg, &g, x.view()).unwrap(), forward(&base, &[], x.view()).unwrap());
        reg.deltas_mut(id).unwrap().insert(base.grid(), BlockCoord::new(0, 0, 0), Array2::from_elem((1, 1), 2.0)).unwrap();
        assert_eq!(taskfree_forward(&base, &reg, &g, x.view()).unwrap(), array![1.0, -1.0]);
    }

    #[test]
    fn audit_roundtrip() {
        let g = gate_with(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]], 2);
        let r = g.route(array![0.2, 0.9].view()).unwrap();
        let rows = audit_rows(&r, 7);
        assert_eq!(rows.iter().filter(|a| a.active).count(), 2);
        assert_eq!(parse_audit_csv(&audit_csv(&rows)).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn weights_are_normalized(rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 1..6),
                                  x in proptest::collection::vec(-3.0f64..3.0, 3), k in 1usize..4) {
            let g = gate_with(&rows, k);
            let x = Array1::from(x);
            let r = g.route(x.view()).unwrap();
            prop_assert!((r.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert_eq!(r.active.len(), k.min(rows.len()));
            prop_assert_eq!(g.route(x.view()).unwrap(), r);
        }
    }
}
