//! Split-on-share evolution: per-layer intersection with prior unique experts,
//! two cardinality filters, and expert formation with weight inheritance.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::blockgrid::{in_layer, layers_of, Grid, IndexSet};
use crate::error::{Error, Result};
use crate::experts::{bump_share_counts, ExpertId, ExpertKind, ExpertRecord, Registry};
use crate::metrics::{CapacityLedger, CapacityRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SosThresholds {
    /// Fewer intersecting blocks than this in a layer is treated as coincidence.
    pub tau_ect: usize,
    /// A non-empty remainder smaller than this is merged into the shared part.
    pub tau_trt: usize,
}

impl Default for SosThresholds {
    fn default() -> Self {
        Self { tau_ect: 2, tau_trt: 2 }
    }
}

impl SosThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.tau_ect == 0 || self.tau_trt == 0 {
            return Err(Error::config("sos thresholds must be >= 1 (tau_ect, tau_trt)"));
        }
        Ok(())
    }
}

/// Restrict both sets to `layer`, then return `(prev ∩ curr, prev ∖ curr, curr ∖ prev)`.
pub fn raw_decompose(prev: &IndexSet, curr: &IndexSet, layer: usize) -> (IndexSet, IndexSet, IndexSet) {
    let p = in_layer(prev, layer);
    let c = in_layer(curr, layer);
    let inter = p.intersection(&c).copied().collect();
    let rem = p.difference(&c).copied().collect();
    let excl = c.difference(&p).copied().collect();
    (inter, rem, excl)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Neither filter changed the raw split.
    #[default]
    Raw,
    /// The intersection was too small and went back to the remainder.
    CreationRejected,
    /// The remainder was too small and joined the shared part.
    RemainderAbsorbed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Filtered {
    pub shared: IndexSet,
    pub remainder: IndexSet,
    pub provenance: Provenance,
}

/// Apply the creation filter, then the tiny-remainder filter to its output.
/// The second filter only fires when a shared part survived the first.
pub fn apply_filters(intersection: &IndexSet, remainder: &IndexSet, th: &SosThresholds) -> Result<Filtered> {
    th.validate()?;
    if let Some(b) = intersection.intersection(remainder).next() {
        return Err(Error::Precondition(format!("block {b} is in both the intersection and the remainder")));
    }
    let mut shared = intersection.clone();
    let mut rest = remainder.clone();
    let mut provenance = Provenance::Raw;
    if shared.len() < th.tau_ect {
        rest.append(&mut shared);
        if !intersection.is_empty() {
            provenance = Provenance::CreationRejected;
        }
    }
    if !shared.is_empty() && !rest.is_empty() && rest.len() < th.tau_trt {
        shared.append(&mut rest);
        provenance = Provenance::RemainderAbsorbed;
    }
    Ok(Filtered { shared, remainder: rest, provenance })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSplit {
    pub layer: usize,
    pub shared_gain: IndexSet,
    pub stays_unique: IndexSet,
    pub provenance: Provenance,
}

/// Planned split of one prior unique expert.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSplit {
    pub parent: ExpertId,
    pub parent_task: usize,
    pub layers: Vec<LayerSplit>,
}

impl ExpertSplit {
    pub fn shared_gain(&self) -> IndexSet {
        self.layers.iter().flat_map(|l| l.shared_gain.iter().copied()).collect()
    }

    pub fn stays_unique(&self) -> IndexSet {
        self.layers.iter().flat_map(|l| l.stays_unique.iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub task: usize,
    pub selection: IndexSet,
    /// Selected blocks the shared expert already owns; they only bump `n_j`.
    pub shared_hits: IndexSet,
    /// One entry per prior unique expert the selection touches.
    pub splits: Vec<ExpertSplit>,
    /// Selected blocks nobody owned yet.
    pub new_task: IndexSet,
}

/// Decide, without mutating anything, how `selection` for `task` reshapes the registry.
pub fn plan_evolution(registry: &Registry, task: usize, selection: &IndexSet, th: &SosThresholds) -> Result<SplitOutcome> {
    th.validate()?;
    let shared_hits = registry
        .shared()
        .map(|s| s.owned().intersection(selection).copied().collect())
        .unwrap_or_default();
    let mut splits = Vec::new();
    for e in registry.experts() {
        let ExpertKind::Unique(parent_task) = e.kind else { continue };
        if e.owned().is_disjoint(selection) {
            continue;
        }
        let mut layers = Vec::new();
        for layer in layers_of(e.owned()) {
            let (inter, rem, _) = raw_decompose(e.owned(), selection, layer);
            let f = apply_filters(&inter, &rem, th)?;
            layers.push(LayerSplit {
                layer,
                shared_gain: f.shared,
                stays_unique: f.remainder,
                provenance: f.provenance,
            });
        }
        splits.push(ExpertSplit { parent: e.id, parent_task, layers });
    }
    let owned = registry.owned_union();
    let new_task = selection.difference(&owned).copied().collect();
    Ok(SplitOutcome { task, selection: selection.clone(), shared_hits, splits, new_task })
}

/// What [`form_experts`] did to the registry, for the router to mirror.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEvent {
    pub parent: ExpertId,
    pub parent_task: usize,
    /// New shared expert first (only when this split created it), then the new unique record.
    pub children: Vec<ExpertId>,
    pub created_shared: bool,
    pub moved_to_shared: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Formation {
    pub events: Vec<SplitEvent>,
    pub new_unique: ExpertId,
    /// Prior experts whose intersection was rejected on every layer.
    pub untouched: Vec<ExpertId>,
}

/// Commit a planned evolution. Shared blocks carry their trained deltas over
/// unchanged and start with `n_j = 2`; remainders keep their weights and freeze
/// state in a new unique record; fresh blocks form a plastic `Unique(task)`.
pub fn form_experts(registry: &mut Registry, grid: &Grid, outcome: &SplitOutcome) -> Result<Formation> {
    if registry.task_selections().contains_key(&outcome.task) {
        return Err(Error::Registry(format!("task {} was already formed", outcome.task)));
    }
    let owned = registry.owned_union();
    if !outcome.new_task.is_disjoint(&owned) {
        return Err(Error::Ownership("new-task blocks are already owned".into()));
    }
    for split in &outcome.splits {
        let parent = registry
            .get(split.parent)
            .ok_or_else(|| Error::Registry(format!("split parent {} is gone", split.parent)))?;
        let mut planned = split.shared_gain();
        planned.extend(split.stays_unique());
        if &planned != parent.owned() {
            return Err(Error::Ownership(format!("split of {} does not cover its owned blocks", split.parent)));
        }
    }

    registry.record_selection(outcome.task, outcome.selection.clone())?;
    if !outcome.shared_hits.is_empty() {
        let shared = registry
            .shared_mut()
            .ok_or_else(|| Error::Ownership("shared hits without a shared expert".into()))?;
        bump_share_counts(shared, &outcome.shared_hits)?;
    }

    let mut events = Vec::new();
    let mut untouched = Vec::new();
    for split in &outcome.splits {
        let gain = split.shared_gain();
        if gain.is_empty() {
            untouched.push(split.parent);
            continue;
        }
        let mut parent = registry.retire(split.parent)?;
        let mut children = Vec::new();
        let created_shared = registry.shared().is_none();
        if created_shared {
            let id = registry.allocate_id();
            registry.push(ExpertRecord::new(id, ExpertKind::Shared, IndexSet::new()));
            children.push(id);
        }
        let shared = registry.shared_mut().expect("shared expert exists");
        for b in &gain {
            let delta = parent.deltas.remove(*b).unwrap_or_else(|| Array2::zeros(grid.block_shape(*b)));
            shared.anchors.insert(*b, delta.clone());
            shared.deltas.blocks.insert(*b, delta);
            shared.share_count.insert(*b, 2);
            shared.owned.insert(*b);
        }

        let child_id = registry.allocate_id();
        let mut child = ExpertRecord::new(child_id, ExpertKind::Unique(split.parent_task), split.stays_unique());
        child.deltas = std::mem::take(&mut parent.deltas);
        child.frozen = parent.frozen;
        registry.push(child);
        children.push(child_id);
        events.push(SplitEvent {
            parent: split.parent,
            parent_task: split.parent_task,
            children,
            created_shared,
            moved_to_shared: gain.len(),
        });
    }

    let new_unique = registry.allocate_id();
    registry.push(ExpertRecord::new(new_unique, ExpertKind::Unique(outcome.task), outcome.new_task.clone()));
    registry.check_integrity()?;
    Ok(Formation { events, new_unique, untouched })
}

/// Ownership-only replay of a selection trace (no weights): registry after each
/// step together with its capacity row.
pub fn replay(trace: &[IndexSet], grid: &Grid, th: &SosThresholds) -> Result<(Registry, CapacityLedger)> {
    let mut registry = Registry::new();
    let mut ledger = CapacityLedger::default();
    for (i, sel) in trace.iter().enumerate() {
        let task = i + 1;
        if task == 1 {
            registry.init_first_task(sel.clone())?;
        } else {
            let outcome = plan_evolution(&registry, task, sel, th)?;
            form_experts(&mut registry, grid, &outcome)?;
        }
        registry.freeze_history(task + 1);
        ledger.rows.push(registry.capacity_snapshot(task));
    }
    Ok((registry, ledger))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthPoint {
    pub step: usize,
    pub sos_total: usize,
    pub independent_total: usize,
}

/// Owned blocks after each step against the sum of per-task selection sizes.
pub fn growth_curve(trace: &[IndexSet], grid: &Grid, th: &SosThresholds) -> Result<Vec<GrowthPoint>> {
    let (_, ledger) = replay(trace, grid, th)?;
    let mut independent = 0;
    Ok(ledger
        .rows
        .iter()
        .zip(trace)
        .map(|(row, sel): (&CapacityRow, &IndexSet)| {
            independent += sel.len();
            GrowthPoint { step: row.step, sos_total: row.total, independent_total: independent }
        })
        .collect())
}

/// Bounding grid for a trace: every layer sized to the largest coordinate seen.
pub fn grid_for_trace(trace: &[IndexSet], block_size: usize) -> Result<Grid> {
    let layers: BTreeSet<usize> = trace.iter().flat_map(layers_of).collect();
    let n_layers = layers.last().map_or(1, |l| l + 1);
    let mut dims = vec![(block_size, block_size); n_layers];
    for b in trace.iter().flatten() {
        let d = &mut dims[b.layer];
        d.0 = d.0.max((b.row + 1) * block_size);
        d.1 = d.1.max((b.col + 1) * block_size);
    }
    crate::blockgrid::partition(&dims, block_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockgrid::{partition, BlockCoord};
    use proptest::prelude::*;

    fn b(i: usize) -> BlockCoord {
        BlockCoord::new(0, 0, i)
    }

    fn set(ids: &[usize]) -> IndexSet {
        ids.iter().map(|&i| b(i)).collect()
    }

    #[test]
    fn decompose_examples() {
        let (i, r, e) = raw_decompose(&set(&[0, 1, 2]), &set(&[1, 2, 3]), 0);
        assert_eq!((i, r, e), (set(&[1, 2]), set(&[0]), set(&[3])));
        let (_, r, e) = raw_decompose(&set(&[0, 1]), &set(&[0, 1]), 0);
        assert!(r.is_empty() && e.is_empty());
        let (i, _, _) = raw_decompose(&set(&[0]), &set(&[1]), 0);
        assert!(i.is_empty());
        let other_layer = IndexSet::from([BlockCoord::new(1, 0, 0)]);
        let (i, r, e) = raw_decompose(&other_layer, &other_layer, 0);
        assert!(i.is_empty() && r.is_empty() && e.is_empty());
    }

    #[test]
    fn filter_examples() {
        let th = SosThresholds::default();
        let f = apply_filters(&set(&[9]), &set(&[0, 1]), &th).unwrap();
        assert_eq!((f.shared, f.remainder, f.provenance), (set(&[]), set(&[0, 1, 9]), Provenance::CreationRejected));
        let f = apply_filters(&set(&[1, 2]), &set(&[0]), &th).unwrap();
        assert_eq!((f.shared, f.remainder, f.provenance), (set(&[0, 1, 2]), set(&[]), Provenance::RemainderAbsorbed));
        let f = apply_filters(&set(&[1, 2]), &set(&[]), &th).unwrap();
        assert_eq!((f.shared, f.remainder, f.provenance), (set(&[1, 2]), set(&[]), Provenance::Raw));
        assert!(matches!(apply_filters(&set(&[1]), &set(&[1]), &th), Err(Error::Precondition(_))));
        assert!(apply_filters(&set(&[]), &set(&[]), &SosThresholds { tau_ect: 0, tau_trt: 1 }).is_err());
    }

    fn grid() -> Grid {
        partition(&[(4, 32), (4, 32)], 4).unwrap()
    }

    #[test]
    fn formation_example_absorbs_tiny_remainder() {
        let g = grid();
        let mut r = Registry::new();
        let u1 = r.init_first_task(set(&[0, 1, 2])).unwrap();
        r.deltas_mut(u1).unwrap().insert(&g, b(1), Array2::from_elem((4, 4), 0.25)).unwrap();
        r.freeze_history(2);
        let before = r.get(u1).unwrap().deltas().get(b(1)).unwrap().clone();

        let plan = plan_evolution(&r, 2, &set(&[1, 2, 3]), &SosThresholds::default()).unwrap();
        let f = form_experts(&mut r, &g, &plan).unwrap();
        let shared = r.shared().unwrap();
        assert_eq!(shared.owned(), &set(&[0, 1, 2]));
        assert_eq!(shared.deltas().get(b(1)).unwrap(), &before);
        assert!(shared.share_count().values().all(|&n| n == 2));
        let u2: Vec<_> = r.unique_for(2).collect();
        assert_eq!(u2[0].owned(), &set(&[3]));
        assert!(!u2[0].is_frozen());
        let u1_child: Vec<_> = r.unique_for(1).collect();
        assert_eq!(u1_child.len(), 1);
        assert!(u1_child[0].owned().is_empty() && u1_child[0].is_frozen());
        assert!(r.get(u1).is_none());
        assert_eq!(f.events[0].children.len(), 2);
        assert!(f.events[0].created_shared);
    }

    #[test]
    fn no_overlap_adds_only_new_unique() {
        let g = grid();
        let mut r = Registry::new();
        r.init_first_task(set(&[0, 1])).unwrap();
        let plan = plan_evolution(&r, 2, &set(&[4, 5]), &SosThresholds::default()).unwrap();
        let f = form_experts(&mut r, &g, &plan).unwrap();
        assert!(f.events.is_empty() && r.shared().is_none());
        assert_eq!(r.experts().len(), 2);
    }

    #[test]
    fn rejected_intersection_keeps_blocks_in_prior_expert() {
        let g = grid();
        let mut r = Registry::new();
        let u1 = r.init_first_task(set(&[0, 1, 2])).unwrap();
        let plan = plan_evolution(&r, 2, &set(&[2, 5]), &SosThresholds::default()).unwrap();
        let f = form_experts(&mut r, &g, &plan).unwrap();
        assert_eq!(f.untouched, vec![u1]);
        assert_eq!(r.get(u1).unwrap().owned(), &set(&[0, 1, 2]));
        assert_eq!(r.unique_for(2).next().unwrap().owned(), &set(&[5]));
    }

    #[test]
    fn repeat_selection_bumps_counts() {
        let g = grid();
        let trace = vec![set(&[0, 1, 2]), set(&[0, 1, 2]), set(&[0, 1, 2])];
        let (r, ledger) = replay(&trace, &g, &SosThresholds::default()).unwrap();
        assert!(r.shared().unwrap().share_count().values().all(|&n| n == 3));
        let totals: Vec<usize> = ledger.rows.iter().map(|row| row.total).collect();
        assert_eq!(totals, vec![3, 3, 3]);
        ledger.check_identity().unwrap();
    }

    #[test]
    fn second_split_rekeys_only_the_unique_child() {
        let g = grid();
        let trace = [set(&[0, 1, 2, 3]), set(&[0, 1, 4, 5, 6]), set(&[4, 5, 2, 3])];
        let mut r = Registry::new();
        r.init_first_task(trace[0].clone()).unwrap();
        for (i, sel) in trace.iter().enumerate().skip(1) {
            let plan = plan_evolution(&r, i + 1, sel, &SosThresholds::default()).unwrap();
            let f = form_experts(&mut r, &g, &plan).unwrap();
            if i == 2 {
                assert_eq!(f.events.len(), 2);
                assert!(f.events.iter().all(|e| e.children.len() == 1 && !e.created_shared));
            }
        }
        // Task 2's lone leftover block 6 is a tiny remainder and joins the shared expert.
        assert_eq!(r.shared().unwrap().owned(), &set(&[0, 1, 2, 3, 4, 5, 6]));
        assert_eq!(r.unique_for(2).map(|e| e.owned().len()).sum::<usize>(), 0);
        assert_eq!(r.shared().unwrap().share_count()[&b(0)], 2);
    }

    #[test]
    fn growth_extremes() {
        let g = grid();
        let same = vec![set(&[0, 1, 2]); 4];
        let pts = growth_curve(&same, &g, &SosThresholds::default()).unwrap();
        assert!(pts.iter().skip(1).all(|p| p.sos_total == 3));
        let disjoint: Vec<IndexSet> = (0..4).map(|t| set(&[2 * t, 2 * t + 1])).collect();
        let pts = growth_curve(&disjoint, &g, &SosThresholds::default()).unwrap();
        assert!(pts.iter().all(|p| p.sos_total == p.independent_total));
    }

    fn brute(i: u8, r: u8, ect: usize, trt: usize) -> (u8, u8) {
        let (mut i, mut r) = (i, r);
        if (i.count_ones() as usize) < ect {
            r |= i;
            i = 0;
        }
        let nr = r.count_ones() as usize;
        if i != 0 && nr > 0 && nr < trt {
            i |= r;
            r = 0;
        }
        (i, r)
    }

    fn to_set(mask: u8) -> IndexSet {
        (0..6).filter(|k| mask & (1 << k) != 0).map(b).collect()
    }

    #[test]
    fn filters_match_exhaustive_oracle() {
        let mut mismatches = 0;
        for ect in 1..=3 {
            for trt in 1..=3 {
                let th = SosThresholds { tau_ect: ect, tau_trt: trt };
                for i in 0u8..64 {
                    for r in 0u8..64 {
                        let got = apply_filters(&to_set(i), &to_set(r), &th);
                        if i & r != 0 {
                            mismatches += usize::from(got.is_ok());
                            continue;
                        }
                        let f = got.unwrap();
                        let (wi, wr) = brute(i, r, ect, trt);
                        mismatches += usize::from(f.shared != to_set(wi) || f.remainder != to_set(wr));
                        let again = apply_filters(&f.shared, &f.remainder, &th).unwrap();
                        mismatches += usize::from(again.shared != f.shared || again.remainder != f.remainder);
                    }
                }
            }
        }
        assert_eq!(mismatches, 0);
    }

    fn arb_trace() -> impl Strategy<Value = Vec<IndexSet>> {
        proptest::collection::vec(proptest::collection::btree_set((0usize..2, 0usize..4), 0..8), 1..6).prop_map(|v| {
            v.into_iter()
                .map(|s| s.into_iter().map(|(l, c)| BlockCoord::new(l, 0, c)).collect())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn evolution_conserves_blocks(trace in arb_trace(), ect in 1usize..=3, trt in 1usize..=3) {
            let th = SosThresholds { tau_ect: ect, tau_trt: trt };
            let g = partition(&[(4, 16), (4, 16)], 4).unwrap();
            let mut r = Registry::new();
            r.init_first_task(trace[0].clone()).unwrap();
            let mut independent = trace[0].len();
            for (i, sel) in trace.iter().enumerate().skip(1) {
                let prior = r.owned_union();
                let plan = plan_evolution(&r, i + 1, sel, &th).unwrap();
                for layer in 0..2 {
                    let mut parts: Vec<IndexSet> = Vec::new();
                    for s in &plan.splits {
                        for l in s.layers.iter().filter(|l| l.layer == layer) {
                            parts.push(l.shared_gain.clone());
                            parts.push(l.stays_unique.clone());
                        }
                    }
                    parts.push(in_layer(&plan.new_task, layer));
                    let split_parents: IndexSet = plan.splits.iter()
                        .flat_map(|s| r.get(s.parent).unwrap().owned().iter().copied()).collect();
                    parts.push(in_layer(&prior, layer).difference(&split_parents).copied().collect());
                    let total: usize = parts.iter().map(IndexSet::len).sum();
                    let union: IndexSet = parts.into_iter().flatten().collect();
                    let want: IndexSet = in_layer(&prior, layer).union(&in_layer(sel, layer)).copied().collect();
                    prop_assert_eq!(total, union.len());
                    prop_assert_eq!(union, want);
                }
                form_experts(&mut r, &g, &plan).unwrap();
                independent += sel.len();
                let row = r.capacity_snapshot(i + 1);
                row.check().unwrap();
                prop_assert!(row.total <= independent);
            }
        }
    }
}
