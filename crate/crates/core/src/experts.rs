//! Expert registry: block ownership, deltas, freeze flags, anchors and sharing counts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::blockgrid::{BlockCoord, Grid, IndexSet};
use crate::error::{Error, Result};
use crate::metrics::CapacityRow;
use crate::nanonet::snapshot::{pack_overlay, unpack_overlay, PackedBlock};
use crate::nanonet::DeltaOverlay;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpertId(pub u64);

impl std::fmt::Display for ExpertId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "e{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Unique(usize),
    Shared,
}

impl std::fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExpertKind::Unique(t) => write!(f, "unique({t})"),
            ExpertKind::Shared => f.write_str("shared"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertRecord {
    pub id: ExpertId,
    pub kind: ExpertKind,
    pub(crate) owned: IndexSet,
    pub(crate) deltas: DeltaOverlay,
    pub(crate) frozen: bool,
    pub(crate) anchors: BTreeMap<BlockCoord, Array2<f64>>,
    pub(crate) share_count: BTreeMap<BlockCoord, u32>,
}

impl ExpertRecord {
    pub(crate) fn new(id: ExpertId, kind: ExpertKind, owned: IndexSet) -> Self {
        Self {
            id,
            kind,
            owned,
            deltas: DeltaOverlay::new(),
            frozen: false,
            anchors: BTreeMap::new(),
            share_count: BTreeMap::new(),
        }
    }

    pub fn owned(&self) -> &IndexSet {
        &self.owned
    }

    pub fn deltas(&self) -> &DeltaOverlay {
        &self.deltas
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn anchors(&self) -> &BTreeMap<BlockCoord, Array2<f64>> {
        &self.anchors
    }

    pub fn share_count(&self) -> &BTreeMap<BlockCoord, u32> {
        &self.share_count
    }

    pub fn is_shared(&self) -> bool {
        self.kind == ExpertKind::Shared
    }

    fn sq_distance(&self, b: &BlockCoord) -> f64 {
        match (self.deltas.get(*b), self.anchors.get(b)) {
            (Some(d), Some(a)) => (d - a).iter().map(|v| v * v).sum(),
            (Some(d), None) => d.iter().map(|v| v * v).sum(),
            (None, Some(a)) => a.iter().map(|v| v * v).sum(),
            (None, None) => 0.0,
        }
    }

    /// `λ Σ_j n_j ‖ΔW_j − ΔW*_j‖²_F` over owned blocks. Missing deltas or anchors count as zero.
    pub fn anchor_penalty(&self, lambda: f64) -> f64 {
        if lambda == 0.0 {
            return 0.0;
        }
        let total: f64 = self
            .owned
            .iter()
            .map(|b| f64::from(self.share_count.get(b).copied().unwrap_or(0)) * self.sq_distance(b))
            .sum();
        lambda * total
    }

    /// Frobenius distance of the deltas from their anchors.
    pub fn drift(&self) -> f64 {
        self.owned.iter().map(|b| self.sq_distance(b)).sum::<f64>().sqrt()
    }

    pub fn checksum(&self) -> u64 {
        self.deltas.checksum()
    }

    fn check_invariants(&self) -> Result<()> {
        match self.kind {
            ExpertKind::Unique(_) => {
                if !self.anchors.is_empty() || !self.share_count.is_empty() {
                    return Err(Error::Integrity(format!("unique expert {} carries anchors or share counts", self.id)));
                }
            }
            ExpertKind::Shared => {
                for b in &self.owned {
                    if !self.anchors.contains_key(b) {
                        return Err(Error::Integrity(format!("shared block {b} has no anchor")));
                    }
                    if self.share_count.get(b).copied().unwrap_or(0) < 2 {
                        return Err(Error::Integrity(format!("shared block {b} has n_j < 2")));
                    }
                }
            }
        }
        if let Some(b) = self.deltas.blocks.keys().find(|b| !self.owned.contains(b)) {
            return Err(Error::Integrity(format!("expert {} holds a delta for unowned block {b}", self.id)));
        }
        Ok(())
    }
}

/// Add one to `n_j` for blocks the shared expert already owns and a new task selected again.
pub fn bump_share_counts(shared: &mut ExpertRecord, newly_intersected: &IndexSet) -> Result<()> {
    if !shared.is_shared() {
        return Err(Error::Ownership(format!("expert {} is not the shared expert", shared.id)));
    }
    if let Some(b) = newly_intersected.iter().find(|b| !shared.owned.contains(b)) {
        return Err(Error::Ownership(format!("block {b} is not owned by the shared expert")));
    }
    for b in newly_intersected {
        *shared.share_count.entry(*b).or_insert(1) += 1;
    }
    Ok(())
}

/// Snapshot current deltas as the anchors for the next task.
pub fn set_anchors(shared: &mut ExpertRecord, grid: &Grid) {
    shared.anchors = shared
        .owned
        .iter()
        .map(|b| {
            let d = shared.deltas.get(*b).cloned().unwrap_or_else(|| Array2::zeros(grid.block_shape(*b)));
            (*b, d)
        })
        .collect();
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Registry {
    experts: Vec<ExpertRecord>,
    task_selections: BTreeMap<usize, IndexSet>,
    next_id: u64,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn experts(&self) -> &[ExpertRecord] {
        &self.experts
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty() && self.task_selections.is_empty()
    }

    pub fn task_selections(&self) -> &BTreeMap<usize, IndexSet> {
        &self.task_selections
    }

    pub fn get(&self, id: ExpertId) -> Option<&ExpertRecord> {
        self.experts.iter().find(|e| e.id == id)
    }

    pub(crate) fn get_mut(&mut self, id: ExpertId) -> Option<&mut ExpertRecord> {
        self.experts.iter_mut().find(|e| e.id == id)
    }

    pub fn shared(&self) -> Option<&ExpertRecord> {
        self.experts.iter().find(|e| e.is_shared())
    }

    pub(crate) fn shared_mut(&mut self) -> Option<&mut ExpertRecord> {
        self.experts.iter_mut().find(|e| e.is_shared())
    }

    pub fn unique_for(&self, task: usize) -> impl Iterator<Item = &ExpertRecord> {
        self.experts.iter().filter(move |e| e.kind == ExpertKind::Unique(task))
    }

    pub fn owner_of(&self, b: BlockCoord) -> Option<ExpertId> {
        self.experts.iter().find(|e| e.owned.contains(&b)).map(|e| e.id)
    }

    pub fn owned_union(&self) -> IndexSet {
        self.experts.iter().flat_map(|e| e.owned.iter().copied()).collect()
    }

    pub(crate) fn allocate_id(&mut self) -> ExpertId {
        let id = ExpertId(self.next_id);
        self.next_id += 1;
        id
    }

    pub(crate) fn push(&mut self, record: ExpertRecord) {
        self.experts.push(record);
    }

    pub(crate) fn retire(&mut self, id: ExpertId) -> Result<ExpertRecord> {
        let i = self
            .experts
            .iter()
            .position(|e| e.id == id)
            .ok_or_else(|| Error::Registry(format!("expert {id} does not exist")))?;
        Ok(self.experts.remove(i))
    }

    pub(crate) fn record_selection(&mut self, task: usize, selection: IndexSet) -> Result<()> {
        if self.task_selections.contains_key(&task) {
            return Err(Error::Registry(format!("task {task} already has a selection")));
        }
        self.task_selections.insert(task, selection);
        Ok(())
    }

    /// Start the registry with a single plastic `Unique(1)` expert owning `p1`.
    pub fn init_first_task(&mut self, p1: IndexSet) -> Result<ExpertId> {
        if !self.is_empty() {
            return Err(Error::State("init_first_task on a non-empty registry".into()));
        }
        self.record_selection(1, p1.clone())?;
        let id = self.allocate_id();
        self.push(ExpertRecord::new(id, ExpertKind::Unique(1), p1));
        Ok(id)
    }

    /// Freeze every unique expert of a task before `current_task`.
    pub fn freeze_history(&mut self, current_task: usize) {
        for e in &mut self.experts {
            if let ExpertKind::Unique(k) = e.kind {
                if k < current_task {
                    e.frozen = true;
                }
            }
        }
    }

    /// Mutable deltas of a plastic expert. Frozen experts are refused.
    pub fn deltas_mut(&mut self, id: ExpertId) -> Result<&mut DeltaOverlay> {
        let e = self
            .get_mut(id)
            .ok_or_else(|| Error::Registry(format!("expert {id} does not exist")))?;
        if e.frozen {
            return Err(Error::State(format!("expert {id} is frozen")));
        }
        Ok(&mut e.deltas)
    }

    pub fn set_shared_anchors(&mut self, grid: &Grid) {
        if let Some(s) = self.shared_mut() {
            set_anchors(s, grid);
        }
    }

    pub fn capacity_snapshot(&self, step: usize) -> CapacityRow {
        let tasks = self.task_selections.keys().copied().max().unwrap_or(0);
        let mut unique = vec![0; tasks];
        let mut shared = 0;
        for e in &self.experts {
            match e.kind {
                ExpertKind::Shared => shared += e.owned.len(),
                ExpertKind::Unique(t) if t >= 1 && t <= tasks => unique[t - 1] += e.owned.len(),
                ExpertKind::Unique(_) => {}
            }
        }
        let total = self.owned_union().len();
        CapacityRow { step, task_added: step, total, shared, unique }
    }

    /// Pairwise-disjoint ownership covering exactly the union of task selections,
    /// plus per-kind record invariants.
    pub fn check_integrity(&self) -> Result<()> {
        let mut seen: BTreeMap<BlockCoord, ExpertId> = BTreeMap::new();
        for e in &self.experts {
            e.check_invariants()?;
            for b in &e.owned {
                if let Some(other) = seen.insert(*b, e.id) {
                    return Err(Error::Integrity(format!("block {b} owned by both {other} and {}", e.id)));
                }
            }
        }
        let selected: IndexSet = self.task_selections.values().flatten().copied().collect();
        let owned: IndexSet = seen.keys().copied().collect();
        if selected != owned {
            return Err(Error::Integrity(format!(
                "owned blocks ({}) differ from selected blocks ({})",
                owned.len(),
                selected.len()
            )));
        }
        if self.experts.iter().filter(|e| e.is_shared()).count() > 1 {
            return Err(Error::Integrity("more than one shared expert".into()));
        }
        Ok(())
    }

    /// Deltas of one expert as raw little-endian bytes, for bit-level comparisons.
    pub fn serialized_deltas(&self, id: ExpertId) -> Option<Vec<u8>> {
        self.get(id).map(|e| pack_overlay(&e.deltas).1)
    }

    pub fn save(&self, dir: &Path) -> Result<RegistryManifest> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for e in &self.experts {
            let (delta_index, delta_bytes) = pack_overlay(&e.deltas);
            let anchors = DeltaOverlay { blocks: e.anchors.clone() };
            let (anchor_index, anchor_bytes) = pack_overlay(&anchors);
            let delta_file = format!("expert_{}_deltas.f64", e.id.0);
            let anchor_file = format!("expert_{}_anchors.f64", e.id.0);
            fs::write(dir.join(&delta_file), delta_bytes)?;
            fs::write(dir.join(&anchor_file), anchor_bytes)?;
            entries.push(ExpertEntry {
                id: e.id,
                kind: e.kind,
                frozen: e.frozen,
                owned: e.owned.iter().copied().collect(),
                share_count: e.share_count.iter().map(|(b, n)| (*b, *n)).collect(),
                delta_blocks: delta_index,
                anchor_blocks: anchor_index,
                delta_file,
                anchor_file,
            });
        }
        let manifest = RegistryManifest {
            experts: entries,
            task_selections: self
                .task_selections
                .iter()
                .map(|(t, s)| (*t, s.iter().copied().collect()))
                .collect(),
            next_id: self.next_id,
        };
        fs::write(dir.join("registry.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path, grid: &Grid) -> Result<Self> {
        let path = dir.join("registry.json");
        if !path.exists() {
            return Err(Error::Missing(path));
        }
        let manifest: RegistryManifest = serde_json::from_slice(&fs::read(&path)?)?;
        let read = |name: &str| {
            let p = dir.join(name);
            if p.exists() {
                Ok(fs::read(p)?)
            } else {
                Err(Error::Missing(p))
            }
        };
        let mut experts = Vec::new();
        for entry in manifest.experts {
            let deltas = unpack_overlay(grid, &entry.delta_blocks, &read(&entry.delta_file)?)?;
            let anchors = unpack_overlay(grid, &entry.anchor_blocks, &read(&entry.anchor_file)?)?;
            experts.push(ExpertRecord {
                id: entry.id,
                kind: entry.kind,
                owned: entry.owned.into_iter().collect(),
                deltas,
                frozen: entry.frozen,
                anchors: anchors.blocks,
                share_count: entry.share_count.into_iter().collect(),
            });
        }
        let registry = Self {
            experts,
            task_selections: manifest
                .task_selections
                .into_iter()
                .map(|(t, s)| (t, s.into_iter().collect()))
                .collect(),
            next_id: manifest.next_id,
        };
        registry.check_integrity()?;
        Ok(registry)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertEntry {
    pub id: ExpertId,
    pub kind: ExpertKind,
    pub frozen: bool,
    pub owned: Vec<BlockCoord>,
    pub share_count: Vec<(BlockCoord, u32)>,
    pub delta_blocks: Vec<PackedBlock>,
    pub anchor_blocks: Vec<PackedBlock>,
    pub delta_file: String,
    pub anchor_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryManifest {
    pub experts: Vec<ExpertEntry>,
    pub task_selections: Vec<(usize, Vec<BlockCoord>)>,
    pub next_id: u64,
}
