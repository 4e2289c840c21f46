//! Block tiling of weight matrices, gradient importance scores and top-k selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Address of one tile inside a layer weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockCoord {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
}

impl BlockCoord {
    pub const fn new(layer: usize, row: usize, col: usize) -> Self {
        Self { layer, row, col }
    }
}

impl std::fmt::Display for BlockCoord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.layer, self.row, self.col)
    }
}

/// Set of block addresses. Ordered so iteration and serialization are deterministic.
pub type IndexSet = BTreeSet<BlockCoord>;

/// Blocks of `set` that live in `layer`.
pub fn in_layer(set: &IndexSet, layer: usize) -> IndexSet {
    set.range(BlockCoord::new(layer, 0, 0)..BlockCoord::new(layer + 1, 0, 0))
        .copied()
        .collect()
}

/// Layers touched by any block of `set`.
pub fn layers_of(set: &IndexSet) -> BTreeSet<usize> {
    set.iter().map(|b| b.layer).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGrid {
    pub rows: usize,
    pub cols: usize,
    pub block_rows: usize,
    pub block_cols: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub block_size: usize,
    pub layers: Vec<LayerGrid>,
}

/// Tile each `(rows, cols)` matrix into `block_size` squares. The last block
/// row/column is smaller when the size does not divide the dimension.
pub fn partition(layer_dims: &[(usize, usize)], block_size: usize) -> Result<Grid> {
    if block_size == 0 {
        return Err(Error::config("block size must be at least 1"));
    }
    let mut layers = Vec::with_capacity(layer_dims.len());
    for (i, &(rows, cols)) in layer_dims.iter().enumerate() {
        if rows == 0 || cols == 0 {
            return Err(Error::config(format!("layer {i} has a zero dimension ({rows}x{cols})")));
        }
        layers.push(LayerGrid {
            rows,
            cols,
            block_rows: rows.div_ceil(block_size),
            block_cols: cols.div_ceil(block_size),
        });
    }
    Ok(Grid { block_size, layers })
}

impl Grid {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn contains(&self, b: BlockCoord) -> bool {
        self.layers
            .get(b.layer)
            .is_some_and(|g| b.row < g.block_rows && b.col < g.block_cols)
    }

    pub fn check(&self, b: BlockCoord) -> Result<()> {
        if self.contains(b) {
            Ok(())
        } else {
            Err(Error::shape(format!("block {b} is outside the grid")))
        }
    }

    pub fn row_range(&self, b: BlockCoord) -> Range<usize> {
        let g = &self.layers[b.layer];
        let start = b.row * self.block_size;
        start..(start + self.block_size).min(g.rows)
    }

    pub fn col_range(&self, b: BlockCoord) -> Range<usize> {
        let g = &self.layers[b.layer];
        let start = b.col * self.block_size;
        start..(start + self.block_size).min(g.cols)
    }

    /// `(height, width)` of a block; smaller than `l×l` on the ragged edge.
    pub fn block_shape(&self, b: BlockCoord) -> (usize, usize) {
        (self.row_range(b).len(), self.col_range(b).len())
    }

    pub fn blocks_in_layer(&self, layer: usize) -> impl Iterator<Item = BlockCoord> + '_ {
        let g = &self.layers[layer];
        (0..g.block_rows).flat_map(move |r| (0..g.block_cols).map(move |c| BlockCoord::new(layer, r, c)))
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockCoord> + '_ {
        (0..self.layers.len()).flat_map(move |l| self.blocks_in_layer(l))
    }

    pub fn block_count(&self) -> usize {
        self.layers.iter().map(|g| g.block_rows * g.block_cols).sum()
    }
}

/// Mean absolute gradient per block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImportanceMap {
    pub scores: BTreeMap<BlockCoord, f64>,
}

impl ImportanceMap {
    pub fn get(&self, b: BlockCoord) -> Option<f64> {
        self.scores.get(&b).copied()
    }

    pub fn layer_max(&self, layer: usize) -> Option<f64> {
        self.scores
            .range(BlockCoord::new(layer, 0, 0)..BlockCoord::new(layer + 1, 0, 0))
            .map(|(_, &s)| s)
            .reduce(f64::max)
    }
}

/// Score every block of the layers for which a gradient is given. `gradients[i]`
/// belongs to grid layer `i`; pass fewer matrices than layers to score a prefix.
pub fn score_blocks(gradients: &[Array2<f64>], grid: &Grid) -> Result<ImportanceMap> {
    if gradients.len() > grid.layer_count() {
        return Err(Error::shape(format!(
            "{} gradient matrices for a {}-layer grid",
            gradients.len(),
            grid.layer_count()
        )));
    }
    let mut scores = BTreeMap::new();
    for (layer, g) in gradients.iter().enumerate() {
        let lg = &grid.layers[layer];
        if g.dim() != (lg.rows, lg.cols) {
            return Err(Error::shape(format!(
                "layer {layer} gradient is {:?}, grid expects ({}, {})",
                g.dim(),
                lg.rows,
                lg.cols
            )));
        }
        for b in grid.blocks_in_layer(layer) {
            let (rows, cols) = (grid.row_range(b), grid.col_range(b));
            let n = (rows.len() * cols.len()) as f64;
            let sum: f64 = g.slice(ndarray::s![rows, cols]).iter().map(|v| v.abs()).sum();
            let score = sum / n;
            if !score.is_finite() {
                return Err(Error::Numeric(format!("non-finite importance at block {b}")));
            }
            scores.insert(b, score);
        }
    }
    Ok(ImportanceMap { scores })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Higher score first, then ascending `(layer, row, col)`.
    #[default]
    ScoreThenCoord,
    /// Higher score first, then descending `(layer, row, col)`.
    ScoreThenReverseCoord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub block_size: usize,
    pub budget: usize,
    pub tau_block: f64,
    pub tie_break: TieBreak,
    /// Layers allowed to contribute blocks. `None` means all scored layers.
    pub eligible_layers: Option<BTreeSet<usize>>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            block_size: 4,
            budget: 12,
            tau_block: 0.0,
            tie_break: TieBreak::ScoreThenCoord,
            eligible_layers: None,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::config("selection.block_size must be at least 1"));
        }
        if self.budget == 0 {
            return Err(Error::config("selection.budget must be at least 1"));
        }
        if !self.tau_block.is_finite() || self.tau_block < 0.0 {
            return Err(Error::config("selection.tau_block must be finite and non-negative"));
        }
        Ok(())
    }

    fn eligible(&self, layer: usize) -> bool {
        self.eligible_layers.as_ref().is_none_or(|s| s.contains(&layer))
    }
}

/// Pick the `budget` highest-scoring blocks among eligible layers, skipping any
/// layer whose best block scores below `tau_block`.
pub fn select_topk(importance: &ImportanceMap, cfg: &SelectionConfig) -> Result<IndexSet> {
    cfg.validate()?;
    let eligible: Vec<(BlockCoord, f64)> = importance
        .scores
        .iter()
        .filter(|(b, _)| cfg.eligible(b.layer))
        .map(|(&b, &s)| (b, s))
        .collect();
    if cfg.budget > eligible.len() {
        return Err(Error::Budget { requested: cfg.budget, available: eligible.len() });
    }

    let mut layer_max: BTreeMap<usize, f64> = BTreeMap::new();
    for &(b, s) in &eligible {
        let m = layer_max.entry(b.layer).or_insert(f64::NEG_INFINITY);
        *m = m.max(s);
    }
    let mut candidates: Vec<(BlockCoord, f64)> = eligible
        .into_iter()
        .filter(|(b, _)| layer_max[&b.layer] >= cfg.tau_block)
        .collect();

    candidates.sort_by(|a, b| {
        b.1.total_cmp(&a.1).then_with(|| match cfg.tie_break {
            TieBreak::ScoreThenCoord => a.0.cmp(&b.0),
            TieBreak::ScoreThenReverseCoord => b.0.cmp(&a.0),
        })
    });
    Ok(candidates.into_iter().take(cfg.budget).map(|(b, _)| b).collect())
}

/// One line of a selection trace: `task_id layer row col score`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub task: usize,
    pub block: BlockCoord,
    pub score: f64,
}

pub fn format_trace(entries: &[TraceEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = writeln!(out, "{} {} {} {} {:?}", e.task, e.block.layer, e.block.row, e.block.col, e.score);
    }
    out
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
        let score: f64 = fields[4].parse().map_err(|e| bad(format!("{:?}: {e}", fields[4])))?;
        entries.push(TraceEntry {
            task: int(fields[0])?,
            block: BlockCoord::new(int(fields[1])?, int(fields[2])?, int(fields[3])?),
            score,
        });
    }
    Ok(entries)
}

/// Group trace lines into per-task selections, in task order.
pub fn selections_by_task(entries: &[TraceEntry]) -> BTreeMap<usize, IndexSet> {
    let mut out: BTreeMap<usize, IndexSet> = BTreeMap::new();
    for e in entries {
        out.entry(e.task).or_default().insert(e.block);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn partition_examples() {
        let g = partition(&[(4096, 4096)], 256).unwrap();
        assert_eq!((g.layers[0].block_rows, g.layers[0].block_cols), (16, 16));
        let g = partition(&[(2, 2)], 2).unwrap();
        assert_eq!(g.block_count(), 1);
        let g = partition(&[(6, 4)], 2).unwrap();
        assert_eq!((g.layers[0].block_rows, g.layers[0].block_cols), (3, 2));
        assert!(partition(&[(0, 4)], 2).is_err());
        assert!(partition(&[(4, 4)], 0).is_err());
    }

    #[test]
    fn ragged_edge_blocks_are_smaller() {
        let g = partition(&[(5, 7)], 4).unwrap();
        assert_eq!(g.block_shape(BlockCoord::new(0, 1, 1)), (1, 3));
        assert_eq!(g.block_shape(BlockCoord::new(0, 0, 0)), (4, 4));
    }

    #[test]
    fn score_examples() {
        let g = partition(&[(2, 4)], 2).unwrap();
        let grad = array![[0.2, -0.4, 0.0, 0.0], [0.6, -0.8, 0.0, 0.0]];
        let m = score_blocks(&[grad], &g).unwrap();
        assert!((m.get(BlockCoord::new(0, 0, 0)).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(m.get(BlockCoord::new(0, 0, 1)), Some(0.0));
        assert!(score_blocks(&[Array2::zeros((3, 3))], &g).is_err());
    }

    #[test]
    fn partial_block_uses_true_entry_count() {
        let g = partition(&[(3, 3)], 2).unwrap();
        let grad = Array2::from_elem((3, 3), -1.0);
        let m = score_blocks(&[grad], &g).unwrap();
        for b in g.blocks() {
            assert_eq!(m.get(b), Some(1.0));
        }
    }

    fn map(entries: &[(BlockCoord, f64)]) -> ImportanceMap {
        ImportanceMap { scores: entries.iter().copied().collect() }
    }

    #[test]
    fn select_breaks_ties_by_coordinate() {
        let a = BlockCoord::new(0, 1, 1);
        let b = BlockCoord::new(0, 0, 0);
        let c = BlockCoord::new(0, 0, 1);
        let imp = map(&[(a, 0.9), (b, 0.5), (c, 0.5)]);
        let cfg = SelectionConfig { budget: 2, ..Default::default() };
        assert_eq!(select_topk(&imp, &cfg).unwrap(), IndexSet::from([a, b]));
        let rev = SelectionConfig { tie_break: TieBreak::ScoreThenReverseCoord, ..cfg };
        assert_eq!(select_topk(&imp, &rev).unwrap(), IndexSet::from([a, c]));
    }

    #[test]
    fn select_skips_cold_layers_and_reports_shortfall() {
        let imp = map(&[(BlockCoord::new(0, 0, 0), 0.1), (BlockCoord::new(1, 0, 0), 0.2)]);
        let cfg = SelectionConfig { budget: 2, tau_block: 0.5, ..Default::default() };
        assert!(select_topk(&imp, &cfg).unwrap().is_empty());
        let cfg = SelectionConfig { budget: 2, tau_block: 0.15, ..Default::default() };
        assert_eq!(select_topk(&imp, &cfg).unwrap(), IndexSet::from([BlockCoord::new(1, 0, 0)]));
        let cfg = SelectionConfig { budget: 3, ..Default::default() };
        match select_topk(&imp, &cfg) {
            Err(Error::Budget { requested: 3, available: 2 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn eligibility_mask_restricts_layers() {
        let imp = map(&[(BlockCoord::new(0, 0, 0), 9.0), (BlockCoord::new(1, 0, 0), 0.2)]);
        let cfg = SelectionConfig {
            budget: 1,
            eligible_layers: Some(BTreeSet::from([1])),
            ..Default::default()
        };
        assert_eq!(select_topk(&imp, &cfg).unwrap(), IndexSet::from([BlockCoord::new(1, 0, 0)]));
    }

    #[test]
    fn large_budget_selects_exactly_budget() {
        let g = partition(&[(4096, 4096), (4096, 4096)], 128).unwrap();
        let scores = g.blocks().enumerate().map(|(i, b)| (b, ((i * 7919) % 1000) as f64)).collect();
        let imp = ImportanceMap { scores };
        let cfg = SelectionConfig { budget: 960, ..Default::default() };
        assert_eq!(select_topk(&imp, &cfg).unwrap().len(), 960);
    }

    #[test]
    fn trace_roundtrip() {
        let entries = vec![
            TraceEntry { task: 1, block: BlockCoord::new(0, 2, 3), score: 0.125 },
            TraceEntry { task: 2, block: BlockCoord::new(1, 0, 7), score: 1.0 / 3.0 },
        ];
        let text = format_trace(&entries);
        assert_eq!(parse_trace(&text).unwrap(), entries);
        assert!(matches!(parse_trace("1 2 3\n"), Err(Error::Parse { line: 1, .. })));
    }

    fn brute_score(g: &Array2<f64>, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
        let mut s = 0.0;
        let mut n = 0usize;
        for r in r0..r1 {
            for c in c0..c1 {
                s += g[[r, c]].abs();
                n += 1;
            }
        }
        s / n as f64
    }

    proptest! {
        #[test]
        fn score_matches_entrywise_oracle(
            rows in 1usize..=8, cols in 1usize..=8, l in 1usize..=4,
            vals in proptest::collection::vec(-5.0f64..5.0, 64),
        ) {
            let g = Array2::from_shape_fn((rows, cols), |(r, c)| vals[r * 8 + c]);
            let grid = partition(&[(rows, cols)], l).unwrap();
            let m = score_blocks(std::slice::from_ref(&g), &grid).unwrap();
            let mut covered = 0;
            for b in grid.blocks() {
                let (rr, cc) = (grid.row_range(b), grid.col_range(b));
                covered += rr.len() * cc.len();
                let want = brute_score(&g, rr.start, rr.end, cc.start, cc.end);
                prop_assert!((m.get(b).unwrap() - want).abs() <= 1e-12);
            }
            prop_assert_eq!(covered, rows * cols);
        }

        #[test]
        fn selection_is_repeatable_and_tau_monotone(
            scores in proptest::collection::vec(0.0f64..1.0, 32),
            budget in 1usize..=32, lo in 0.0f64..1.0, hi in 0.0f64..1.0,
        ) {
            let grid = partition(&[(8, 8), (8, 8)], 2).unwrap();
            let imp = ImportanceMap { scores: grid.blocks().zip(scores).collect() };
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let a = SelectionConfig { budget, tau_block: lo, ..Default::default() };
            let b = SelectionConfig { budget, tau_block: hi, ..Default::default() };
            let sa = select_topk(&imp, &a).unwrap();
            prop_assert_eq!(&sa, &select_topk(&imp, &a).unwrap());
            let sb = select_topk(&imp, &b).unwrap();
            for layer in layers_of(&sb) {
                prop_assert!(imp.layer_max(layer).unwrap() >= hi);
            }
            for layer in 0..2 {
                if imp.layer_max(layer).unwrap() < lo {
                    prop_assert!(!layers_of(&sb).contains(&layer));
                }
            }
        }
    }
}
