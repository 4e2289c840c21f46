//! Synthetic task sequences with planted block-sparse teachers, plus JSONL
//! dataset ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blockgrid::{BlockCoord, IndexSet};
use crate::error::{Error, Result};
use crate::nanonet::{argmax, forward, Activation, BaseModel, DeltaOverlay, Target};
use crate::rng::{stream, Stream};

/// Overlaps with the previous task for the default 6-task sequence.
pub const DEFAULT_OVERLAPS: [f64; 5] = [0.3, 0.45, 0.6, 0.4, 0.5];
pub const HIGH_OVERLAP: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum TaskKind {
    Classification { classes: usize },
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub kind: TaskKind,
    pub planted_count: usize,
    /// Earlier task id → fraction of this task's planted blocks copied from it.
    #[serde(default)]
    pub overlap_with: BTreeMap<usize, f64>,
    pub n_train: usize,
    pub n_eval: usize,
    /// Scale of the Gumbel noise on teacher logits (Gaussian for regression).
    pub noise_std: f64,
    /// Standard deviation of planted teacher entries.
    pub amplitude: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.planted_count == 0 {
            return Err(Error::config(format!("task {}: planted_count must be at least 1", self.task_id)));
        }
        if self.n_train == 0 {
            return Err(Error::config(format!("task {}: n_train must be at least 1", self.task_id)));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config(format!("task {}: noise_std must be finite and >= 0", self.task_id)));
        }
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(Error::config(format!("task {}: amplitude must be finite and >= 0", self.task_id)));
        }
        if let TaskKind::Classification { classes } = self.kind {
            if classes < 2 {
                return Err(Error::config(format!("task {}: need at least 2 classes", self.task_id)));
            }
        }
        for (&s, &f) in &self.overlap_with {
            if s == 0 || s >= self.task_id {
                return Err(Error::config(format!(
                    "task {}: overlap may only reference earlier tasks, got {s}",
                    self.task_id
                )));
            }
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!("task {}: overlap with {s} is {f}, outside [0, 1]", self.task_id)));
            }
        }
        Ok(())
    }
}

/// Chain of tasks where task `t + 1` overlaps task `t` by `overlaps[t - 1]`.
pub fn chain_specs(template: &TaskSpec, overlaps: &[f64]) -> Vec<TaskSpec> {
    let mut specs = Vec::with_capacity(overlaps.len() + 1);
    for t in 1..=overlaps.len() + 1 {
        let mut s = template.clone();
        s.task_id = t;
        s.overlap_with = if t > 1 { BTreeMap::from([(t - 1, overlaps[t - 2])]) } else { BTreeMap::new() };
        specs.push(s);
    }
    specs
}

/// Shape of the frozen base network and of the inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkGeometry {
    pub d: usize,
    pub hidden_layers: usize,
    pub block_size: usize,
    pub classes: usize,
    pub readout_gain: f64,
    /// Std of the perturbation added to the identity in hidden layers, times sqrt(d).
    pub base_noise: f64,
    /// Trailing input coordinates that carry the task-identity mean.
    pub context_dims: usize,
    pub context_norm: f64,
}

impl Default for BenchmarkGeometry {
    fn default() -> Self {
        Self {
            d: 32,
            hidden_layers: 2,
            block_size: 4,
            classes: 7,
            readout_gain: 2.0,
            base_noise: 0.1,
            context_dims: 4,
            context_norm: 3.0,
        }
    }
}

impl BenchmarkGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.hidden_layers == 0 || self.block_size == 0 {
            return Err(Error::config("model.d, model.hidden_layers and model.block_size must be at least 1"));
        }
        if self.context_dims >= self.d {
            return Err(Error::config("model.context_dims must be smaller than model.d"));
        }
        if self.classes < 2 || self.classes * self.block_size > self.d - self.context_dims {
            return Err(Error::config(format!(
                "{} classes of width {} do not fit in {} non-context units",
                self.classes,
                self.block_size,
                self.d - self.context_dims
            )));
        }
        if ![self.readout_gain, self.base_noise, self.context_norm].iter().all(|v| v.is_finite()) {
            return Err(Error::config("model gains must be finite"));
        }
        Ok(())
    }

    /// Hidden layers are a perturbed identity with tanh; the readout maps
    /// group `c` of `block_size` hidden units to class `c` and is not eligible.
    pub fn build_base(&self, seed: u64) -> Result<BaseModel> {
        self.validate()?;
        let mut rng = stream(seed, Stream::Init, 0);
        let sd = self.base_noise / (self.d as f64).sqrt();
        let mut weights = Vec::with_capacity(self.hidden_layers + 1);
        for _ in 0..self.hidden_layers {
            let mut w = Array2::<f64>::eye(self.d);
            w.mapv_inplace(|v| v + sd * rng.sample::<f64, _>(StandardNormal));
            weights.push(w);
        }
        let mut readout = Array2::zeros((self.classes, self.d));
        for c in 0..self.classes {
            for u in c * self.block_size..(c + 1) * self.block_size {
                readout[[c, u]] = self.readout_gain;
            }
        }
        weights.push(readout);
        let mut acts = vec![Activation::Tanh; self.hidden_layers];
        acts.push(Activation::Identity);
        let eligible: Vec<usize> = (0..self.hidden_layers).collect();
        BaseModel::new(weights, acts, self.block_size)?.with_eligible(&eligible)
    }

    /// Blocks a teacher may perturb: eligible layers, away from the context coordinates.
    pub fn plantable(&self, base: &BaseModel) -> Vec<BlockCoord> {
        let ctx = self.d - self.context_dims;
        let grid = base.grid();
        base.eligible_layers()
            .into_iter()
            .flat_map(|l| grid.blocks_in_layer(l).collect::<Vec<_>>())
            .filter(|&b| grid.row_range(b).end <= ctx && grid.col_range(b).end <= ctx)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Target,
}

impl Sample {
    pub fn x(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.x[..])
    }
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    /// Ground-truth support of the teacher's deviation from the base.
    pub planted: IndexSet,
    pub teacher: DeltaOverlay,
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub base: BaseModel,
    pub tasks: Vec<TaskData>,
    pub warnings: Vec<String>,
}

/// Fraction of `a` also in `b`.
pub fn overlap_fraction(a: &IndexSet, b: &IndexSet) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.intersection(b).count() as f64 / a.len() as f64
}

/// Build the base, the planted teachers and the train/eval sets. Blocks copied
/// from an earlier task keep that task's teacher values; fresh blocks come from
/// plantable blocks no earlier task used, so overlaps are realized exactly.
pub fn generate_sequence(geometry: &BenchmarkGeometry, specs: &[TaskSpec], seed: u64) -> Result<Benchmark> {
    if specs.is_empty() {
        return Err(Error::config("task sequence is empty"));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.task_id != i + 1 {
            return Err(Error::config(format!("task ids must run 1..n in order, found {} at position {}", s.task_id, i + 1)));
        }
        s.validate()?;
        if let TaskKind::Classification { classes } = s.kind {
            if classes != geometry.classes {
                return Err(Error::config(format!(
                    "task {} has {classes} classes but the model has {}",
                    s.task_id, geometry.classes
                )));
            }
        }
    }
    let base = geometry.build_base(seed)?;
    let grid = base.grid().clone();
    let candidates = geometry.plantable(&base);
    let mut plant_rng = stream(seed, Stream::Data, 0);
    let mut warnings = Vec::new();
    let mut used: BTreeSet<BlockCoord> = BTreeSet::new();
    let mut teachers: Vec<DeltaOverlay> = Vec::with_capacity(specs.len());
    let mut supports: Vec<IndexSet> = Vec::with_capacity(specs.len());

    for spec in specs {
        let mut teacher = DeltaOverlay::new();
        let mut support = IndexSet::new();
        for (&prior, &f) in &spec.overlap_with {
            let exact = f * spec.planted_count as f64;
            let k = exact.round() as usize;
            if (exact - k as f64).abs() > 1e-9 {
                warnings.push(format!(
                    "task {}: overlap {f} with task {prior} asks for {exact} of {} blocks, using {k}",
                    spec.task_id, spec.planted_count
                ));
            }
            let from: Vec<BlockCoord> = supports[prior - 1].iter().copied().collect();
            if k > from.len() {
                return Err(Error::config(format!(
                    "task {}: needs {k} blocks from task {prior}, which planted {}",
                    spec.task_id,
                    from.len()
                )));
            }
            for b in from.choose_multiple(&mut plant_rng, k) {
                if support.insert(*b) {
                    teacher.insert(&grid, *b, teachers[prior - 1].blocks[b].clone())?;
                }
            }
        }
        if support.len() > spec.planted_count {
            return Err(Error::config(format!(
                "task {}: overlaps call for {} blocks but planted_count is {}",
                spec.task_id,
                support.len(),
                spec.planted_count
            )));
        }
        let mut fresh: Vec<BlockCoord> = candidates.iter().copied().filter(|b| !used.contains(b)).collect();
        let need = spec.planted_count - support.len();
        if fresh.len() < need {
            return Err(Error::config(format!(
                "task {}: only {} unused plantable blocks left, need {need}",
                spec.task_id,
                fresh.len()
            )));
        }
        fresh.shuffle(&mut plant_rng);
        for b in fresh.into_iter().take(need) {
            let (r, c) = grid.block_shape(b);
            let m = Array2::from_shape_fn((r, c), |_| spec.amplitude * plant_rng.sample::<f64, _>(StandardNormal));
            teacher.insert(&grid, b, m)?;
            support.insert(b);
        }
        used.extend(support.iter().copied());
        teachers.push(teacher);
        supports.push(support);
    }

    let mut tasks = Vec::with_capacity(specs.len());
    for ((spec, teacher), planted) in specs.iter().zip(teachers).zip(supports) {
        let mut rng = stream(seed, Stream::Data, spec.task_id as u64);
        let mut mean = Array1::<f64>::zeros(geometry.d);
        if geometry.context_dims > 0 {
            let dir: Vec<f64> = (0..geometry.context_dims).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for (i, v) in dir.iter().enumerate() {
                mean[geometry.d - geometry.context_dims + i] = v / norm * geometry.context_norm;
            }
        }
        let mut samples = Vec::with_capacity(spec.n_train + spec.n_eval);
        for _ in 0..spec.n_train + spec.n_eval {
            let x: Array1<f64> = Array1::from_shape_fn(geometry.d, |i| mean[i] + rng.sample::<f64, _>(StandardNormal));
            let out = forward(&base, &[(1.0, &teacher)], x.view())?;
            let y = match spec.kind {
                TaskKind::Classification { .. } => {
                    let g = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
                    let noisy = out.mapv(|v| v + spec.noise_std * g.sample(&mut rng));
                    Target::Class(argmax(noisy.view()))
                }
                TaskKind::Regression => Target::Value(out[0] + spec.noise_std * rng.sample::<f64, _>(StandardNormal)),
            };
            samples.push(Sample { x: x.to_vec(), y });
        }
        let eval = samples.split_off(spec.n_train);
        tasks.push(TaskData { spec: spec.clone(), train: samples, eval, planted, teacher });
    }
    Ok(Benchmark { base, tasks, warnings })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// `None` when the file holds no samples.
    pub dim: Option<usize>,
    pub warnings: Vec<String>,
}

/// One sample per line: `{"x": [..], "y": 3}` or `{"x": [..], "y": 0.5}`. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut out = Dataset::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        if s.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse { line: line_no, msg: "non-finite feature".into() });
        }
        match out.dim {
            None => out.dim = Some(s.x.len()),
            Some(d) if d != s.x.len() => {
                return Err(Error::Parse { line: line_no, msg: format!("x has {} entries, earlier lines have {d}", s.x.len()) })
            }
            _ => {}
        }
        out.samples.push(s);
    }
    if out.samples.is_empty() {
        out.warnings.push(format!("{} holds no samples", path.display()));
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template(planted: usize) -> TaskSpec {
        TaskSpec {
            task_id: 1,
            kind: TaskKind::Classification { classes: 7 },
            planted_count: planted,
            overlap_with: BTreeMap::new(),
            n_train: 64,
            n_eval: 16,
            noise_std: 1.0,
            amplitude: 0.5,
        }
    }

    #[test]
    fn overlap_extremes_and_half() {
        let g = BenchmarkGeometry::default();
        for (f, want) in [(0.0, 0), (1.0, 8), (0.5, 4)] {
            let b = generate_sequence(&g, &chain_specs(&template(8), &[f]), 3).unwrap();
            let common = b.tasks[0].planted.intersection(&b.tasks[1].planted).count();
            assert_eq!(common, want, "overlap {f}");
            assert!(b.warnings.is_empty());
        }
    }

    #[test]
    fn shared_blocks_share_teacher_values() {
        let g = BenchmarkGeometry::default();
        let b = generate_sequence(&g, &chain_specs(&template(12), &DEFAULT_OVERLAPS), 9).unwrap();
        for w in b.tasks.windows(2) {
            for blk in w[0].planted.intersection(&w[1].planted) {
                assert_eq!(w[0].teacher.get(*blk), w[1].teacher.get(*blk));
            }
        }
        // 0.45 of 12 is not an integer.
        assert_eq!(b.warnings.len(), 4, "{:?}", b.warnings);
    }

    #[test]
    fn planted_blocks_avoid_context_and_readout() {
        let g = BenchmarkGeometry::default();
        let b = generate_sequence(&g, &chain_specs(&template(12), &DEFAULT_OVERLAPS), 1).unwrap();
        for t in &b.tasks {
            assert_eq!(t.planted.len(), 12);
            for blk in &t.planted {
                assert!(blk.layer < 2 && blk.row < 7 && blk.col < 7, "{blk}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let g = BenchmarkGeometry::default();
        let specs = chain_specs(&template(6), &[0.5, 0.5]);
        let a = generate_sequence(&g, &specs, 5).unwrap();
        let b = generate_sequence(&g, &specs, 5).unwrap();
        for (x, y) in a.tasks.iter().zip(&b.tasks) {
            assert_eq!(x.train, y.train);
            assert_eq!(x.eval, y.eval);
        }
        let c = generate_sequence(&g, &specs, 6).unwrap();
        assert_ne!(a.tasks[0].train, c.tasks[0].train);
    }

    #[test]
    fn noiseless_labels_follow_the_teacher() {
        let g = BenchmarkGeometry::default();
        let mut t = template(4);
        t.noise_std = 0.0;
        let b = generate_sequence(&g, &[t], 2).unwrap();
        let task = &b.tasks[0];
        for s in &task.train {
            let out = forward(&b.base, &[(1.0, &task.teacher)], s.x()).unwrap();
            assert_eq!(s.y, Target::Class(argmax(out.view())));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let g = BenchmarkGeometry::default();
        let mut t = template(4);
        t.overlap_with.insert(1, 0.5);
        assert!(generate_sequence(&g, &[t.clone()], 1).is_err());
        let mut specs = chain_specs(&template(4), &[0.5]);
        specs[1].overlap_with.insert(1, 1.5);
        assert!(generate_sequence(&g, &specs, 1).is_err());
        let mut wide = template(4);
        wide.kind = TaskKind::Classification { classes: 3 };
        assert!(generate_sequence(&g, &[wide], 1).is_err());
    }

    #[test]
    fn regression_targets_track_output_zero() {
        let g = BenchmarkGeometry::default();
        let mut t = template(4);
        t.kind = TaskKind::Regression;
        t.noise_std = 0.0;
        let b = generate_sequence(&g, &[t], 4).unwrap();
        let s = &b.tasks[0].eval[0];
        let out = forward(&b.base, &[(1.0, &b.tasks[0].teacher)], s.x()).unwrap();
        assert_eq!(s.y, Target::Value(out[0]));
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "{\"x\":[1,2,3],\"y\":1}\n{\"x\":[0.5,0,1],\"y\":0}\n").unwrap();
        let d = load_jsonl(&p).unwrap();
        assert_eq!((d.samples.len(), d.dim), (2, Some(3)));

        std::fs::write(&p, "{\"x\":[1,2,3],\"y\":1}\n{\"x\":[1,2,3,4],\"y\":0}\n").unwrap();
        assert!(matches!(load_jsonl(&p), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&p, "{\"x\":[1,2,3],\"y\":1}\nnot json\n").unwrap();
        assert!(matches!(load_jsonl(&p), Err(Error::Parse { line: 2, .. })));

        std::fs::write(&p, "").unwrap();
        let d = load_jsonl(&p).unwrap();
        assert!(d.samples.is_empty() && d.dim.is_none());
        assert_eq!(d.warnings.len(), 1);

        let b = generate_sequence(&BenchmarkGeometry::default(), &[template(4)], 1).unwrap();
        write_jsonl(&p, &b.tasks[0].train).unwrap();
        assert_eq!(load_jsonl(&p).unwrap().samples, b.tasks[0].train);
        assert!(matches!(load_jsonl(&dir.path().join("nope")), Err(Error::Missing(_))));
    }
}
