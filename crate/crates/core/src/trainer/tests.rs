use super::*;
use crate::blockgrid::BlockCoord;
use crate::experts::{ExpertKind, ExpertRecord};
use crate::nanonet::Activation;
use crate::tasks::{chain_specs, generate_sequence, Benchmark, BenchmarkGeometry, TaskKind, TaskSpec};
use ndarray::array;

fn spec(n_train: usize) -> TaskSpec {
    TaskSpec {
        task_id: 1,
        kind: TaskKind::Classification { classes: 7 },
        planted_count: 8,
        overlap_with: BTreeMap::new(),
        n_train,
        n_eval: 128,
        noise_std: 1.0,
        amplitude: 0.5,
    }
}

fn bench(overlaps: &[f64], n_train: usize, seed: u64) -> Benchmark {
    generate_sequence(&BenchmarkGeometry::default(), &chain_specs(&spec(n_train), overlaps), seed).unwrap()
}

fn splits(b: &Benchmark) -> Vec<TaskSplit<'_>> {
    b.tasks.iter().map(|t| TaskSplit { train: &t.train, eval: &t.eval }).collect()
}

fn quick_cfg() -> LearnerConfig {
    let mut cfg = LearnerConfig::default();
    cfg.selection.budget = 8;
    cfg.train.epochs_per_task = 2;
    cfg.train.seed = 7;
    cfg
}

/// Registry with one shared expert owning a single 1×1 block.
fn one_block_shared(delta: f64, anchor: f64, n: u32) -> (BaseModel, Registry, GateState) {
    let base = BaseModel::new(vec![array![[1.0]]], vec![Activation::Identity], 1).unwrap();
    let b = BlockCoord::new(0, 0, 0);
    let mut rec = ExpertRecord::new(ExpertId(0), ExpertKind::Shared, [b].into());
    rec.deltas.insert(base.grid(), b, array![[delta]]).unwrap();
    rec.anchors.insert(b, array![[anchor]]);
    rec.share_count.insert(b, n);
    let mut reg = Registry::new();
    reg.push(rec);
    let mut gate = GateState::new(1, 1).unwrap();
    gate.register_new_expert(ExpertId(0), &GateInit::Zero).unwrap();
    (base, reg, gate)
}

fn value_batch() -> Vec<Sample> {
    vec![Sample { x: vec![1.0], y: Target::Value(0.25) }, Sample { x: vec![-2.0], y: Target::Value(1.0) }]
}

#[test]
fn penalty_hand_value() {
    let (base, reg, gate) = one_block_shared(0.5, 0.0, 3);
    let id = [ExpertId(0)];
    let g = composite_loss(&value_batch(), &base, &reg, &gate, 2.0, &id, TrainRouting::Dense, false).unwrap();
    assert_eq!(g.penalty, 1.5);
    let pen = penalty_gradient(&reg, 2.0);
    // d/dΔ of λ n (Δ − Δ*)² = 2 λ n (Δ − Δ*) = 6.
    assert_eq!(pen[&BlockCoord::new(0, 0, 0)], array![[6.0]]);
}

#[test]
fn zero_lambda_and_anchored_penalty_vanish() {
    let (base, reg, gate) = one_block_shared(0.5, 0.0, 3);
    let id = [ExpertId(0)];
    let g = composite_loss(&value_batch(), &base, &reg, &gate, 0.0, &id, TrainRouting::Dense, false).unwrap();
    assert_eq!(g.penalty, 0.0);
    assert_eq!(g.total(), g.data);

    let (base, reg, gate) = one_block_shared(0.5, 0.5, 3);
    let g = composite_loss(&value_batch(), &base, &reg, &gate, 2.0, &id, TrainRouting::Dense, false).unwrap();
    assert_eq!(g.penalty, 0.0);
}

#[test]
fn data_term_is_batch_mean() {
    // y = (1 + 0.5) x with one expert at weight 1: residuals 1.25 and -4.
    let (base, reg, gate) = one_block_shared(0.5, 0.0, 3);
    let g = composite_loss(&value_batch(), &base, &reg, &gate, 0.0, &[], TrainRouting::Dense, false).unwrap();
    assert_eq!(g.data, (1.25f64.powi(2) + 4.0f64.powi(2)) / 2.0);
}

#[test]
fn proximal_step_minimizes_the_linearized_objective() {
    // argmin_x  g·x + (x − d)²/(2 lr) + λ n (x − a)²  in closed form.
    let (d, g, lr, lambda, n, a) = (0.3, -1.2, 0.05, 4.0, 2.0, -0.7);
    let c = 2.0 * lr * lambda * n;
    let mut delta = array![[d]];
    apply_step(&mut delta, &array![[g]], lr, Some((c, &array![[a]])));
    let oracle = (d / lr - g + 2.0 * lambda * n * a) / (1.0 / lr + 2.0 * lambda * n);
    assert!((delta[[0, 0]] - oracle).abs() < 1e-15);

    let mut plain = array![[d]];
    apply_step(&mut plain, &array![[g]], lr, None);
    assert_eq!(plain[[0, 0]], d - lr * g);
}

#[test]
fn momentum_accumulates() {
    let cfg = TrainConfig { optimizer: Optimizer::Momentum, momentum: 0.5, ..Default::default() };
    let mut v: Velocity<u8, ndarray::Ix1> = Velocity::default();
    let g = array![1.0, -2.0];
    assert_eq!(v.direction(&cfg, 0, &g), g);
    assert_eq!(v.direction(&cfg, 0, &g), array![1.5, -3.0]);
    let sgd = TrainConfig::default();
    assert_eq!(v.direction(&sgd, 0, &g), g);
}

#[test]
fn lr_warmup_ramps_linearly() {
    let cfg = TrainConfig { learning_rate: 1.0, lr_warmup_fraction: 0.5, ..Default::default() };
    let lrs: Vec<f64> = (0..6).map(|s| cfg.lr_at(s, 8)).collect();
    assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    assert_eq!(TrainConfig::default().lr_at(0, 8), 0.1);
}

#[test]
fn config_validation() {
    let mut cfg = LearnerConfig::default();
    assert!(cfg.validate().is_ok());
    cfg.sos.tau_ect = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = LearnerConfig::default();
    cfg.warmup.fraction = 0.0;
    assert!(cfg.validate().is_err());
    let mut cfg = LearnerConfig::default();
    cfg.train.learning_rate = f64::NAN;
    assert!(cfg.validate().is_err());
    let b = bench(&[], 32, 1);
    let mut cfg = LearnerConfig::default();
    cfg.selection.block_size = 8;
    assert!(SetaLearner::new(b.base.clone(), cfg).is_err());
}

#[test]
fn first_task_has_no_shared_blocks_and_second_freezes_the_first() {
    let b = bench(&[0.5], 256, 3);
    let mut l = SetaLearner::new(b.base.clone(), quick_cfg()).unwrap();
    let (p1, r1) = l.run_task(&b.tasks[0].train).unwrap();
    assert!(l.registry().shared().is_none());
    assert_eq!(l.ledger().rows[0].shared, 0);
    assert!(r1.grad_check.unwrap().passed);
    let unique1 = p1.new_unique;
    assert!(!l.registry().get(unique1).unwrap().deltas().is_empty());

    let p2 = l.prepare_task(&b.tasks[1].train).unwrap();
    let frozen: Vec<(ExpertId, Vec<u8>)> = l
        .registry()
        .experts()
        .iter()
        .filter(|e| e.is_frozen())
        .map(|e| (e.id, l.registry().serialized_deltas(e.id).unwrap()))
        .collect();
    assert!(!frozen.is_empty());
    let r2 = l.train_task(&b.tasks[1].train).unwrap();
    assert!(r2.grad_check.unwrap().passed);
    assert!(r2.freeze_checks > 0);
    for (id, bytes) in frozen {
        assert_eq!(l.registry().serialized_deltas(id).unwrap(), bytes, "expert {id} moved");
    }
    assert_eq!(l.registry().get(p2.new_unique).unwrap().kind, ExpertKind::Unique(2));
    l.gate().check_covers(l.registry()).unwrap();
}

#[test]
fn split_children_inherit_parent_logits() {
    // The same data twice selects the same blocks, so the first expert must split.
    let b = bench(&[], 128, 5);
    let mut l = SetaLearner::new(b.base.clone(), quick_cfg()).unwrap();
    l.run_task(&b.tasks[0].train).unwrap();
    let p = l.prepare_task(&b.tasks[0].train).unwrap();
    assert_eq!(p.splits.len(), 1);
    assert!(p.splits[0].event.created_shared);
    for s in &p.splits {
        for child in &s.event.children {
            let row = l.gate().row(*child).unwrap();
            assert_eq!(row, &s.parent_row);
        }
        assert!(l.gate().row(s.event.parent).is_none());
    }
}

#[test]
fn selection_ignores_data_after_the_warmup_window() {
    let b = bench(&[], 256, 2);
    let cfg = quick_cfg();
    let warm = (cfg.warmup.fraction * batches(256, cfg.train.batch_size) as f64).ceil() as usize * cfg.train.batch_size;
    let mut permuted = b.tasks[0].train.clone();
    permuted[warm..].reverse();
    let mut a = SetaLearner::new(b.base.clone(), cfg.clone()).unwrap();
    let mut c = SetaLearner::new(b.base.clone(), cfg).unwrap();
    let pa = a.prepare_task(&b.tasks[0].train).unwrap();
    let pc = c.prepare_task(&permuted).unwrap();
    assert_eq!(pa.selection, pc.selection);
    assert_eq!(pa.trace, pc.trace);
}

#[test]
fn training_order_is_enforced() {
    let b = bench(&[], 64, 2);
    let mut l = SetaLearner::new(b.base.clone(), quick_cfg()).unwrap();
    assert!(l.train_task(&b.tasks[0].train).is_err());
    l.prepare_task(&b.tasks[0].train).unwrap();
    assert!(l.prepare_task(&b.tasks[0].train).is_err());
    assert!(l.prepare_task(&[]).is_err());
}

#[test]
fn runs_are_reproducible() {
    let b = bench(&[0.5, 0.5], 128, 4);
    let cfg = quick_cfg();
    let x = run_sequence(&b.base, &splits(&b), &cfg).unwrap();
    let y = run_sequence(&b.base, &splits(&b), &cfg).unwrap();
    assert_eq!(x.matrix.to_csv(), y.matrix.to_csv());
    assert_eq!(x.ledger.to_csv(), y.ledger.to_csv());
    let (rx, ry) = (x.registry.unwrap(), y.registry.unwrap());
    assert_eq!(rx, ry);
    for e in rx.experts() {
        assert_eq!(rx.serialized_deltas(e.id), ry.serialized_deltas(e.id));
    }
}

#[test]
fn single_task_matches_sequential_baseline() {
    let b = bench(&[], 256, 6);
    let cfg = quick_cfg();
    let s = run_sequence(&b.base, &splits(&b), &cfg).unwrap();
    let q = baseline_seq_train(&b.base, &splits(&b), &cfg).unwrap();
    assert_eq!(s.matrix.rows(), q.matrix.rows());
    let reg = s.registry.unwrap();
    let mut seq = SingleDeltaLearner::new(b.base.clone(), cfg, 0.0).unwrap();
    seq.run_task(&b.tasks[0].train).unwrap();
    assert_eq!(reg.experts()[0].deltas(), seq.deltas());
}

#[test]
fn ewc_without_penalty_is_sequential_training() {
    let b = bench(&[0.25, 0.5], 128, 8);
    let cfg = quick_cfg();
    let q = baseline_seq_train(&b.base, &splits(&b), &cfg).unwrap();
    let e = baseline_ewc_lite(&b.base, &splits(&b), &cfg, 0.0).unwrap();
    assert_eq!(q.matrix.to_csv(), e.matrix.to_csv());
    assert_eq!(q.ledger, e.ledger);
}

#[test]
fn rigid_ewc_pins_the_base() {
    let b = bench(&[0.5], 128, 9);
    let mut l = SingleDeltaLearner::new(b.base.clone(), quick_cfg(), 1e12).unwrap();
    l.run_task(&b.tasks[0].train).unwrap();
    let max = l.deltas().blocks.values().flat_map(|m| m.iter()).fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(max < 1e-9, "{max}");
    let empty = DeltaOverlay::new();
    let base_acc = b.tasks[0].eval.iter().filter(|s| {
        let out = crate::nanonet::forward(&b.base, &[(1.0, &empty)], s.x()).unwrap();
        TrainConfig::default().is_correct(out.view(), s.y)
    });
    let base_acc = 100.0 * base_acc.count() as f64 / b.tasks[0].eval.len() as f64;
    assert!((l.evaluate(&b.tasks[0].eval).unwrap() - base_acc).abs() < 1e-9);
}

#[test]
fn strong_anchoring_limits_shared_drift() {
    let b = bench(&[1.0, 1.0], 256, 10);
    let mut loose = quick_cfg();
    loose.train.lambda = 0.0;
    let mut tight = quick_cfg();
    tight.train.lambda = 1e3;
    let l = run_sequence(&b.base, &splits(&b), &loose).unwrap();
    let t = run_sequence(&b.base, &splits(&b), &tight).unwrap();
    // Task 3 trains a shared expert anchored at the end of task 2.
    let (dl, dt) = (l.steps[2].shared_drift, t.steps[2].shared_drift);
    assert!(dl > 0.0 && dt < dl, "tight {dt} vs loose {dl}");
}

#[test]
fn regression_tasks_train_and_score() {
    let mut s = spec(128);
    s.kind = TaskKind::Regression;
    s.noise_std = 0.0;
    let b = generate_sequence(&BenchmarkGeometry::default(), &[s], 2).unwrap();
    let out = run_sequence(&b.base, &splits(&b), &quick_cfg()).unwrap();
    let acc = out.matrix.get(1, 1).unwrap();
    assert!((0.0..=100.0).contains(&acc));
    assert!(out.steps[0].final_loss.is_finite());
}

#[test]
fn gradient_check_covers_plastic_rows_only() {
    let b = bench(&[1.0], 64, 11);
    let mut l = SetaLearner::new(b.base.clone(), quick_cfg()).unwrap();
    l.run_task(&b.tasks[0].train).unwrap();
    l.prepare_task(&b.tasks[1].train).unwrap();
    let trainable = l.trainable();
    let rows = l.gate_rows(&trainable);
    assert_eq!(rows, trainable);
    assert!(l.gate().len() > rows.len());
    assert!(l.check_gradient(&b.tasks[1].train[..8]).unwrap().passed);
}

#[test]
fn empty_sequence_is_a_config_error() {
    let b = bench(&[], 16, 1);
    let err = run_sequence(&b.base, &[], &quick_cfg()).unwrap_err();
    assert!(matches!(err.error, Error::InvalidConfig(_)));
}
