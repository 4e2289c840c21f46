use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::blockgrid::{partition, BlockCoord, Grid, IndexSet};
use crate::error::{Error, Result};
use crate::rng::checksum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn slope(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

/// Frozen stack of dense layers. Weights are private so nothing can mutate them
/// after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    weights: Vec<Array2<f64>>,
    activations: Vec<Activation>,
    eligible: Vec<bool>,
    grid: Grid,
}

impl BaseModel {
    pub fn new(weights: Vec<Array2<f64>>, activations: Vec<Activation>, block_size: usize) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("model needs at least one layer"));
        }
        if weights.len() != activations.len() {
            return Err(Error::config(format!(
                "{} layers but {} activations",
                weights.len(),
                activations.len()
            )));
        }
        for (i, pair) in weights.windows(2).enumerate() {
            if pair[1].ncols() != pair[0].nrows() {
                return Err(Error::shape(format!(
                    "layer {} takes {} inputs but layer {i} emits {}",
                    i + 1,
                    pair[1].ncols(),
                    pair[0].nrows()
                )));
            }
        }
        if weights.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("base weights must be finite".into()));
        }
        let dims: Vec<(usize, usize)> = weights.iter().map(|w| w.dim()).collect();
        let grid = partition(&dims, block_size)?;
        let eligible = vec![true; weights.len()];
        Ok(Self { weights, activations, eligible, grid })
    }

    /// Restrict which layers may carry expert blocks.
    pub fn with_eligible(mut self, eligible: &[usize]) -> Result<Self> {
        let mut mask = vec![false; self.weights.len()];
        for &l in eligible {
            *mask
                .get_mut(l)
                .ok_or_else(|| Error::config(format!("eligible layer {l} does not exist")))? = true;
        }
        self.eligible = mask;
        Ok(self)
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn block_size(&self) -> usize {
        self.grid.block_size
    }

    pub fn eligible_layers(&self) -> BTreeSet<usize> {
        self.eligible.iter().enumerate().filter(|(_, &e)| e).map(|(i, _)| i).collect()
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].nrows()
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.weights.iter().flat_map(|w| w.iter().copied()))
    }
}

/// Sparse weight deltas keyed by block. Absent blocks are exactly zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeltaOverlay {
    pub blocks: BTreeMap<BlockCoord, Array2<f64>>,
}

impl DeltaOverlay {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, grid: &Grid, b: BlockCoord, m: Array2<f64>) -> Result<()> {
        grid.check(b)?;
        if m.dim() != grid.block_shape(b) {
            return Err(Error::shape(format!(
                "delta for block {b} is {:?}, expected {:?}",
                m.dim(),
                grid.block_shape(b)
            )));
        }
        self.blocks.insert(b, m);
        Ok(())
    }

    pub fn get(&self, b: BlockCoord) -> Option<&Array2<f64>> {
        self.blocks.get(&b)
    }

    pub fn remove(&mut self, b: BlockCoord) -> Option<Array2<f64>> {
        self.blocks.remove(&b)
    }

    /// Mutable access to a block, materializing zeros if absent.
    pub fn block_mut(&mut self, grid: &Grid, b: BlockCoord) -> &mut Array2<f64> {
        self.blocks.entry(b).or_insert_with(|| Array2::zeros(grid.block_shape(b)))
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.blocks.iter().flat_map(|(b, m)| {
            [b.layer as f64, b.row as f64, b.col as f64].into_iter().chain(m.iter().copied())
        }))
    }

    /// `ΔW h` restricted to one layer.
    pub fn layer_contribution(&self, grid: &Grid, layer: usize, h: ArrayView1<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(grid.layers[layer].rows);
        for (b, m) in self.blocks.range(BlockCoord::new(layer, 0, 0)..BlockCoord::new(layer + 1, 0, 0)) {
            let v = m.dot(&h.slice(s![grid.col_range(*b)]));
            let mut dst = out.slice_mut(s![grid.row_range(*b)]);
            dst += &v;
        }
        out
    }

    fn add_transpose_product(&self, grid: &Grid, layer: usize, weight: f64, delta: &Array1<f64>, out: &mut Array1<f64>) {
        for (b, m) in self.blocks.range(BlockCoord::new(layer, 0, 0)..BlockCoord::new(layer + 1, 0, 0)) {
            let v = m.t().dot(&delta.slice(s![grid.row_range(*b)]));
            out.slice_mut(s![grid.col_range(*b)]).scaled_add(weight, &v);
        }
    }
}

fn check_overlays(base: &BaseModel, overlays: &[(f64, &DeltaOverlay)]) -> Result<()> {
    for (k, (w, o)) in overlays.iter().enumerate() {
        if !w.is_finite() {
            return Err(Error::Numeric(format!("overlay {k} weight is {w}")));
        }
        for (b, m) in &o.blocks {
            base.grid.check(*b)?;
            if m.dim() != base.grid.block_shape(*b) {
                return Err(Error::shape(format!("overlay {k} block {b} has shape {:?}", m.dim())));
            }
        }
    }
    Ok(())
}

struct Tape {
    inputs: Vec<Array1<f64>>,
    outputs: Vec<Array1<f64>>,
    /// `contribs[k][layer] = ΔW_k h_layer`
    contribs: Vec<Vec<Array1<f64>>>,
}

/// Trainable coordinates for one backward pass.
#[derive(Clone, Debug, Default)]
pub struct ActiveSet {
    /// Overlay index → blocks that receive gradient.
    pub blocks: BTreeMap<usize, IndexSet>,
    /// Whether overlay mixing weights receive gradient.
    pub weights: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub blocks: BTreeMap<usize, BTreeMap<BlockCoord, Array2<f64>>>,
    pub weights: Vec<f64>,
}

impl Gradients {
    /// Gradient of a block, or `None` when the block was not active (its gradient is zero).
    pub fn block(&self, overlay: usize, b: BlockCoord) -> Option<&Array2<f64>> {
        self.blocks.get(&overlay).and_then(|m| m.get(&b))
    }
}

/// One recorded forward pass through a base model plus weighted overlays.
pub struct Session<'a> {
    base: &'a BaseModel,
    overlays: Vec<(f64, &'a DeltaOverlay)>,
    tape: Option<Tape>,
}

impl<'a> Session<'a> {
    pub fn new(base: &'a BaseModel, overlays: Vec<(f64, &'a DeltaOverlay)>) -> Result<Self> {
        check_overlays(base, &overlays)?;
        Ok(Self { base, overlays, tape: None })
    }

    pub fn forward(&mut self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let base = self.base;
        if x.len() != base.input_dim() {
            return Err(Error::shape(format!("input has {} entries, model expects {}", x.len(), base.input_dim())));
        }
        let n_layers = base.layer_count();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut outputs = Vec::with_capacity(n_layers);
        let mut contribs = vec![Vec::with_capacity(n_layers); self.overlays.len()];
        let mut h = x.to_owned();
        for layer in 0..n_layers {
            let mut pre = base.weights[layer].dot(&h);
            for (k, (w, o)) in self.overlays.iter().enumerate() {
                let c = o.layer_contribution(&base.grid, layer, h.view());
                pre.scaled_add(*w, &c);
                contribs[k].push(c);
            }
            let act = base.activations[layer];
            let out = pre.mapv(|v| act.apply(v));
            inputs.push(h);
            h = out.clone();
            outputs.push(out);
        }
        self.tape = Some(Tape { inputs, outputs, contribs });
        Ok(h)
    }

    /// Gradient of the loss with respect to each layer's pre-activation.
    fn layer_signals(&self, output_grad: ArrayView1<f64>) -> Result<(&Tape, Vec<Array1<f64>>)> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let base = self.base;
        if output_grad.len() != base.output_dim() {
            return Err(Error::shape(format!(
                "output gradient has {} entries, model emits {}",
                output_grad.len(),
                base.output_dim()
            )));
        }
        let n_layers = base.layer_count();
        let mut signals = vec![Array1::zeros(0); n_layers];
        let mut upstream = output_grad.to_owned();
        for layer in (0..n_layers).rev() {
            let act = base.activations[layer];
            let delta = &upstream * &tape.outputs[layer].mapv(|o| act.slope(o));
            if layer > 0 {
                let mut down = base.weights[layer].t().dot(&delta);
                for (w, o) in &self.overlays {
                    o.add_transpose_product(&base.grid, layer, *w, &delta, &mut down);
                }
                upstream = down;
            }
            signals[layer] = delta;
        }
        Ok((tape, signals))
    }

    /// Gradients for the coordinates in `active`; everything else is exactly zero.
    pub fn backward(&self, output_grad: ArrayView1<f64>, active: &ActiveSet) -> Result<Gradients> {
        let (tape, signals) = self.layer_signals(output_grad)?;
        let grid = &self.base.grid;
        let mut grads = Gradients { blocks: BTreeMap::new(), weights: vec![0.0; self.overlays.len()] };
        for (&k, set) in &active.blocks {
            let (w, _) = self
                .overlays
                .get(k)
                .ok_or_else(|| Error::State(format!("active overlay {k} was not part of the forward pass")))?;
            let entry = grads.blocks.entry(k).or_default();
            for &b in set {
                grid.check(b)?;
                let d = signals[b.layer].slice(s![grid.row_range(b)]);
                let h = tape.inputs[b.layer].slice(s![grid.col_range(b)]);
                let g = outer(d, h) * *w;
                entry.insert(b, g);
            }
        }
        if active.weights {
            for (k, per_layer) in tape.contribs.iter().enumerate() {
                grads.weights[k] = per_layer.iter().zip(&signals).map(|(c, d)| c.dot(d)).sum();
            }
        }
        Ok(grads)
    }

    /// Dense `dL/dW` for every layer, as if all base weights were trainable.
    pub fn layer_gradients(&self, output_grad: ArrayView1<f64>) -> Result<Vec<Array2<f64>>> {
        let (tape, signals) = self.layer_signals(output_grad)?;
        Ok(signals
            .iter()
            .zip(&tape.inputs)
            .map(|(d, h)| outer(d.view(), h.view()))
            .collect())
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// `y = W_0 x + Σ_k w_k ΔW_k x` per layer, followed by the layer activation.
pub fn forward(base: &BaseModel, overlays: &[(f64, &DeltaOverlay)], x: ArrayView1<f64>) -> Result<Array1<f64>> {
    Session::new(base, overlays.to_vec())?.forward(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Value(f64),
}

/// Per-sample loss and its gradient with respect to the model output.
/// Classes use softmax cross-entropy; values use squared error on output 0.
pub fn loss_and_grad(output: ArrayView1<f64>, target: Target) -> Result<(f64, Array1<f64>)> {
    match target {
        Target::Class(c) => {
            if c >= output.len() {
                return Err(Error::shape(format!("class {c} out of range for {} outputs", output.len())));
            }
            let max = output.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp = output.mapv(|v| (v - max).exp());
            let z: f64 = exp.sum();
            let loss = z.ln() + max - output[c];
            let mut grad = exp / z;
            grad[c] -= 1.0;
            Ok((loss, grad))
        }
        Target::Value(y) => {
            let r = output[0] - y;
            let mut grad = Array1::zeros(output.len());
            grad[0] = 2.0 * r;
            Ok((r * r, grad))
        }
    }
}

pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
