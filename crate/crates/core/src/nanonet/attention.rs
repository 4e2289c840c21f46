//! Gradient split across Q/K/V in a single-head attention layer as the softmax saturates.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    /// Layer slot of the projection when the three matrices are tiled as one grid.
    pub fn layer(self) -> usize {
        self as usize
    }

    /// Projections that may carry expert blocks by default.
    pub fn default_eligible() -> [Projection; 1] {
        [Projection::Value]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfileConfig {
    pub keys: usize,
    pub d_model: usize,
    /// Std of Q/K weights is `qk_scale / sqrt(d_model)`; V uses `1 / sqrt(d_model)`.
    pub qk_scale: f64,
    pub sequences: usize,
}

impl Default for AttentionProfileConfig {
    fn default() -> Self {
        Self { keys: 8, d_model: 8, qk_scale: 8.0, sequences: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub q_grad: f64,
    pub k_grad: f64,
    pub v_grad: f64,
    pub v_share: f64,
}

impl GradientReport {
    pub fn qk_to_v_ratio(&self) -> f64 {
        (self.q_grad + self.k_grad) / self.v_grad
    }
}

/// Raw gradients `[dWq, dWk, dWv]` for `L = Σ Y ⊙ G` with `Y = softmax(s · QKᵀ/√d) V`.
///
/// Q/K gradients are taken per unit of the logit scale `s`: the softmax Jacobian is
/// evaluated at `s · Z` but the outer factor `s` of `∂(sZ)/∂Z` is left out. This keeps
/// the `s = 0` (uniform attention) case informative instead of trivially zero.
pub fn projection_gradients(cfg: &AttentionProfileConfig, scale: f64, seed: u64) -> Result<[Array2<f64>; 3]> {
    if cfg.keys < 2 {
        return Err(Error::config("attention profile needs at least 2 key positions"));
    }
    if cfg.d_model == 0 || cfg.sequences == 0 {
        return Err(Error::config("attention profile needs d_model and sequences of at least 1"));
    }
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::config(format!("logit scale must be finite and non-negative, got {scale}")));
    }
    let dm = cfg.d_model;
    let n = cfg.keys;
    let mut rng = stream(seed, Stream::Init, 0);
    let mut normal = |rows: usize, cols: usize, std: f64| {
        Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
    };
    let root = (dm as f64).sqrt();
    let wq = normal(dm, dm, cfg.qk_scale / root);
    let wk = normal(dm, dm, cfg.qk_scale / root);
    let wv = normal(dm, dm, 1.0 / root);

    let mut gq = Array2::zeros((dm, dm));
    let mut gk = Array2::zeros((dm, dm));
    let mut gv = Array2::zeros((dm, dm));
    for _ in 0..cfg.sequences {
        let x = normal(n, dm, 1.0);
        let target = normal(n, dm, 1.0);
        let q = x.dot(&wq);
        let k = x.dot(&wk);
        let v = x.dot(&wv);
        let z = q.dot(&k.t()) / root;

        let mut attn = z.mapv(|e| e * scale);
        for mut row in attn.axis_iter_mut(Axis(0)) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|e| (e - m).exp());
            let sum = row.sum();
            row /= sum;
        }

        let d_attn = target.dot(&v.t());
        let mut d_logits = Array2::zeros((n, n));
        for i in 0..n {
            let inner: f64 = (0..n).map(|j| d_attn[[i, j]] * attn[[i, j]]).sum();
            for j in 0..n {
                d_logits[[i, j]] = attn[[i, j]] * (d_attn[[i, j]] - inner);
            }
        }
        let dz = d_logits / root;
        gq = gq + x.t().dot(&dz.dot(&k));
        gk = gk + x.t().dot(&dz.t().dot(&q));
        gv = gv + x.t().dot(&attn.t().dot(&target));
    }
    Ok([gq, gk, gv])
}

pub fn attention_grad_profile_with(cfg: &AttentionProfileConfig, scale: f64, seed: u64) -> Result<GradientReport> {
    let [gq, gk, gv] = projection_gradients(cfg, scale, seed)?;
    let mean_abs = |g: &Array2<f64>| g.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64;
    let (q_grad, k_grad, v_grad) = (mean_abs(&gq), mean_abs(&gk), mean_abs(&gv));
    let total = q_grad + k_grad + v_grad;
    let v_share = if total > 0.0 { v_grad / total } else { 0.0 };
    Ok(GradientReport { q_grad, k_grad, v_grad, v_share })
}

/// Mean absolute Q/K/V weight gradients at logit scale `scale`.
pub fn attention_grad_profile(scale: f64, seed: u64) -> Result<GradientReport> {
    attention_grad_profile_with(&AttentionProfileConfig::default(), scale, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_attention_still_moves_queries_and_keys() {
        let r = attention_grad_profile(0.0, 3).unwrap();
        assert!(r.q_grad > 0.0 && r.k_grad > 0.0 && r.v_grad > 0.0);
        let total = r.q_grad + r.k_grad + r.v_grad;
        assert!((r.v_share - r.v_grad / total).abs() < 1e-15);
    }

    #[test]
    fn single_key_is_rejected() {
        let cfg = AttentionProfileConfig { keys: 1, ..Default::default() };
        assert!(matches!(attention_grad_profile_with(&cfg, 1.0, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn saturated_softmax_starves_queries_and_keys() {
        let r = attention_grad_profile(50.0, 11).unwrap();
        assert!(r.qk_to_v_ratio() < 0.01, "{r:?}");
        assert!(r.v_share >= 0.95);
    }

    #[test]
    fn per_unit_scale_matches_finite_differences() {
        // At s = 1 the per-unit-scale gradient is the true gradient.
        let cfg = AttentionProfileConfig { keys: 3, d_model: 2, qk_scale: 1.0, sequences: 1 };
        let [gq, _, _] = projection_gradients(&cfg, 1.0, 5).unwrap();
        let mut rng = stream(5, Stream::Init, 0);
        let mut normal = |rows: usize, cols: usize, std: f64| {
            Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
        };
        let root = 2f64.sqrt();
        let wq = normal(2, 2, 1.0 / root);
        let wk = normal(2, 2, 1.0 / root);
        let wv = normal(2, 2, 1.0 / root);
        let x = normal(3, 2, 1.0);
        let target = normal(3, 2, 1.0);
        let loss = |wq: &Array2<f64>| {
            let z = x.dot(wq).dot(&x.dot(&wk).t()) / root;
            let mut a = z.mapv(f64::exp);
            for mut row in a.axis_iter_mut(Axis(0)) {
                let s = row.sum();
                row /= s;
            }
            (a.dot(&x.dot(&wv)) * &target).sum()
        };
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let mut up = wq.clone();
                up[[i, j]] += h;
                let mut down = wq.clone();
                down[[i, j]] -= h;
                let fd = (loss(&up) - loss(&down)) / (2.0 * h);
                assert!((fd - gq[[i, j]]).abs() < 1e-7, "{fd} vs {}", gq[[i, j]]);
            }
        }
    }
}
