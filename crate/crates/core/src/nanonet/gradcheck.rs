use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter index with the largest error.
    pub worst_index: Option<usize>,
    pub passed: bool,
}

/// Compare an analytic gradient with central differences of `loss`.
///
/// Error per coordinate is `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(mut loss: F, params: &[f64], analytic: &[f64], step: f64, tolerance: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {step}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::LengthMismatch(format!(
            "{} parameters but {} analytic gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0;
    let mut worst_index = None;
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let up = loss(&probe);
        probe[i] = params[i] - step;
        let down = loss(&probe);
        probe[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss while probing parameter {i}")));
        }
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if worst_index.is_none() || err > worst {
            worst = err;
            worst_index = Some(i);
        }
    }
    Ok(GradCheck { max_rel_error: worst, worst_index, passed: worst <= tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(p: &[f64]) -> f64 {
        3.0 * p[0] * p[0] - 2.0 * p[0] * p[1] + 0.5 * p[1] * p[1] + p[1]
    }

    fn quad_grad(p: &[f64]) -> Vec<f64> {
        vec![6.0 * p[0] - 2.0 * p[1], -2.0 * p[0] + p[1] + 1.0]
    }

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let p = [0.7, -1.3];
        for step in [1e-3, 1e-4, 1e-5] {
            let r = finite_diff_check(quad, &p, &quad_grad(&p), step, 1e-10).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let p = [0.7, -1.3];
        let mut g = quad_grad(&p);
        g[1] += 0.1;
        let r = finite_diff_check(quad, &p, &g, 1e-5, 1e-4).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_index, Some(1));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(finite_diff_check(quad, &[0.0, 0.0], &[0.0, 1.0], 0.0, 1e-4).is_err());
        assert!(finite_diff_check(quad, &[0.0, 0.0], &[0.0], 1e-5, 1e-4).is_err());
        let blowup = |p: &[f64]| if p[0] > 0.0 { f64::NAN } else { 0.0 };
        assert!(matches!(finite_diff_check(blowup, &[0.0], &[0.0], 1e-5, 1e-4), Err(Error::Numeric(_))));
    }
}
