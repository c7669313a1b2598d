//! Central-difference validation of analytic gradients.

use super::{Graph, Var};
use crate::error::{CimError, Result};
use crate::tensor::Tensor;

/// Largest `|analytic - numeric| / max(1, |analytic|)` over all coordinates of
/// `point`, where `f` builds a scalar from the leaf holding `point`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p.clone())?;
        let y = f(&mut g, x)?;
        Ok(g.value(y).data()[0])
    };

    let mut g = Graph::new();
    let x = g.leaf(point.clone())?;
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));
    if !analytic.is_finite() {
        return Err(CimError::NonFinite("analytic gradient".into()));
    }

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(CimError::NonFinite(format!("finite difference at {i}")));
        }
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let p = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5);
        let err = grad_check(|g, x| g.sum(x), &p, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let p = Tensor::from_fn(&[1, 2, 2, 2], |i| if i % 2 == 0 { 0.7 } else { -0.4 } * (i + 1) as f64);
        let err = grad_check(
            |g, x| {
                let r = g.relu(x)?;
                g.sum(r)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
