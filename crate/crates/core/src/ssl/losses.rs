//! Self-supervised objectives with closed-form gradients.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, CimError, Result};
use crate::tensor::Tensor;

/// NT-Xent loss over `2B` embeddings where rows `i` and `i + B` form a positive pair.
///
/// Returns the loss averaged over all `2B` anchors and its gradient with respect to `z`.
pub fn nt_xent(z: &Tensor, temperature: f64) -> Result<(f64, Tensor)> {
    if !(temperature > 0.0) {
        return config_err(format!("temperature must be > 0, got {temperature}"));
    }
    let (rows, d) = z.dims2()?;
    if rows < 2 || rows % 2 != 0 {
        return dim_err(format!("NT-Xent needs an even number (>= 2) of rows, got {rows}"));
    }
    let half = rows / 2;
    let zd = z.data();

    let mut norms = vec![0.0; rows];
    let mut u = vec![0.0; rows * d];
    for i in 0..rows {
        let row = &zd[i * d..(i + 1) * d];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(CimError::NonFinite(format!(
                "embedding row {i} has zero or non-finite norm"
            )));
        }
        norms[i] = n;
        for k in 0..d {
            u[i * d + k] = row[k] / n;
        }
    }

    let mut sim = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in i..rows {
            let s = crate::autodiff::kernels::dot(&u[i * d..(i + 1) * d], &u[j * d..(j + 1) * d])
                / temperature;
            sim[i * rows + j] = s;
            sim[j * rows + i] = s;
        }
    }

    // coef[i][j] = dL/dS_ij treating each anchor row independently.
    let mut coef = vec![0.0; rows * rows];
    let mut loss = 0.0;
    let scale = 1.0 / rows as f64;
    for i in 0..rows {
        let pos = (i + half) % rows;
        let row = &sim[i * rows..(i + 1) * rows];
        let mx = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
        let mut denom = 0.0;
        for (j, &s) in row.iter().enumerate() {
            if j != i {
                denom += (s - mx).exp();
            }
        }
        let lse = mx + denom.ln();
        loss += lse - row[pos];
        for (j, &s) in row.iter().enumerate() {
            if j != i {
                coef[i * rows + j] += scale * (s - lse).exp();
            }
        }
        coef[i * rows + pos] -= scale;
    }
    loss *= scale;

    let mut grad = vec![0.0; rows * d];
    for i in 0..rows {
        let mut gu = vec![0.0; d];
        for j in 0..rows {
            let c = (coef[i * rows + j] + coef[j * rows + i]) / temperature;
            if c != 0.0 {
                for k in 0..d {
                    gu[k] += c * u[j * d + k];
                }
            }
        }
        let ui = &u[i * d..(i + 1) * d];
        let proj: f64 = gu.iter().zip(ui).map(|(a, b)| a * b).sum();
        for k in 0..d {
            grad[i * d + k] = (gu[k] - ui[k] * proj) / norms[i];
        }
    }
    Ok((loss, Tensor::new(&[rows, d], grad)?))
}

/// Weights of the three VICReg terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VicregWeights {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
}

impl Default for VicregWeights {
    fn default() -> Self {
        Self {
            invariance: 25.0,
            variance: 25.0,
            covariance: 1.0,
        }
    }
}

/// Unweighted VICReg terms plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VicregTerms {
    /// Mean squared difference between the branches.
    pub invariance: f64,
    /// Mean hinge `max(0, 1 - std)` over dimensions, per branch.
    pub variance: [f64; 2],
    /// Sum of squared off-diagonal covariances divided by `d`, per branch.
    pub covariance: [f64; 2],
    /// `λ·inv + μ·(var_a + var_b)/2 + ν·(cov_a + cov_b)`.
    pub total: f64,
}

pub const VICREG_STD_EPS: f64 = 1e-4;

fn branch_terms(x: &[f64], b: usize, d: usize, w: &VicregWeights) -> (f64, f64, Vec<f64>) {
    let bf = b as f64;
    let mut mean = vec![0.0; d];
    for i in 0..b {
        for k in 0..d {
            mean[k] += x[i * d + k] / bf;
        }
    }
    let xc: Vec<f64> = (0..b * d).map(|idx| x[idx] - mean[idx % d]).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..b {
        let row = &xc[i * d..(i + 1) * d];
        for j in 0..d {
            let rj = row[j];
            if rj == 0.0 {
                continue;
            }
            for k in 0..d {
                cov[j * d + k] += rj * row[k];
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= bf - 1.0;
    }
    let std: Vec<f64> = (0..d).map(|j| (cov[j * d + j] + VICREG_STD_EPS).sqrt()).collect();
    let var_term = std.iter().map(|s| (1.0 - s).max(0.0)).sum::<f64>() / d as f64;
    let mut cov_term = 0.0;
    for j in 0..d {
        for k in 0..d {
            if j != k {
                cov_term += cov[j * d + k] * cov[j * d + k];
            }
        }
    }
    cov_term /= d as f64;

    let mut grad = vec![0.0; b * d];
    let vscale = w.variance * 0.5 / d as f64;
    let cscale = w.covariance * 4.0 / (d as f64 * (bf - 1.0));
    for i in 0..b {
        let row = &xc[i * d..(i + 1) * d];
        for k in 0..d {
            let mut g = 0.0;
            if std[k] < 1.0 {
                g -= vscale * row[k] / ((bf - 1.0) * std[k]);
            }
            let mut acc = 0.0;
            for j in 0..d {
                if j != k {
                    acc += row[j] * cov[j * d + k];
                }
            }
            g += cscale * acc;
            grad[i * d + k] = g;
        }
    }
    (var_term, cov_term, grad)
}

/// VICReg objective between two `[B, d]` branches.
pub fn vicreg(za: &Tensor, zb: &Tensor, w: &VicregWeights) -> Result<(VicregTerms, Tensor, Tensor)> {
    let (b, d) = za.dims2()?;
    if zb.shape() != za.shape() {
        return dim_err(format!(
            "VICReg branches differ: {:?} vs {:?}",
            za.shape(),
            zb.shape()
        ));
    }
    if b < 2 {
        return dim_err("VICReg needs at least 2 samples per branch");
    }
    let (a, bb) = (za.data(), zb.data());
    let n = (b * d) as f64;
    let inv = a.iter().zip(bb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    let (va, ca, mut ga) = branch_terms(a, b, d, w);
    let (vb, cb, mut gb) = branch_terms(bb, b, d, w);
    for i in 0..b * d {
        let g = w.invariance * 2.0 * (a[i] - bb[i]) / n;
        ga[i] += g;
        gb[i] -= g;
    }
    let total = w.invariance * inv + w.variance * (va + vb) / 2.0 + w.covariance * (ca + cb);
    Ok((
        VicregTerms {
            invariance: inv,
            variance: [va, vb],
            covariance: [ca, cb],
            total,
        },
        Tensor::new(&[b, d], ga)?,
        Tensor::new(&[b, d], gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nt_xent_identical_embeddings_is_ln3() {
        let z = Tensor::full(&[4, 5], 0.3);
        let (loss, grad) = nt_xent(&z, 0.2).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!(grad.max_abs() < 1e-12);
    }

    #[test]
    fn nt_xent_rejects_bad_input() {
        let z = Tensor::full(&[4, 2], 1.0);
        assert!(matches!(nt_xent(&z, 0.0), Err(CimError::Config(_))));
        let mut zero = z.clone();
        zero.data_mut()[0] = 0.0;
        zero.data_mut()[1] = 0.0;
        assert!(matches!(nt_xent(&zero, 0.2), Err(CimError::NonFinite(_))));
        assert!(nt_xent(&Tensor::full(&[3, 2], 1.0), 0.2).is_err());
    }

    #[test]
    fn nt_xent_orthogonal_pairs_hand_computed() {
        // views 0,2 = e0 and views 1,3 = e1 with T = 0.2:
        // each anchor sees its positive at 1/T and two orthogonal negatives at 0.
        let z = Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let (loss, _) = nt_xent(&z, 0.2).unwrap();
        let expected = -5.0 + (5f64.exp() + 2.0).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn vicreg_constant_embeddings() {
        let z = Tensor::full(&[4, 3], 0.7);
        let w = VicregWeights::default();
        let (t, _, _) = vicreg(&z, &z, &w).unwrap();
        assert_eq!(t.invariance, 0.0);
        let hinge = 1.0 - VICREG_STD_EPS.sqrt();
        assert!((t.variance[0] - hinge).abs() < 1e-15);
        assert!((t.variance[1] - hinge).abs() < 1e-15);
        assert_eq!(t.covariance, [0.0, 0.0]);
    }

    #[test]
    fn vicreg_zero_for_decorrelated_wide_embeddings() {
        // Two dims, B=4: columns with std >= 1 and zero covariance.
        let z = Tensor::new(&[4, 2], vec![2.0, 2.0, -2.0, 2.0, 2.0, -2.0, -2.0, -2.0]).unwrap();
        let (t, _, _) = vicreg(&z, &z, &VicregWeights::default()).unwrap();
        assert_eq!(t.total, 0.0);
    }

    #[test]
    fn vicreg_needs_two_samples() {
        let z = Tensor::full(&[1, 3], 1.0);
        assert!(vicreg(&z, &z, &VicregWeights::default()).is_err());
    }
}
