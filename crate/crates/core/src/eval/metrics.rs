//! Classification metrics from a confusion matrix, and the 1-D Wasserstein distance.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, CimError, Result};
use crate::tensor::Tensor;

/// Counts indexed `[true class][predicted class]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return config_err("confusion matrix must be square and non-empty");
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return config_err(format!("{} labels but {} predictions", truth.len(), predicted.len()));
        }
        let mut c = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return config_err(format!("class index ({t}, {p}) outside {classes} classes"));
            }
            c.counts[t][p] += 1;
        }
        Ok(c)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(CimError::Empty("confusion matrix has no entries".into()));
        }
        Ok(())
    }
}

/// Trace over total.
pub fn accuracy(c: &Confusion) -> Result<f64> {
    c.ensure_nonempty()?;
    let trace: u64 = (0..c.classes()).map(|k| c.counts[k][k]).sum();
    Ok(trace as f64 / c.total() as f64)
}

/// Recall per class; `None` for classes without support.
pub fn per_class_recall(c: &Confusion) -> Vec<Option<f64>> {
    (0..c.classes())
        .map(|k| {
            let s = c.support(k);
            (s > 0).then(|| c.counts[k][k] as f64 / s as f64)
        })
        .collect()
}

/// Unweighted mean of recalls over classes with support.
pub fn balanced_accuracy(c: &Confusion) -> Result<f64> {
    c.ensure_nonempty()?;
    let recalls: Vec<f64> = per_class_recall(c).into_iter().flatten().collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Row-wise argmax of `[N,K]` scores; ties go to the lower index.
pub fn argmax_rows(scores: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = scores.dims2()?;
    Ok(scores
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// 1-Wasserstein distance between two empirical distributions: the integral
/// of `|F_a − F_b|` over the real line.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(CimError::Empty("wasserstein distance of an empty sample".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(CimError::NonFinite("wasserstein sample".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    if sa.len() == sb.len() {
        return Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64);
    }
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut prev = sa[0].min(sb[0]);
    let mut total = 0.0;
    while i < sa.len() || j < sb.len() {
        let next = match (sa.get(i), sb.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (next - prev) * (i as f64 / na - j as f64 / nb).abs();
        while i < sa.len() && sa[i] == next {
            i += 1;
        }
        while j < sb.len() && sb[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}
