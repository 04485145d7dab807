use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Guard applied to both inner sums before taking logs.
pub const SNNL_EPSILON: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub temperature: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { temperature: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Snnl {
    pub value: f64,
    /// Samples with no other sample sharing their label. Their term is
    /// bounded only by the ε guard.
    pub isolated: usize,
}

/// Soft nearest neighbor loss of `labels` in the feature space `features`.
///
/// Low values mean same-label points sit closer to each other than to
/// points of other labels. Sums are taken in log space so that large
/// squared distances do not underflow to the guard.
pub fn snnl(features: &Matrix, labels: &[usize], cfg: ProbeConfig) -> Result<Snnl> {
    let t = cfg.temperature;
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::config(format!("SNNL temperature must be positive, got {t}")));
    }
    let m = features.rows();
    if labels.len() != m {
        return Err(Error::dim(format!("{m} feature rows for {} labels", labels.len())));
    }
    if m < 2 {
        return Err(Error::Degenerate(format!("SNNL needs at least 2 samples, got {m}")));
    }
    let ln_eps = SNNL_EPSILON.ln();
    let mut total = 0.0;
    let mut isolated = 0;
    let mut same = Vec::with_capacity(m);
    let mut all = Vec::with_capacity(m);
    for i in 0..m {
        same.clear();
        all.clear();
        for j in (0..m).filter(|&j| j != i) {
            let d: f64 = features
                .row(i)
                .iter()
                .zip(features.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let e = -d / t;
            all.push(e);
            if labels[j] == labels[i] {
                same.push(e);
            }
        }
        if same.is_empty() {
            isolated += 1;
        }
        let ln_num = log_sum_exp(&same).max(ln_eps);
        let ln_den = log_sum_exp(&all).max(ln_eps);
        total -= ln_num - ln_den;
    }
    Ok(Snnl {
        value: total / m as f64,
        isolated,
    })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
