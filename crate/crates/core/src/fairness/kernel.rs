use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// RBF bandwidth: a fixed σ or the median pairwise distance of the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    Median,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum KernelSpec {
    Linear,
    Rbf(Bandwidth),
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Rbf(Bandwidth::Median)
    }
}

impl KernelSpec {
    pub fn rbf(sigma: f64) -> Self {
        KernelSpec::Rbf(Bandwidth::Fixed(sigma))
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Rbf(Bandwidth::Fixed(s)) if !(s > 0.0 && s.is_finite()) => Err(
                Error::config(format!("rbf bandwidth must be positive, got {s}")),
            ),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Linear => f.write_str("linear"),
            KernelSpec::Rbf(Bandwidth::Median) => f.write_str("rbf:median"),
            KernelSpec::Rbf(Bandwidth::Fixed(s)) => write!(f, "rbf:{s}"),
        }
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    /// Accepts `linear`, `rbf` (median bandwidth), `rbf:median` or `rbf:<sigma>`.
    fn from_str(s: &str) -> Result<Self> {
        let spec = match s.trim() {
            "linear" => KernelSpec::Linear,
            "rbf" | "rbf:median" => KernelSpec::Rbf(Bandwidth::Median),
            other => {
                let sigma = other
                    .strip_prefix("rbf:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::config(format!("unknown kernel `{other}`")))?;
                KernelSpec::rbf(sigma)
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl TryFrom<String> for KernelSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<KernelSpec> for String {
    fn from(k: KernelSpec) -> String {
        k.to_string()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// σ plus the pair of rows whose distance defines it (median case only).
#[derive(Clone, Copy, Debug)]
pub(crate) struct ResolvedBandwidth {
    pub sigma: f64,
    pub pair: Option<(usize, usize)>,
}

/// Lower median of all pairwise row distances. Falls back to σ = 1 when the
/// median distance is zero (fewer than two rows, or coincident points).
pub(crate) fn median_bandwidth(points: &Matrix) -> ResolvedBandwidth {
    let m = points.rows();
    let mut pairs = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            pairs.push((sq_dist(points.row(i), points.row(j)), i, j));
        }
    }
    median_of_pairs(pairs)
}

/// `pairs` holds `(squared distance, i, j)` with `i < j`.
fn median_of_pairs(mut pairs: Vec<(f64, usize, usize)>) -> ResolvedBandwidth {
    if pairs.is_empty() {
        return ResolvedBandwidth { sigma: 1.0, pair: None };
    }
    let mid = (pairs.len() - 1) / 2;
    let (_, &mut (d2, i, j), _) =
        pairs.select_nth_unstable_by(mid, |a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let d = d2.sqrt();
    if d > 0.0 {
        ResolvedBandwidth { sigma: d, pair: Some((i, j)) }
    } else {
        ResolvedBandwidth { sigma: 1.0, pair: None }
    }
}

fn resolve(points: &Matrix, bw: Bandwidth) -> Result<ResolvedBandwidth> {
    match bw {
        Bandwidth::Median => Ok(median_bandwidth(points)),
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => Ok(ResolvedBandwidth { sigma: s, pair: None }),
        Bandwidth::Fixed(s) => Err(Error::config(format!("rbf bandwidth must be positive, got {s}"))),
    }
}

/// Kernel matrix between the rows of `xs` and `ys`. A median bandwidth is
/// resolved over the concatenation of both inputs.
pub fn kernel_matrix(xs: &Matrix, ys: &Matrix, spec: KernelSpec) -> Result<Matrix> {
    if xs.cols() != ys.cols() {
        return Err(Error::dim(format!(
            "kernel inputs have {} and {} features",
            xs.cols(),
            ys.cols()
        )));
    }
    match spec {
        KernelSpec::Linear => xs.matmul(&ys.transpose()),
        KernelSpec::Rbf(bw) => {
            let sigma = match bw {
                Bandwidth::Median => resolve(&xs.vstack(ys)?, bw)?.sigma,
                _ => resolve(xs, bw)?.sigma,
            };
            let scale = 1.0 / (2.0 * sigma * sigma);
            let mut k = Matrix::zeros(xs.rows(), ys.rows());
            for i in 0..xs.rows() {
                for j in 0..ys.rows() {
                    k.set(i, j, (-sq_dist(xs.row(i), ys.row(j)) * scale).exp());
                }
            }
            Ok(k)
        }
    }
}

/// `S = Σᵢⱼ W[i,j]·K(xᵢ, xⱼ)` over the rows of `x`, and `∂S/∂x` when asked.
///
/// Both regularizers reduce to this form; for a median bandwidth the
/// gradient includes the path through σ.
pub(crate) fn weighted_kernel_sum(
    x: &Matrix,
    w: &Matrix,
    spec: KernelSpec,
    want_grad: bool,
) -> Result<(f64, Option<Matrix>)> {
    let m = x.rows();
    if w.shape() != (m, m) {
        return Err(Error::dim("weight matrix must be square in the sample count"));
    }
    match spec {
        KernelSpec::Linear => {
            let k = x.matmul(&x.transpose())?;
            let value: f64 = k.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
            let grad = if want_grad {
                let sym = w.zip_map(&w.transpose(), |a, b| a + b)?;
                Some(sym.matmul(x)?)
            } else {
                None
            };
            Ok((value, grad))
        }
        KernelSpec::Rbf(bw) => {
            let mut dist = Matrix::zeros(m, m);
            let mut pairs = Vec::with_capacity(m * m.saturating_sub(1) / 2);
            for i in 0..m {
                for j in i + 1..m {
                    let d = sq_dist(x.row(i), x.row(j));
                    dist.set(i, j, d);
                    if bw == Bandwidth::Median {
                        pairs.push((d, i, j));
                    }
                }
            }
            let resolved = match bw {
                Bandwidth::Median => median_of_pairs(pairs),
                _ => resolve(x, bw)?,
            };
            let sigma = resolved.sigma;
            let scale = 1.0 / (2.0 * sigma * sigma);
            // the diagonal has K = 1 and no gradient
            let mut value: f64 = (0..m).map(|i| w.get(i, i)).sum();
            // c[i,j] = ∂S/∂xᵢ coefficient on (xᵢ - xⱼ), symmetric
            let mut c = Matrix::zeros(m, m);
            let mut d_sigma = 0.0;
            for i in 0..m {
                for j in i + 1..m {
                    let d = dist.get(i, j);
                    let wk = (w.get(i, j) + w.get(j, i)) * (-d * scale).exp();
                    value += wk;
                    if want_grad {
                        c.set(i, j, -2.0 * wk * scale);
                        d_sigma += wk * d / (sigma * sigma * sigma);
                    }
                }
            }
            if !want_grad {
                return Ok((value, None));
            }
            let dim = x.cols();
            let mut grad = Matrix::zeros(m, dim);
            for i in 0..m {
                for j in i + 1..m {
                    let cij = c.get(i, j);
                    if cij == 0.0 {
                        continue;
                    }
                    for k in 0..dim {
                        let t = cij * (x.get(i, k) - x.get(j, k));
                        grad.set(i, k, grad.get(i, k) + t);
                        grad.set(j, k, grad.get(j, k) - t);
                    }
                }
            }
            if let Some((p, q)) = resolved.pair {
                for k in 0..dim {
                    let delta = (x.get(p, k) - x.get(q, k)) / sigma;
                    grad.set(p, k, grad.get(p, k) + d_sigma * delta);
                    grad.set(q, k, grad.get(q, k) - d_sigma * delta);
                }
            }
            Ok((value, Some(grad)))
        }
    }
}
