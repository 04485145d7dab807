//! Fairness regularizers (MMD², HSIC) and the soft nearest neighbor probe.
//!
//! Both regularizers are biased V-statistics and are written as a weighted
//! sum over one kernel matrix, `S = Σᵢⱼ W[i,j]·K[i,j]`, which gives them a
//! shared gradient path:
//!
//! * MMD²: `W` is `1/m₀²` inside group 0, `1/m₁²` inside group 1 and
//!   `-1/(m₀m₁)` across groups.
//! * HSIC: `W = H·L·H / (m-1)²` with `H = I - 11ᵀ/m` and `L` the kernel on
//!   the sensitive attribute.

mod kernel;
mod snnl;

use serde::{Deserialize, Serialize};

pub use kernel::{kernel_matrix, Bandwidth, KernelSpec};
pub use snnl::{snnl, ProbeConfig, Snnl, SNNL_EPSILON};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Which fairness loss `l_s` to attach to each exit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    None,
    #[default]
    Mmd,
    Hsic,
}

/// Squared maximum mean discrepancy between two groups of feature rows.
pub fn mmd2(group0: &Matrix, group1: &Matrix, spec: KernelSpec) -> Result<f64> {
    let x = group0.vstack(group1)?;
    let groups: Vec<u8> = std::iter::repeat(0)
        .take(group0.rows())
        .chain(std::iter::repeat(1).take(group1.rows()))
        .collect();
    mmd2_by_group(&x, &groups, spec, false).map(|(v, _)| v)
}

/// MMD² between the rows of `features` labelled 0 and 1 in `groups`, with
/// its gradient with respect to `features`.
pub fn mmd2_with_grad(features: &Matrix, groups: &[u8], spec: KernelSpec) -> Result<(f64, Matrix)> {
    mmd2_by_group(features, groups, spec, true).map(|(v, g)| (v, g.expect("requested")))
}

fn mmd2_by_group(
    features: &Matrix,
    groups: &[u8],
    spec: KernelSpec,
    want_grad: bool,
) -> Result<(f64, Option<Matrix>)> {
    check_groups(features, groups)?;
    let m0 = groups.iter().filter(|&&g| g == 0).count();
    let m1 = groups.len() - m0;
    if m0 == 0 || m1 == 0 {
        return Err(Error::Degenerate("MMD needs samples from both groups".into()));
    }
    let (w00, w11, w01) = (
        1.0 / (m0 * m0) as f64,
        1.0 / (m1 * m1) as f64,
        -1.0 / (m0 * m1) as f64,
    );
    let m = groups.len();
    let mut w = Matrix::zeros(m, m);
    for (i, &gi) in groups.iter().enumerate() {
        for (j, &gj) in groups.iter().enumerate() {
            let v = match (gi, gj) {
                (0, 0) => w00,
                (1, 1) => w11,
                _ => w01,
            };
            w.set(i, j, v);
        }
    }
    clamp_non_negative(kernel::weighted_kernel_sum(features, &w, spec, want_grad)?, features)
}

/// Biased HSIC between feature rows and the binary sensitive attribute.
///
/// `spec_a` is applied to the attribute as a scalar column; the default
/// linear kernel gives `L[i,j] = aᵢ·aⱼ`.
pub fn hsic(features: &Matrix, sensitive: &[u8], spec_f: KernelSpec, spec_a: KernelSpec) -> Result<f64> {
    hsic_inner(features, sensitive, spec_f, spec_a, false).map(|(v, _)| v)
}

pub fn hsic_with_grad(
    features: &Matrix,
    sensitive: &[u8],
    spec_f: KernelSpec,
    spec_a: KernelSpec,
) -> Result<(f64, Matrix)> {
    hsic_inner(features, sensitive, spec_f, spec_a, true).map(|(v, g)| (v, g.expect("requested")))
}

fn hsic_inner(
    features: &Matrix,
    sensitive: &[u8],
    spec_f: KernelSpec,
    spec_a: KernelSpec,
    want_grad: bool,
) -> Result<(f64, Option<Matrix>)> {
    check_groups(features, sensitive)?;
    let m = sensitive.len();
    if m < 2 {
        return Err(Error::Degenerate(format!("HSIC needs at least 2 samples, got {m}")));
    }
    let a: Vec<f64> = sensitive.iter().map(|&v| f64::from(v)).collect();
    let a = Matrix::column_vector(&a);
    let l = kernel_matrix(&a, &a, spec_a)?;
    let w = double_center(&l).scale(1.0 / ((m - 1) * (m - 1)) as f64);
    clamp_non_negative(kernel::weighted_kernel_sum(features, &w, spec_f, want_grad)?, features)
}

/// `H·L·H` for the centering matrix `H = I - 11ᵀ/m`.
fn double_center(l: &Matrix) -> Matrix {
    let m = l.rows();
    let mf = m as f64;
    let row_means: Vec<f64> = l.iter_rows().map(|r| r.iter().sum::<f64>() / mf).collect();
    let col_means: Vec<f64> = (0..m).map(|j| (0..m).map(|i| l.get(i, j)).sum::<f64>() / mf).collect();
    let grand = row_means.iter().sum::<f64>() / mf;
    let mut out = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            out.set(i, j, l.get(i, j) - row_means[i] - col_means[j] + grand);
        }
    }
    out
}

// Round-off can push a V-statistic slightly below zero; report 0 there.
fn clamp_non_negative((value, grad): (f64, Option<Matrix>), x: &Matrix) -> Result<(f64, Option<Matrix>)> {
    if value < 0.0 {
        Ok((0.0, grad.map(|_| Matrix::zeros(x.rows(), x.cols()))))
    } else {
        Ok((value, grad))
    }
}

fn check_groups(features: &Matrix, groups: &[u8]) -> Result<()> {
    if features.rows() != groups.len() {
        return Err(Error::dim(format!(
            "{} feature rows for {} group labels",
            features.rows(),
            groups.len()
        )));
    }
    if let Some(g) = groups.iter().find(|&&g| g > 1) {
        return Err(Error::Domain(format!("sensitive attribute must be 0 or 1, got {g}")));
    }
    Ok(())
}
