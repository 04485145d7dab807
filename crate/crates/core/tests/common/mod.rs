#![allow(dead_code)]

use fair_exit::model::{joint_loss, MultiExitModel, TrainConfig};
use fair_exit::{Matrix, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// A batch with both sensitive groups present.
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub a: Vec<u8>,
}

pub fn random_batch(rng: &mut ChaCha8Rng, size: usize, dim: usize, classes: usize) -> Batch {
    let x = random_matrix(rng, size, dim, 2.0);
    let y = (0..size).map(|_| rng.random_range(0..classes)).collect();
    let mut a: Vec<u8> = (0..size).map(|_| rng.random_range(0..2u8)).collect();
    a[0] = 0;
    a[size - 1] = 1;
    Batch { x, y, a }
}

pub fn random_model(rng: &mut ChaCha8Rng) -> MultiExitModel {
    let blocks = rng.random_range(1..=4);
    let cfg = ModelConfig {
        input_dim: rng.random_range(1..=8),
        num_classes: rng.random_range(2..=4),
        block_widths: (0..blocks).map(|_| rng.random_range(2..=6)).collect(),
        head_hidden: rng.random_range(2..=5),
        seed: rng.random(),
    };
    MultiExitModel::new(cfg).unwrap()
}

pub fn loss_value(model: &MultiExitModel, b: &Batch, cfg: &TrainConfig) -> f64 {
    let out = model.forward_all(&b.x).unwrap();
    joint_loss(&out, &b.y, &b.a, cfg).unwrap().total
}

#[derive(Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Central-difference check of every parameter gradient. Returns the
/// entries outside tolerance and the number of entries checked.
pub fn finite_difference_check(model: &mut MultiExitModel, b: &Batch, cfg: &TrainConfig) -> (Vec<GradMismatch>, usize) {
    model.loss_and_grad(&b.x, &b.y, &b.a, cfg).unwrap();
    let grads: Vec<(String, Matrix)> = model.params().iter().map(|p| (p.name.clone(), p.grad.clone())).collect();
    let ids: Vec<_> = model.params().ids().collect();
    let mut bad = Vec::new();
    let mut checked = 0;
    for (id, (name, grad)) in ids.into_iter().zip(grads) {
        for idx in 0..grad.len() {
            let orig = model.params().value(id).as_slice()[idx];
            model.params_mut().value_mut(id).as_mut_slice()[idx] = orig + FD_STEP;
            let up = loss_value(model, b, cfg);
            model.params_mut().value_mut(id).as_mut_slice()[idx] = orig - FD_STEP;
            let down = loss_value(model, b, cfg);
            model.params_mut().value_mut(id).as_mut_slice()[idx] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grad.as_slice()[idx];
            checked += 1;
            if !within_tolerance(analytic, numeric) {
                bad.push(GradMismatch {
                    param: name.clone(),
                    index: idx,
                    analytic,
                    numeric,
                });
            }
        }
    }
    (bad, checked)
}

pub fn within_tolerance(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= FD_ABS_FLOOR || diff <= FD_REL_TOL * analytic.abs().max(numeric.abs())
}

/// Brute-force confusion statistics: one pass over the samples per
/// (class, group) cell, counted directly from the definitions.
pub struct BruteForce {
    pub tp: Vec<[usize; 2]>,
    pub fp: Vec<[usize; 2]>,
    pub tn: Vec<[usize; 2]>,
    pub fn_: Vec<[usize; 2]>,
}

pub fn brute_force(preds: &[usize], labels: &[usize], groups: &[u8], classes: usize) -> BruteForce {
    let mut out = BruteForce {
        tp: vec![[0; 2]; classes],
        fp: vec![[0; 2]; classes],
        tn: vec![[0; 2]; classes],
        fn_: vec![[0; 2]; classes],
    };
    for c in 0..classes {
        for g in 0..2u8 {
            let gi = g as usize;
            for i in 0..preds.len() {
                if groups[i] != g {
                    continue;
                }
                let (is_pos, said_pos) = (labels[i] == c, preds[i] == c);
                if is_pos && said_pos {
                    out.tp[c][gi] += 1;
                } else if is_pos {
                    out.fn_[c][gi] += 1;
                } else if said_pos {
                    out.fp[c][gi] += 1;
                } else {
                    out.tn[c][gi] += 1;
                }
            }
        }
    }
    out
}

fn div(a: usize, b: usize) -> Option<f64> {
    if b == 0 {
        None
    } else {
        Some(a as f64 / b as f64)
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub struct BruteMetrics {
    pub eopp0: Option<f64>,
    pub eopp1: Option<f64>,
    pub eodd: Option<f64>,
    pub dp_gap: Option<f64>,
    /// `[group][precision, recall, f1, accuracy]`
    pub group: [[Option<f64>; 4]; 2],
}

pub fn brute_metrics(preds: &[usize], labels: &[usize], groups: &[u8], classes: usize) -> BruteMetrics {
    let bf = brute_force(preds, labels, groups, classes);
    let tpr = |c: usize, g: usize| div(bf.tp[c][g], bf.tp[c][g] + bf.fn_[c][g]);
    let fpr = |c: usize, g: usize| div(bf.fp[c][g], bf.fp[c][g] + bf.tn[c][g]);
    let tnr = |c: usize, g: usize| div(bf.tn[c][g], bf.fp[c][g] + bf.tn[c][g]);
    let mut d_tpr = Vec::new();
    let mut d_tnr = Vec::new();
    let mut d_odd = Vec::new();
    for c in 0..classes {
        if let (Some(a), Some(b)) = (tpr(c, 0), tpr(c, 1)) {
            d_tpr.push((a - b).abs());
        }
        if let (Some(a), Some(b)) = (tnr(c, 0), tnr(c, 1)) {
            d_tnr.push((a - b).abs());
        }
        if let (Some(a), Some(b), Some(p), Some(q)) = (tpr(c, 0), tpr(c, 1), fpr(c, 0), fpr(c, 1)) {
            d_odd.push((a - b).abs() + (p - q).abs());
        }
    }
    let sizes = [0u8, 1].map(|g| groups.iter().filter(|&&x| x == g).count());
    let dp_gap = if sizes.contains(&0) {
        None
    } else {
        let mut total = 0.0;
        for c in 0..classes {
            let rate = |g: u8| {
                let n = preds.iter().zip(groups).filter(|(&p, &x)| p == c && x == g).count();
                n as f64 / sizes[g as usize] as f64
            };
            total += (rate(0) - rate(1)).abs();
        }
        Some(total / classes as f64)
    };
    let mut group = [[None; 4]; 2];
    for g in 0..2 {
        if sizes[g] == 0 {
            continue;
        }
        let mut p = Vec::new();
        let mut r = Vec::new();
        let mut f = Vec::new();
        let mut correct = 0;
        for c in 0..classes {
            let (tp, fp, fn_) = (bf.tp[c][g], bf.fp[c][g], bf.fn_[c][g]);
            correct += tp;
            p.extend(div(tp, tp + fp));
            r.extend(div(tp, tp + fn_));
            f.extend(div(2 * tp, 2 * tp + fp + fn_));
        }
        group[g] = [mean(&p), mean(&r), mean(&f), div(correct, sizes[g])];
    }
    BruteMetrics {
        eopp0: mean(&d_tnr),
        eopp1: mean(&d_tpr),
        eodd: mean(&d_odd),
        dp_gap,
        group,
    }
}
