mod common;

use common::*;
use fair_exit::checkpoint::Checkpoint;
use fair_exit::config::RunConfig;
use fair_exit::data::Dataset;
use fair_exit::model::{joint_loss, train, ExitOutputs, TrainConfig};
use fair_exit::report::write_loss_history;
use fair_exit::{Error, KernelSpec, Matrix, ModelConfig, MultiExitModel, Regularizer};
use rand::Rng;

fn relu_dense(x: &Matrix, w: &Matrix, b: &Matrix, relu: bool) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for i in 0..x.rows() {
        for j in 0..w.cols() {
            let mut acc = b.as_slice()[j];
            for k in 0..x.cols() {
                acc += x.get(i, k) * w.get(k, j);
            }
            out.set(i, j, if relu { acc.max(0.0) } else { acc });
        }
    }
    out
}

fn assert_close(a: &Matrix, b: &Matrix) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn forward_matches_independent_recompute() {
    let mut r = rng(1);
    let model = MultiExitModel::new(ModelConfig {
        input_dim: 4,
        num_classes: 3,
        block_widths: vec![5, 6, 3],
        head_hidden: 4,
        seed: 12,
    })
    .unwrap();
    let x = random_matrix(&mut r, 7, 4, 2.0);
    let out = model.forward_all(&x).unwrap();
    let p = |name: &str| model.params().value(model.params().find(name).unwrap()).clone();
    let mut h = x.clone();
    for k in 1..=3 {
        h = relu_dense(&h, &p(&format!("block{k}.weight")), &p(&format!("block{k}.bias")), true);
        assert_close(&out.features[k - 1], &h);
        let hidden = relu_dense(&h, &p(&format!("exit{k}.hidden.weight")), &p(&format!("exit{k}.hidden.bias")), true);
        let logits = relu_dense(&hidden, &p(&format!("exit{k}.out.weight")), &p(&format!("exit{k}.out.bias")), false);
        assert_close(&out.logits[k - 1], &logits);
    }
    let fin = relu_dense(&h, &p("final.weight"), &p("final.bias"), false);
    assert_close(&out.logits[3], &fin);
    assert_close(&out.features[3], &h);
}

#[test]
fn zeroed_heads_give_uniform_softmax() {
    let mut model = MultiExitModel::new(ModelConfig::default()).unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().get(id).name.clone();
        if name.starts_with("exit") && name.contains(".out.") || name.starts_with("final") {
            model.params_mut().value_mut(id).as_mut_slice().fill(0.0);
        }
    }
    let mut r = rng(2);
    let x = random_matrix(&mut r, 5, 8, 1.0);
    for logits in model.forward_all(&x).unwrap().logits {
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
        let p = fair_exit::tensor::nn::softmax_rows(&logits).unwrap();
        assert!(p.as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }
}

/// Two samples, one internal exit, linear-kernel MMD: every term by hand.
#[test]
fn two_sample_linear_mmd_joint_loss() {
    let outputs = ExitOutputs {
        logits: vec![
            Matrix::from_rows(&[[2.0, -1.0], [0.5, 0.25]]).unwrap(),
            Matrix::from_rows(&[[-0.3, 1.7], [1.0, 1.0]]).unwrap(),
        ],
        features: vec![
            Matrix::from_rows(&[[1.0, 2.0, 0.0], [0.0, -1.0, 3.0]]).unwrap(),
            Matrix::from_rows(&[[0.5, 0.5], [2.0, -0.5]]).unwrap(),
        ],
    };
    let targets = [0, 1];
    let sensitive = [0, 1];
    let cfg = TrainConfig {
        alphas: vec![0.4, 0.9],
        lambda: 0.25,
        regularizer: Regularizer::Mmd,
        kernel: KernelSpec::Linear,
        ..TrainConfig::for_exits(1)
    };
    let ce = |row: [f64; 2], t: usize| {
        let lse = (row[0].exp() + row[1].exp()).ln();
        lse - row[t]
    };
    let lt1 = (ce([2.0, -1.0], 0) + ce([0.5, 0.25], 1)) / 2.0;
    let ltf = (ce([-0.3, 1.7], 0) + ce([1.0, 1.0], 1)) / 2.0;
    // linear MMD² of singleton groups is the squared distance
    let ls1: f64 = 1.0 + 9.0 + 9.0;
    let lsf: f64 = 1.5 * 1.5 + 1.0;
    let expected = 0.4 * (lt1 + 0.25 * ls1) + 0.9 * (ltf + 0.25 * lsf);
    let got = joint_loss(&outputs, &targets, &sensitive, &cfg).unwrap();
    assert!((got.total - expected).abs() < 1e-12, "{} vs {expected}", got.total);
    assert!((got.target[0] - lt1).abs() < 1e-12);
    assert!((got.fairness[1] - lsf).abs() < 1e-12);
}

fn separable_toy(m: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let mut x = Vec::with_capacity(2 * m);
    let mut y = Vec::with_capacity(m);
    let mut a = Vec::with_capacity(m);
    for i in 0..m {
        let c = i % 2;
        let sign = if c == 0 { -1.0 } else { 1.0 };
        x.push(sign * r.random_range(0.5..2.0));
        x.push(r.random_range(-1.0..1.0));
        y.push(c);
        a.push(r.random_range(0..2u8));
    }
    Dataset::new(Matrix::new(m, 2, x).unwrap(), y, a, 2).unwrap()
}

fn toy_model(seed: u64) -> MultiExitModel {
    MultiExitModel::new(ModelConfig {
        input_dim: 2,
        num_classes: 2,
        block_widths: vec![8, 8],
        head_hidden: 8,
        seed,
    })
    .unwrap()
}

fn toy_cfg(epochs: usize, lambda: f64) -> TrainConfig {
    TrainConfig {
        lambda,
        epochs,
        batch_size: 32,
        learning_rate: 0.05,
        ..TrainConfig::for_exits(2)
    }
}

#[test]
fn separable_toy_reaches_high_train_accuracy() {
    let data = separable_toy(400, 3);
    let mut model = toy_model(4);
    let history = train(&mut model, &data, &toy_cfg(50, 0.0)).unwrap();
    assert_eq!(history.len(), 50);
    let out = model.forward_all(data.features()).unwrap();
    let preds = out.logits[2].argmax_rows();
    let acc = preds.iter().zip(data.targets()).filter(|(p, y)| p == y).count() as f64 / data.len() as f64;
    assert!(acc >= 0.95, "final-exit train accuracy {acc}");
}

#[test]
fn zero_learning_rate_epoch_keeps_parameters() {
    let data = separable_toy(100, 1);
    let mut model = toy_model(1);
    let before = model.params().clone();
    let mut cfg = toy_cfg(1, 0.01);
    cfg.learning_rate = 0.0;
    train(&mut model, &data, &cfg).unwrap();
    let values = |s: &fair_exit::ParamStore| s.iter().map(|p| p.value.clone()).collect::<Vec<_>>();
    assert_eq!(values(model.params()), values(&before));
}

#[test]
fn regularized_history_is_finite_and_non_negative() {
    let data = separable_toy(200, 5);
    for reg in [Regularizer::Mmd, Regularizer::Hsic] {
        let mut model = toy_model(5);
        let mut cfg = toy_cfg(8, 0.01);
        cfg.regularizer = reg;
        let history = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(history.len(), 8);
        for rec in &history {
            assert!(rec.loss.total.is_finite());
            assert!(rec.loss.fairness.iter().all(|&s| s.is_finite() && s >= 0.0));
            assert!(rec.loss.fairness.iter().any(|&s| s > 0.0));
        }
    }
}

#[test]
fn training_is_deterministic() {
    let data = separable_toy(150, 6);
    let run = || {
        let mut model = toy_model(9);
        let history = train(&mut model, &data, &toy_cfg(5, 0.01)).unwrap();
        let mut csv = Vec::new();
        write_loss_history(&mut csv, &history, 3).unwrap();
        (model.params().clone(), csv)
    };
    let (p1, h1) = run();
    let (p2, h2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1.iter().map(|p| &p.value).collect::<Vec<_>>(), p2.iter().map(|p| &p.value).collect::<Vec<_>>());
}

#[test]
fn empty_or_mismatched_data_is_rejected() {
    let mut model = toy_model(0);
    let empty = Dataset::new(Matrix::zeros(0, 2), vec![], vec![], 2).unwrap();
    assert!(matches!(train(&mut model, &empty, &toy_cfg(1, 0.0)), Err(Error::Data(_))));
    let wide = Dataset::new(Matrix::zeros(2, 3), vec![0, 1], vec![0, 1], 2).unwrap();
    assert!(matches!(train(&mut model, &wide, &toy_cfg(1, 0.0)), Err(Error::Data(_))));
}

#[test]
fn checkpoint_round_trip_predicts_bit_identically() {
    let data = separable_toy(120, 7);
    let mut model = toy_model(7);
    train(&mut model, &data, &toy_cfg(3, 0.01)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt.json");
    Checkpoint::new(&model, &RunConfig::default(), 3).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().to_model().unwrap();
    let mut r = rng(70);
    let x = random_matrix(&mut r, 100, 2, 5.0);
    let a = model.forward_all(&x).unwrap();
    let b = loaded.forward_all(&x).unwrap();
    for (la, lb) in a.logits.iter().zip(&b.logits) {
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(la), bits(lb));
    }
}
