mod common;

use common::*;
use fair_exit::fairness::{hsic_with_grad, mmd2_with_grad};
use fair_exit::model::{joint_loss, TrainConfig};
use fair_exit::tensor::nn::sgd_step;
use fair_exit::{KernelSpec, Matrix, MultiExitModel, ParamStore, Regularizer};

fn cfg_for(model: &MultiExitModel, reg: Regularizer, kernel: KernelSpec, lambda: f64) -> TrainConfig {
    let mut cfg = TrainConfig::for_exits(model.config().num_internal_exits());
    cfg.regularizer = reg;
    cfg.kernel = kernel;
    cfg.lambda = lambda;
    cfg
}

fn run_fd(reg: Regularizer, kernel: KernelSpec, lambda: f64, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let mut r = rng(seed);
        let mut model = random_model(&mut r);
        let size = 4 + (seed as usize % 13);
        let b = random_batch(&mut r, size, model.config().input_dim, model.config().num_classes);
        let cfg = cfg_for(&model, reg, kernel, lambda);
        let (bad, checked) = finite_difference_check(&mut model, &b, &cfg);
        assert!(checked > 0);
        assert!(bad.is_empty(), "seed {seed} {reg:?}: {} of {checked} mismatched, first {:?}", bad.len(), bad[0]);
    }
}

#[test]
fn fd_plain_cross_entropy() {
    run_fd(Regularizer::None, KernelSpec::default(), 0.01, 0..10);
}

#[test]
fn fd_mmd_rbf_median_strong_lambda() {
    run_fd(Regularizer::Mmd, KernelSpec::default(), 1.0, 100..110);
}

#[test]
fn fd_mmd_linear_and_fixed_rbf() {
    run_fd(Regularizer::Mmd, KernelSpec::Linear, 0.5, 200..205);
    run_fd(Regularizer::Mmd, KernelSpec::rbf(1.3), 0.5, 205..210);
}

#[test]
fn fd_hsic_strong_lambda() {
    run_fd(Regularizer::Hsic, KernelSpec::default(), 1.0, 300..310);
    run_fd(Regularizer::Hsic, KernelSpec::Linear, 1.0, 310..315);
}

/// Feature gradients of the regularizers alone, against central differences
/// on the value-only entry points.
#[test]
fn fd_regularizer_feature_gradients() {
    for seed in 0..15u64 {
        let mut r = rng(1000 + seed);
        let rows = 3 + seed as usize % 8;
        let x = random_matrix(&mut r, rows, 1 + seed as usize % 4, 1.5);
        let b = random_batch(&mut r, rows, 1, 2);
        for spec in [KernelSpec::Linear, KernelSpec::rbf(0.8), KernelSpec::default()] {
            let (_, g_mmd) = mmd2_with_grad(&x, &b.a, spec).unwrap();
            let (_, g_hsic) = hsic_with_grad(&x, &b.a, spec, KernelSpec::Linear).unwrap();
            for idx in 0..x.len() {
                let eval = |delta: f64, hsic: bool| {
                    let mut xp = x.clone();
                    xp.as_mut_slice()[idx] += delta;
                    if hsic {
                        hsic_with_grad(&xp, &b.a, spec, KernelSpec::Linear).unwrap().0
                    } else {
                        mmd2_with_grad(&xp, &b.a, spec).unwrap().0
                    }
                };
                for (hsic, g) in [(false, &g_mmd), (true, &g_hsic)] {
                    let numeric = (eval(FD_STEP, hsic) - eval(-FD_STEP, hsic)) / (2.0 * FD_STEP);
                    let analytic = g.as_slice()[idx];
                    assert!(
                        within_tolerance(analytic, numeric),
                        "seed {seed} {spec:?} hsic={hsic} idx {idx}: {analytic} vs {numeric}"
                    );
                }
            }
        }
    }
}

#[test]
fn total_is_weighted_sum_of_parts() {
    for seed in 0..10u64 {
        let mut r = rng(2000 + seed);
        let model = random_model(&mut r);
        let b = random_batch(&mut r, 12, model.config().input_dim, model.config().num_classes);
        for reg in [Regularizer::None, Regularizer::Mmd, Regularizer::Hsic] {
            let cfg = cfg_for(&model, reg, KernelSpec::default(), 0.37);
            let out = model.forward_all(&b.x).unwrap();
            let l = joint_loss(&out, &b.y, &b.a, &cfg).unwrap();
            let manual: f64 = (0..model.num_exits())
                .map(|k| cfg.alphas[k] * (l.target[k] + cfg.lambda * l.fairness[k]))
                .sum();
            assert!((l.total - manual).abs() <= 1e-12 * manual.abs().max(1.0));
            assert!(l.fairness.iter().all(|&s| s >= 0.0));
            if reg == Regularizer::None {
                assert!(l.fairness.iter().all(|&s| s == 0.0));
            }
        }
    }
}

#[test]
fn loss_is_affine_in_lambda() {
    let mut r = rng(7);
    let model = random_model(&mut r);
    let b = random_batch(&mut r, 10, model.config().input_dim, model.config().num_classes);
    let out = model.forward_all(&b.x).unwrap();
    let at = |lambda: f64| {
        let cfg = cfg_for(&model, Regularizer::Mmd, KernelSpec::default(), lambda);
        joint_loss(&out, &b.y, &b.a, &cfg).unwrap().total
    };
    let (l0, l1, l2) = (at(0.0), at(1.0), at(2.0));
    assert!((l2 - 2.0 * l1 + l0).abs() < 1e-10);
}

#[test]
fn zero_alpha_exit_contributes_no_gradient() {
    let mut r = rng(11);
    let mut model = random_model(&mut r);
    while model.config().num_internal_exits() < 2 {
        model = random_model(&mut r);
    }
    let b = random_batch(&mut r, 9, model.config().input_dim, model.config().num_classes);
    let mut cfg = cfg_for(&model, Regularizer::Mmd, KernelSpec::default(), 0.5);
    cfg.alphas[0] = 0.0;
    model.loss_and_grad(&b.x, &b.y, &b.a, &cfg).unwrap();
    for name in ["exit1.hidden.weight", "exit1.out.weight"] {
        let id = model.params().find(name).unwrap_or_else(|| panic!("missing {name}"));
        assert!(model.params().grad(id).as_slice().iter().all(|&g| g == 0.0), "{name}");
    }
    // later exits still reach the first block
    let first = model.params().find("block1.weight").unwrap();
    assert!(model.params().grad(first).as_slice().iter().any(|&g| g != 0.0));
}

#[test]
fn single_group_batch_flags_degenerate() {
    let mut r = rng(3);
    let model = random_model(&mut r);
    let mut b = random_batch(&mut r, 8, model.config().input_dim, model.config().num_classes);
    b.a = vec![1; 8];
    let cfg = cfg_for(&model, Regularizer::Hsic, KernelSpec::default(), 1.0);
    let out = model.forward_all(&b.x).unwrap();
    let l = joint_loss(&out, &b.y, &b.a, &cfg).unwrap();
    assert!(l.degenerate);
    assert!(l.fairness.iter().all(|&s| s == 0.0));
}

/// `l = 0.5 * x^2` driven by the optimizer step alone.
#[test]
fn sgd_descends_a_quadratic_bowl() {
    let mut store = ParamStore::new();
    let id = store.add("x", Matrix::scalar(4.0));
    let lr = 0.1;
    let mut x = 4.0;
    for _ in 0..50 {
        let v = store.value(id).clone();
        store.zero_grad();
        store.accumulate_grad(id, &v).unwrap();
        sgd_step(&mut store, lr).unwrap();
        x -= lr * x;
        assert!((store.value(id).get(0, 0) - x).abs() < 1e-15);
    }
    assert!(store.value(id).get(0, 0).abs() < 0.03);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut r = rng(5);
    let mut model = random_model(&mut r);
    let b = random_batch(&mut r, 10, model.config().input_dim, model.config().num_classes);
    let before: Vec<Matrix> = model.params().iter().map(|p| p.value.clone()).collect();
    let cfg = cfg_for(&model, Regularizer::Mmd, KernelSpec::default(), 0.1);
    model.loss_and_grad(&b.x, &b.y, &b.a, &cfg).unwrap();
    sgd_step(model.params_mut(), 0.0).unwrap();
    let after: Vec<Matrix> = model.params().iter().map(|p| p.value.clone()).collect();
    assert_eq!(before, after);
}
