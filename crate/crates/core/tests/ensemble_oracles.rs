use gpuq::ensemble::{
    ensemble_predict, fgsm_perturb, fit_ensemble, loss_and_grad, mlp_forward, softmax_rows, EnsembleConfig,
    EnsembleModel, MlpParams, Mode, Norm,
};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_net(seed: u64, dim: usize, width: usize) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MlpParams::he_uniform(dim, width, 3, 3, &mut rng);
    // Move BN parameters off their trivial initial values.
    for l in p.hidden.iter_mut() {
        l.gamma = Array1::from_shape_fn(width, |_| rng.random_range(0.5..1.5));
        l.beta = Array1::from_shape_fn(width, |_| rng.random_range(-0.3..0.3));
        l.running_mean = Array1::from_shape_fn(width, |_| rng.random_range(-0.2..0.2));
        l.running_var = Array1::from_shape_fn(width, |_| rng.random_range(0.5..2.0));
    }
    p.out_bias = Array1::from_shape_fn(3, |_| rng.random_range(-0.2..0.2));
    p
}

fn random_batch(seed: u64, n: usize, dim: usize) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.5..1.5));
    let ys = (0..n).map(|_| rng.random_range(0..3)).collect();
    (xs, ys)
}

fn check_fd(p: &MlpParams, xs: &Array2<f64>, ys: &[usize], norm: Norm<'_>) {
    let (_, grad) = loss_and_grad(p, xs.view(), ys, norm).unwrap();
    let analytic = grad.flatten();
    let base = p.params_flat();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut q = p.clone();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        q.set_params_flat(&plus).unwrap();
        let lp = loss_and_grad(&q, xs.view(), ys, norm).unwrap().0;
        let mut minus = base.clone();
        minus[i] -= h;
        q.set_params_flat(&minus).unwrap();
        let lm = loss_and_grad(&q, xs.view(), ys, norm).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    assert!(worst < 1e-3, "worst relative error {worst:e}");
}

#[test]
fn mlp_gradient_matches_finite_differences_with_frozen_stats() {
    let p = random_net(1, 4, 8);
    let (xs, ys) = random_batch(2, 6, 4);
    let stats = p.running_stats();
    check_fd(&p, &xs, &ys, Norm::Frozen(&stats));
    check_fd(&p, &xs, &ys, Norm::Running);
}

#[test]
fn mlp_gradient_matches_finite_differences_through_batch_stats() {
    let p = random_net(3, 4, 8);
    let (xs, ys) = random_batch(4, 7, 4);
    check_fd(&p, &xs, &ys, Norm::Batch);
}

fn row_ce(p: &MlpParams, x: &Array2<f64>, y: usize) -> f64 {
    let probs = softmax_rows(&mlp_forward(p, x.view(), Mode::Eval).unwrap());
    -probs[[0, y]].ln()
}

#[test]
fn fgsm_moves_each_coordinate_by_exactly_eps_scale() {
    let p = random_net(5, 4, 8);
    let (xs, ys) = random_batch(6, 20, 4);
    let scale = [0.5, 1.0, 2.0, 0.25];
    let eps = 0.01;
    let adv = fgsm_perturb(&p, xs.view(), &ys, eps, &scale, None).unwrap();
    for (a, x) in adv.outer_iter().zip(xs.outer_iter()) {
        for d in 0..4 {
            let moved = (a[d] - x[d]).abs();
            assert!(moved == 0.0 || (moved - eps * scale[d]).abs() < 1e-15, "moved {moved}");
            assert!(moved / scale[d] <= eps + 1e-15);
        }
    }
}

#[test]
fn fgsm_increases_loss_for_small_eps() {
    let mut failures = 0;
    let trials = 500;
    let scale = [1.0; 4];
    for t in 0..trials {
        let p = random_net(100 + t, 4, 8);
        let (x, y) = random_batch(10_000 + t, 1, 4);
        let adv = fgsm_perturb(&p, x.view(), &y, 1e-3, &scale, None).unwrap();
        if row_ce(&p, &adv, y[0]) < row_ce(&p, &x, y[0]) {
            failures += 1;
        }
    }
    assert!(failures * 100 <= trials, "{failures} of {trials} trials decreased the loss");
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[test]
fn ensemble_entropy_dominates_mean_member_entropy() {
    let members: Vec<MlpParams> = (0..5).map(|s| random_net(200 + s, 6, 16)).collect();
    let model = EnsembleModel { members, fgsm_epsilon: 0.01, feature_scale: vec![1.0; 6] };
    let (xs, _) = random_batch(7, 1000, 6);
    let mixed = ensemble_predict(&model, xs.view()).unwrap();
    let per_member = model.member_probs(xs.view()).unwrap();
    for (n, row) in mixed.iter().enumerate() {
        let rows: Vec<Vec<f64>> = per_member.iter().map(|m| m.row(n).to_vec()).collect();
        let mean_h = rows.iter().map(|r| entropy(r)).sum::<f64>() / rows.len() as f64;
        let h = entropy(&row.0);
        assert!(h >= mean_h - 1e-12, "row {n}: {h} < {mean_h}");
        let disagree = rows.iter().any(|r| r.iter().zip(&rows[0]).any(|(a, b)| (a - b).abs() > 1e-6));
        if disagree {
            assert!(h > mean_h, "row {n}: members disagree but entropies are equal");
        }
    }
}

#[test]
fn ensemble_fits_separable_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let centres = [[-3.0, 0.0, 1.0], [3.0, 0.0, -1.0], [0.0, 4.0, 0.0]];
    let n = 600;
    let ys: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let xs = Array2::from_shape_fn((n, 3), |(i, j)| centres[ys[i]][j] + rng.random_range(-0.8..0.8));
    let cfg = EnsembleConfig { members: 2, width: 32, epochs: 10, batch_size: 100, ..Default::default() };
    let (model, trace) = fit_ensemble(xs.view(), &ys, &cfg).unwrap();
    assert_eq!(trace.len(), 2 * 10 * 6);
    let probs = ensemble_predict(&model, xs.view()).unwrap();
    let correct = probs.iter().zip(&ys).filter(|(p, y)| p.argmax() == **y).count();
    assert!(correct as f64 / n as f64 >= 0.95, "accuracy {}", correct as f64 / n as f64);
}
