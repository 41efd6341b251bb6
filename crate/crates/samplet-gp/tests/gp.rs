use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samplet_gp::bayesopt::rastrigin;
use samplet_gp::gp::{self, likelihood_gradient, log_marginal_likelihood, TraceEstimator};
use samplet_gp::kernels::{ell_derivative_matrix, kernel_matrix};
use samplet_gp::{CompressionConfig, DenseGp, GPModel, Hyperparameters, PointCloud, RandomSource, TrainConfig};

fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
}

fn targets(pts: &[Vec<f64>], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pts.iter().map(|p| (3.0 * p[0]).sin() + p.iter().sum::<f64>() + 0.1 * (rng.random::<f64>() - 0.5)).collect()
}

struct Oracle {
    ll: f64,
    grad: [f64; 3],
    khat: DMatrix<f64>,
}

fn dense_oracle(pts: &PointCloud, y: &[f64], h: &Hyperparameters) -> Oracle {
    let k = kernel_matrix(&h.kernel().unwrap(), pts, pts).unwrap();
    let n = y.len();
    let khat = &k + DMatrix::identity(n, n) * h.sigma2;
    let chol = Cholesky::new(khat.clone()).unwrap();
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let ll = -0.5 * yv.dot(&alpha) - 0.5 * chol.determinant().ln() - 0.5 * n as f64 * (2.0 * PI).ln();
    let inv = chol.inverse();
    let dk = ell_derivative_matrix(&h.kernel().unwrap(), pts);
    let term = |d: &DMatrix<f64>| 0.5 * alpha.dot(&(d * &alpha)) - 0.5 * (&inv * d).trace();
    let grad = [term(&dk), term(&(&k / h.s2)), term(&DMatrix::identity(n, n))];
    Oracle { ll, grad, khat }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

#[test]
fn single_leaf_pipeline_matches_dense_formulas() {
    let raw = random_points(200, 2, 1);
    let pts = PointCloud::new(&raw).unwrap();
    let y = targets(&raw, 2);
    let h = Hyperparameters { nu: 1.5, ell: 0.4, s2: 1.3, sigma2: 0.2, ..Default::default() };
    let model = GPModel::fit(&pts, &y, &h, &CompressionConfig::uncompressed()).unwrap();
    let o = dense_oracle(&pts, &y, &h);
    assert!(close(model.log_likelihood(), o.ll, 1e-8));
    assert!(close(log_marginal_likelihood(&model, &y).unwrap(), o.ll, 1e-8));
    let g = likelihood_gradient(&model, &y, TraceEstimator::Exact, &mut RandomSource::new(0)).unwrap();
    for (a, b) in [g.ell, g.s2, g.sigma2].iter().zip(&o.grad) {
        assert!(close(*a, *b, 1e-8), "{a} vs {b}");
    }

    let xp = PointCloud::new(&random_points(40, 2, 3)).unwrap();
    let (mean, cov) = gp::predict(&model, &xp).unwrap();
    let k1 = kernel_matrix(model.kernel(), &xp, &pts).unwrap();
    let k2 = kernel_matrix(model.kernel(), &xp, &xp).unwrap();
    let sol = Cholesky::new(o.khat.clone()).unwrap();
    let want_mean = &k1 * sol.solve(&DVector::from_column_slice(&y));
    let want_cov = &k2 - &k1 * sol.solve(&k1.transpose());
    for i in 0..40 {
        assert!(close(mean[i], want_mean[i], 1e-8));
        for j in 0..40 {
            assert!((cov[(i, j)] - want_cov[(i, j)]).abs() < 1e-8);
        }
    }
    assert!(model.residual().unwrap() < 1e-8);
}

#[test]
fn dense_gp_matches_oracle() {
    let raw = random_points(120, 3, 4);
    let pts = PointCloud::new(&raw).unwrap();
    let y = targets(&raw, 5);
    let h = Hyperparameters { nu: 2.5, ell: 0.7, s2: 0.8, sigma2: 0.3, ..Default::default() };
    let g = DenseGp::fit(&pts, &y, &h).unwrap();
    let o = dense_oracle(&pts, &y, &h);
    assert!(close(g.log_likelihood(), o.ll, 1e-10));
    let grad = g.gradient(TraceEstimator::Exact, &mut RandomSource::new(0)).unwrap();
    for (a, b) in [grad.ell, grad.s2, grad.sigma2].iter().zip(&o.grad) {
        assert!(close(*a, *b, 1e-9));
    }
}

#[test]
fn exact_gradient_matches_finite_differences() {
    let raw = random_points(150, 2, 6);
    let pts = PointCloud::new(&raw).unwrap();
    let y = targets(&raw, 7);
    let h = Hyperparameters { nu: 2.5, ell: 0.3, s2: 2.0, sigma2: 0.5, ..Default::default() };
    let cc = CompressionConfig::default();
    let model = GPModel::fit(&pts, &y, &h, &cc).unwrap();
    let g = likelihood_gradient(&model, &y, TraceEstimator::Exact, &mut RandomSource::new(0)).unwrap();
    let ll = |h: Hyperparameters| GPModel::fit(&pts, &y, &h, &cc).unwrap().log_likelihood();
    let fd = |f: &dyn Fn(f64) -> Hyperparameters, x: f64| {
        let step = 1e-4 * x;
        (ll(f(x + step)) - ll(f(x - step))) / (2.0 * step)
    };
    let d_ell = fd(&|v| Hyperparameters { ell: v, ..h }, h.ell);
    let d_s2 = fd(&|v| Hyperparameters { s2: v, ..h }, h.s2);
    let d_sig = fd(&|v| Hyperparameters { sigma2: v, ..h }, h.sigma2);
    assert!(close(g.ell, d_ell, 1e-5), "{} {}", g.ell, d_ell);
    assert!(close(g.s2, d_s2, 1e-5), "{} {}", g.s2, d_s2);
    assert!(close(g.sigma2, d_sig, 1e-5), "{} {}", g.sigma2, d_sig);
}

#[test]
fn scalar_posterior() {
    let pts = PointCloud::new(&[vec![0.2, 0.3]]).unwrap();
    let h = Hyperparameters { nu: 0.5, ell: 0.5, s2: 2.0, sigma2: 0.5, ..Default::default() };
    let model = GPModel::fit(&pts, &[1.5], &h, &CompressionConfig::default()).unwrap();
    let x = PointCloud::new(&[vec![0.6, 0.0]]).unwrap();
    let m = gp::predict_mean(&model, &x).unwrap()[0];
    let r = (0.16f64 + 0.09).sqrt();
    let kx = 2.0 * (-r / 0.5f64).exp();
    assert!((m - kx * 1.5 / 2.5).abs() < 1e-14);
}

#[test]
fn noiseless_model_interpolates() {
    let raw: Vec<Vec<f64>> = (0..25).map(|i| vec![i as f64 / 24.0]).collect();
    let pts = PointCloud::new(&raw).unwrap();
    let y: Vec<f64> = raw.iter().map(|p| (4.0 * p[0]).cos()).collect();
    let h = Hyperparameters { nu: 0.5, ell: 0.5, s2: 1.0, sigma2: 0.0, ..Default::default() };
    let model = GPModel::fit(&pts, &y, &h, &CompressionConfig::uncompressed()).unwrap();
    let (mean, cov) = gp::predict(&model, &pts).unwrap();
    for i in 0..25 {
        assert!((mean[i] - y[i]).abs() < 1e-8);
        assert!(cov[(i, i)].abs() < 1e-8);
    }
}

#[test]
fn posterior_covariance_is_psd_and_symmetric() {
    let raw = random_points(600, 2, 8);
    let pts = PointCloud::new(&raw).unwrap();
    let y = targets(&raw, 9);
    let h = Hyperparameters { nu: 1.5, ell: 0.2, s2: 1.0, sigma2: 0.1, ..Default::default() };
    let model = GPModel::fit(&pts, &y, &h, &CompressionConfig::default()).unwrap();
    let xp = PointCloud::new(&random_points(60, 2, 10)).unwrap();
    let (_, cov) = gp::predict(&model, &xp).unwrap();
    assert!((&cov - cov.transpose()).amax() < 1e-10);
    let eig = cov.symmetric_eigenvalues();
    assert!(eig.min() >= -1e-6 * h.s2);
}

#[test]
fn compressed_mean_is_close_to_dense() {
    let raw = random_points(512, 2, 11);
    let pts = PointCloud::new(&raw).unwrap();
    let y: Vec<f64> = raw.iter().map(|p| rastrigin(&[10.24 * p[0] - 5.12, 10.24 * p[1] - 5.12])).collect();
    let h = Hyperparameters { nu: 2.5, ell: 0.1, s2: 1.0, sigma2: 0.5, ..Default::default() };
    let cfg = TrainConfig { n_steps: 0, ..Default::default() };
    let model = gp::train(&pts, &y, &h, &cfg, &CompressionConfig::default()).unwrap();
    let dense = DenseGp::train(&pts, &y, &h, &cfg).unwrap();
    let xp = PointCloud::new(&random_points(200, 2, 12)).unwrap();
    let a = gp::predict_mean(&model, &xp).unwrap();
    let b = dense.predict_mean(&xp).unwrap();
    let ymax = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(&b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    assert!(diff <= 1e-3 * ymax, "{diff}");
}

#[test]
fn single_leaf_training_follows_dense_reference() {
    let raw = random_points(100, 2, 13);
    let pts = PointCloud::new(&raw).unwrap();
    let y = targets(&raw, 14);
    let cfg = TrainConfig { n_steps: 3, seed: 21, ..Default::default() };
    let h = Hyperparameters::default();
    let a = gp::train(&pts, &y, &h, &cfg, &CompressionConfig::uncompressed()).unwrap();
    let b = DenseGp::train(&pts, &y, &h, &cfg).unwrap();
    for (s, t) in a.train_trace().iter().zip(b.train_trace()) {
        assert!(close(s.ell, t.ell, 1e-6) && close(s.s2, t.s2, 1e-6) && close(s.sigma2, t.sigma2, 1e-6));
    }
    let (ha, hb) = (a.hyperparameters(), b.hyperparameters());
    assert!(close(ha.ell, hb.ell, 1e-6) && close(ha.s2, hb.s2, 1e-6) && close(ha.sigma2, hb.sigma2, 1e-6));
}

#[test]
fn training_respects_bounds_and_improves_likelihood() {
    let raw: Vec<Vec<f64>> = random_points(512, 1, 15);
    let pts = PointCloud::new(&raw).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let y: Vec<f64> = raw
        .iter()
        .map(|p| rastrigin(&[10.24 * p[0] - 5.12]) + rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let cfg = TrainConfig { n_steps: 5, seed: 3, ..Default::default() };
    let model = gp::train(&pts, &y, &Hyperparameters::default(), &cfg, &CompressionConfig::default()).unwrap();
    let mut lls: Vec<f64> = model.train_trace().iter().map(|s| s.log_likelihood).collect();
    lls.push(model.log_likelihood());
    let ups = lls.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(ups >= 4, "{lls:?}");
    let b = model.hyperparameters().bounds;
    for s in model.train_trace() {
        assert!(s.ell >= b.ell.0 && s.ell <= b.ell.1);
        assert!(s.s2 >= b.s2.0 && s.s2 <= b.s2.1);
        assert!(s.sigma2 >= b.sigma2.0 && s.sigma2 <= b.sigma2.1);
    }
}

#[test]
fn zero_steps_keeps_initial_hyperparameters() {
    let raw = random_points(50, 2, 17);
    let pts = PointCloud::new(&raw).unwrap();
    let y = targets(&raw, 18);
    let h = Hyperparameters { ell: 0.3, ..Default::default() };
    let cfg = TrainConfig { n_steps: 0, ..Default::default() };
    let m = gp::train(&pts, &y, &h, &cfg, &CompressionConfig::default()).unwrap();
    assert_eq!(m.hyperparameters().ell, 0.3);
    assert!(gp::predict_mean(&m, &pts).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn non_finite_targets_are_rejected() {
    let pts = PointCloud::new(&random_points(10, 1, 19)).unwrap();
    let mut y = vec![0.0; 10];
    y[3] = f64::NAN;
    let r = gp::train(&pts, &y, &Hyperparameters::default(), &TrainConfig::default(), &CompressionConfig::default());
    assert!(matches!(r, Err(samplet_gp::Error::NonFinite(_))));
}
