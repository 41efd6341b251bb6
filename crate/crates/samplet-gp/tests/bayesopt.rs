use nalgebra::DMatrix;
use samplet_gp::bayesopt::{
    gamma_filter, negative_ackley, negative_ackley_unit, rastrigin, rastrigin_domain, run_bo, thompson_sample,
    BoConfig,
};
use samplet_gp::error::Error;
use samplet_gp::gp::{self, DenseGp};
use samplet_gp::{Hyperparameters, PointCloud, RandomSource, TrainConfig};

fn quick(n0: usize, seed: u64) -> BoConfig {
    BoConfig {
        n0,
        batch_size: 10,
        seed,
        train: TrainConfig { n_steps: 3, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn two_evaluations() {
    let mut calls = Vec::new();
    let res = run_bo(
        2,
        |u| {
            calls.push(u.to_vec());
            Ok(-(u[0] - 0.3).powi(2) - u[1])
        },
        &quick(2, 1),
    )
    .unwrap();
    assert_eq!(calls.len(), 2);
    assert_eq!(res.history.len(), 2);
    let best = res.history.iter().map(|r| r.y).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(res.y_best, best);
    assert!(res.history.iter().all(|r| r.x.iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn history_is_consistent_and_reproducible() {
    let f = |u: &[f64]| Ok(-rastrigin(&rastrigin_domain(u)));
    let a = run_bo(2, f, &quick(40, 7)).unwrap();
    let b = run_bo(2, f, &quick(40, 7)).unwrap();
    assert_eq!(a.history, b.history);
    let mut best = f64::NEG_INFINITY;
    for (i, r) in a.history.iter().enumerate() {
        assert_eq!(r.step, i + 1);
        best = best.max(r.y);
        assert_eq!(r.best_so_far, best);
    }
    let retrains: Vec<usize> = a.history.iter().filter(|r| r.retrained).map(|r| r.step).collect();
    assert!(!retrains.is_empty());
    assert!(retrains.iter().all(|s| s % 10 == 0 || *s == 40));
    assert_eq!(a.y_best, best);
    assert!((-rastrigin(&rastrigin_domain(&a.x_best)) - a.y_best).abs() < 1e-12);
}

#[test]
fn failures_keep_the_partial_history() {
    let mut n = 0;
    let err = run_bo(
        1,
        |u| {
            n += 1;
            if n == 5 {
                Err(Error::InvalidArgument("sensor offline".into()))
            } else {
                Ok(u[0])
            }
        },
        &quick(20, 2),
    )
    .unwrap_err();
    assert_eq!(err.history.len(), 4);
    assert!(err.to_string().contains("sensor offline"));
}

#[test]
fn invalid_configurations_are_rejected() {
    assert!(BoConfig { gamma: 0.0, ..Default::default() }.validate().is_err());
    assert!(BoConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
    assert!(BoConfig { n0: 1, ..Default::default() }.validate().is_err());
    assert!(run_bo(2, |_| Ok(0.0), &BoConfig { gamma: -1.0, ..Default::default() }).is_err());
}

#[test]
fn thompson_sample_limits() {
    let mean = vec![1.0, -2.0, 0.5];
    let zero = DMatrix::zeros(3, 3);
    assert_eq!(thompson_sample(&mean, &zero, &mut RandomSource::new(0)).unwrap(), mean);

    let eps = RandomSource::new(5).standard_normal(3);
    let s = thompson_sample(&mean, &DMatrix::identity(3, 3), &mut RandomSource::new(5)).unwrap();
    for i in 0..3 {
        assert!((s[i] - mean[i] - eps[i]).abs() < 1e-12);
    }
}

#[test]
fn thompson_sample_statistics() {
    let mean = vec![0.3, -1.0, 2.0];
    let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 2.0, -0.3, 0.2, -0.3, 0.7]);
    let mut rng = RandomSource::new(11);
    let n = 10_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|_| thompson_sample(&mean, &cov, &mut rng).unwrap()).collect();
    let mut m = [0.0; 3];
    for d in &draws {
        for i in 0..3 {
            m[i] += d[i] / n as f64;
        }
    }
    for i in 0..3 {
        assert!((m[i] - mean[i]).abs() <= 3.0 * (cov[(i, i)] / n as f64).sqrt(), "coordinate {i}");
    }
    let mut c = DMatrix::<f64>::zeros(3, 3);
    for d in &draws {
        for i in 0..3 {
            for j in 0..3 {
                c[(i, j)] += (d[i] - m[i]) * (d[j] - m[j]) / (n - 1) as f64;
            }
        }
    }
    assert!((&c - &cov).norm() <= 0.1 * cov.norm());
}

#[test]
fn singular_covariance_is_handled() {
    let v = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, -1.0]);
    let cov = &v * v.transpose();
    let s = thompson_sample(&[0.0; 3], &cov, &mut RandomSource::new(3)).unwrap();
    assert!((s[1] - 2.0 * s[0]).abs() < 1e-3 && (s[2] + s[0]).abs() < 1e-3);
}

#[test]
fn gamma_filter_rules() {
    assert_eq!(gamma_filter(&[2.0; 5], 1.0), vec![0, 1, 2, 3, 4]);
    assert_eq!(gamma_filter(&[2.0; 5], 0.3), vec![0, 1, 2, 3, 4]);
    assert_eq!(gamma_filter(&[0.1, 0.5, 0.5, 0.2], 1.0), vec![1, 2]);
    assert_eq!(gamma_filter(&[0.1, 0.5, 0.3, 0.2], 0.5), vec![1, 2]);
    assert_eq!(gamma_filter(&[-1e-9, 0.0, 0.0], 0.5), vec![0, 1, 2]);
    assert!(!gamma_filter(&[0.0, 0.0], 1.0).is_empty());
}

#[test]
fn observed_point_is_filtered_without_noise() {
    let train = PointCloud::new(&[vec![0.2], vec![0.7]]).unwrap();
    let h = Hyperparameters { nu: 1.5, ell: 0.3, sigma2: 0.0, ..Default::default() };
    let g = DenseGp::fit(&train, &[1.0, -1.0], &h).unwrap();
    let cand = PointCloud::new(&[vec![0.2], vec![0.45], vec![0.95]]).unwrap();
    let (_, cov) = g.predict(&cand).unwrap();
    let var: Vec<f64> = (0..3).map(|i| cov[(i, i)]).collect();
    assert!(var[0].abs() < 1e-10);
    let kept = gamma_filter(&var, 0.01);
    assert!(!kept.contains(&0) && kept.contains(&2));

    let (_, prior) = gp::prior(&h.kernel().unwrap(), &cand).unwrap();
    let pv: Vec<f64> = (0..3).map(|i| prior[(i, i)]).collect();
    assert_eq!(gamma_filter(&pv, 1.0), vec![0, 1, 2]);
}

#[test]
fn test_functions() {
    assert!(negative_ackley(0.0, 0.0).abs() < 1e-12);
    assert!(negative_ackley(1.0, -2.0) < -3.0);
    assert!(negative_ackley_unit(&[0.5, 0.5]).abs() < 1e-12);
    assert_eq!(rastrigin(&[0.0, 0.0, 0.0]), 0.0);
    assert!((rastrigin(&[1.0]) - 1.0).abs() < 1e-12);
    assert_eq!(rastrigin_domain(&[0.0, 1.0]), vec![-5.12, 5.12]);
}
