use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use samplet_gp::error::Error;
use samplet_gp::linalg::{
    dense_cholesky, exact_trace, hutchinson_trace, log_det, sparse_cholesky, sparse_cholesky_with, Ordering,
    RandomSource,
};
use samplet_gp::sparse::SparseSymMatrix;

/// Banded SPD matrix with a few random long-range couplings.
fn random_spd(n: usize, seed: u64) -> SparseSymMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trips = Vec::new();
    let mut rowsum = vec![0.0; n];
    for j in 0..n {
        for i in j + 1..(j + 4).min(n) {
            let v: f64 = rng.random_range(-1.0..1.0);
            trips.push((i, j, v));
            rowsum[i] += v.abs();
            rowsum[j] += v.abs();
        }
    }
    for _ in 0..n / 4 {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            let v: f64 = rng.random_range(-0.5..0.5);
            trips.push((a.max(b), a.min(b), v));
            rowsum[a] += v.abs();
            rowsum[b] += v.abs();
        }
    }
    for (i, s) in rowsum.iter().enumerate() {
        trips.push((i, i, s + 1.0 + rng.random_range(0.0..1.0)));
    }
    SparseSymMatrix::from_lower_triplets(n, &trips).unwrap()
}

fn dense_solve(a: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    a.clone().cholesky().unwrap().solve(&DVector::from_column_slice(b)).as_slice().to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn solve_matches_dense_for_small_and_large_systems() {
    for (n, seed) in [(40, 1), (255, 2), (600, 3)] {
        let a = random_spd(n, seed);
        let shift = 0.25;
        let mut dense = a.to_dense();
        for i in 0..n {
            dense[(i, i)] += shift;
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let want = dense_solve(&dense, &b);
        for ordering in [Ordering::Amd, Ordering::Natural] {
            let f = sparse_cholesky_with(&a, shift, ordering).unwrap();
            let got = f.solve(&b).unwrap();
            assert!(max_diff(&got, &want) < 1e-10, "n={n} {ordering:?}");
            let ld = dense.clone().cholesky().unwrap().l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
            assert!((log_det(&f) - ld).abs() < 1e-9 * ld.abs().max(1.0));
        }
    }
}

#[test]
fn factor_reproduces_permuted_matrix() {
    for n in [30, 300] {
        let a = random_spd(n, 7);
        let f = sparse_cholesky(&a, 0.0).unwrap();
        let l = f.l_dense();
        let llt = &l * l.transpose();
        let d = a.to_dense();
        let perm = f.permutation();
        for i in 0..n {
            for j in 0..n {
                assert!((llt[(i, j)] - d[(perm[i], perm[j])]).abs() < 1e-10);
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }
}

#[test]
fn indefinite_pivot_reports_original_index() {
    for (n, bad) in [(20, 13), (400, 301)] {
        let trips: Vec<_> = (0..n).map(|i| (i, i, if i == bad { -1.0 } else { 2.0 })).collect();
        let a = SparseSymMatrix::from_lower_triplets(n, &trips).unwrap();
        match sparse_cholesky(&a, 0.0) {
            Err(Error::IndefiniteMatrix { pivot_index }) => assert_eq!(pivot_index, bad, "n={n}"),
            other => panic!("expected indefinite error, got {other:?}"),
        }
        assert!(sparse_cholesky(&a, 1.5).is_ok());
    }
}

#[test]
fn lower_solve_is_half_of_the_quadratic_form() {
    let a = random_spd(300, 11);
    let f = sparse_cholesky(&a, 0.1).unwrap();
    let b: Vec<f64> = (0..300).map(|i| ((i * i) % 17) as f64 - 8.0).collect();
    let half = f.solve_lower(&b).unwrap();
    let full = f.solve(&b).unwrap();
    let q1: f64 = half.iter().map(|v| v * v).sum();
    let q2: f64 = b.iter().zip(&full).map(|(x, y)| x * y).sum();
    assert!((q1 - q2).abs() < 1e-10 * q2.abs());
}

#[test]
fn trace_estimators_agree_with_dense() {
    let n = 120;
    let a = random_spd(n, 5);
    let m = random_spd(n, 6);
    let f = sparse_cholesky(&a, 0.0).unwrap();
    let ainv = a.to_dense().try_inverse().unwrap();
    let want = (&ainv * m.to_dense()).trace();
    let exact = exact_trace(&f, &m).unwrap();
    assert!((exact - want).abs() < 1e-10 * want.abs());
    let mut rng = RandomSource::new(3);
    let est = hutchinson_trace(&f, &m, 2000, &mut rng).unwrap();
    assert!((est - want).abs() < 0.05 * want.abs(), "estimate {est} vs {want}");
    assert!(hutchinson_trace(&f, &m, 0, &mut rng).is_err());
}

#[test]
fn dense_cholesky_matches_nalgebra() {
    let a = random_spd(50, 9).to_dense();
    let ours = dense_cholesky(&a).unwrap();
    let theirs = a.clone().cholesky().unwrap().l();
    assert!((ours - theirs).abs().max() < 1e-12);
    let mut bad = a.clone();
    bad[(4, 4)] = -1.0;
    assert!(matches!(dense_cholesky(&bad), Err(Error::IndefiniteMatrix { pivot_index: 4 })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solve_residual_is_small(n in 1usize..320, seed in 0u64..1000) {
        let a = random_spd(n, seed);
        let f = sparse_cholesky(&a, 0.0).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 + seed as f64).cos()).collect();
        let x = f.solve(&b).unwrap();
        let r = a.matvec(&x).unwrap();
        prop_assert!(max_diff(&r, &b) < 1e-9);
    }
}
