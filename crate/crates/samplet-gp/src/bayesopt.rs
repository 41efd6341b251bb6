//! Thompson-sampling Bayesian optimization on `[0, 1]^d`.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cluster_tree::PointCloud;
use crate::error::{Error, Result};
use crate::gp::{self, CompressionConfig, DenseGp, GPModel, TrainConfig};
use crate::kernels::Hyperparameters;
use crate::linalg::{dense_cholesky, RandomSource};

/// Loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    /// Total number of evaluations.
    pub n0: usize,
    pub gamma: f64,
    /// Observations between surrogate refits.
    pub batch_size: usize,
    /// Uniform candidates per step; `None` means `100 d`.
    pub candidates_per_round: Option<usize>,
    pub seed: u64,
    /// Starting hyperparameters of the first fit.
    pub hyper: Hyperparameters,
    pub train: TrainConfig,
    pub compression: CompressionConfig,
    /// Largest data set handled by the dense exact GP.
    pub dense_threshold: usize,
    /// Add the observed points to the final candidates and refine the best
    /// one by a compass search on the posterior mean.
    pub refine_final: bool,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            n0: 600,
            gamma: 0.1,
            batch_size: 100,
            candidates_per_round: None,
            seed: 0,
            hyper: Hyperparameters::default(),
            train: TrainConfig { n_steps: 30, ..TrainConfig::default() },
            compression: CompressionConfig { q: 5, eta: 1.0, tau_comp: 1e-3, ..CompressionConfig::default() },
            dense_threshold: 10_000,
            refine_final: true,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.n0 < 2 {
            return Err(Error::InvalidArgument("at least two evaluations are required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.candidates_per_round == Some(0) {
            return Err(Error::InvalidArgument("at least one candidate is required".into()));
        }
        self.hyper.validate()?;
        self.train.validate()?;
        self.compression.validate()
    }
}

/// One evaluation of the black box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoRecord {
    pub step: usize,
    pub x: Vec<f64>,
    pub y: f64,
    pub best_so_far: f64,
    /// The surrogate was refit before this step.
    pub retrained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoResult {
    pub x_best: Vec<f64>,
    pub y_best: f64,
    pub history: Vec<BoRecord>,
}

impl BoResult {
    /// The last evaluated point, chosen by the posterior mean.
    pub fn final_record(&self) -> &BoRecord {
        self.history.last().expect("at least two evaluations")
    }
}

/// Error raised during the loop together with the evaluations made so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BoFailure {
    pub error: Error,
    pub history: Vec<BoRecord>,
}

impl fmt::Display for BoFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} after {} evaluations", self.error, self.history.len())
    }
}

impl std::error::Error for BoFailure {}

/// `mean + L eps` with `L L^T = cov`. Jitter from `1e-10 s` up to `1e-4 s`,
/// `s` the largest variance, is added when the factorization fails; a
/// clipped eigendecomposition is the last resort.
pub fn thompson_sample(mean: &[f64], cov: &DMatrix<f64>, rng: &mut RandomSource) -> Result<Vec<f64>> {
    let m = mean.len();
    if cov.nrows() != m || cov.ncols() != m {
        return Err(Error::DimensionMismatch { expected: m, got: cov.nrows() });
    }
    let eps = rng.standard_normal(m);
    let scale = (0..m).map(|i| cov[(i, i)]).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Ok(mean.to_vec());
    }
    let mut jitter = 0.0;
    loop {
        let mut a = cov.clone();
        for i in 0..m {
            a[(i, i)] += jitter;
        }
        if let Ok(l) = dense_cholesky(&a) {
            let s = l * nalgebra::DVector::from_vec(eps);
            return Ok(mean.iter().zip(s.iter()).map(|(a, b)| a + b).collect());
        }
        jitter = if jitter == 0.0 { 1e-10 * scale } else { jitter * 10.0 };
        if jitter > 1e-4 * scale * (1.0 + 1e-9) {
            break;
        }
    }
    let eig = SymmetricEigen::new(cov.clone());
    let mut out = mean.to_vec();
    for k in 0..m {
        let lam = eig.eigenvalues[k].max(0.0).sqrt();
        if lam == 0.0 {
            continue;
        }
        let coef: f64 = (0..m).map(|i| eig.eigenvectors[(i, k)] * eps[i]).sum::<f64>() * lam;
        for i in 0..m {
            out[i] += eig.eigenvectors[(i, k)] * coef;
        }
    }
    Ok(out)
}

/// Indices with variance at least `gamma` times the largest one. Negative
/// variances count as zero; the set is never empty.
pub fn gamma_filter(posterior_var: &[f64], gamma: f64) -> Vec<usize> {
    if posterior_var.is_empty() {
        return Vec::new();
    }
    let var: Vec<f64> = posterior_var.iter().map(|v| if v.is_nan() { 0.0 } else { v.max(0.0) }).collect();
    let (arg, max) = var
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let keep: Vec<usize> = (0..var.len()).filter(|&i| var[i] >= gamma * max).collect();
    if keep.is_empty() {
        vec![arg]
    } else {
        keep
    }
}

enum Surrogate {
    Prior(Hyperparameters),
    Dense(DenseGp),
    Samplet(Box<GPModel>),
}

impl Surrogate {
    fn posterior(&self, x: &PointCloud) -> Result<(Vec<f64>, DMatrix<f64>)> {
        match self {
            Surrogate::Prior(h) => gp::prior(&h.kernel()?, x),
            Surrogate::Dense(g) => g.predict(x),
            Surrogate::Samplet(g) => gp::predict(g, x),
        }
    }

    fn mean(&self, x: &PointCloud) -> Result<Vec<f64>> {
        match self {
            Surrogate::Prior(_) => Ok(vec![0.0; x.len()]),
            Surrogate::Dense(g) => g.predict_mean(x),
            Surrogate::Samplet(g) => gp::predict_mean(g, x),
        }
    }

    fn hyperparameters(&self) -> Hyperparameters {
        match self {
            Surrogate::Prior(h) => *h,
            Surrogate::Dense(g) => *g.hyperparameters(),
            Surrogate::Samplet(g) => *g.hyperparameters(),
        }
    }
}

fn fit_surrogate(xs: &[Vec<f64>], ys: &[f64], start: &Hyperparameters, cfg: &BoConfig) -> Result<Surrogate> {
    let pts = PointCloud::new(xs)?;
    if xs.len() < 2 {
        Ok(Surrogate::Dense(DenseGp::fit(&pts, ys, start)?))
    } else if xs.len() <= cfg.dense_threshold {
        Ok(Surrogate::Dense(DenseGp::train(&pts, ys, start, &cfg.train)?))
    } else {
        Ok(Surrogate::Samplet(Box::new(gp::train(&pts, ys, start, &cfg.train, &cfg.compression)?)))
    }
}

fn candidates(dim: usize, count: usize, rng: &mut RandomSource) -> Result<(Vec<Vec<f64>>, PointCloud)> {
    let flat = rng.uniform(dim * count);
    let xs: Vec<Vec<f64>> = flat.chunks(dim).map(|c| c.to_vec()).collect();
    let cloud = PointCloud::from_flat(dim, flat)?;
    Ok((xs, cloud))
}

fn argmax_over(values: &[f64], subset: impl IntoIterator<Item = usize>) -> usize {
    let mut best = usize::MAX;
    for i in subset {
        if best == usize::MAX || values[i] > values[best] {
            best = i;
        }
    }
    best
}

/// Coordinate compass search for a local maximum of the posterior mean in
/// the unit cube.
fn compass_search(model: &Surrogate, mut x: Vec<f64>, mut fx: f64) -> Result<Vec<f64>> {
    let d = x.len();
    let mut h = 0.05;
    while h > 1e-7 {
        let mut trial = Vec::with_capacity(2 * d);
        for i in 0..d {
            for s in [-1.0, 1.0] {
                let mut y = x.clone();
                y[i] = (y[i] + s * h).clamp(0.0, 1.0);
                trial.push(y);
            }
        }
        let vals = model.mean(&PointCloud::new(&trial)?)?;
        let k = argmax_over(&vals, 0..trial.len());
        if vals[k] > fx {
            fx = vals[k];
            x = trial.swap_remove(k);
        } else {
            h *= 0.5;
        }
    }
    Ok(x)
}

/// Maximizes `black_box` over `[0, 1]^dim`.
///
/// The surrogate is refit whenever the step index is a multiple of the batch
/// size and kept fixed in between; before the first fit the prior is used.
/// The last evaluation maximizes the posterior mean of a final fit.
pub fn run_bo<F>(dim: usize, mut black_box: F, cfg: &BoConfig) -> std::result::Result<BoResult, BoFailure>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut history: Vec<BoRecord> = Vec::with_capacity(cfg.n0);
    let fail = |error: Error, history: &Vec<BoRecord>| BoFailure { error, history: history.clone() };
    if dim == 0 {
        return Err(fail(Error::InvalidArgument("dimension must be positive".into()), &history));
    }
    cfg.validate().map_err(|e| fail(e, &history))?;
    let n_cand = cfg.candidates_per_round.unwrap_or(100 * dim);
    let mut rng = RandomSource::new(cfg.seed);
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut surrogate = Surrogate::Prior(cfg.hyper);
    let mut best = f64::NEG_INFINITY;

    let mut record = |step: usize, x: Vec<f64>, y: f64, retrained: bool, history: &mut Vec<BoRecord>| {
        best = best.max(y);
        history.push(BoRecord { step, x, y, best_so_far: best, retrained });
    };

    for i in 1..cfg.n0 {
        let retrained = i % cfg.batch_size == 0;
        if retrained {
            let start = surrogate.hyperparameters();
            surrogate = fit_surrogate(&xs, &ys, &start, cfg).map_err(|e| fail(e, &history))?;
        }
        let step = (|| -> Result<Vec<f64>> {
            let (cand, cloud) = candidates(dim, n_cand, &mut rng)?;
            let (mean, cov) = surrogate.posterior(&cloud)?;
            let sample = thompson_sample(&mean, &cov, &mut rng)?;
            let var: Vec<f64> = (0..cand.len()).map(|k| cov[(k, k)]).collect();
            let keep = gamma_filter(&var, cfg.gamma);
            Ok(cand[argmax_over(&sample, keep)].clone())
        })();
        let x = step.map_err(|e| fail(e, &history))?;
        let y = black_box(&x).map_err(|e| fail(e, &history))?;
        if !y.is_finite() {
            return Err(fail(Error::NonFinite(format!("black box returned {y}")), &history));
        }
        xs.push(x.clone());
        ys.push(y);
        record(i, x, y, retrained, &mut history);
    }

    let start = surrogate.hyperparameters();
    let last = (|| -> Result<Vec<f64>> {
        let model = fit_surrogate(&xs, &ys, &start, cfg)?;
        let (mut cand, _) = candidates(dim, n_cand, &mut rng)?;
        if cfg.refine_final {
            cand.extend(xs.iter().cloned());
        }
        let mean = model.mean(&PointCloud::new(&cand)?)?;
        let k = argmax_over(&mean, 0..cand.len());
        if cfg.refine_final {
            compass_search(&model, cand[k].clone(), mean[k])
        } else {
            Ok(cand[k].clone())
        }
    })();
    let x = last.map_err(|e| fail(e, &history))?;
    let y = black_box(&x).map_err(|e| fail(e, &history))?;
    if !y.is_finite() {
        return Err(fail(Error::NonFinite(format!("black box returned {y}")), &history));
    }
    xs.push(x.clone());
    ys.push(y);
    record(cfg.n0, x, y, true, &mut history);

    let k = argmax_over(&ys, 0..ys.len());
    Ok(BoResult { x_best: xs[k].clone(), y_best: ys[k], history })
}

/// Rastrigin function `10 d + sum (x_i^2 - 10 cos(2 pi x_i))`.
pub fn rastrigin(x: &[f64]) -> f64 {
    use std::f64::consts::PI;
    10.0 * x.len() as f64 + x.iter().map(|v| v * v - 10.0 * (2.0 * PI * v).cos()).sum::<f64>()
}

/// Negative Ackley function in two variables, maximal with value 0 at the
/// origin.
pub fn negative_ackley(x: f64, y: f64) -> f64 {
    use std::f64::consts::{E, PI};
    20.0 * (-0.2 * (0.5 * (x * x + y * y)).sqrt()).exp() + (0.5 * ((2.0 * PI * x).cos() + (2.0 * PI * y).cos())).exp()
        - 20.0
        - E
}

/// Negative Ackley on `[-5, 5]^2` pulled back to `[0, 1]^2`.
pub fn negative_ackley_unit(u: &[f64]) -> f64 {
    negative_ackley(10.0 * u[0] - 5.0, 10.0 * u[1] - 5.0)
}

/// Maps `[0, 1]^d` to the Rastrigin domain `[-5.12, 5.12]^d`.
pub fn rastrigin_domain(u: &[f64]) -> Vec<f64> {
    u.iter().map(|v| 10.24 * v - 5.12).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ackley_optimum() {
        assert!(negative_ackley(0.0, 0.0).abs() < 1e-14);
        assert!(negative_ackley(1.0, 0.5) < 0.0);
        assert!(negative_ackley_unit(&[0.5, 0.5]).abs() < 1e-14);
    }

    #[test]
    fn rastrigin_minimum() {
        assert_eq!(rastrigin(&[0.0, 0.0]), 0.0);
        assert!((rastrigin(&[1.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn filter_keeps_max() {
        assert_eq!(gamma_filter(&[0.1, 0.5, 0.5, -1e-9], 1.0), vec![1, 2]);
        assert_eq!(gamma_filter(&[0.0, 0.0], 0.5), vec![0, 1]);
        assert_eq!(gamma_filter(&[0.0, 1.0, 0.2], 0.3), vec![1]);
    }

    #[test]
    fn zero_covariance_returns_mean() {
        let mut rng = RandomSource::new(1);
        let s = thompson_sample(&[1.0, 2.0], &DMatrix::zeros(2, 2), &mut rng).unwrap();
        assert_eq!(s, vec![1.0, 2.0]);
    }
}
