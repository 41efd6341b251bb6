//! Gaussian-process regression on compressed kernel matrices.
//!
//! [`GPModel`] works in the samplet basis: the kernel matrix is compressed,
//! shifted by the noise variance and factored with a sparse Cholesky
//! decomposition. [`DenseGp`] is the exact reference with dense matrices.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster_tree::{ClusterTree, PointCloud};
use crate::compressor::{compress, CompressOptions, FarField};
use crate::error::{Error, Result};
use crate::kernels::{ell_derivative_matrix, kernel_matrix, EllDerivative, Hyperparameters, MaternKernel};
use crate::linalg::{dense_cholesky, sparse_cholesky_with, CholeskyFactor, Ordering, RandomSource};
use crate::samplet::{SampletOptions, SampletTree};
use crate::sparse::SparseSymMatrix;

/// Samplet and compression settings used by [`GPModel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressionConfig {
    /// Vanishing moments.
    pub q: usize,
    pub eta: f64,
    /// Interpolation points per dimension, `None` for `q + 2`.
    pub interpolation_order: Option<usize>,
    pub tau_comp: f64,
    /// Leaf threshold of the cluster tree, `None` for `max(m_q, 2)`.
    pub leaf_threshold: Option<usize>,
    pub augment_leaf_moments: bool,
    pub far_field: FarField,
    pub ordering: Ordering,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            q: 3,
            eta: 0.8,
            interpolation_order: None,
            tau_comp: 0.0,
            leaf_threshold: None,
            augment_leaf_moments: false,
            far_field: FarField::Interpolated,
            ordering: Ordering::Amd,
        }
    }
}

impl CompressionConfig {
    /// Single-leaf tree: no compression, the matrices are dense.
    pub fn uncompressed() -> Self {
        Self { leaf_threshold: Some(usize::MAX), ..Self::default() }
    }

    pub fn options(&self) -> CompressOptions {
        CompressOptions {
            eta: self.eta,
            interpolation_order: self.interpolation_order,
            tau_comp: self.tau_comp,
            far_field: self.far_field,
            max_entries: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidArgument(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.tau_comp >= 0.0) {
            return Err(Error::InvalidArgument("tau_comp must be >= 0".into()));
        }
        if self.interpolation_order == Some(0) {
            return Err(Error::InvalidArgument("interpolation order must be >= 1".into()));
        }
        if matches!(self.leaf_threshold, Some(t) if t < 2) {
            return Err(Error::InvalidArgument("leaf threshold must be >= 2".into()));
        }
        Ok(())
    }

    /// Builds the samplet tree for `points`.
    pub fn samplet_tree(&self, points: &PointCloud) -> Result<SampletTree> {
        self.validate()?;
        let tau = match self.leaf_threshold {
            Some(t) => t,
            None => crate::samplet::monomial_dimension(self.q, points.dim())?.max(2),
        };
        let tree = ClusterTree::new(points, tau)?;
        SampletTree::build(tree, SampletOptions { q: self.q, augment_leaf_moments: self.augment_leaf_moments })
    }
}

/// Adam step settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// How `tr(A^{-1} D)` is evaluated in the likelihood gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEstimator {
    /// Gaussian probes.
    Hutchinson { probes: usize },
    /// One solve per unit vector.
    Exact,
}

impl Default for TraceEstimator {
    fn default() -> Self {
        TraceEstimator::Hutchinson { probes: 50 }
    }
}

/// Hyperparameter optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_steps: usize,
    pub adam: AdamConfig,
    pub trace: TraceEstimator,
    pub seed: u64,
    /// Multipliers applied to `sigma2` in turn while the shifted matrix is
    /// not positive definite.
    pub sigma2_escalation: Vec<f64>,
    /// Replace the multipliers by a search over `sigma2 = 1, 2, 3, ...`.
    pub integer_sigma2_search: bool,
    pub optimize_sigma2: bool,
    /// Reuse the first probe draw in every step.
    pub reuse_probes: bool,
    /// Shift and scale targets to zero mean and unit variance.
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_steps: 10,
            adam: AdamConfig::default(),
            trace: TraceEstimator::default(),
            seed: 0,
            sigma2_escalation: vec![2.0; 6],
            integer_sigma2_search: false,
            optimize_sigma2: true,
            reuse_probes: false,
            normalize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        if let TraceEstimator::Hutchinson { probes: 0 } = self.trace {
            return Err(Error::InvalidArgument("at least one trace probe is required".into()));
        }
        if self.sigma2_escalation.iter().any(|&m| !(m > 1.0)) {
            return Err(Error::InvalidArgument("sigma2 multipliers must exceed 1".into()));
        }
        Ok(())
    }
}

/// Affine target transform `y -> (y - mean) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub scale: f64,
}

impl Normalizer {
    pub fn identity() -> Self {
        Self { mean: 0.0, scale: 1.0 }
    }

    /// Sample mean and standard deviation; the scale falls back to one for
    /// constant data.
    pub fn fit(y: &[f64]) -> Self {
        if y.is_empty() {
            return Self::identity();
        }
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, scale }
    }

    pub fn normalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.mean) / self.scale).collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.scale + self.mean).collect()
    }
}

/// Likelihood gradient in natural parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Gradient {
    pub ell: f64,
    pub s2: f64,
    pub sigma2: f64,
}

/// One optimization step of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub ell: f64,
    pub s2: f64,
    pub sigma2: f64,
    pub log_likelihood: f64,
    pub gradient: Gradient,
    /// `sigma2` was raised to make the shifted matrix positive definite.
    pub sigma2_escalated: bool,
}

fn check_targets(y: &[f64], n: usize) -> Result<()> {
    if y.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: y.len() });
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("target {i} is {}", y[i])));
    }
    Ok(())
}

/// Factors with `sigma2`, raising it on indefiniteness as configured.
/// Returns the factor and whether `sigma2` was changed.
fn factor_with_escalation<T>(
    sigma2: &mut f64,
    cfg: &TrainConfig,
    mut factor: impl FnMut(f64) -> Result<T>,
) -> Result<(T, bool)> {
    let first = match factor(*sigma2) {
        Ok(f) => return Ok((f, false)),
        Err(e @ Error::IndefiniteMatrix { .. }) => e,
        Err(e) => return Err(e),
    };
    let mut last = first;
    let candidates: Vec<f64> = if cfg.integer_sigma2_search {
        let start = (sigma2.floor() as u32).saturating_add(1).max(1);
        (start..=start.saturating_add(63)).map(f64::from).collect()
    } else {
        let mut s = *sigma2;
        cfg.sigma2_escalation
            .iter()
            .map(|m| {
                s = if s > 0.0 { s * m } else { 1e-8 * m };
                s
            })
            .collect()
    };
    for s in candidates {
        match factor(s) {
            Ok(f) => {
                *sigma2 = s;
                return Ok((f, true));
            }
            Err(e @ Error::IndefiniteMatrix { .. }) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

struct Adam {
    cfg: AdamConfig,
    m: [f64; 3],
    v: [f64; 3],
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig) -> Self {
        Self { cfg, m: [0.0; 3], v: [0.0; 3], t: 0 }
    }

    /// Ascent step on `(ln ell, ln s2, ln sigma2)`; masked components keep
    /// their value.
    fn step(&mut self, hyper: &mut Hyperparameters, g: &Gradient, update_sigma2: bool) {
        self.t += 1;
        let c = self.cfg;
        let vals = [hyper.ell, hyper.s2, hyper.sigma2];
        let glog = [g.ell * vals[0], g.s2 * vals[1], g.sigma2 * vals[2]];
        let mut out = vals;
        for i in 0..3 {
            if i == 2 && !update_sigma2 {
                continue;
            }
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * glog[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * glog[i] * glog[i];
            let mh = self.m[i] / (1.0 - c.beta1.powi(self.t));
            let vh = self.v[i] / (1.0 - c.beta2.powi(self.t));
            out[i] = (vals[i].ln() + c.learning_rate * mh / (vh.sqrt() + c.eps)).exp();
        }
        let b = hyper.bounds;
        hyper.ell = out[0].clamp(b.ell.0, b.ell.1);
        hyper.s2 = out[1].clamp(b.s2.0, b.s2.1);
        if update_sigma2 {
            hyper.sigma2 = out[2].clamp(b.sigma2.0, b.sigma2.1);
        }
    }
}

/// Shared Adam loop. `eval` returns the likelihood and gradient at the given
/// hyperparameters and may raise `sigma2`.
fn optimize(
    hyper0: &Hyperparameters,
    cfg: &TrainConfig,
    mut eval: impl FnMut(&mut Hyperparameters, &mut RandomSource) -> Result<(f64, Gradient, bool)>,
) -> Result<(Hyperparameters, Vec<TrainStep>, bool)> {
    cfg.validate()?;
    hyper0.validate()?;
    let mut hyper = *hyper0;
    let mut adam = Adam::new(cfg.adam);
    let mut rng = RandomSource::new(cfg.seed);
    let mut frozen = false;
    let mut trace = Vec::with_capacity(cfg.n_steps);
    for step in 0..cfg.n_steps {
        let mut step_rng = if cfg.reuse_probes { RandomSource::new(cfg.seed) } else { rng.clone() };
        let (ll, g, escalated) = eval(&mut hyper, &mut step_rng)?;
        if !cfg.reuse_probes {
            rng = step_rng;
        }
        frozen |= escalated;
        trace.push(TrainStep {
            step,
            ell: hyper.ell,
            s2: hyper.s2,
            sigma2: hyper.sigma2,
            log_likelihood: ll,
            gradient: g,
            sigma2_escalated: escalated,
        });
        adam.step(&mut hyper, &g, cfg.optimize_sigma2 && !frozen);
    }
    Ok((hyper, trace, frozen))
}

/// Samplet-compressed Gaussian process.
#[derive(Debug, Clone)]
pub struct GPModel {
    hyper: Hyperparameters,
    kernel: MaternKernel,
    st: SampletTree,
    compression: CompressionConfig,
    k_sigma: SparseSymMatrix,
    factor: CholeskyFactor,
    ctilde: Vec<f64>,
    normalizer: Normalizer,
    targets: Vec<f64>,
    log_likelihood: f64,
    trace: Vec<TrainStep>,
    sigma2_escalated: bool,
}

struct Fitted {
    k_sigma: SparseSymMatrix,
    factor: CholeskyFactor,
    escalated: bool,
}

fn fit_samplet(
    st: &SampletTree,
    hyper: &mut Hyperparameters,
    compression: &CompressionConfig,
    cfg: &TrainConfig,
) -> Result<Fitted> {
    let kernel = hyper.kernel()?;
    let k_sigma = compress(st, &kernel, &compression.options())?.matrix;
    let (factor, escalated) =
        factor_with_escalation(&mut hyper.sigma2, cfg, |s| sparse_cholesky_with(&k_sigma, s, compression.ordering))?;
    Ok(Fitted { k_sigma, factor, escalated })
}

fn log_likelihood_from(factor: &CholeskyFactor, y: &[f64], c: &[f64]) -> f64 {
    let n = y.len() as f64;
    let quad: f64 = y.iter().zip(c).map(|(a, b)| a * b).sum();
    let logdiag: f64 = factor.diagonal().iter().map(|d| d.ln()).sum();
    -0.5 * quad - logdiag - 0.5 * n * (2.0 * PI).ln()
}

#[allow(clippy::too_many_arguments)]
fn samplet_gradient(
    factor: &CholeskyFactor,
    st: &SampletTree,
    k_sigma: &SparseSymMatrix,
    dk_ell: &SparseSymMatrix,
    s2: f64,
    y: &[f64],
    estimator: TraceEstimator,
    rng: &mut RandomSource,
) -> Result<Gradient> {
    let n = st.len();
    let w = factor.solve(&st.forward_transform(y)?)?;
    let dw = dk_ell.matvec(&w)?;
    let kw = k_sigma.matvec(&w)?;
    let quad_ell = 0.5 * dot(&w, &dw);
    let quad_s2 = 0.5 * dot(&w, &kw) / s2;
    let quad_sigma = 0.5 * dot(&w, &w);
    let (tr_ell, tr_s2, tr_sigma) = match estimator {
        TraceEstimator::Hutchinson { probes } => {
            if probes == 0 {
                return Err(Error::InvalidArgument("at least one trace probe is required".into()));
            }
            let mut acc = [0.0; 3];
            for _ in 0..probes {
                let z = rng.standard_normal(n);
                let u = factor.solve(&z)?;
                acc[0] += dot(&u, &dk_ell.matvec(&z)?);
                acc[1] += dot(&u, &k_sigma.matvec(&z)?);
                acc[2] += dot(&u, &z);
            }
            let t = probes as f64;
            (acc[0] / t, acc[1] / t / s2, acc[2] / t)
        }
        TraceEstimator::Exact => {
            let cols: Vec<[f64; 3]> = (0..n)
                .into_par_iter()
                .map(|j| {
                    let mut e = vec![0.0; n];
                    e[j] = 1.0;
                    let u = factor.solve(&e).expect("length checked");
                    let col = |m: &SparseSymMatrix| {
                        let (rows, vals) = m.column(j);
                        rows.iter().zip(vals).map(|(&r, &v)| u[r] * v).sum::<f64>()
                    };
                    [col(dk_ell), col(k_sigma), u[j]]
                })
                .collect();
            let s = cols.iter().fold([0.0; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]);
            (s[0], s[1] / s2, s[2])
        }
    };
    Ok(Gradient {
        ell: quad_ell - 0.5 * tr_ell,
        s2: quad_s2 - 0.5 * tr_s2,
        sigma2: quad_sigma - 0.5 * tr_sigma,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl GPModel {
    /// Fits the model at fixed hyperparameters with targets used as given.
    pub fn fit(
        points: &PointCloud,
        y: &[f64],
        hyper: &Hyperparameters,
        compression: &CompressionConfig,
    ) -> Result<Self> {
        let cfg = TrainConfig { n_steps: 0, normalize: false, ..TrainConfig::default() };
        train(points, y, hyper, &cfg, compression)
    }

    /// Rebuilds a model from normalized targets, e.g. when loading a
    /// checkpoint. `sigma2` is used as given.
    pub fn refit(
        points: &PointCloud,
        normalized_targets: &[f64],
        hyper: &Hyperparameters,
        compression: &CompressionConfig,
        normalizer: Normalizer,
    ) -> Result<Self> {
        check_targets(normalized_targets, points.len())?;
        hyper.validate()?;
        if !(normalizer.scale > 0.0) {
            return Err(Error::InvalidArgument("normalizer scale must be positive".into()));
        }
        let cfg = TrainConfig { n_steps: 0, sigma2_escalation: Vec::new(), ..TrainConfig::default() };
        let st = compression.samplet_tree(points)?;
        Self::assemble(st, *hyper, *compression, &cfg, normalizer, normalized_targets.to_vec(), Vec::new(), false)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        st: SampletTree,
        mut hyper: Hyperparameters,
        compression: CompressionConfig,
        cfg: &TrainConfig,
        normalizer: Normalizer,
        targets: Vec<f64>,
        trace: Vec<TrainStep>,
        frozen: bool,
    ) -> Result<Self> {
        let fitted = fit_samplet(&st, &mut hyper, &compression, cfg)?;
        let ctilde = crate::linalg::solve_perturbed_system(&fitted.factor, &st, &targets)?;
        let log_likelihood = log_likelihood_from(&fitted.factor, &targets, &ctilde);
        Ok(Self {
            kernel: hyper.kernel()?,
            hyper,
            st,
            compression,
            k_sigma: fitted.k_sigma,
            factor: fitted.factor,
            ctilde,
            normalizer,
            targets,
            log_likelihood,
            trace,
            sigma2_escalated: frozen || fitted.escalated,
        })
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn kernel(&self) -> &MaternKernel {
        &self.kernel
    }

    pub fn samplet_tree(&self) -> &SampletTree {
        &self.st
    }

    pub fn train_points(&self) -> &PointCloud {
        self.st.cluster_tree().points()
    }

    pub fn compression(&self) -> &CompressionConfig {
        &self.compression
    }

    /// Compressed kernel matrix without the noise shift.
    pub fn compressed_kernel(&self) -> &SparseSymMatrix {
        &self.k_sigma
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    /// Coefficients `c` with `(K + sigma2 I) c = y` for the normalized targets.
    pub fn ctilde(&self) -> &[f64] {
        &self.ctilde
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    /// Normalized training targets.
    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Log marginal likelihood of the normalized training targets.
    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn train_trace(&self) -> &[TrainStep] {
        &self.trace
    }

    /// Whether `sigma2` was raised at some point to keep the factorization
    /// positive definite.
    pub fn sigma2_escalated(&self) -> bool {
        self.sigma2_escalated
    }

    /// Residual `|A T c - T y| / |T y|` of the perturbed system.
    pub fn residual(&self) -> Result<f64> {
        let ty = self.st.forward_transform(&self.targets)?;
        let tc = self.st.forward_transform(&self.ctilde)?;
        let mut r = self.k_sigma.matvec(&tc)?;
        for i in 0..r.len() {
            r[i] += self.hyper.sigma2 * tc[i] - ty[i];
        }
        Ok(dot(&r, &r).sqrt() / dot(&ty, &ty).sqrt().max(f64::MIN_POSITIVE))
    }

    fn cross_kernel(&self, x: &PointCloud) -> Result<DMatrix<f64>> {
        let train = self.train_points();
        if x.dim() != train.dim() {
            return Err(Error::DimensionMismatch { expected: train.dim(), got: x.dim() });
        }
        kernel_matrix(&self.kernel, x, train)
    }
}

/// `-1/2 y^T c - sum log L_ii - N/2 log 2 pi` with `y` normalized by the
/// model's normalizer and `c` from the model's factorization.
pub fn log_marginal_likelihood(model: &GPModel, y: &[f64]) -> Result<f64> {
    check_targets(y, model.st.len())?;
    let yn = model.normalizer.normalize(y);
    let c = crate::linalg::solve_perturbed_system(&model.factor, &model.st, &yn)?;
    Ok(log_likelihood_from(&model.factor, &yn, &c))
}

/// Gradient of the log marginal likelihood in `(ell, s2, sigma2)`.
pub fn likelihood_gradient(
    model: &GPModel,
    y: &[f64],
    estimator: TraceEstimator,
    rng: &mut RandomSource,
) -> Result<Gradient> {
    check_targets(y, model.st.len())?;
    let yn = model.normalizer.normalize(y);
    let dk = compress(&model.st, &EllDerivative(&model.kernel), &model.compression.options())?.matrix;
    samplet_gradient(&model.factor, &model.st, &model.k_sigma, &dk, model.hyper.s2, &yn, estimator, rng)
}

/// Optimizes the hyperparameters with Adam and returns the fitted model.
pub fn train(
    points: &PointCloud,
    y: &[f64],
    init: &Hyperparameters,
    cfg: &TrainConfig,
    compression: &CompressionConfig,
) -> Result<GPModel> {
    if points.len() < 2 && cfg.n_steps > 0 {
        return Err(Error::InvalidArgument("training needs at least two points".into()));
    }
    check_targets(y, points.len())?;
    cfg.validate()?;
    let normalizer = if cfg.normalize { Normalizer::fit(y) } else { Normalizer::identity() };
    let yn = normalizer.normalize(y);
    let st = compression.samplet_tree(points)?;
    let opts = compression.options();
    let (hyper, trace, frozen) = optimize(init, cfg, |hyper, rng| {
        let fitted = fit_samplet(&st, hyper, compression, cfg)?;
        let kernel = hyper.kernel()?;
        let dk = compress(&st, &EllDerivative(&kernel), &opts)?.matrix;
        let c = crate::linalg::solve_perturbed_system(&fitted.factor, &st, &yn)?;
        let ll = log_likelihood_from(&fitted.factor, &yn, &c);
        let g = samplet_gradient(&fitted.factor, &st, &fitted.k_sigma, &dk, hyper.s2, &yn, cfg.trace, rng)?;
        Ok((ll, g, fitted.escalated))
    })?;
    GPModel::assemble(st, hyper, *compression, cfg, normalizer, yn, trace, frozen)
}

/// Posterior mean at `x`, in original target units.
pub fn predict_mean(model: &GPModel, x: &PointCloud) -> Result<Vec<f64>> {
    let k1 = model.cross_kernel(x)?;
    let c = nalgebra::DVector::from_column_slice(&model.ctilde);
    let m = k1 * c;
    Ok(model.normalizer.denormalize(m.as_slice()))
}

/// Posterior mean and covariance at `x`, in original target units.
pub fn predict(model: &GPModel, x: &PointCloud) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let k1 = model.cross_kernel(x)?;
    let m = x.len();
    let n = model.st.len();
    let c = nalgebra::DVector::from_column_slice(&model.ctilde);
    let mean = model.normalizer.denormalize((&k1 * c).as_slice());
    let cols: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = k1.row(i).iter().copied().collect();
            let t = model.st.forward_transform(&row)?;
            model.factor.solve_lower(&t)
        })
        .collect::<Result<_>>()?;
    let a = DMatrix::from_fn(n, m, |r, i| cols[i][r]);
    let k2 = kernel_matrix(&model.kernel, x, x)?;
    let mut cov = k2 - a.transpose() * a;
    symmetrize(&mut cov);
    cov *= model.normalizer.scale * model.normalizer.scale;
    Ok((mean, cov))
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in j + 1..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// `sqrt(sum (truth - pred)^2 / sum truth^2)`.
pub fn relative_l2_error(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch { expected: truth.len(), got: pred.len() });
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("empty vectors".into()));
    }
    let den: f64 = truth.iter().map(|t| t * t).sum();
    if den == 0.0 {
        return Err(Error::InvalidArgument("truth is identically zero".into()));
    }
    let num: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok((num / den).sqrt())
}

/// Exact Gaussian process with dense matrices.
#[derive(Debug, Clone)]
pub struct DenseGp {
    points: PointCloud,
    hyper: Hyperparameters,
    kernel: MaternKernel,
    chol: DMatrix<f64>,
    alpha: Vec<f64>,
    normalizer: Normalizer,
    targets: Vec<f64>,
    log_likelihood: f64,
    trace: Vec<TrainStep>,
}

fn dense_factor(k: &DMatrix<f64>, sigma2: f64) -> Result<DMatrix<f64>> {
    let mut a = k.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += sigma2;
    }
    dense_cholesky(&a)
}

fn chol_solve(l: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let mut x = nalgebra::DVector::from_column_slice(b);
    l.solve_lower_triangular_mut(&mut x);
    l.tr_solve_lower_triangular_mut(&mut x);
    x.as_slice().to_vec()
}

fn dense_log_likelihood(l: &DMatrix<f64>, y: &[f64], alpha: &[f64]) -> f64 {
    let n = y.len() as f64;
    let logdiag: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum();
    -0.5 * dot(y, alpha) - logdiag - 0.5 * n * (2.0 * PI).ln()
}

fn dense_gradient(
    l: &DMatrix<f64>,
    k: &DMatrix<f64>,
    dk: &DMatrix<f64>,
    s2: f64,
    alpha: &[f64],
    estimator: TraceEstimator,
    rng: &mut RandomSource,
) -> Result<Gradient> {
    let n = alpha.len();
    let a = nalgebra::DVector::from_column_slice(alpha);
    let quad_ell = 0.5 * a.dot(&(dk * &a));
    let quad_s2 = 0.5 * a.dot(&(k * &a)) / s2;
    let quad_sigma = 0.5 * a.dot(&a);
    let (tr_ell, tr_s2, tr_sigma) = match estimator {
        TraceEstimator::Hutchinson { probes } => {
            if probes == 0 {
                return Err(Error::InvalidArgument("at least one trace probe is required".into()));
            }
            let mut acc = [0.0; 3];
            for _ in 0..probes {
                let z = rng.standard_normal(n);
                let u = nalgebra::DVector::from_vec(chol_solve(l, &z));
                let zv = nalgebra::DVector::from_vec(z);
                acc[0] += u.dot(&(dk * &zv));
                acc[1] += u.dot(&(k * &zv));
                acc[2] += u.dot(&zv);
            }
            let t = probes as f64;
            (acc[0] / t, acc[1] / t / s2, acc[2] / t)
        }
        TraceEstimator::Exact => {
            let mut inv = DMatrix::<f64>::identity(n, n);
            l.solve_lower_triangular_mut(&mut inv);
            l.tr_solve_lower_triangular_mut(&mut inv);
            (inv.component_mul(dk).sum(), inv.component_mul(k).sum() / s2, inv.trace())
        }
    };
    Ok(Gradient {
        ell: quad_ell - 0.5 * tr_ell,
        s2: quad_s2 - 0.5 * tr_s2,
        sigma2: quad_sigma - 0.5 * tr_sigma,
    })
}

impl DenseGp {
    /// Fits at fixed hyperparameters with targets used as given.
    pub fn fit(points: &PointCloud, y: &[f64], hyper: &Hyperparameters) -> Result<Self> {
        let cfg = TrainConfig { n_steps: 0, normalize: false, ..TrainConfig::default() };
        Self::train(points, y, hyper, &cfg)
    }

    /// Adam optimization of the exact likelihood.
    pub fn train(points: &PointCloud, y: &[f64], init: &Hyperparameters, cfg: &TrainConfig) -> Result<Self> {
        if points.len() < 2 && cfg.n_steps > 0 {
            return Err(Error::InvalidArgument("training needs at least two points".into()));
        }
        if points.is_empty() {
            return Err(Error::InvalidArgument("empty point cloud".into()));
        }
        check_targets(y, points.len())?;
        cfg.validate()?;
        let normalizer = if cfg.normalize { Normalizer::fit(y) } else { Normalizer::identity() };
        let yn = normalizer.normalize(y);
        let (mut hyper, trace, _) = optimize(init, cfg, |hyper, rng| {
            let kernel = hyper.kernel()?;
            let k = kernel_matrix(&kernel, points, points)?;
            let (l, escalated) = factor_with_escalation(&mut hyper.sigma2, cfg, |s| dense_factor(&k, s))?;
            let alpha = chol_solve(&l, &yn);
            let ll = dense_log_likelihood(&l, &yn, &alpha);
            let dk = ell_derivative_matrix(&kernel, points);
            let g = dense_gradient(&l, &k, &dk, hyper.s2, &alpha, cfg.trace, rng)?;
            Ok((ll, g, escalated))
        })?;
        let kernel = hyper.kernel()?;
        let k = kernel_matrix(&kernel, points, points)?;
        let (chol, _) = factor_with_escalation(&mut hyper.sigma2, cfg, |s| dense_factor(&k, s))?;
        let alpha = chol_solve(&chol, &yn);
        let log_likelihood = dense_log_likelihood(&chol, &yn, &alpha);
        Ok(Self {
            points: points.clone(),
            hyper,
            kernel,
            chol,
            alpha,
            normalizer,
            targets: yn,
            log_likelihood,
            trace,
        })
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    /// Normalized training targets.
    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// `(K + sigma2 I)^{-1} y` for the normalized targets.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn train_trace(&self) -> &[TrainStep] {
        &self.trace
    }

    /// Likelihood gradient at the fitted hyperparameters.
    pub fn gradient(&self, estimator: TraceEstimator, rng: &mut RandomSource) -> Result<Gradient> {
        let k = kernel_matrix(&self.kernel, &self.points, &self.points)?;
        let dk = ell_derivative_matrix(&self.kernel, &self.points);
        dense_gradient(&self.chol, &k, &dk, self.hyper.s2, &self.alpha, estimator, rng)
    }

    fn cross_kernel(&self, x: &PointCloud) -> Result<DMatrix<f64>> {
        if x.dim() != self.points.dim() {
            return Err(Error::DimensionMismatch { expected: self.points.dim(), got: x.dim() });
        }
        kernel_matrix(&self.kernel, x, &self.points)
    }

    pub fn predict_mean(&self, x: &PointCloud) -> Result<Vec<f64>> {
        let k1 = self.cross_kernel(x)?;
        let m = k1 * nalgebra::DVector::from_column_slice(&self.alpha);
        Ok(self.normalizer.denormalize(m.as_slice()))
    }

    pub fn predict(&self, x: &PointCloud) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let k1 = self.cross_kernel(x)?;
        let mean = self.normalizer.denormalize((&k1 * nalgebra::DVector::from_column_slice(&self.alpha)).as_slice());
        let mut a = k1.transpose();
        self.chol.solve_lower_triangular_mut(&mut a);
        let mut cov = kernel_matrix(&self.kernel, x, x)? - a.transpose() * a;
        symmetrize(&mut cov);
        cov *= self.normalizer.scale * self.normalizer.scale;
        Ok((mean, cov))
    }
}

/// Posterior of the zero-mean prior: mean zero, covariance `k(x, x')`.
pub fn prior(kernel: &MaternKernel, x: &PointCloud) -> Result<(Vec<f64>, DMatrix<f64>)> {
    Ok((vec![0.0; x.len()], kernel_matrix(kernel, x, x)?))
}
