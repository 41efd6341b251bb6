//! Python bindings. Point sets are passed as lists of coordinate lists.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use samplet_gp::bayesopt::{self, BoConfig};
use samplet_gp::cluster_tree::{default_domain_samples, mesh_metrics as mesh};
use samplet_gp::{
    compress, gp, CompressOptions, CompressionConfig, Error, FarField, GPModel, Hyperparameters, MaternKernel,
    PointCloud, SampletTree, SparseSymMatrix, TrainConfig,
};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::IndefiniteMatrix { .. } | Error::MemoryLimit { .. } | Error::Io(_) | Error::Overflow(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn cloud(points: &[Vec<f64>]) -> PyResult<PointCloud> {
    PointCloud::new(points).map_err(to_py)
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Matérn kernel `s2 k_nu(r / ell)` for half-integer `nu`.
#[pyclass(name = "MaternKernel", frozen)]
struct PyMatern(MaternKernel);

#[pymethods]
impl PyMatern {
    #[new]
    #[pyo3(signature = (nu, ell, s2 = 1.0))]
    fn new(nu: f64, ell: f64, s2: f64) -> PyResult<Self> {
        MaternKernel::new(nu, ell, s2).map(Self).map_err(to_py)
    }

    fn __call__(&self, r: f64) -> f64 {
        self.0.eval(r)
    }

    fn matrix(&self, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let m = samplet_gp::kernels::kernel_matrix(&self.0, &cloud(&a)?, &cloud(&b)?).map_err(to_py)?;
        Ok(rows(&m))
    }

    #[getter]
    fn nu(&self) -> f64 {
        self.0.nu()
    }

    #[getter]
    fn ell(&self) -> f64 {
        self.0.ell()
    }

    #[getter]
    fn s2(&self) -> f64 {
        self.0.s2()
    }
}

/// Samplet basis on a point set.
#[pyclass(name = "SampletBasis", frozen)]
struct PyBasis(SampletTree);

#[pymethods]
impl PyBasis {
    #[new]
    #[pyo3(signature = (points, q = 1, leaf_threshold = None))]
    fn new(points: Vec<Vec<f64>>, q: usize, leaf_threshold: Option<usize>) -> PyResult<Self> {
        SampletTree::from_points(&cloud(&points)?, q, leaf_threshold, false).map(Self).map_err(to_py)
    }

    fn forward(&self, values: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.forward_transform(&values).map_err(to_py)
    }

    fn inverse(&self, coeffs: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.inverse_transform(&coeffs).map_err(to_py)
    }

    /// Samplet coefficients of `K(X, X)` as a sparse symmetric matrix.
    #[pyo3(signature = (kernel, eta = 0.8, tau_comp = 0.0, exact_far_field = false))]
    fn compress(&self, kernel: &PyMatern, eta: f64, tau_comp: f64, exact_far_field: bool) -> PyResult<PySparse> {
        let opts = CompressOptions {
            eta,
            tau_comp,
            far_field: if exact_far_field { FarField::Exact } else { FarField::Interpolated },
            ..CompressOptions::default()
        };
        compress(&self.0, &kernel.0, &opts).map(|c| PySparse(c.matrix)).map_err(to_py)
    }

    #[getter]
    fn depth(&self) -> usize {
        self.0.cluster_tree().depth()
    }

    #[getter]
    fn q(&self) -> usize {
        self.0.q()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Symmetric sparse matrix in compressed column form.
#[pyclass(name = "SparseMatrix", frozen)]
struct PySparse(SparseSymMatrix);

#[pymethods]
impl PySparse {
    #[getter]
    fn nnz(&self) -> usize {
        self.0.nnz()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn matvec(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.matvec(&x).map_err(to_py)
    }

    /// `(row, col, value)` with `row >= col`.
    fn lower_triplets(&self) -> Vec<(usize, usize, f64)> {
        self.0.lower_triplets()
    }

    fn to_dense(&self) -> Vec<Vec<f64>> {
        rows(&self.0.to_dense())
    }
}

/// Gaussian process with a compressed kernel matrix.
#[pyclass(name = "GaussianProcess", frozen)]
struct PyGp(GPModel);

#[pymethods]
impl PyGp {
    #[staticmethod]
    #[pyo3(signature = (
        points, y, nu = 2.5, ell = 1.0, s2 = 1.0, sigma2 = 1.0,
        n_steps = 10, q = 2, eta = 0.8, tau_comp = 0.0, seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        points: Vec<Vec<f64>>,
        y: Vec<f64>,
        nu: f64,
        ell: f64,
        s2: f64,
        sigma2: f64,
        n_steps: usize,
        q: usize,
        eta: f64,
        tau_comp: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let init = Hyperparameters { nu, ell, s2, sigma2, ..Default::default() };
        let cfg = TrainConfig { n_steps, seed, ..Default::default() };
        let comp = CompressionConfig { q, eta, tau_comp, ..Default::default() };
        gp::train(&cloud(&points)?, &y, &init, &cfg, &comp).map(Self).map_err(to_py)
    }

    fn predict_mean(&self, points: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        gp::predict_mean(&self.0, &cloud(&points)?).map_err(to_py)
    }

    /// Posterior mean and covariance.
    fn predict(&self, points: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let (m, c) = gp::predict(&self.0, &cloud(&points)?).map_err(to_py)?;
        Ok((m, rows(&c)))
    }

    #[getter]
    fn log_likelihood(&self) -> f64 {
        self.0.log_likelihood()
    }

    #[getter]
    fn hyperparameters<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let h = self.0.hyperparameters();
        let d = PyDict::new(py);
        d.set_item("nu", h.nu)?;
        d.set_item("ell", h.ell)?;
        d.set_item("s2", h.s2)?;
        d.set_item("sigma2", h.sigma2)?;
        Ok(d)
    }
}

/// Fill distance, separation radius and mesh ratio of a point set.
#[pyfunction]
#[pyo3(signature = (points, samples = 4096))]
fn mesh_metrics(points: Vec<Vec<f64>>, samples: usize) -> PyResult<(f64, f64, f64)> {
    let c = cloud(&points)?;
    let m = mesh(&c, &default_domain_samples(&c, samples)).map_err(to_py)?;
    Ok((m.fill_distance, m.separation_radius, m.mesh_ratio))
}

/// Maximizes `f` over the unit cube by Thompson sampling.
#[pyfunction]
#[pyo3(signature = (f, dim, n0 = 50, gamma = 0.1, batch_size = 10, seed = 0))]
fn bayes_opt<'py>(
    py: Python<'py>,
    f: Bound<'py, PyAny>,
    dim: usize,
    n0: usize,
    gamma: f64,
    batch_size: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = BoConfig { n0, gamma, batch_size, seed, ..Default::default() };
    let mut raised: Option<PyErr> = None;
    let result = bayesopt::run_bo(
        dim,
        |x| match f.call1((x.to_vec(),)).and_then(|v| v.extract::<f64>()) {
            Ok(v) => Ok(v),
            Err(e) => {
                let msg = e.to_string();
                raised = Some(e);
                Err(Error::InvalidArgument(format!("objective raised: {msg}")))
            }
        },
        &cfg,
    );
    let res = match result {
        Ok(r) => r,
        Err(fail) => return Err(raised.unwrap_or_else(|| to_py(fail.error))),
    };
    let history: Vec<(Vec<f64>, f64)> = res.history.into_iter().map(|r| (r.x, r.y)).collect();
    let d = PyDict::new(py);
    d.set_item("x_best", res.x_best)?;
    d.set_item("y_best", res.y_best)?;
    d.set_item("history", history)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "samplet_gp")]
fn samplet_gp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMatern>()?;
    m.add_class::<PyBasis>()?;
    m.add_class::<PySparse>()?;
    m.add_class::<PyGp>()?;
    m.add_function(wrap_pyfunction!(mesh_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(bayes_opt, m)?)?;
    Ok(())
}
