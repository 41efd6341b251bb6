//! Matérn kernels with half-integer smoothness.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cluster_tree::{distance, PointCloud};
use crate::error::{Error, Result};

/// Largest supported `n` in `nu = n + 1/2`.
pub const MAX_MATERN_ORDER: u32 = 12;

/// Isotropic kernel given as a function of the Euclidean distance.
pub trait RadialKernel: Sync {
    fn eval(&self, r: f64) -> f64;
}

/// `s2 * k_nu(r / ell)` with `nu = n + 1/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaternKernel {
    n: u32,
    ell: f64,
    s2: f64,
    /// Polynomial coefficients in `z = sqrt(2 nu) r / ell`, lowest degree first.
    poly: Vec<f64>,
}

impl MaternKernel {
    pub fn new(nu: f64, ell: f64, s2: f64) -> Result<Self> {
        let twice = 2.0 * nu;
        if !(twice.is_finite() && twice >= 1.0 && (twice - twice.round()).abs() < 1e-12)
            || (twice.round() as i64) % 2 == 0
        {
            return Err(Error::InvalidArgument(format!(
                "nu must be a half-integer n + 1/2, got {nu}"
            )));
        }
        let n = ((twice.round() as i64 - 1) / 2) as u32;
        if n > MAX_MATERN_ORDER {
            return Err(Error::InvalidArgument(format!(
                "nu = {nu} exceeds the supported maximum {}.5",
                MAX_MATERN_ORDER
            )));
        }
        if !(ell > 0.0 && ell.is_finite()) {
            return Err(Error::InvalidArgument(format!("ell must be positive, got {ell}")));
        }
        if !(s2 > 0.0 && s2.is_finite()) {
            return Err(Error::InvalidArgument(format!("s2 must be positive, got {s2}")));
        }
        Ok(Self { n, ell, s2, poly: matern_poly(n) })
    }

    pub fn nu(&self) -> f64 {
        self.n as f64 + 0.5
    }

    pub fn ell(&self) -> f64 {
        self.ell
    }

    pub fn s2(&self) -> f64 {
        self.s2
    }

    /// Same smoothness with new scale parameters.
    pub fn with_params(&self, ell: f64, s2: f64) -> Result<Self> {
        Self::new(self.nu(), ell, s2)
    }

    fn z(&self, r: f64) -> f64 {
        (2.0 * self.nu()).sqrt() * r / self.ell
    }

    fn poly_and_derivative(&self, z: f64) -> (f64, f64) {
        let mut p = 0.0;
        let mut dp = 0.0;
        for &c in self.poly.iter().rev() {
            dp = dp * z + p;
            p = p * z + c;
        }
        (p, dp)
    }

    /// Kernel value at distance `r`.
    pub fn eval(&self, r: f64) -> f64 {
        let z = self.z(r);
        let (p, _) = self.poly_and_derivative(z);
        self.s2 * p * (-z).exp()
    }

    /// Partial derivative of the kernel value with respect to `ell`.
    pub fn eval_dell(&self, r: f64) -> f64 {
        let z = self.z(r);
        let (p, dp) = self.poly_and_derivative(z);
        self.s2 * z * (p - dp) * (-z).exp() / self.ell
    }

    /// Partial derivative with respect to `s2`.
    pub fn eval_ds2(&self, r: f64) -> f64 {
        self.eval(r) / self.s2
    }
}

impl RadialKernel for MaternKernel {
    fn eval(&self, r: f64) -> f64 {
        MaternKernel::eval(self, r)
    }
}

/// `r * k(r)`.
#[derive(Debug, Clone)]
pub struct DistanceWeighted<'a>(pub &'a MaternKernel);

impl RadialKernel for DistanceWeighted<'_> {
    fn eval(&self, r: f64) -> f64 {
        r * self.0.eval(r)
    }
}

/// `dk/d ell` as a radial function.
#[derive(Debug, Clone)]
pub struct EllDerivative<'a>(pub &'a MaternKernel);

impl RadialKernel for EllDerivative<'_> {
    fn eval(&self, r: f64) -> f64 {
        self.0.eval_dell(r)
    }
}

fn factorial(n: u32) -> u128 {
    (1..=n as u128).product()
}

fn matern_poly(n: u32) -> Vec<f64> {
    let scale = factorial(n) as f64 / factorial(2 * n) as f64;
    let mut poly = vec![0.0; n as usize + 1];
    for i in 0..=n {
        let c = factorial(n + i) / (factorial(i) * factorial(n - i));
        let deg = (n - i) as usize;
        poly[deg] = scale * c as f64 * 2f64.powi(deg as i32);
    }
    poly
}

fn check_dims(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    Ok(())
}

/// Dense matrix `[k(|a_i - b_j|)]`.
pub fn radial_matrix<K: RadialKernel + ?Sized>(k: &K, a: &PointCloud, b: &PointCloud) -> Result<DMatrix<f64>> {
    check_dims(a, b)?;
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| k.eval(distance(a.point(i), b.point(j)))))
}

/// Dense kernel matrix between two clouds.
pub fn kernel_matrix(k: &MaternKernel, a: &PointCloud, b: &PointCloud) -> Result<DMatrix<f64>> {
    radial_matrix(k, a, b)
}

/// Dense matrix `[|x_i - x_j| k(x_i, x_j)]`.
pub fn distance_weighted_matrix(k: &MaternKernel, a: &PointCloud) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), a.len(), |i, j| {
        let r = distance(a.point(i), a.point(j));
        r * k.eval(r)
    })
}

/// Dense matrix of `dk/d ell`.
pub fn ell_derivative_matrix(k: &MaternKernel, a: &PointCloud) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), a.len(), |i, j| k.eval_dell(distance(a.point(i), a.point(j))))
}

/// Box constraints for the hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub ell: (f64, f64),
    pub s2: (f64, f64),
    pub sigma2: (f64, f64),
}

impl Default for Bounds {
    fn default() -> Self {
        Self { ell: (0.005, 2.0), s2: (0.05, 20.0), sigma2: (0.1, 2.0) }
    }
}

/// Kernel hyperparameters, their bounds and the smoothness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    pub nu: f64,
    pub ell: f64,
    pub s2: f64,
    pub sigma2: f64,
    pub bounds: Bounds,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self { nu: 2.5, ell: 1.0, s2: 1.0, sigma2: 1.0, bounds: Bounds::default() }
    }
}

impl Hyperparameters {
    pub fn kernel(&self) -> Result<MaternKernel> {
        MaternKernel::new(self.nu, self.ell, self.s2)
    }

    /// Clamps the parameters into their bounds.
    pub fn project(&mut self) {
        self.ell = self.ell.clamp(self.bounds.ell.0, self.bounds.ell.1);
        self.s2 = self.s2.clamp(self.bounds.s2.0, self.bounds.s2.1);
        self.sigma2 = self.sigma2.clamp(self.bounds.sigma2.0, self.bounds.sigma2.1);
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel()?;
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma2 must be >= 0, got {}", self.sigma2)));
        }
        for (name, (lo, hi)) in [("ell", self.bounds.ell), ("s2", self.bounds.s2), ("sigma2", self.bounds.sigma2)] {
            if !(lo <= hi) {
                return Err(Error::InvalidArgument(format!("bounds for {name} are empty")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_case() {
        let k = MaternKernel::new(0.5, 1.0, 1.0).unwrap();
        assert!((k.eval(1.0) - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn three_halves_case() {
        let k = MaternKernel::new(1.5, 1.0, 1.0).unwrap();
        let s3 = 3f64.sqrt();
        assert!((k.eval(1.0) - (1.0 + s3) * (-s3).exp()).abs() < 1e-15);
    }

    #[test]
    fn five_halves_case() {
        let k = MaternKernel::new(2.5, 0.7, 2.0).unwrap();
        let r = 0.4;
        let z = 5f64.sqrt() * r / 0.7;
        let want = 2.0 * (1.0 + z + z * z / 3.0) * (-z).exp();
        assert!((k.eval(r) - want).abs() < 1e-14);
    }

    #[test]
    fn rejects_non_half_integer() {
        assert!(MaternKernel::new(1.0, 1.0, 1.0).is_err());
        assert!(MaternKernel::new(2.0, 1.0, 1.0).is_err());
        assert!(MaternKernel::new(1.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn ell_derivative_matches_differences() {
        for nu in [0.5, 1.5, 2.5, 4.5] {
            let k = MaternKernel::new(nu, 0.8, 1.3).unwrap();
            for r in [0.05, 0.3, 1.0, 2.5] {
                let h = 1e-5 * 0.8;
                let kp = k.with_params(0.8 + h, 1.3).unwrap().eval(r);
                let km = k.with_params(0.8 - h, 1.3).unwrap().eval(r);
                let fd = (kp - km) / (2.0 * h);
                assert!((k.eval_dell(r) - fd).abs() <= 1e-7 * fd.abs().max(1e-12), "nu {nu} r {r}");
            }
        }
    }
}
