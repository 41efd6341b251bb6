//! Samplet-accelerated Gaussian processes.
//!
//! The crate builds multiscale samplet bases on scattered points, compresses
//! Matérn kernel matrices into sparse form in that basis, trains and
//! evaluates Gaussian processes through sparse Cholesky factorizations, and
//! runs Thompson-sampling Bayesian optimization.
//!
//! ```
//! use samplet_gp::{PointCloud, SampletTree};
//!
//! let pts: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64 / 63.0]).collect();
//! let cloud = PointCloud::new(&pts).unwrap();
//! let st = SampletTree::from_points(&cloud, 2, None, false).unwrap();
//! let f: Vec<f64> = pts.iter().map(|p| p[0].sin()).collect();
//! let c = st.forward_transform(&f).unwrap();
//! let back = st.inverse_transform(&c).unwrap();
//! assert!(f.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
//! ```

pub mod bayesopt;
pub mod cli;
pub mod cluster_tree;
pub mod compressor;
pub mod error;
pub mod gp;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod samplet;
pub mod sparse;

pub use cluster_tree::{BoundingBox, ClusterTree, PointCloud};
pub use compressor::{compress, CompressOptions, Compressed, FarField};
pub use error::{Error, Result};
pub use gp::{CompressionConfig, DenseGp, GPModel, TrainConfig};
pub use kernels::{Hyperparameters, MaternKernel};
pub use linalg::{sparse_cholesky, CholeskyFactor, RandomSource};
pub use samplet::SampletTree;
pub use sparse::SparseSymMatrix;
