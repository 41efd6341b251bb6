//! Compression of kernel matrices in the samplet basis.
//!
//! Blocks between admissible cluster pairs are dropped. Blocks of
//! non-admissible pairs are assembled column cluster by column cluster from
//! leaf evaluations and the per-cluster transformations. Admissible blocks
//! needed along the way are approximated by tensor Chebyshev interpolation,
//! `V_a S_ab V_b^T`, or evaluated exactly when [`FarField::Exact`] is chosen.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster_tree::{distance, BoundingBox};
use crate::error::{Error, Result};
use crate::kernels::RadialKernel;
use crate::samplet::SampletTree;
use crate::sparse::SparseSymMatrix;

/// Tensor Chebyshev grid on a box.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationGrid {
    n: usize,
    nodes_1d: Vec<Vec<f64>>,
}

impl InterpolationGrid {
    /// First-kind Chebyshev points `cos((2k - 1) pi / 2n)` mapped to each edge.
    pub fn new(bbox: &BoundingBox, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("interpolation order must be >= 1".into()));
        }
        let nodes_1d = (0..bbox.dim())
            .map(|i| {
                let (lo, hi) = (bbox.lower[i], bbox.upper[i]);
                let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
                (1..=n)
                    .map(|k| mid + half * ((2 * k - 1) as f64 * PI / (2 * n) as f64).cos())
                    .collect()
            })
            .collect();
        Ok(Self { n, nodes_1d })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.nodes_1d.len()
    }

    /// Number of tensor nodes, `n^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Node coordinates per dimension.
    pub fn nodes_1d(&self) -> &[Vec<f64>] {
        &self.nodes_1d
    }

    /// Tensor node with flat index `idx` (first dimension fastest).
    pub fn node(&self, mut idx: usize) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.dim());
        for nodes in &self.nodes_1d {
            p.push(nodes[idx % self.n]);
            idx /= self.n;
        }
        p
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    /// Values of all tensor Lagrange polynomials at `x`.
    pub fn lagrange(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut per_dim = vec![0.0; n * self.dim()];
        for (i, nodes) in self.nodes_1d.iter().enumerate() {
            lagrange_1d(nodes, x[i], &mut per_dim[i * n..(i + 1) * n]);
        }
        for (idx, o) in out.iter_mut().enumerate() {
            let mut rest = idx;
            let mut v = 1.0;
            for i in 0..self.dim() {
                v *= per_dim[i * n + rest % n];
                rest /= n;
            }
            *o = v;
        }
    }
}

/// Tensor grid of `n^d` interpolation points on `bbox`.
pub fn interpolation_points(bbox: &BoundingBox, n: usize) -> Result<Vec<Vec<f64>>> {
    Ok(InterpolationGrid::new(bbox, n)?.points())
}

/// One-dimensional Lagrange basis. Coincident nodes collapse to the first one.
fn lagrange_1d(nodes: &[f64], t: f64, out: &mut [f64]) {
    let n = nodes.len();
    if nodes[0] == nodes[n - 1] {
        out.iter_mut().for_each(|o| *o = 0.0);
        out[0] = 1.0;
        return;
    }
    for k in 0..n {
        let mut v = 1.0;
        for j in 0..n {
            if j != k {
                v *= (t - nodes[j]) / (nodes[k] - nodes[j]);
            }
        }
        out[k] = v;
    }
}

/// `S[a, b] = k(|xi_a - xi_b|)` between two grids.
pub fn coupling_matrix<K: RadialKernel + ?Sized>(k: &K, a: &InterpolationGrid, b: &InterpolationGrid) -> DMatrix<f64> {
    let pa = a.points();
    let pb = b.points();
    DMatrix::from_fn(pa.len(), pb.len(), |i, j| k.eval(distance(&pa[i], &pb[j])))
}

/// `T[beta, alpha] = l^parent_alpha(xi^child_beta)`.
pub fn transfer_matrix(parent: &InterpolationGrid, child: &InterpolationGrid) -> Result<DMatrix<f64>> {
    if parent.order() != child.order() || parent.dim() != child.dim() {
        return Err(Error::InvalidArgument("grids differ in order or dimension".into()));
    }
    let m = parent.len();
    let mut t = DMatrix::zeros(m, m);
    let mut row = vec![0.0; m];
    for beta in 0..m {
        parent.lagrange(&child.node(beta), &mut row);
        for (alpha, &v) in row.iter().enumerate() {
            t[(beta, alpha)] = v;
        }
    }
    Ok(t)
}

/// Per-cluster interpolation grids and cluster bases.
///
/// For a leaf the basis is `[l_alpha(x_i)]` over its points. For other
/// clusters it holds `[V_Phi; V_Sigma]`, one row per incoming function.
#[derive(Debug, Clone)]
pub struct ClusterBases {
    grids: Vec<InterpolationGrid>,
    bases: Vec<DMatrix<f64>>,
}

impl ClusterBases {
    pub fn grid(&self, v: usize) -> &InterpolationGrid {
        &self.grids[v]
    }

    /// Full `[V_Phi; V_Sigma]` of cluster `v`.
    pub fn basis(&self, v: usize) -> &DMatrix<f64> {
        &self.bases[v]
    }
}

/// Bottom-up computation of the cluster bases.
pub fn compute_cluster_bases(st: &SampletTree, n: usize) -> Result<ClusterBases> {
    let tree = st.cluster_tree();
    let nodes = tree.nodes();
    let grids = nodes
        .iter()
        .map(|c| InterpolationGrid::new(&c.bbox, n))
        .collect::<Result<Vec<_>>>()?;
    let m = grids[0].len();
    let mut bases: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); nodes.len()];
    let points = tree.points();
    for v in (0..nodes.len()).rev() {
        match nodes[v].children {
            None => {
                let idx = tree.indices(v);
                let mut b = DMatrix::zeros(idx.len(), m);
                let mut row = vec![0.0; m];
                for (r, &i) in idx.iter().enumerate() {
                    grids[v].lagrange(points.point(i), &mut row);
                    for (c, &x) in row.iter().enumerate() {
                        b[(r, c)] = x;
                    }
                }
                bases[v] = b;
            }
            Some(sons) => {
                let mut stacked = DMatrix::zeros(st.n_inputs(v), m);
                let mut off = 0;
                for s in sons {
                    let t = transfer_matrix(&grids[v], &grids[s])?;
                    let ns = st.n_scaling(s);
                    let part = bases[s].rows(0, ns) * t;
                    stacked.rows_mut(off, ns).copy_from(&part);
                    off += ns;
                }
                bases[v] = st.q_matrix(v).unwrap().tr_mul(&stacked);
            }
        }
    }
    Ok(ClusterBases { grids, bases })
}

/// How admissible blocks needed during assembly are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FarField {
    /// Tensor Chebyshev interpolation, `O(N log N)`.
    #[default]
    Interpolated,
    /// Exact evaluation through explicit basis vectors, `O(N^2)`.
    Exact,
}

/// Compression settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressOptions {
    /// Admissibility parameter.
    pub eta: f64,
    /// Interpolation points per dimension; `None` means `q + 2`.
    pub interpolation_order: Option<usize>,
    /// Entries with smaller magnitude are dropped after assembly.
    pub tau_comp: f64,
    pub far_field: FarField,
    /// Upper bound on stored entries.
    pub max_entries: Option<usize>,
}

impl Default for CompressOptions {
    fn default() -> Self {
        Self {
            eta: 0.8,
            interpolation_order: None,
            tau_comp: 0.0,
            far_field: FarField::Interpolated,
            max_entries: None,
        }
    }
}

/// Assembly statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CompressStats {
    /// Stored entries over both triangles.
    pub nnz: usize,
    /// Stored entries in the lower triangle.
    pub nnz_lower: usize,
    /// Lower-triangle entries removed by the threshold.
    pub thresholded: usize,
    /// Non-admissible cluster pairs assembled.
    pub near_blocks: usize,
    /// Admissible blocks evaluated transiently.
    pub far_blocks: usize,
    /// Largest number of entries held in cached leaf blocks.
    pub peak_cached_entries: usize,
}

/// Compressed matrix together with its statistics.
#[derive(Debug, Clone)]
pub struct Compressed {
    pub matrix: SparseSymMatrix,
    pub stats: CompressStats,
}

struct Assembler<'a, K: RadialKernel + ?Sized> {
    st: &'a SampletTree,
    k: &'a K,
    eta: f64,
    diam: Vec<f64>,
    bases: Option<ClusterBases>,
    explicit: Vec<DMatrix<f64>>,
    cache: HashMap<usize, HashMap<usize, DMatrix<f64>>>,
    cached_entries: usize,
    triplets: Vec<(usize, usize, f64)>,
    stats: CompressStats,
    max_entries: Option<usize>,
}

impl<K: RadialKernel + ?Sized> Assembler<'_, K> {
    fn admissible(&self, a: usize, b: usize) -> bool {
        if a == 0 || b == 0 {
            return false;
        }
        let nodes = self.st.cluster_tree().nodes();
        nodes[a].bbox.dist(&nodes[b].bbox) >= self.eta * self.diam[a].max(self.diam[b])
    }

    fn dense_block(&self, a: usize, b: usize) -> DMatrix<f64> {
        let tree = self.st.cluster_tree();
        let pts = tree.points();
        let (ia, ib) = (tree.indices(a), tree.indices(b));
        DMatrix::from_fn(ia.len(), ib.len(), |i, j| {
            self.k.eval(distance(pts.point(ia[i]), pts.point(ib[j])))
        })
    }

    /// Admissible block between the first `ra` functions of `a` and the
    /// first `rb` functions of `b`.
    fn far(&mut self, a: usize, ra: usize, b: usize, rb: usize) -> DMatrix<f64> {
        self.stats.far_blocks += 1;
        match &self.bases {
            Some(bases) => {
                let s = coupling_matrix(self.k, bases.grid(a), bases.grid(b));
                let left = bases.basis(a).rows(0, ra) * s;
                left * bases.basis(b).rows(0, rb).transpose()
            }
            None => {
                let kab = self.dense_block(a, b);
                let wa = self.explicit[a].columns(0, ra);
                let wb = self.explicit[b].columns(0, rb);
                wa.transpose() * kab * wb
            }
        }
    }

    fn row(&mut self, v: usize, vp: usize) -> Result<DMatrix<f64>> {
        let st = self.st;
        let nodes = st.cluster_tree().nodes();
        self.stats.near_blocks += 1;
        let f = match (nodes[v].children, nodes[vp].children) {
            (None, None) => self.dense_block(v, vp),
            (None, Some(sons)) => {
                let rows = nodes[v].len();
                let mut m = DMatrix::zeros(rows, self.st.n_inputs(vp));
                let mut off = 0;
                for s in sons {
                    let ns = self.st.n_scaling(s);
                    let block = if self.admissible(v, s) {
                        self.far(v, rows, s, ns)
                    } else {
                        let b = self
                            .cache
                            .get_mut(&s)
                            .and_then(|c| c.remove(&v))
                            .expect("leaf block of a son column");
                        self.cached_entries -= b.len();
                        b
                    };
                    m.columns_mut(off, ns).copy_from(&block);
                    off += ns;
                }
                m * self.st.q_matrix(vp).unwrap()
            }
            (Some(sons), _) => {
                let cols = self.st.n_inputs(vp);
                let mut stacked = DMatrix::zeros(self.st.n_inputs(v), cols);
                let mut off = 0;
                for s in sons {
                    let ns = self.st.n_scaling(s);
                    let block = if self.admissible(s, vp) {
                        self.far(s, ns, vp, cols)
                    } else {
                        self.row(s, vp)?.rows(0, ns).into_owned()
                    };
                    stacked.rows_mut(off, ns).copy_from(&block);
                    off += ns;
                }
                self.st.q_matrix(v).unwrap().tr_mul(&stacked)
            }
        };
        self.emit(v, vp, &f)?;
        if nodes[v].is_leaf() && vp != 0 {
            let keep = f.columns(0, self.st.n_scaling(vp)).into_owned();
            self.cached_entries += keep.len();
            self.stats.peak_cached_entries = self.stats.peak_cached_entries.max(self.cached_entries);
            self.cache.entry(vp).or_default().insert(v, keep);
        }
        Ok(f)
    }

    fn emit(&mut self, v: usize, vp: usize, f: &DMatrix<f64>) -> Result<()> {
        let st = self.st;
        let rows: Vec<(usize, usize)> =
            (0..f.nrows()).filter_map(|r| st.global_index(v, r).map(|g| (r, g))).collect();
        if rows.is_empty() {
            return Ok(());
        }
        for c in 0..f.ncols() {
            let Some(gc) = st.global_index(vp, c) else { continue };
            for &(r, gr) in &rows {
                if gr >= gc {
                    self.triplets.push((gr, gc, f[(r, c)]));
                }
            }
        }
        if let Some(limit) = self.max_entries {
            if self.triplets.len() > limit {
                return Err(Error::MemoryLimit { needed: self.triplets.len(), limit });
            }
        }
        Ok(())
    }

    fn release_sons(&mut self, vp: usize) {
        if let Some(sons) = self.st.cluster_tree().node(vp).children {
            for s in sons {
                if let Some(c) = self.cache.remove(&s) {
                    self.cached_entries -= c.values().map(|m| m.len()).sum::<usize>();
                }
            }
        }
    }
}

/// Explicit coefficient vectors of every cluster's incoming functions over
/// the cluster's points in tree order.
fn explicit_bases(st: &SampletTree) -> Vec<DMatrix<f64>> {
    let nodes = st.cluster_tree().nodes();
    let mut w: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); nodes.len()];
    for v in (0..nodes.len()).rev() {
        match nodes[v].children {
            None => w[v] = DMatrix::identity(nodes[v].len(), nodes[v].len()),
            Some(sons) => {
                let mut block = DMatrix::zeros(nodes[v].len(), st.n_inputs(v));
                let (mut r, mut c) = (0, 0);
                for s in sons {
                    let ns = st.n_scaling(s);
                    let len = nodes[s].len();
                    block.view_mut((r, c), (len, ns)).copy_from(&w[s].columns(0, ns));
                    r += len;
                    c += ns;
                }
                w[v] = block * st.q_matrix(v).unwrap();
            }
        }
    }
    w
}

/// Assembles the compressed kernel matrix in the samplet basis.
pub fn compress<K: RadialKernel + ?Sized>(st: &SampletTree, k: &K, opts: &CompressOptions) -> Result<Compressed> {
    if !(opts.eta > 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be positive, got {}", opts.eta)));
    }
    if !(opts.tau_comp >= 0.0) {
        return Err(Error::InvalidArgument("tau_comp must be >= 0".into()));
    }
    let n_interp = opts.interpolation_order.unwrap_or(st.q() + 2);
    let tree = st.cluster_tree();
    let (bases, explicit) = match opts.far_field {
        FarField::Interpolated => (Some(compute_cluster_bases(st, n_interp)?), Vec::new()),
        FarField::Exact => (None, explicit_bases(st)),
    };
    let mut asm = Assembler {
        st,
        k,
        eta: opts.eta,
        diam: tree.nodes().iter().map(|c| c.bbox.diam()).collect(),
        bases,
        explicit,
        cache: HashMap::new(),
        cached_entries: 0,
        triplets: Vec::new(),
        stats: CompressStats::default(),
        max_entries: opts.max_entries,
    };
    for vp in (0..tree.nodes().len()).rev() {
        asm.row(0, vp)?;
        asm.release_sons(vp);
    }
    let mut stats = asm.stats;
    let matrix = SparseSymMatrix::from_lower_triplets(st.len(), &asm.triplets)?;
    drop(asm);
    let before = matrix.nnz_lower();
    let matrix = matrix.threshold(opts.tau_comp);
    stats.nnz = matrix.nnz();
    stats.nnz_lower = matrix.nnz_lower();
    stats.thresholded = before - stats.nnz_lower;
    Ok(Compressed { matrix, stats })
}

/// Dense `T K T^T` with the entries of admissible cluster pairs set to zero.
pub fn dense_compressed_oracle<K: RadialKernel + ?Sized>(
    st: &SampletTree,
    k: &K,
    eta: f64,
    cap: usize,
) -> Result<DMatrix<f64>> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be positive, got {eta}")));
    }
    let t = st.dense_basis_matrix(cap)?;
    let pts = st.cluster_tree().points();
    let kd = crate::kernels::radial_matrix(k, pts, pts)?;
    let mut ks = &t * kd * t.transpose();
    let n = st.len();
    let nodes = st.cluster_tree().nodes();
    let adm = |a: usize, b: usize| {
        a != 0 && b != 0 && crate::cluster_tree::is_admissible(&nodes[a].bbox, &nodes[b].bbox, eta)
    };
    for j in 0..n {
        let oj = st.coefficient_owner(j);
        for i in 0..n {
            if adm(st.coefficient_owner(i), oj) {
                ks[(i, j)] = 0.0;
            }
        }
    }
    Ok(ks)
}

/// Relative Frobenius error `|K - T^T A T|_F / |K|_F` of a compressed
/// matrix `A`, computed column by column without forming `K`.
pub fn compression_error<K: RadialKernel + ?Sized>(st: &SampletTree, k: &K, a: &SparseSymMatrix) -> Result<f64> {
    let n = st.len();
    if a.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: a.dim() });
    }
    let pts = st.cluster_tree().points();
    let (err, norm) = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |buf, j| {
                a.matvec_sparse(&st.forward_unit(j), buf);
                let col = st.inverse_transform(buf).expect("length checked");
                let xj = pts.point(j);
                let mut e = 0.0;
                let mut s = 0.0;
                for (i, c) in col.iter().enumerate() {
                    let kij = k.eval(distance(pts.point(i), xj));
                    e += (kij - c) * (kij - c);
                    s += kij * kij;
                }
                (e, s)
            },
        )
        .reduce(|| (0.0, 0.0), |x, y| (x.0 + y.0, x.1 + y.1));
    Ok((err / norm).sqrt())
}
