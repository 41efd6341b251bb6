//! Samplet bases and the fast samplet transform.
//!
//! Every non-leaf cluster stores an orthogonal matrix `Q` obtained from a QR
//! decomposition of the transposed moment matrix of its incoming scaling
//! functions. The first `min(n, m_q)` columns are the cluster's scaling
//! functions, the remaining ones are samplets with vanishing moments.
//!
//! Coefficient layout: the root's scaling functions come first, followed by
//! the samplets of each cluster in breadth-first order.

use nalgebra::{DMatrix, DMatrixView};

use crate::cluster_tree::{ClusterTree, PointCloud};
use crate::error::{Error, Result};

/// Default cap on `N` for dense oracle matrices.
pub const DEFAULT_ORACLE_CAP: usize = 4096;

/// `binomial(q + d, d)`, the number of monomials of total degree at most `q`
/// in `d` variables. Values above `2^31` are rejected.
pub fn monomial_dimension(q: usize, d: usize) -> Result<usize> {
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be >= 1".into()));
    }
    let k = q.min(d) as u128;
    let n = (q + d) as u128;
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
        if acc > 1u128 << 31 {
            return Err(Error::Overflow(format!("m_q for q = {q}, d = {d} exceeds 2^31")));
        }
    }
    Ok(acc as usize)
}

/// Multi-indices of total degree at most `q`, in graded lexicographic order:
/// by total degree, then lexicographically descending within a degree
/// (`x` before `y` before `z`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiIndexSet {
    q: usize,
    d: usize,
    indices: Vec<Vec<u32>>,
}

impl MultiIndexSet {
    pub fn new(q: usize, d: usize) -> Result<Self> {
        let m = monomial_dimension(q, d)?;
        let mut indices = Vec::with_capacity(m);
        for deg in 0..=q {
            let mut cur = vec![0u32; d];
            push_degree(&mut indices, &mut cur, 0, deg as u32);
        }
        debug_assert_eq!(indices.len(), m);
        Ok(Self { q, d, indices })
    }

    pub fn degree(&self) -> usize {
        self.q
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[Vec<u32>] {
        &self.indices
    }

    /// Writes `u^alpha` for every multi-index into `out`.
    pub fn eval_monomials(&self, u: &[f64], out: &mut [f64]) {
        let mut pows = vec![1.0; self.d * (self.q + 1)];
        for (i, &x) in u.iter().enumerate() {
            for k in 1..=self.q {
                pows[i * (self.q + 1) + k] = pows[i * (self.q + 1) + k - 1] * x;
            }
        }
        for (o, alpha) in out.iter_mut().zip(&self.indices) {
            let mut v = 1.0;
            for (i, &a) in alpha.iter().enumerate() {
                v *= pows[i * (self.q + 1) + a as usize];
            }
            *o = v;
        }
    }
}

fn push_degree(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u32) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for a in (0..=left).rev() {
        cur[pos] = a;
        push_degree(out, cur, pos + 1, left - a);
    }
    cur[pos] = 0;
}

/// Moment matrix with entries `sum_k coeffs[k, i] (x_k - center)^alpha`.
/// Without `coeffs` the columns are the Dirac functions at `points`.
pub fn moment_matrix(
    points: &[Vec<f64>],
    coeffs: Option<&DMatrix<f64>>,
    index_set: &MultiIndexSet,
    center: &[f64],
) -> Result<DMatrix<f64>> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("moment matrix of an empty point set".into()));
    }
    let d = index_set.dim();
    if center.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: center.len() });
    }
    let m = index_set.len();
    let mut dirac = DMatrix::zeros(m, points.len());
    let mut u = vec![0.0; d];
    let mut col = vec![0.0; m];
    for (k, p) in points.iter().enumerate() {
        if p.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: p.len() });
        }
        for i in 0..d {
            u[i] = p[i] - center[i];
        }
        index_set.eval_monomials(&u, &mut col);
        dirac.column_mut(k).copy_from_slice(&col);
    }
    match coeffs {
        None => Ok(dirac),
        Some(c) => {
            if c.nrows() != points.len() {
                return Err(Error::LengthMismatch { expected: points.len(), got: c.nrows() });
            }
            Ok(dirac * c)
        }
    }
}

/// Options for [`SampletTree::build`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampletOptions {
    /// Vanishing-moment degree `q`.
    pub q: usize,
    /// Use extra moments on the level above the leaves.
    pub augment_leaf_moments: bool,
}

#[derive(Debug, Clone)]
struct NodeBasis {
    n_in: usize,
    n_scaling: usize,
    n_samplets: usize,
    start: usize,
    scaling_offset: usize,
    son_counts: [usize; 2],
    q: Option<usize>,
    center: Vec<f64>,
    scale: f64,
}

/// Samplet basis built on top of a [`ClusterTree`].
#[derive(Debug, Clone)]
pub struct SampletTree {
    tree: ClusterTree,
    q: usize,
    augment: bool,
    index_set: MultiIndexSet,
    nodes: Vec<NodeBasis>,
    owner: Vec<usize>,
    inv_perm: Vec<usize>,
    leaf_of: Vec<usize>,
    total_scaling: usize,
    // Column-major Q blocks, stored in bottom-up sweep order.
    qdata: Vec<f64>,
}

impl SampletTree {
    /// Builds the samplet basis bottom-up.
    pub fn build(tree: ClusterTree, opts: SampletOptions) -> Result<Self> {
        let q = opts.q;
        let d = tree.dim();
        let index_set = MultiIndexSet::new(q, d)?;
        let m_q = index_set.len();
        let depth = tree.depth();
        let aug_set = if opts.augment_leaf_moments {
            let limit = 2 * tree.leaf_threshold();
            let mut qt = q;
            while monomial_dimension(qt + 1, d).map(|m| m <= limit).unwrap_or(false) {
                qt += 1;
            }
            Some(MultiIndexSet::new(qt, d)?)
        } else {
            None
        };

        let cnodes = tree.nodes();
        let mut nodes: Vec<NodeBasis> = cnodes
            .iter()
            .map(|c| {
                let diam = c.bbox.diam();
                NodeBasis {
                    n_in: c.len(),
                    n_scaling: c.len(),
                    n_samplets: 0,
                    start: 0,
                    scaling_offset: 0,
                    son_counts: [0, 0],
                    q: None,
                    center: c.bbox.midpoint(),
                    scale: if diam > 0.0 { 0.5 * diam } else { 1.0 },
                }
            })
            .collect();
        let mut moments: Vec<Option<DMatrix<f64>>> = vec![None; cnodes.len()];
        let points = tree.points();
        let perm = tree.permutation();
        let mut qdata = Vec::new();

        for v in (0..cnodes.len()).rev() {
            let Some(sons) = cnodes[v].children else { continue };
            let set = match &aug_set {
                Some(s) if cnodes[v].level + 1 == depth => s,
                _ => &index_set,
            };
            let m = set.len();
            let son_counts = [nodes[sons[0]].n_scaling, nodes[sons[1]].n_scaling];
            let n_in = son_counts[0] + son_counts[1];
            let mut mom = DMatrix::<f64>::zeros(m, n_in);
            let (center, scale) = (nodes[v].center.clone(), nodes[v].scale);
            let mut col = 0;
            let mut u = vec![0.0; d];
            let mut buf = vec![0.0; m];
            for &s in &sons {
                if cnodes[s].is_leaf() {
                    for &pi in &perm[cnodes[s].start..cnodes[s].end] {
                        let p = points.point(pi);
                        for i in 0..d {
                            u[i] = (p[i] - center[i]) / scale;
                        }
                        set.eval_monomials(&u, &mut buf);
                        mom.column_mut(col).copy_from_slice(&buf);
                        col += 1;
                    }
                } else {
                    let child = moments[s].take().expect("child moments computed");
                    let shift = shift_matrix(set, &nodes[s].center, nodes[s].scale, &center, scale);
                    let shifted = shift * child;
                    mom.columns_mut(col, shifted.ncols()).copy_from(&shifted);
                    col += shifted.ncols();
                }
            }
            let qmat = orthogonal_factor(&mom);
            let n_scaling = n_in.min(m_q);
            let mq = &mom * qmat.columns(0, n_scaling);
            moments[v] = Some(mq.rows(0, m_q).into_owned());
            let nb = &mut nodes[v];
            nb.n_in = n_in;
            nb.n_scaling = n_scaling;
            nb.n_samplets = n_in - n_scaling;
            nb.son_counts = son_counts;
            nb.q = Some(qdata.len());
            qdata.extend_from_slice(qmat.as_slice());
        }

        let mut idx = nodes[0].n_scaling;
        let mut owner = vec![0usize; tree.len()];
        let mut scal_off = 0;
        for v in 0..nodes.len() {
            if nodes[v].q.is_some() {
                nodes[v].start = idx;
                for o in &mut owner[idx..idx + nodes[v].n_samplets] {
                    *o = v;
                }
                idx += nodes[v].n_samplets;
                nodes[v].scaling_offset = scal_off;
                scal_off += nodes[v].n_scaling;
            }
        }
        debug_assert_eq!(idx, tree.len());

        let mut inv_perm = vec![0usize; tree.len()];
        for (k, &i) in perm.iter().enumerate() {
            inv_perm[i] = k;
        }
        let mut leaf_of = vec![0usize; tree.len()];
        for l in tree.leaves() {
            for slot in &mut leaf_of[cnodes[l].start..cnodes[l].end] {
                *slot = l;
            }
        }
        Ok(Self {
            tree,
            q,
            augment: opts.augment_leaf_moments,
            index_set,
            nodes,
            owner,
            inv_perm,
            leaf_of,
            total_scaling: scal_off,
            qdata,
        })
    }

    /// Builds the cluster tree and the basis. Without an explicit threshold
    /// the leaf threshold is `max(m_q, 2)`.
    pub fn from_points(
        cloud: &PointCloud,
        q: usize,
        leaf_threshold: Option<usize>,
        augment_leaf_moments: bool,
    ) -> Result<Self> {
        let tau = match leaf_threshold {
            Some(t) => t,
            None => monomial_dimension(q, cloud.dim())?.max(2),
        };
        let tree = ClusterTree::new(cloud, tau)?;
        Self::build(tree, SampletOptions { q, augment_leaf_moments })
    }

    pub fn cluster_tree(&self) -> &ClusterTree {
        &self.tree
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn augmented(&self) -> bool {
        self.augment
    }

    pub fn index_set(&self) -> &MultiIndexSet {
        &self.index_set
    }

    /// True when the leaf threshold is at most `m_q + 1`.
    pub fn satisfies_leaf_condition(&self) -> bool {
        self.tree.leaf_threshold() <= self.index_set.len() + 1
    }

    /// Orthogonal transformation of a non-leaf cluster.
    pub fn q_matrix(&self, v: usize) -> Option<DMatrixView<'_, f64>> {
        let nb = &self.nodes[v];
        nb.q.map(|off| DMatrixView::from_slice(&self.qdata[off..off + nb.n_in * nb.n_in], nb.n_in, nb.n_in))
    }

    fn q_column(&self, nb: &NodeBasis, j: usize) -> &[f64] {
        let off = nb.q.expect("non-leaf cluster") + j * nb.n_in;
        &self.qdata[off..off + nb.n_in]
    }

    /// Number of incoming functions of cluster `v` (points for a leaf).
    pub fn n_inputs(&self, v: usize) -> usize {
        self.nodes[v].n_in
    }

    /// Number of scaling functions of `v`; a leaf's Diracs count as scaling
    /// functions.
    pub fn n_scaling(&self, v: usize) -> usize {
        self.nodes[v].n_scaling
    }

    pub fn n_samplets(&self, v: usize) -> usize {
        self.nodes[v].n_samplets
    }

    /// Position of the first samplet of `v` in the coefficient vector.
    pub fn samplet_start(&self, v: usize) -> usize {
        self.nodes[v].start
    }

    /// Incoming counts from the first and second son.
    pub fn son_inputs(&self, v: usize) -> [usize; 2] {
        self.nodes[v].son_counts
    }

    /// Cluster that owns coefficient `i`; root scaling functions belong to
    /// the root.
    pub fn coefficient_owner(&self, i: usize) -> usize {
        self.owner[i]
    }

    /// Center and scale used for the moments of cluster `v`.
    pub fn moment_frame(&self, v: usize) -> (&[f64], f64) {
        (&self.nodes[v].center, self.nodes[v].scale)
    }

    /// Global coefficient index of row `r` of the `[Phi; Sigma]` block of
    /// cluster `v`, if that row is a basis function.
    pub fn global_index(&self, v: usize, r: usize) -> Option<usize> {
        let nb = &self.nodes[v];
        if r < nb.n_scaling {
            (v == 0).then_some(r)
        } else if nb.q.is_some() {
            Some(nb.start + r - nb.n_scaling)
        } else {
            None
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.len() {
            return Err(Error::LengthMismatch { expected: self.len(), got: len });
        }
        Ok(())
    }

    /// Samplet coefficients of values given in input point order.
    pub fn forward_transform(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.check_len(values.len())?;
        let n = self.len();
        let perm = self.tree.permutation();
        let tv: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
        let mut coeffs = vec![0.0; n];
        let cnodes = self.tree.nodes();
        if cnodes[0].is_leaf() {
            coeffs.copy_from_slice(&tv);
            return Ok(coeffs);
        }
        let mut scal = vec![0.0; self.total_scaling];
        let mut input = Vec::new();
        let mut out = Vec::new();
        for v in (0..cnodes.len()).rev() {
            let Some(sons) = cnodes[v].children else { continue };
            let nb = &self.nodes[v];
            input.clear();
            for &s in &sons {
                if cnodes[s].is_leaf() {
                    input.extend_from_slice(&tv[cnodes[s].start..cnodes[s].end]);
                } else {
                    let sb = &self.nodes[s];
                    input.extend_from_slice(&scal[sb.scaling_offset..sb.scaling_offset + sb.n_scaling]);
                }
            }
            out.clear();
            for j in 0..nb.n_in {
                out.push(dot(self.q_column(nb, j), &input));
            }
            scal[nb.scaling_offset..nb.scaling_offset + nb.n_scaling]
                .copy_from_slice(&out[..nb.n_scaling]);
            coeffs[nb.start..nb.start + nb.n_samplets].copy_from_slice(&out[nb.n_scaling..]);
        }
        let rb = &self.nodes[0];
        coeffs[..rb.n_scaling].copy_from_slice(&scal[rb.scaling_offset..rb.scaling_offset + rb.n_scaling]);
        Ok(coeffs)
    }

    /// Values in input point order from samplet coefficients.
    pub fn inverse_transform(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        self.check_len(coeffs.len())?;
        let n = self.len();
        let perm = self.tree.permutation();
        let cnodes = self.tree.nodes();
        let mut tv = vec![0.0; n];
        if cnodes[0].is_leaf() {
            tv.copy_from_slice(coeffs);
        } else {
            let mut scal = vec![0.0; self.total_scaling];
            let rb = &self.nodes[0];
            scal[rb.scaling_offset..rb.scaling_offset + rb.n_scaling]
                .copy_from_slice(&coeffs[..rb.n_scaling]);
            let mut out = Vec::new();
            let mut input = Vec::new();
            for (v, cn) in cnodes.iter().enumerate() {
                let Some(sons) = cn.children else { continue };
                let nb = &self.nodes[v];
                out.clear();
                out.extend_from_slice(&scal[nb.scaling_offset..nb.scaling_offset + nb.n_scaling]);
                out.extend_from_slice(&coeffs[nb.start..nb.start + nb.n_samplets]);
                input.clear();
                input.resize(nb.n_in, 0.0);
                for (j, &c) in out.iter().enumerate() {
                    if c != 0.0 {
                        axpy(c, self.q_column(nb, j), &mut input);
                    }
                }
                let mut off = 0;
                for &s in &sons {
                    let cs = &cnodes[s];
                    if cs.is_leaf() {
                        tv[cs.start..cs.end].copy_from_slice(&input[off..off + cs.len()]);
                        off += cs.len();
                    } else {
                        let sb = &self.nodes[s];
                        scal[sb.scaling_offset..sb.scaling_offset + sb.n_scaling]
                            .copy_from_slice(&input[off..off + sb.n_scaling]);
                        off += sb.n_scaling;
                    }
                }
            }
        }
        let mut values = vec![0.0; n];
        for (k, &i) in perm.iter().enumerate() {
            values[i] = tv[k];
        }
        Ok(values)
    }

    /// Nonzero samplet coefficients of the unit vector at input index `i`.
    /// Only the clusters on the path from `i`'s leaf to the root contribute.
    pub fn forward_unit(&self, i: usize) -> Vec<(usize, f64)> {
        let cnodes = self.tree.nodes();
        let pos = self.inv_perm[i];
        let leaf = self.leaf_of[pos];
        if cnodes[0].is_leaf() {
            return vec![(pos, 1.0)];
        }
        let mut local = vec![0.0; cnodes[leaf].len()];
        local[pos - cnodes[leaf].start] = 1.0;
        let mut son = leaf;
        let mut out_sparse = Vec::new();
        while let Some(p) = cnodes[son].parent {
            let nb = &self.nodes[p];
            let sons = cnodes[p].children.unwrap();
            let off = if sons[0] == son { 0 } else { nb.son_counts[0] };
            let mut out = vec![0.0; nb.n_in];
            for (j, o) in out.iter_mut().enumerate() {
                *o = dot(&self.q_column(nb, j)[off..off + local.len()], &local);
            }
            for (k, &c) in out[nb.n_scaling..].iter().enumerate() {
                out_sparse.push((nb.start + k, c));
            }
            out.truncate(nb.n_scaling);
            local = out;
            son = p;
        }
        for (k, &c) in local.iter().enumerate() {
            out_sparse.push((k, c));
        }
        out_sparse
    }

    /// Coefficient vector (in input order) of basis function `j`.
    pub fn basis_function(&self, j: usize) -> Result<Vec<f64>> {
        let mut e = vec![0.0; self.len()];
        if j >= e.len() {
            return Err(Error::InvalidArgument(format!("basis index {j} out of range")));
        }
        e[j] = 1.0;
        self.inverse_transform(&e)
    }

    /// Dense change-of-basis matrix `T` with `T f = forward_transform(f)`.
    pub fn dense_basis_matrix(&self, cap: usize) -> Result<DMatrix<f64>> {
        let n = self.len();
        if n > cap {
            return Err(Error::CapExceeded { n, cap });
        }
        let mut t = DMatrix::zeros(n, n);
        for i in 0..n {
            for (k, c) in self.forward_unit(i) {
                t[(k, i)] = c;
            }
        }
        Ok(t)
    }
}

/// Full orthogonal factor of the QR decomposition of `mom^T`, with the
/// diagonal of `R` made non-negative.
fn orthogonal_factor(mom: &DMatrix<f64>) -> DMatrix<f64> {
    let n = mom.ncols();
    let qr = mom.transpose().qr();
    let mut qt = DMatrix::<f64>::identity(n, n);
    qr.q_tr_mul(&mut qt);
    let r = qr.r();
    let mut q = qt.transpose();
    for k in 0..r.nrows().min(r.ncols()) {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

/// Linear map taking moments in the frame `(cc, sc)` to moments in the frame
/// `(cp, sp)`, both over `set`.
fn shift_matrix(set: &MultiIndexSet, cc: &[f64], sc: f64, cp: &[f64], sp: f64) -> DMatrix<f64> {
    let m = set.len();
    let a = sc / sp;
    let b: Vec<f64> = cc.iter().zip(cp).map(|(c, p)| (c - p) / sp).collect();
    let idx = set.indices();
    let mut s = DMatrix::zeros(m, m);
    for (r, alpha) in idx.iter().enumerate() {
        for (c, beta) in idx.iter().enumerate() {
            if beta.iter().zip(alpha).any(|(bb, aa)| bb > aa) {
                continue;
            }
            let mut v = 1.0;
            for i in 0..alpha.len() {
                let (ai, bi) = (alpha[i] as i32, beta[i] as i32);
                v *= binomial(ai as u32, bi as u32) * a.powi(bi) * b[i].powi(ai - bi);
            }
            s[(r, c)] = v;
        }
    }
    s
}

fn binomial(n: u32, k: u32) -> f64 {
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
