//! Sparse Cholesky factorization and solves.
//!
//! Matrices are reordered by approximate minimum degree. Small systems use a
//! simplicial up-looking factorization, larger ones a supernodal kernel.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::amd;
use faer::sparse::SymbolicSparseColMatRef;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samplet::SampletTree;
use crate::sparse::SparseSymMatrix;

/// Seeded generator of standard normal and uniform samples.
#[derive(Debug, Clone)]
pub struct RandomSource {
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn standard_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect()
    }

    /// Uniform samples in `[0, 1)`.
    pub fn uniform(&mut self, n: usize) -> Vec<f64> {
        use rand::Rng;
        (0..n).map(|_| self.rng.random::<f64>()).collect()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Fill-reducing ordering used by [`sparse_cholesky`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    #[default]
    Amd,
    Natural,
}

/// Factor `L` with `P (A + shift I) P^T = L L^T`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    n: usize,
    perm: Vec<usize>,
    perm_inv: Vec<usize>,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Approximate minimum degree permutation (`perm[new] = old`).
pub fn amd_order(a: &SparseSymMatrix) -> Result<Vec<usize>> {
    let n = a.dim();
    if n == 0 {
        return Ok(Vec::new());
    }
    let sym = SymbolicSparseColMatRef::new_checked(n, n, a.col_ptr(), None, a.row_indices());
    let mut perm = vec![0usize; n];
    let mut perm_inv = vec![0usize; n];
    let mut buf = MemBuffer::new(amd::order_scratch::<usize>(n, a.nnz()));
    amd::order(&mut perm, &mut perm_inv, sym, amd::Control::default(), MemStack::new(&mut buf))
        .map_err(|e| Error::InvalidArgument(format!("ordering failed: {e:?}")))?;
    Ok(perm)
}

/// Factors `A + shift I`.
pub fn sparse_cholesky(a: &SparseSymMatrix, shift: f64) -> Result<CholeskyFactor> {
    sparse_cholesky_with(a, shift, Ordering::Amd)
}

pub fn sparse_cholesky_with(a: &SparseSymMatrix, shift: f64, ordering: Ordering) -> Result<CholeskyFactor> {
    let n = a.dim();
    let perm = match ordering {
        Ordering::Amd => amd_order(a)?,
        Ordering::Natural => (0..n).collect(),
    };
    let mut perm_inv = vec![0usize; n];
    for (new, &old) in perm.iter().enumerate() {
        perm_inv[old] = new;
    }

    // Upper triangle of the permuted matrix, by column, diagonal included.
    let mut cnt = vec![0usize; n + 1];
    for j in 0..n {
        let pj = perm_inv[j];
        for &i in a.column(j).0 {
            if perm_inv[i] < pj {
                cnt[pj + 1] += 1;
            }
        }
        cnt[pj + 1] += 1;
    }
    for k in 0..n {
        cnt[k + 1] += cnt[k];
    }
    let mut next = cnt.clone();
    let mut ci = vec![0usize; cnt[n]];
    let mut cx = vec![0.0; cnt[n]];
    for j in 0..n {
        let pj = perm_inv[j];
        let (rows, vals) = a.column(j);
        let mut diag = shift;
        for (&i, &v) in rows.iter().zip(vals) {
            let pi = perm_inv[i];
            if pi < pj {
                ci[next[pj]] = pi;
                cx[next[pj]] = v;
                next[pj] += 1;
            } else if i == j {
                diag += v;
            }
        }
        ci[next[pj]] = pj;
        cx[next[pj]] = diag;
        next[pj] += 1;
    }

    if n >= SUPERNODAL_MIN_DIM {
        let (col_ptr, row_idx, values) = supernodal_numeric(n, &cnt, &ci, &cx, &perm)?;
        return Ok(CholeskyFactor { n, perm, perm_inv, col_ptr, row_idx, values });
    }

    // Elimination tree.
    const NONE: usize = usize::MAX;
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for &i0 in &ci[cnt[k]..cnt[k + 1]] {
            let mut i = i0;
            while i != NONE && i < k {
                let inext = ancestor[i];
                ancestor[i] = k;
                if inext == NONE {
                    parent[i] = k;
                }
                i = inext;
            }
        }
    }

    let mut flag = vec![NONE; n];
    let mut stack = vec![0usize; n];
    let mut path = Vec::with_capacity(n);
    // Row pattern of L(k, :) in topological order, written to stack[top..].
    let mut ereach = |k: usize, flag: &mut [usize], stack: &mut [usize]| -> usize {
        let mut top = n;
        flag[k] = k;
        for &i0 in &ci[cnt[k]..cnt[k + 1]] {
            let mut i = i0;
            if i >= k {
                continue;
            }
            path.clear();
            while flag[i] != k {
                path.push(i);
                flag[i] = k;
                i = parent[i];
            }
            while let Some(p) = path.pop() {
                top -= 1;
                stack[top] = p;
            }
        }
        top
    };

    let mut col_cnt = vec![1usize; n];
    for k in 0..n {
        let top = ereach(k, &mut flag, &mut stack);
        for &i in &stack[top..] {
            col_cnt[i] += 1;
        }
    }
    let mut col_ptr = vec![0usize; n + 1];
    for k in 0..n {
        col_ptr[k + 1] = col_ptr[k] + col_cnt[k];
    }
    let nnz = col_ptr[n];
    let mut row_idx = vec![0usize; nnz];
    let mut values = vec![0.0; nnz];
    let mut fill: Vec<usize> = col_ptr[..n].to_vec();
    flag.iter_mut().for_each(|f| *f = NONE);
    let mut x = vec![0.0; n];

    for k in 0..n {
        let top = ereach(k, &mut flag, &mut stack);
        for p in cnt[k]..cnt[k + 1] {
            x[ci[p]] = cx[p];
        }
        let mut d = x[k];
        x[k] = 0.0;
        for &i in &stack[top..] {
            let lki = x[i] / values[col_ptr[i]];
            x[i] = 0.0;
            for p in col_ptr[i] + 1..fill[i] {
                x[row_idx[p]] -= values[p] * lki;
            }
            d -= lki * lki;
            let p = fill[i];
            fill[i] += 1;
            row_idx[p] = k;
            values[p] = lki;
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::IndefiniteMatrix { pivot_index: perm[k] });
        }
        let p = fill[k];
        fill[k] += 1;
        row_idx[p] = k;
        values[p] = d.sqrt();
    }
    Ok(CholeskyFactor { n, perm, perm_inv, col_ptr, row_idx, values })
}

const SUPERNODAL_MIN_DIM: usize = 256;

type CscParts = (Vec<usize>, Vec<usize>, Vec<f64>);

// Numeric factorization of an already permuted upper triangle with faer's
// supernodal kernel, unpacked into a plain lower CSC factor.
fn supernodal_numeric(n: usize, cnt: &[usize], ci: &[usize], cx: &[f64], perm: &[usize]) -> Result<CscParts> {
    use faer::linalg::cholesky::llt::factor::LltRegularization;
    use faer::sparse::linalg::cholesky::{
        factorize_symbolic_cholesky, CholeskySymbolicParams, SymbolicCholeskyRaw, SymmetricOrdering,
    };
    use faer::sparse::linalg::SupernodalThreshold;
    use faer::sparse::SparseColMatRef;
    use faer::{Par, Side};

    let sym = SymbolicSparseColMatRef::new_unsorted_checked(n, n, cnt, None, ci);
    let params = CholeskySymbolicParams {
        supernodal_flop_ratio_threshold: SupernodalThreshold::FORCE_SUPERNODAL,
        ..Default::default()
    };
    let symbolic = factorize_symbolic_cholesky(sym, Side::Upper, SymmetricOrdering::Identity, params)
        .map_err(|e| Error::InvalidArgument(format!("symbolic factorization failed: {e:?}")))?;
    let mut lx = vec![0.0f64; symbolic.len_val()];
    let mut buf = MemBuffer::new(symbolic.factorize_numeric_llt_scratch::<f64>(Par::Seq, Default::default()));
    symbolic
        .factorize_numeric_llt(
            &mut lx,
            SparseColMatRef::new(sym, cx),
            Side::Upper,
            LltRegularization::default(),
            Par::Seq,
            MemStack::new(&mut buf),
            Default::default(),
        )
        .map_err(|e| match e {
            faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot { index } => {
                Error::IndefiniteMatrix { pivot_index: perm[index] }
            }
        })?;
    let SymbolicCholeskyRaw::Supernodal(sn) = symbolic.raw() else {
        return Err(Error::InvalidArgument("expected a supernodal factor".into()));
    };
    let lref = faer::sparse::linalg::cholesky::supernodal::SupernodalLltRef::new(sn, &lx);

    let mut col_ptr = vec![0usize; n + 1];
    for s in 0..sn.n_supernodes() {
        let node = lref.supernode(s);
        let (start, ncols) = (node.start(), node.val().ncols());
        let below = node.pattern().len();
        for j in 0..ncols {
            col_ptr[start + j + 1] = ncols - j + below;
        }
    }
    for k in 0..n {
        col_ptr[k + 1] += col_ptr[k];
    }
    let mut row_idx = vec![0usize; col_ptr[n]];
    let mut values = vec![0.0; col_ptr[n]];
    for s in 0..sn.n_supernodes() {
        let node = lref.supernode(s);
        let (start, val, pattern) = (node.start(), node.val(), node.pattern());
        let ncols = val.ncols();
        for j in 0..ncols {
            let mut p = col_ptr[start + j];
            for i in j..ncols {
                row_idx[p] = start + i;
                values[p] = val[(i, j)];
                p += 1;
            }
            for (t, &r) in pattern.iter().enumerate() {
                row_idx[p] = r;
                values[p] = val[(ncols + t, j)];
                p += 1;
            }
        }
    }
    for k in 0..n {
        let d = values[col_ptr[k]];
        if !(d > 0.0) || !values[col_ptr[k]..col_ptr[k + 1]].iter().all(|v| v.is_finite()) {
            return Err(Error::IndefiniteMatrix { pivot_index: perm[k] });
        }
    }
    Ok((col_ptr, row_idx, values))
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Fill-reducing permutation, `perm[new] = old`.
    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Stored entries of `L`.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.values[self.col_ptr[k]]).collect()
    }

    /// Dense copy of `L` (in permuted order).
    pub fn l_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut l = nalgebra::DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                l[(self.row_idx[p], j)] = self.values[p];
            }
        }
        l
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::LengthMismatch { expected: self.n, got: len });
        }
        Ok(())
    }

    fn forward_in_place(&self, y: &mut [f64]) {
        for j in 0..self.n {
            let (s, e) = (self.col_ptr[j], self.col_ptr[j + 1]);
            let yj = y[j] / self.values[s];
            y[j] = yj;
            if yj != 0.0 {
                for p in s + 1..e {
                    y[self.row_idx[p]] -= self.values[p] * yj;
                }
            }
        }
    }

    fn backward_in_place(&self, y: &mut [f64]) {
        for j in (0..self.n).rev() {
            let (s, e) = (self.col_ptr[j], self.col_ptr[j + 1]);
            let mut acc = y[j];
            for p in s + 1..e {
                acc -= self.values[p] * y[self.row_idx[p]];
            }
            y[j] = acc / self.values[s];
        }
    }

    /// Solves `(A + shift I) x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check(b.len())?;
        let mut y: Vec<f64> = self.perm.iter().map(|&i| b[i]).collect();
        self.forward_in_place(&mut y);
        self.backward_in_place(&mut y);
        let mut x = vec![0.0; self.n];
        for (k, &i) in self.perm.iter().enumerate() {
            x[i] = y[k];
        }
        Ok(x)
    }

    /// `L^{-1} P b`.
    pub fn solve_lower(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check(b.len())?;
        let mut y: Vec<f64> = self.perm.iter().map(|&i| b[i]).collect();
        self.forward_in_place(&mut y);
        Ok(y)
    }

    /// Position of original index `i` in the factor's ordering.
    pub fn permuted_index(&self, i: usize) -> usize {
        self.perm_inv[i]
    }
}

/// Solves `(A + shift I) x = b`.
pub fn solve(factor: &CholeskyFactor, b: &[f64]) -> Result<Vec<f64>> {
    factor.solve(b)
}

/// `T^{-1} (L L^T)^{-1} T y` for a factor built in the samplet basis of `st`.
pub fn solve_perturbed_system(factor: &CholeskyFactor, st: &SampletTree, y: &[f64]) -> Result<Vec<f64>> {
    let ty = st.forward_transform(y)?;
    let z = factor.solve(&ty)?;
    st.inverse_transform(&z)
}

/// `2 sum log L_ii`.
pub fn log_det(factor: &CholeskyFactor) -> f64 {
    2.0 * factor.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Hutchinson estimate of `tr(A^{-1} M)` with `t` Gaussian probes.
pub fn hutchinson_trace(
    factor: &CholeskyFactor,
    m: &SparseSymMatrix,
    t: usize,
    rng: &mut RandomSource,
) -> Result<f64> {
    if t == 0 {
        return Err(Error::InvalidArgument("at least one probe is required".into()));
    }
    if m.dim() != factor.dim() {
        return Err(Error::DimensionMismatch { expected: factor.dim(), got: m.dim() });
    }
    let mut acc = 0.0;
    for _ in 0..t {
        let z = rng.standard_normal(factor.dim());
        acc += probe_term(factor, m, &z)?;
    }
    Ok(acc / t as f64)
}

/// `(A^{-1} z)^T M z` for a single probe.
pub fn probe_term(factor: &CholeskyFactor, m: &SparseSymMatrix, z: &[f64]) -> Result<f64> {
    let u = factor.solve(z)?;
    let mz = m.matvec(z)?;
    Ok(u.iter().zip(&mz).map(|(a, b)| a * b).sum())
}

/// Exact `tr(A^{-1} M)` through `N` solves.
pub fn exact_trace(factor: &CholeskyFactor, m: &SparseSymMatrix) -> Result<f64> {
    let n = factor.dim();
    if m.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: m.dim() });
    }
    let mut e = vec![0.0; n];
    let mut acc = 0.0;
    for j in 0..n {
        e[j] = 1.0;
        let u = factor.solve(&e)?;
        e[j] = 0.0;
        let (rows, vals) = m.column(j);
        acc += rows.iter().zip(vals).map(|(&r, &v)| u[r] * v).sum::<f64>();
    }
    Ok(acc)
}

/// Dense Cholesky factor `L` (lower triangular) of a symmetric matrix.
pub fn dense_cholesky(a: &nalgebra::DMatrix<f64>) -> Result<nalgebra::DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: a.ncols() });
    }
    let mut l = a.clone();
    let data = l.as_mut_slice();
    for j in 0..n {
        let (head, tail) = data.split_at_mut(j * n);
        let colj = &mut tail[..n];
        for k in 0..j {
            let colk = &head[k * n..(k + 1) * n];
            let ljk = colk[j];
            if ljk != 0.0 {
                for i in j..n {
                    colj[i] -= ljk * colk[i];
                }
            }
        }
        let d = colj[j];
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::IndefiniteMatrix { pivot_index: j });
        }
        let d = d.sqrt();
        colj[j] = d;
        for v in &mut colj[j + 1..] {
            *v /= d;
        }
        for v in &mut colj[..j] {
            *v = 0.0;
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let a = SparseSymMatrix::from_lower_triplets(2, &[(0, 0, 4.0), (1, 0, 2.0), (1, 1, 3.0)]).unwrap();
        let f = sparse_cholesky_with(&a, 0.0, Ordering::Natural).unwrap();
        let l = f.l_dense();
        assert!((l[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((l[(1, 0)] - 1.0).abs() < 1e-15);
        assert!((l[(1, 1)] - 2f64.sqrt()).abs() < 1e-15);
        let x = f.solve(&[6.0, 5.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_pivot_is_reported() {
        let a = SparseSymMatrix::from_lower_triplets(1, &[(0, 0, 0.0)]).unwrap();
        assert_eq!(sparse_cholesky(&a, 0.0).unwrap_err(), Error::IndefiniteMatrix { pivot_index: 0 });
    }

    #[test]
    fn diagonal_log_det() {
        let a = SparseSymMatrix::from_lower_triplets(3, &[(0, 0, 4.0), (1, 1, 3.0), (2, 2, 2.0)]).unwrap();
        let f = sparse_cholesky(&a, 0.0).unwrap();
        assert!((log_det(&f) - 24f64.ln()).abs() < 1e-14);
    }
}
