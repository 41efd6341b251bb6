//! Symmetric sparse matrices in compressed-column form.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Symmetric matrix storing both triangles in compressed columns with
/// sorted row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymMatrix {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSymMatrix {
    /// Builds a matrix from lower-triangle triplets `(row, col, value)` with
    /// `row >= col`. Duplicates are summed and the upper triangle mirrored.
    pub fn from_lower_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        for &(r, c, _) in triplets {
            if r >= n || c >= n {
                return Err(Error::InvalidArgument(format!("entry ({r}, {c}) outside {n}x{n}")));
            }
            if r < c {
                return Err(Error::InvalidArgument(format!("entry ({r}, {c}) above the diagonal")));
            }
        }
        let mut counts = vec![0usize; n + 1];
        for &(r, c, _) in triplets {
            counts[c + 1] += 1;
            if r != c {
                counts[r + 1] += 1;
            }
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let total = counts[n];
        let mut next = counts.clone();
        let mut rows = vec![0usize; total];
        let mut vals = vec![0.0; total];
        for &(r, c, v) in triplets {
            rows[next[c]] = r;
            vals[next[c]] = v;
            next[c] += 1;
            if r != c {
                rows[next[r]] = c;
                vals[next[r]] = v;
                next[r] += 1;
            }
        }
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::with_capacity(total);
        let mut values = Vec::with_capacity(total);
        let mut buf: Vec<(usize, f64)> = Vec::new();
        for c in 0..n {
            buf.clear();
            buf.extend((counts[c]..counts[c + 1]).map(|p| (rows[p], vals[p])));
            buf.sort_by_key(|e| e.0);
            for &(r, v) in &buf {
                if row_idx.len() > col_ptr[c] && *row_idx.last().unwrap() == r {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            col_ptr[c + 1] = row_idx.len();
        }
        Ok(Self { n, col_ptr, row_idx, values })
    }

    /// Sparse copy of a dense symmetric matrix, reading its lower triangle and
    /// skipping exact zeros off the diagonal.
    pub fn from_dense_lower(a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch { expected: a.nrows(), got: a.ncols() });
        }
        let n = a.nrows();
        let mut t = Vec::new();
        for c in 0..n {
            for r in c..n {
                let v = a[(r, c)];
                if v != 0.0 || r == c {
                    t.push((r, c, v));
                }
            }
        }
        Self::from_lower_triplets(n, &t)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries over both triangles.
    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Stored entries in the lower triangle, diagonal included.
    pub fn nnz_lower(&self) -> usize {
        (0..self.n).map(|c| self.column(c).0.iter().filter(|&&r| r >= c).count()).sum()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_indices(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Row indices and values of column `c`.
    pub fn column(&self, c: usize) -> (&[usize], &[f64]) {
        let r = self.col_ptr[c]..self.col_ptr[c + 1];
        (&self.row_idx[r.clone()], &self.values[r])
    }

    /// Entry `(i, j)`, zero when not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (rows, vals) = self.column(j);
        match rows.binary_search(&i) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.column(j).0.binary_search(&i).is_ok()
    }

    /// Lower-triangle entries sorted by column, then row.
    pub fn lower_triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for c in 0..self.n {
            let (rows, vals) = self.column(c);
            for (&r, &v) in rows.iter().zip(vals) {
                if r >= c {
                    out.push((r, c, v));
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(Error::LengthMismatch { expected: self.n, got: x.len() });
        }
        let mut y = vec![0.0; self.n];
        for (c, &xc) in x.iter().enumerate() {
            if xc == 0.0 {
                continue;
            }
            let (rows, vals) = self.column(c);
            for (&r, &v) in rows.iter().zip(vals) {
                y[r] += v * xc;
            }
        }
        Ok(y)
    }

    /// `self * x` for a sparse `x` given as `(index, value)` pairs.
    pub fn matvec_sparse(&self, x: &[(usize, f64)], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for &(c, xc) in x {
            let (rows, vals) = self.column(c);
            for (&r, &v) in rows.iter().zip(vals) {
                y[r] += v * xc;
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for c in 0..self.n {
            let (rows, vals) = self.column(c);
            for (&r, &v) in rows.iter().zip(vals) {
                a[(r, c)] = v;
            }
        }
        a
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// `alpha * self + beta * other` over the union of both patterns.
    pub fn linear_combination(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: other.n });
        }
        let mut col_ptr = vec![0usize; self.n + 1];
        let mut row_idx = Vec::with_capacity(self.nnz().max(other.nnz()));
        let mut values = Vec::with_capacity(row_idx.capacity());
        for c in 0..self.n {
            let (ra, va) = self.column(c);
            let (rb, vb) = other.column(c);
            let (mut i, mut j) = (0, 0);
            while i < ra.len() || j < rb.len() {
                let take_a = j >= rb.len() || (i < ra.len() && ra[i] <= rb[j]);
                let take_b = i >= ra.len() || (j < rb.len() && rb[j] <= ra[i]);
                let (r, v) = match (take_a, take_b) {
                    (true, true) => {
                        let out = (ra[i], alpha * va[i] + beta * vb[j]);
                        i += 1;
                        j += 1;
                        out
                    }
                    (true, false) => {
                        let out = (ra[i], alpha * va[i]);
                        i += 1;
                        out
                    }
                    _ => {
                        let out = (rb[j], beta * vb[j]);
                        j += 1;
                        out
                    }
                };
                row_idx.push(r);
                values.push(v);
            }
            col_ptr[c + 1] = row_idx.len();
        }
        Ok(Self { n: self.n, col_ptr, row_idx, values })
    }

    /// Drops stored entries with `|value| < tau`; the diagonal is kept.
    pub fn threshold(&self, tau: f64) -> Self {
        if tau <= 0.0 {
            return self.clone();
        }
        let mut col_ptr = vec![0usize; self.n + 1];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        for c in 0..self.n {
            let (rows, vals) = self.column(c);
            for (&r, &v) in rows.iter().zip(vals) {
                if v.abs() >= tau || r == c {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            col_ptr[c + 1] = row_idx.len();
        }
        Self { n: self.n, col_ptr, row_idx, values }
    }

    /// Largest `|a_ij - a_ji|` over stored entries.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for c in 0..self.n {
            let (rows, vals) = self.column(c);
            for (&r, &v) in rows.iter().zip(vals) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }

    /// Frobenius norm.
    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
