//! Dense and sparse matrices with the direct factorizations used by the
//! local patch solves.
//!
//! Sparse factorizations reorder with reverse Cuthill-McKee and then work on
//! the band (LU) or the envelope (Cholesky) of the permuted matrix.

use crate::error::{Error, Result};
use std::collections::VecDeque;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `y += self * x`.
    pub fn matvec_add(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.cols);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += dot(self.row(i), x);
        }
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows);
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Scales row `i` by `s[i]`.
    pub fn scale_rows(&mut self, s: &[f64]) {
        for (i, &si) in s.iter().enumerate() {
            for v in self.row_mut(i) {
                *v *= si;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn lu(&self) -> Result<DenseLu> {
        DenseLu::factor(self)
    }

    pub fn cholesky(&self) -> Result<DenseCholesky> {
        DenseCholesky::factor(self)
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// LU factorization with partial pivoting.
#[derive(Clone, Debug)]
pub struct DenseLu {
    lu: DenseMatrix,
    piv: Vec<usize>,
}

impl DenseLu {
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::Dimension(format!("LU of {}x{} matrix", a.rows, a.cols)));
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut piv = vec![0; n];
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        for k in 0..n {
            let mut p = k;
            let mut best = lu[(k, k)].abs();
            for i in k + 1..n {
                let v = lu[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= 1e-14 * scale {
                return Err(Error::Singular(format!("zero pivot at column {k}")));
            }
            piv[k] = p;
            if p != k {
                for j in 0..n {
                    lu.data.swap(k * n + j, p * n + j);
                }
            }
            let d = lu[(k, k)];
            for i in k + 1..n {
                let m = lu[(i, k)] / d;
                lu[(i, k)] = m;
                if m != 0.0 {
                    for j in k + 1..n {
                        let v = lu[(k, j)];
                        lu[(i, j)] -= m * v;
                    }
                }
            }
        }
        Ok(Self { lu, piv })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.lu.rows;
        for k in 0..n {
            b.swap(k, self.piv[k]);
        }
        for i in 0..n {
            let row = self.lu.row(i);
            let s: f64 = (0..i).map(|j| row[j] * b[j]).sum();
            b[i] -= s;
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let s: f64 = (i + 1..n).map(|j| row[j] * b[j]).sum();
            b[i] = (b[i] - s) / row[i];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(b.rows, b.cols);
        let mut col = vec![0.0; b.rows];
        for j in 0..b.cols {
            for i in 0..b.rows {
                col[i] = b[(i, j)];
            }
            self.solve_in_place(&mut col);
            for i in 0..b.rows {
                out[(i, j)] = col[i];
            }
        }
        out
    }

    pub fn inverse(&self) -> DenseMatrix {
        self.solve_matrix(&DenseMatrix::identity(self.dim()))
    }
}

/// Cholesky factor `A = L L^T` of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct DenseCholesky {
    l: DenseMatrix,
}

impl DenseCholesky {
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::Dimension(format!("Cholesky of {}x{} matrix", a.rows, a.cols)));
        }
        let n = a.rows;
        let mut l = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
                if i == j {
                    let d = a[(i, i)] - s;
                    if d <= 0.0 || !d.is_finite() {
                        return Err(Error::NotPositiveDefinite(i));
                    }
                    l[(i, i)] = d.sqrt();
                } else {
                    l[(i, j)] = (a[(i, j)] - s) / l[(j, j)];
                }
            }
        }
        Ok(Self { l })
    }

    pub fn factor_l(&self) -> &DenseMatrix {
        &self.l
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows;
        let mut y = b.to_vec();
        for i in 0..n {
            let s: f64 = (0..i).map(|k| self.l[(i, k)] * y[k]).sum();
            y[i] = (y[i] - s) / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| self.l[(k, i)] * y[k]).sum();
            y[i] = (y[i] - s) / self.l[(i, i)];
        }
        y
    }
}

/// Compressed sparse row matrix with sorted column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, indptr: vec![0; nrows + 1], indices: Vec::new(), values: Vec::new() }
    }

    /// Builds a matrix from `(row, col, value)` triplets, summing duplicates.
    ///
    /// Duplicates are summed in insertion order so the result does not depend
    /// on anything but the input sequence.
    pub fn from_triplets(nrows: usize, ncols: usize, mut trip: Vec<(usize, usize, f64)>) -> Self {
        trip.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(trip.len());
        let mut values: Vec<f64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) outside {nrows}x{ncols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..nrows {
            indptr[i + 1] += indptr[i];
        }
        Self { nrows, ncols, indptr, indices, values }
    }

    pub fn from_dense(a: &DenseMatrix) -> Self {
        let mut trip = Vec::new();
        for i in 0..a.rows() {
            for j in 0..a.cols() {
                if a[(i, j)] != 0.0 {
                    trip.push((i, j, a[(i, j)]));
                }
            }
        }
        Self::from_triplets(a.rows(), a.cols(), trip)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            let (c, v) = self.row(i);
            c.iter().zip(v).map(move |(&j, &x)| (i, j, x))
        })
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_add(x, &mut y);
        y
    }

    /// `y += self * x`.
    pub fn matvec_add(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let (c, v) = self.row(i);
            let mut s = 0.0;
            for (&j, &a) in c.iter().zip(v) {
                s += a * x[j];
            }
            *yi += s;
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            d[(i, j)] = v;
        }
        d
    }

    pub fn transpose(&self) -> Self {
        let trip = self.triplets().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, trip)
    }

    /// Extracts `self[rows, cols]`.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut colmap = vec![usize::MAX; self.ncols];
        for (k, &c) in cols.iter().enumerate() {
            colmap[c] = k;
        }
        let mut trip = Vec::new();
        for (ri, &r) in rows.iter().enumerate() {
            let (c, v) = self.row(r);
            for (&j, &x) in c.iter().zip(v) {
                if colmap[j] != usize::MAX {
                    trip.push((ri, colmap[j], x));
                }
            }
        }
        Self::from_triplets(rows.len(), cols.len(), trip)
    }

    /// Sum of `self` and `other` (same shape).
    pub fn add(&self, other: &CsrMatrix) -> Self {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let trip = self.triplets().chain(other.triplets()).collect();
        Self::from_triplets(self.nrows, self.ncols, trip)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= s;
        }
        out
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        self.triplets().all(|(i, j, v)| (v - self.get(j, i)).abs() <= tol * scale)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Reverse Cuthill-McKee ordering of the symmetrized pattern of `a`.
/// Returns `perm` with `perm[new] = old`.
pub fn rcm_ordering(a: &CsrMatrix) -> Vec<usize> {
    let n = a.nrows();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j, _) in a.triplets() {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for l in &mut adj {
        l.sort_unstable();
        l.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let bfs = |start: usize, visited: &mut Vec<bool>, order: &mut Vec<usize>| -> usize {
        let mut q = VecDeque::new();
        q.push_back(start);
        visited[start] = true;
        let mut last = start;
        while let Some(v) = q.pop_front() {
            order.push(v);
            last = v;
            let mut nb: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            nb.sort_by_key(|&w| (degree[w], w));
            for w in nb {
                visited[w] = true;
                q.push_back(w);
            }
        }
        last
    };
    let mut roots: Vec<usize> = (0..n).collect();
    roots.sort_by_key(|&v| (degree[v], v));
    for &root in &roots {
        if visited[root] {
            continue;
        }
        // Pseudo-peripheral start: restart from the last node reached.
        let mut scratch_vis = visited.clone();
        let mut scratch = Vec::new();
        let far = bfs(root, &mut scratch_vis, &mut scratch);
        bfs(far, &mut visited, &mut order);
    }
    order.reverse();
    order
}

fn permuted(a: &CsrMatrix, perm: &[usize]) -> CsrMatrix {
    let n = perm.len();
    let mut inv = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let trip = a.triplets().map(|(i, j, v)| (inv[i], inv[j], v)).collect();
    CsrMatrix::from_triplets(n, n, trip)
}

/// Envelope Cholesky factor of a sparse SPD matrix.
#[derive(Clone, Debug)]
pub struct EnvelopeCholesky {
    perm: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    l: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::Dimension("Cholesky of a non-square matrix".into()));
        }
        let perm = rcm_ordering(a);
        let p = permuted(a, &perm);
        let mut first: Vec<usize> = (0..n).collect();
        for (i, j, _) in p.triplets() {
            let (r, c) = if i >= j { (i, j) } else { (j, i) };
            first[r] = first[r].min(c);
        }
        let mut start = vec![0usize; n + 1];
        for i in 0..n {
            start[i + 1] = start[i] + (i - first[i] + 1);
        }
        let mut l = vec![0.0; start[n]];
        for (i, j, v) in p.triplets() {
            if j <= i {
                l[start[i] + j - first[i]] = v;
            }
        }
        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let mut s = l[start[i] + j - fi];
                for k in k0..j {
                    s -= l[start[i] + k - fi] * l[start[j] + k - fj];
                }
                if j == i {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite(perm[i]));
                    }
                    l[start[i] + i - fi] = s.sqrt();
                } else {
                    l[start[i] + j - fi] = s / l[start[j] + j - fj];
                }
            }
        }
        Ok(Self { perm, first, start, l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.perm.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&o| b[o]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.l[self.start[i]..self.start[i + 1]];
            let mut s = y[i];
            for k in fi..i {
                s -= row[k - fi] * y[k];
            }
            y[i] = s / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.l[self.start[i]..self.start[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            for k in fi..i {
                y[k] -= row[k - fi] * yi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

/// Banded LU factor with partial pivoting of a sparse matrix.
#[derive(Clone, Debug)]
pub struct BandLu {
    perm: Vec<usize>,
    kl: usize,
    ku: usize,
    width: usize,
    band: Vec<f64>,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::Dimension("LU of a non-square matrix".into()));
        }
        let perm = rcm_ordering(a);
        let p = permuted(a, &perm);
        let (mut kl, mut ku) = (0usize, 0usize);
        for (i, j, _) in p.triplets() {
            if i > j {
                kl = kl.max(i - j);
            } else {
                ku = ku.max(j - i);
            }
        }
        let width = 2 * kl + ku + 1;
        let mut lu = Self { perm, kl, ku, width, band: vec![0.0; n * width], piv: vec![0; n] };
        for (i, j, v) in p.triplets() {
            let k = lu.idx(i, j);
            lu.band[k] = v;
        }
        let scale = a.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut pr = k;
            let mut best = lu.band[lu.idx(k, k)].abs();
            for i in k + 1..=last_row {
                let v = lu.band[lu.idx(i, k)].abs();
                if v > best {
                    best = v;
                    pr = i;
                }
            }
            if best <= 1e-14 * scale {
                return Err(Error::Singular(format!("zero pivot in banded LU at step {k}")));
            }
            lu.piv[k] = pr;
            let last_col = (k + kl + ku).min(n - 1);
            if pr != k {
                for j in k..=last_col {
                    let (a1, a2) = (lu.idx(k, j), lu.idx(pr, j));
                    lu.band.swap(a1, a2);
                }
            }
            let d = lu.band[lu.idx(k, k)];
            for i in k + 1..=last_row {
                let ik = lu.idx(i, k);
                let m = lu.band[ik] / d;
                lu.band[ik] = m;
                if m != 0.0 {
                    for j in k + 1..=last_col {
                        let kj = lu.band[lu.idx(k, j)];
                        let ij = lu.idx(i, j);
                        lu.band[ij] -= m * kj;
                    }
                }
            }
        }
        Ok(lu)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * self.width + (j + self.kl - i)
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.perm.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&o| b[o]).collect();
        for k in 0..n {
            y.swap(k, self.piv[k]);
            let yk = y[k];
            if yk != 0.0 {
                for i in k + 1..=(k + self.kl).min(n.saturating_sub(1)) {
                    y[i] -= self.band[self.idx(i, k)] * yk;
                }
            }
        }
        for i in (0..n).rev() {
            let last = (i + self.kl + self.ku).min(n - 1);
            let mut s = y[i];
            for j in i + 1..=last {
                s -= self.band[self.idx(i, j)] * y[j];
            }
            y[i] = s / self.band[self.idx(i, i)];
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

/// Direct solver for a sparse local system: Cholesky when symmetric, LU otherwise.
#[derive(Clone, Debug)]
pub enum SparseFactor {
    Cholesky(EnvelopeCholesky),
    Lu(BandLu),
    Empty,
}

impl SparseFactor {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        if a.nrows() == 0 {
            return Ok(SparseFactor::Empty);
        }
        if a.is_symmetric(1e-12) {
            match EnvelopeCholesky::factor(a) {
                Ok(c) => return Ok(SparseFactor::Cholesky(c)),
                Err(Error::NotPositiveDefinite(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(SparseFactor::Lu(BandLu::factor(a)?))
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        match self {
            SparseFactor::Cholesky(c) => c.solve(b),
            SparseFactor::Lu(l) => l.solve(b),
            SparseFactor::Empty => Vec::new(),
        }
    }
}
