//! Univariate B-spline bases on open knot vectors over `[0, 1]`.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Open (clamped) knot vector with its degree.
#[derive(Clone, Debug, PartialEq)]
pub struct KnotVector {
    degree: usize,
    knots: Vec<f64>,
}

impl KnotVector {
    /// Validates an open knot vector on `[0, 1]`.
    pub fn new(degree: usize, knots: Vec<f64>) -> Result<Self> {
        let p = degree;
        if knots.len() < 2 * (p + 1) {
            return Err(Error::InvalidKnots(format!("{} knots cannot carry degree {p}", knots.len())));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidKnots("non-finite knot".into()));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidKnots("knots must be non-decreasing".into()));
        }
        let m = knots.len();
        if knots[..=p].iter().any(|&k| k != 0.0) || knots[m - p - 1..].iter().any(|&k| k != 1.0) {
            return Err(Error::InvalidKnots(format!(
                "expected an open knot vector on [0, 1] with {} repeated end knots",
                p + 1
            )));
        }
        let mut run = 1;
        for w in knots.windows(2) {
            if w[0] == w[1] {
                run += 1;
                if run > p + 1 {
                    return Err(Error::InvalidKnots(format!("knot {} has multiplicity above {}", w[0], p + 1)));
                }
            } else {
                run = 1;
            }
        }
        let interior_full = knots[p + 1..m - p - 1].windows(p + 1).any(|w| w[0] == w[p]);
        if interior_full && m > 2 * (p + 1) {
            return Err(Error::InvalidKnots("interior knot of multiplicity p + 1".into()));
        }
        Ok(Self { degree, knots })
    }

    /// Open uniform knot vector with `n_el` elements.
    pub fn open_uniform(degree: usize, n_el: usize) -> Self {
        assert!(n_el >= 1);
        let mut knots = vec![0.0; degree + 1];
        for i in 1..n_el {
            knots.push(i as f64 / n_el as f64);
        }
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        Self { degree, knots }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// Non-empty knot spans as `(span index, left, right)`.
    pub fn elements(&self) -> Vec<(usize, f64, f64)> {
        let p = self.degree;
        (p..self.num_basis())
            .filter(|&s| self.knots[s + 1] > self.knots[s])
            .map(|s| (s, self.knots[s], self.knots[s + 1]))
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.elements().len()
    }

    /// Distinct interior knots.
    pub fn interior_breaks(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self.knots.iter().copied().filter(|&k| k > 0.0 && k < 1.0).collect();
        b.dedup();
        b
    }

    /// Span `s` with `knots[s] <= x < knots[s + 1]`; the last non-empty span at `x = 1`.
    pub fn find_span(&self, x: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&x) || x.is_nan() {
            return Err(Error::Domain(x));
        }
        let n = self.num_basis();
        let p = self.degree;
        if x >= self.knots[n] {
            let mut s = n - 1;
            while self.knots[s] == self.knots[s + 1] {
                s -= 1;
            }
            return Ok(s);
        }
        let (mut lo, mut hi) = (p, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(lo)
    }

    /// Values of the `p + 1` basis functions active at `x`, with the index of the first.
    pub fn eval_basis(&self, x: f64) -> Result<(usize, Vec<f64>)> {
        let (first, mut d) = self.eval_basis_derivs(x, 0)?;
        Ok((first, d.swap_remove(0)))
    }

    /// Values and derivatives up to order `nd`: `ders[k][j]` is the `k`-th
    /// derivative of basis function `first + j`.
    pub fn eval_basis_derivs(&self, x: f64, nd: usize) -> Result<(usize, Vec<Vec<f64>>)> {
        let s = self.find_span(x)?;
        Ok((s - self.degree, self.ders_at_span(s, x, nd)))
    }

    /// Derivatives at `x` assuming `x` lies in span `s` (closed on both sides).
    pub fn ders_at_span(&self, s: usize, x: f64, nd: usize) -> Vec<Vec<f64>> {
        let p = self.degree;
        let u = &self.knots;
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - u[s + 1 - j];
            right[j] = u[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![vec![0.0; p + 1]; nd + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=nd.min(p) {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize - 1) <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut fac = p as f64;
        for k in 1..=nd.min(p) {
            for v in ders[k].iter_mut() {
                *v *= fac;
            }
            fac *= (p - k) as f64;
        }
        ders
    }

    /// Greville abscissae `(knots[i+1] + ... + knots[i+p]) / p`.
    pub fn greville(&self) -> Vec<f64> {
        let p = self.degree;
        if p == 0 {
            return (0..self.num_basis()).map(|i| 0.5 * (self.knots[i] + self.knots[i + 1])).collect();
        }
        (0..self.num_basis()).map(|i| self.knots[i + 1..=i + p].iter().sum::<f64>() / p as f64).collect()
    }

    pub fn multiplicity(&self, x: f64) -> usize {
        self.knots.iter().filter(|&&k| k == x).count()
    }

    /// Boehm insertion of `x` once. `coeffs` holds `num_basis` rows of `dim` values.
    pub fn insert_knot(&self, x: f64, coeffs: &[f64], dim: usize) -> Result<(KnotVector, Vec<f64>)> {
        if !(x > 0.0 && x < 1.0) {
            return Err(Error::Domain(x));
        }
        let p = self.degree;
        if self.multiplicity(x) >= p {
            return Err(Error::InvalidKnots(format!("inserting {x} exceeds multiplicity {p}")));
        }
        let n = self.num_basis();
        assert_eq!(coeffs.len(), n * dim);
        let k = self.find_span(x)?;
        let mut out = Vec::with_capacity((n + 1) * dim);
        for i in 0..=n {
            let alpha = if i + p <= k {
                1.0
            } else if i > k {
                0.0
            } else {
                (x - self.knots[i]) / (self.knots[i + p] - self.knots[i])
            };
            for c in 0..dim {
                let a = if i < n { coeffs[i * dim + c] } else { 0.0 };
                let b = if i > 0 { coeffs[(i - 1) * dim + c] } else { 0.0 };
                out.push(alpha * a + (1.0 - alpha) * b);
            }
        }
        let mut knots = self.knots.clone();
        knots.insert(k + 1, x);
        Ok((KnotVector { degree: p, knots }, out))
    }

    /// Raises the degree by one, keeping the continuity at every break point.
    ///
    /// The elevated spline is recovered by collocation at the Greville points
    /// of the elevated space, which is exact for functions of that space.
    pub fn elevate_degree(&self, coeffs: &[f64], dim: usize) -> Result<(KnotVector, Vec<f64>)> {
        let n = self.num_basis();
        assert_eq!(coeffs.len(), n * dim);
        let mut knots = Vec::with_capacity(self.knots.len() + 2 + self.interior_breaks().len());
        let mut i = 0;
        while i < self.knots.len() {
            let v = self.knots[i];
            let mut j = i;
            while j < self.knots.len() && self.knots[j] == v {
                knots.push(v);
                j += 1;
            }
            knots.push(v);
            i = j;
        }
        let kv = KnotVector { degree: self.degree + 1, knots };
        let pts = kv.greville();
        let m = kv.num_basis();
        let mut g = DenseMatrix::zeros(m, m);
        let mut rhs = vec![0.0; m * dim];
        for (r, &x) in pts.iter().enumerate() {
            let (f, vals) = kv.eval_basis(x)?;
            for (j, v) in vals.iter().enumerate() {
                g[(r, f + j)] = *v;
            }
            let (f0, v0) = self.eval_basis(x)?;
            for (j, v) in v0.iter().enumerate() {
                for c in 0..dim {
                    rhs[r * dim + c] += v * coeffs[(f0 + j) * dim + c];
                }
            }
        }
        let lu = g.lu()?;
        let mut out = vec![0.0; m * dim];
        let mut col = vec![0.0; m];
        for c in 0..dim {
            for r in 0..m {
                col[r] = rhs[r * dim + c];
            }
            lu.solve_in_place(&mut col);
            for r in 0..m {
                out[r * dim + c] = col[r];
            }
        }
        Ok((kv, out))
    }

    /// Evaluates `sum_i coeffs[i] B_i(x)` for `dim`-valued coefficients.
    pub fn eval_spline(&self, coeffs: &[f64], dim: usize, x: f64) -> Result<Vec<f64>> {
        let (f, v) = self.eval_basis(x)?;
        let mut out = vec![0.0; dim];
        for (j, b) in v.iter().enumerate() {
            for c in 0..dim {
                out[c] += b * coeffs[(f + j) * dim + c];
            }
        }
        Ok(out)
    }
}

/// Gauss-Legendre rule with `n` points on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pn1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            z = 0.0;
            dp = 1.0;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n == 1 {
        w[0] = 2.0;
    }
    (x, w)
}
