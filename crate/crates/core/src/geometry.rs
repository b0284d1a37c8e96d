//! Tensor-product NURBS patches: evaluation, refinement, faces, point
//! inversion and the constructors for the built-in domains.

use crate::bspline::KnotVector;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use serde::{Deserialize, Serialize};

pub type Point = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// One side of a patch: parametric direction `dir` fixed at `end` (0 or 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Side {
    pub dir: usize,
    pub end: usize,
}

impl Side {
    pub fn from_id(id: usize) -> Self {
        Side { dir: id / 2, end: id % 2 }
    }

    pub fn id(self) -> usize {
        2 * self.dir + self.end
    }

    pub fn all(dim: usize) -> impl Iterator<Item = Side> {
        (0..2 * dim).map(Side::from_id)
    }

    pub fn value(self) -> f64 {
        self.end as f64
    }
}

/// Tensor-product NURBS patch; parametric and physical dimension agree.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    dim: usize,
    kv: Vec<KnotVector>,
    weights: Vec<f64>,
    ctrl: Vec<Point>,
}

/// Basis functions active at one parametric point.
#[derive(Clone, Debug, Default)]
pub struct BasisEval {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    /// Parametric gradients.
    pub grads: Vec<Point>,
}

/// Basis and geometry at one point, with physical gradients.
#[derive(Clone, Debug, Default)]
pub struct PhysEval {
    pub x: Point,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub grads: Vec<Point>,
    pub jac: Mat3,
    pub det: f64,
    pub inv_t: Mat3,
}

/// Result of projecting a physical point onto a patch face.
#[derive(Clone, Debug)]
pub struct Inversion {
    pub params: Vec<f64>,
    pub point: Point,
    pub residual: f64,
}

impl Patch {
    pub fn new(kv: Vec<KnotVector>, ctrl: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        let dim = kv.len();
        if !(2..=3).contains(&dim) {
            return Err(Error::InvalidGeometry(format!("unsupported dimension {dim}")));
        }
        let n: usize = kv.iter().map(KnotVector::num_basis).product();
        if ctrl.len() != n || weights.len() != n {
            return Err(Error::InvalidGeometry(format!(
                "expected {n} control points and weights, got {} and {}",
                ctrl.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidGeometry("weights must be positive".into()));
        }
        if ctrl.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite control point".into()));
        }
        if ctrl.iter().any(|c| c[dim..].iter().any(|&z| z != 0.0)) {
            return Err(Error::InvalidGeometry("control point has extra coordinates".into()));
        }
        Ok(Self { dim, kv, weights, ctrl })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn knots(&self, dir: usize) -> &KnotVector {
        &self.kv[dir]
    }

    pub fn degree(&self, dir: usize) -> usize {
        self.kv[dir].degree()
    }

    pub fn n(&self, dir: usize) -> usize {
        self.kv[dir].num_basis()
    }

    pub fn num_dofs(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn control_points(&self) -> &[Point] {
        &self.ctrl
    }

    pub fn num_elements(&self, dir: usize) -> usize {
        self.kv[dir].num_elements()
    }

    /// Parametric mesh size: largest knot span over all directions.
    pub fn mesh_size(&self) -> f64 {
        (0..self.dim).flat_map(|d| self.kv[d].elements().into_iter().map(|(_, a, b)| b - a)).fold(0.0, f64::max)
    }

    pub fn index(&self, m: &[usize]) -> usize {
        let mut idx = 0;
        for d in (0..self.dim).rev() {
            idx = idx * self.n(d) + m[d];
        }
        idx
    }

    pub fn multi(&self, mut i: usize) -> [usize; 3] {
        let mut m = [0; 3];
        for d in 0..self.dim {
            m[d] = i % self.n(d);
            i /= self.n(d);
        }
        m
    }

    /// Bounding-box diagonal of the control net (encloses the patch).
    pub fn diameter(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in &self.ctrl {
            for d in 0..self.dim {
                lo[d] = lo[d].min(c[d]);
                hi[d] = hi[d].max(c[d]);
            }
        }
        (0..self.dim).map(|d| (hi[d] - lo[d]).powi(2)).sum::<f64>().sqrt()
    }

    /// Spans containing `xi`.
    pub fn spans(&self, xi: &[f64]) -> Result<[usize; 3]> {
        let mut s = [0; 3];
        for d in 0..self.dim {
            s[d] = self.kv[d].find_span(xi[d])?;
        }
        Ok(s)
    }

    /// Rational basis and parametric gradients at `xi`, evaluated in `spans`.
    pub fn eval_basis_in(&self, spans: &[usize; 3], xi: &[f64]) -> BasisEval {
        let dim = self.dim;
        let mut uni: Vec<Vec<Vec<f64>>> = Vec::with_capacity(dim);
        let mut first = [0usize; 3];
        let mut counts = [1usize; 3];
        for d in 0..dim {
            let p = self.degree(d);
            uni.push(self.kv[d].ders_at_span(spans[d], xi[d], 1));
            first[d] = spans[d] - p;
            counts[d] = p + 1;
        }
        let total: usize = counts[..dim].iter().product();
        let mut out = BasisEval {
            indices: Vec::with_capacity(total),
            values: Vec::with_capacity(total),
            grads: Vec::with_capacity(total),
        };
        let mut w_sum = 0.0;
        let mut w_grad = [0.0; 3];
        let mut m = [0usize; 3];
        for t in 0..total {
            let mut r = t;
            for d in 0..dim {
                m[d] = r % counts[d];
                r /= counts[d];
            }
            let mut val = 1.0;
            let mut grad = [1.0; 3];
            for d in 0..dim {
                let v = uni[d][0][m[d]];
                let dv = uni[d][1][m[d]];
                val *= v;
                for (g, gd) in grad.iter_mut().enumerate().take(dim) {
                    *gd *= if g == d { dv } else { v };
                }
            }
            let mut gm = [0usize; 3];
            for d in 0..dim {
                gm[d] = first[d] + m[d];
            }
            let idx = self.index(&gm[..dim]);
            let w = self.weights[idx];
            out.indices.push(idx);
            out.values.push(val * w);
            let mut g3 = [0.0; 3];
            for d in 0..dim {
                g3[d] = grad[d] * w;
                w_grad[d] += g3[d];
            }
            out.grads.push(g3);
            w_sum += val * w;
        }
        for (v, g) in out.values.iter_mut().zip(out.grads.iter_mut()) {
            for d in 0..dim {
                g[d] = (g[d] * w_sum - *v * w_grad[d]) / (w_sum * w_sum);
            }
            *v /= w_sum;
        }
        out
    }

    pub fn eval_basis(&self, xi: &[f64]) -> Result<BasisEval> {
        let s = self.spans(xi)?;
        Ok(self.eval_basis_in(&s, xi))
    }

    /// Geometry, Jacobian and physical gradients from a basis evaluation.
    pub fn physical(&self, b: BasisEval) -> PhysEval {
        let dim = self.dim;
        let mut x = [0.0; 3];
        let mut jac = [[0.0; 3]; 3];
        for (k, &i) in b.indices.iter().enumerate() {
            let c = self.ctrl[i];
            for a in 0..dim {
                x[a] += c[a] * b.values[k];
                for d in 0..dim {
                    jac[a][d] += c[a] * b.grads[k][d];
                }
            }
        }
        let (det, inv) = inverse(&jac, dim);
        let mut inv_t = [[0.0; 3]; 3];
        for a in 0..dim {
            for d in 0..dim {
                inv_t[a][d] = inv[d][a];
            }
        }
        let grads = b
            .grads
            .iter()
            .map(|g| {
                let mut out = [0.0; 3];
                for a in 0..dim {
                    for d in 0..dim {
                        out[a] += inv_t[a][d] * g[d];
                    }
                }
                out
            })
            .collect();
        PhysEval { x, indices: b.indices, values: b.values, grads, jac, det, inv_t }
    }

    pub fn eval_physical(&self, xi: &[f64]) -> Result<PhysEval> {
        Ok(self.physical(self.eval_basis(xi)?))
    }

    pub fn map(&self, xi: &[f64]) -> Result<Point> {
        let b = self.eval_basis(xi)?;
        let mut x = [0.0; 3];
        for (k, &i) in b.indices.iter().enumerate() {
            for a in 0..self.dim {
                x[a] += self.ctrl[i][a] * b.values[k];
            }
        }
        Ok(x)
    }

    /// Evaluates the field `sum_i u[i] phi_i` and its physical gradient.
    pub fn eval_field(&self, u: &[f64], xi: &[f64]) -> Result<(f64, Point)> {
        let pe = self.eval_physical(xi)?;
        let mut v = 0.0;
        let mut g = [0.0; 3];
        for (k, &i) in pe.indices.iter().enumerate() {
            v += u[i] * pe.values[k];
            for a in 0..self.dim {
                g[a] += u[i] * pe.grads[k][a];
            }
        }
        Ok((v, g))
    }

    /// Checks that the Jacobian determinant keeps one sign at sampled points.
    pub fn check_jacobian(&self) -> Result<()> {
        let dim = self.dim;
        let samples: Vec<Vec<f64>> = (0..dim)
            .map(|d| {
                let mut s = Vec::new();
                for (_, a, b) in self.kv[d].elements() {
                    for t in [0.0, 0.21, 0.5, 0.79, 1.0] {
                        s.push(a + t * (b - a));
                    }
                }
                s
            })
            .collect();
        let counts: Vec<usize> = samples.iter().map(Vec::len).collect();
        let total: usize = counts.iter().product();
        let mut sign = 0.0;
        let mut scale = 0.0f64;
        let mut dets = Vec::with_capacity(total);
        for t in 0..total {
            let mut r = t;
            let mut xi = [0.0; 3];
            for d in 0..dim {
                xi[d] = samples[d][r % counts[d]];
                r /= counts[d];
            }
            let det = self.eval_physical(&xi[..dim])?.det;
            scale = scale.max(det.abs());
            dets.push(det);
        }
        for det in dets {
            if det.abs() <= 1e-12 * scale {
                return Err(Error::InvalidGeometry("degenerate Jacobian".into()));
            }
            if sign == 0.0 {
                sign = det.signum();
            } else if det.signum() != sign {
                return Err(Error::InvalidGeometry("Jacobian changes sign".into()));
            }
        }
        Ok(())
    }

    fn homogeneous(&self) -> Vec<f64> {
        let mut h = Vec::with_capacity(4 * self.num_dofs());
        for (c, &w) in self.ctrl.iter().zip(&self.weights) {
            h.extend_from_slice(&[c[0] * w, c[1] * w, c[2] * w, w]);
        }
        h
    }

    fn with_homogeneous(&self, kv: Vec<KnotVector>, h: &[f64]) -> Self {
        let n = h.len() / 4;
        let mut ctrl = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let w = h[4 * i + 3];
            let mut c = [h[4 * i] / w, h[4 * i + 1] / w, h[4 * i + 2] / w];
            for z in c.iter_mut().skip(self.dim) {
                *z = 0.0;
            }
            ctrl.push(c);
            weights.push(w);
        }
        Self { dim: self.dim, kv, weights, ctrl }
    }

    /// Applies a univariate refinement along `dir` to every line of the net.
    fn refine_dir(
        &self,
        dir: usize,
        op: impl Fn(&KnotVector, &[f64]) -> Result<(KnotVector, Vec<f64>)>,
    ) -> Result<Self> {
        let h = self.homogeneous();
        let n_old: Vec<usize> = (0..self.dim).map(|d| self.n(d)).collect();
        let stride: usize = n_old[..dir].iter().product();
        let outer: usize = n_old[dir + 1..].iter().product();
        let mut new_kv = None;
        let mut lines = Vec::with_capacity(stride * outer);
        for o in 0..outer {
            for s in 0..stride {
                let mut line = Vec::with_capacity(4 * n_old[dir]);
                for k in 0..n_old[dir] {
                    let idx = s + stride * (k + n_old[dir] * o);
                    line.extend_from_slice(&h[4 * idx..4 * idx + 4]);
                }
                let (kv, out) = op(&self.kv[dir], &line)?;
                new_kv = Some(kv);
                lines.push(out);
            }
        }
        let kv_dir = new_kv.expect("patch has at least one line");
        let m = kv_dir.num_basis();
        let mut out = vec![0.0; 4 * stride * outer * m];
        for o in 0..outer {
            for s in 0..stride {
                let line = &lines[o * stride + s];
                for k in 0..m {
                    let idx = s + stride * (k + m * o);
                    out[4 * idx..4 * idx + 4].copy_from_slice(&line[4 * k..4 * k + 4]);
                }
            }
        }
        let mut kv = self.kv.clone();
        kv[dir] = kv_dir;
        Ok(self.with_homogeneous(kv, &out))
    }

    pub fn insert_knot(&self, dir: usize, x: f64) -> Result<Self> {
        self.refine_dir(dir, |kv, c| kv.insert_knot(x, c, 4))
    }

    pub fn elevate(&self, dir: usize) -> Result<Self> {
        self.refine_dir(dir, |kv, c| kv.elevate_degree(c, 4))
    }

    /// Elevates direction `dir` to degree `p` (no-op if already there).
    pub fn elevate_to(&self, dir: usize, p: usize) -> Result<Self> {
        if p < self.degree(dir) {
            return Err(Error::InvalidGeometry(format!("cannot lower degree {} to {p}", self.degree(dir))));
        }
        let mut out = self.clone();
        while out.degree(dir) < p {
            out = out.elevate(dir)?;
        }
        Ok(out)
    }

    /// Inserts the missing knots `k / n_el` along `dir`.
    pub fn h_refine_uniform(&self, dir: usize, n_el: usize) -> Result<Self> {
        let mut out = self.clone();
        for k in 1..n_el {
            let x = k as f64 / n_el as f64;
            if out.kv[dir].multiplicity(x) == 0 {
                out = out.insert_knot(dir, x)?;
            }
        }
        Ok(out)
    }

    /// k-refinement to `degrees` followed by uniform h-refinement to `elements`.
    pub fn refine(&self, degrees: &[usize], elements: &[usize]) -> Result<Self> {
        let mut out = self.clone();
        for d in 0..self.dim {
            out = out.elevate_to(d, degrees[d])?;
        }
        for d in 0..self.dim {
            out = out.h_refine_uniform(d, elements[d])?;
        }
        Ok(out)
    }

    /// Parametric directions spanning the face `side`.
    pub fn free_dirs(&self, side: Side) -> Vec<usize> {
        (0..self.dim).filter(|&d| d != side.dir).collect()
    }

    /// Number of trace basis functions on `side`.
    pub fn face_size(&self, side: Side) -> usize {
        self.free_dirs(side).iter().map(|&d| self.n(d)).product()
    }

    /// Patch indices of the functions not vanishing on `side`, in face order
    /// (first free direction fastest).
    pub fn face_dofs(&self, side: Side) -> Vec<usize> {
        let free = self.free_dirs(side);
        let fixed = if side.end == 0 { 0 } else { self.n(side.dir) - 1 };
        let counts: Vec<usize> = free.iter().map(|&d| self.n(d)).collect();
        let total: usize = counts.iter().product();
        (0..total)
            .map(|t| {
                let mut r = t;
                let mut m = [0usize; 3];
                m[side.dir] = fixed;
                for (k, &d) in free.iter().enumerate() {
                    m[d] = r % counts[k];
                    r /= counts[k];
                }
                self.index(&m[..self.dim])
            })
            .collect()
    }

    /// Face-local position of patch dof `i`, if it lies on `side`.
    pub fn face_local(&self, side: Side, i: usize) -> Option<usize> {
        let m = self.multi(i);
        let fixed = if side.end == 0 { 0 } else { self.n(side.dir) - 1 };
        if m[side.dir] != fixed {
            return None;
        }
        let mut idx = 0;
        for &d in self.free_dirs(side).iter().rev() {
            idx = idx * self.n(d) + m[d];
        }
        Some(idx)
    }

    /// Whether face-local dof `k` vanishes on the relative boundary of the face.
    pub fn face_local_is_interior(&self, side: Side, k: usize) -> bool {
        let mut r = k;
        for d in self.free_dirs(side) {
            let m = r % self.n(d);
            r /= self.n(d);
            if m == 0 || m == self.n(d) - 1 {
                return false;
            }
        }
        true
    }

    /// Full parametric point of face coordinates `s`.
    pub fn face_param(&self, side: Side, s: &[f64]) -> [f64; 3] {
        let mut xi = [0.0; 3];
        xi[side.dir] = side.value();
        for (k, d) in self.free_dirs(side).into_iter().enumerate() {
            xi[d] = s[k];
        }
        xi
    }

    /// Tensor Greville parameters of the face, in face order.
    pub fn face_greville(&self, side: Side) -> Vec<Vec<f64>> {
        let free = self.free_dirs(side);
        let g: Vec<Vec<f64>> = free.iter().map(|&d| self.kv[d].greville()).collect();
        let counts: Vec<usize> = g.iter().map(Vec::len).collect();
        let total: usize = counts.iter().product();
        (0..total)
            .map(|t| {
                let mut r = t;
                let mut s = Vec::with_capacity(free.len());
                for (k, gk) in g.iter().enumerate() {
                    s.push(gk[r % counts[k]]);
                    r /= counts[k];
                }
                s
            })
            .collect()
    }

    /// Trace basis on `side` at face coordinates `s`: face-local indices and values.
    pub fn face_basis(&self, side: Side, s: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        let xi = self.face_param(side, s);
        let b = self.eval_basis(&xi[..self.dim])?;
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for (k, &i) in b.indices.iter().enumerate() {
            if let Some(l) = self.face_local(side, i) {
                idx.push(l);
                val.push(b.values[k]);
            }
        }
        Ok((idx, val))
    }

    /// Collocation matrix of the trace basis at the face's own Greville points.
    pub fn face_collocation(&self, side: Side) -> Result<DenseMatrix> {
        let nodes = self.face_greville(side);
        let n = nodes.len();
        let mut g = DenseMatrix::zeros(n, n);
        for (r, s) in nodes.iter().enumerate() {
            let (idx, val) = self.face_basis(side, s)?;
            for (j, v) in idx.into_iter().zip(val) {
                g[(r, j)] = v;
            }
        }
        Ok(g)
    }

    /// Face point and tangent vectors `dx/ds_k`.
    pub fn face_point_tangents(&self, side: Side, s: &[f64]) -> Result<(Point, Vec<Point>)> {
        let xi = self.face_param(side, s);
        let pe = self.eval_physical(&xi[..self.dim])?;
        let tangents = self
            .free_dirs(side)
            .into_iter()
            .map(|d| {
                let mut t = [0.0; 3];
                for a in 0..self.dim {
                    t[a] = pe.jac[a][d];
                }
                t
            })
            .collect();
        Ok((pe.x, tangents))
    }

    /// Closest point on face `side` to `x` by clamped Gauss-Newton with backtracking.
    pub fn invert_face(&self, side: Side, x: &Point) -> Result<Inversion> {
        let free = self.free_dirs(side);
        let nf = free.len();
        // Iterate to roundoff so collocation entries are accurate, not just the distance.
        let tol = 1e-15 * self.diameter();
        let mut best: Option<(Vec<f64>, Point, f64)> = None;
        let samples: Vec<Vec<f64>> = free
            .iter()
            .map(|&d| {
                let mut s = vec![0.0];
                for (_, a, b) in self.kv[d].elements() {
                    for t in [0.25, 0.5, 0.75, 1.0] {
                        s.push(a + t * (b - a));
                    }
                }
                s
            })
            .collect();
        let counts: Vec<usize> = samples.iter().map(Vec::len).collect();
        let total: usize = counts.iter().product();
        for t in 0..total {
            let mut r = t;
            let s: Vec<f64> = (0..nf)
                .map(|k| {
                    let v = samples[k][r % counts[k]];
                    r /= counts[k];
                    v
                })
                .collect();
            let xi = self.face_param(side, &s);
            let p = self.map(&xi[..self.dim])?;
            let d = dist(&p, x);
            if best.as_ref().is_none_or(|b| d < b.2) {
                best = Some((s, p, d));
            }
        }
        let (mut s, mut p, mut res) = best.expect("face has sample points");
        for _ in 0..50 {
            if res <= tol {
                break;
            }
            let (_, tan) = self.face_point_tangents(side, &s)?;
            let mut r = [0.0; 3];
            for a in 0..3 {
                r[a] = x[a] - p[a];
            }
            let step = gauss_newton_step(&tan, &r);
            let mut lambda = 1.0;
            let mut improved = false;
            for _ in 0..30 {
                let trial: Vec<f64> = s.iter().zip(&step).map(|(a, b)| (a + lambda * b).clamp(0.0, 1.0)).collect();
                let xi = self.face_param(side, &trial);
                let pt = self.map(&xi[..self.dim])?;
                let rt = dist(&pt, x);
                if rt < res {
                    let moved = trial.iter().zip(&s).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    s = trial;
                    p = pt;
                    res = rt;
                    improved = moved > 1e-15;
                    break;
                }
                lambda *= 0.5;
            }
            if !improved {
                break;
            }
        }
        Ok(Inversion { params: s, point: p, residual: res })
    }

    /// Patch dofs at the corners of the parametric box.
    pub fn vertex_dofs(&self) -> Vec<usize> {
        (0..1usize << self.dim)
            .map(|c| {
                let mut m = [0usize; 3];
                for d in 0..self.dim {
                    m[d] = if c >> d & 1 == 1 { self.n(d) - 1 } else { 0 };
                }
                self.index(&m[..self.dim])
            })
            .collect()
    }

    pub fn is_vertex_dof(&self, i: usize) -> bool {
        let m = self.multi(i);
        (0..self.dim).all(|d| m[d] == 0 || m[d] == self.n(d) - 1)
    }

    pub fn to_desc(&self) -> PatchDesc {
        PatchDesc {
            degrees: (0..self.dim).map(|d| self.degree(d)).collect(),
            knots: self.kv.iter().map(|k| k.knots().to_vec()).collect(),
            weights: self.weights.clone(),
            control_points: self.ctrl.iter().map(|c| c[..self.dim].to_vec()).collect(),
        }
    }

    pub fn from_desc(desc: &PatchDesc) -> Result<Self> {
        let dim = desc.degrees.len();
        if desc.knots.len() != dim {
            return Err(Error::InvalidGeometry("one knot vector per direction expected".into()));
        }
        let kv = desc
            .degrees
            .iter()
            .zip(&desc.knots)
            .map(|(&p, k)| {
                if p > 12 {
                    return Err(Error::InvalidKnots(format!("degree {p} not supported")));
                }
                KnotVector::new(p, k.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let ctrl = desc
            .control_points
            .iter()
            .map(|c| {
                if c.len() != dim {
                    return Err(Error::InvalidGeometry(format!(
                        "control point with {} coordinates in dimension {dim}",
                        c.len()
                    )));
                }
                let mut p = [0.0; 3];
                p[..dim].copy_from_slice(c);
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        Patch::new(kv, ctrl, desc.weights.clone())
    }
}

/// Serializable form of a patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchDesc {
    pub degrees: Vec<usize>,
    pub knots: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub control_points: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryDoc {
    patch: Vec<PatchDesc>,
}

/// Parses a geometry document made of `[[patch]]` tables.
pub fn parse_geometry(text: &str) -> Result<Vec<Patch>> {
    let doc: GeometryDoc = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    doc.patch.iter().map(Patch::from_desc).collect()
}

pub fn write_geometry(patches: &[Patch]) -> String {
    let doc = GeometryDoc { patch: patches.iter().map(Patch::to_desc).collect() };
    toml::to_string(&doc).expect("geometry serializes")
}

pub fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn gauss_newton_step(tan: &[Point], r: &Point) -> Vec<f64> {
    let nf = tan.len();
    let dot3 = |a: &Point, b: &Point| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    if nf == 1 {
        let n = dot3(&tan[0], &tan[0]);
        return vec![if n > 0.0 { dot3(&tan[0], r) / n } else { 0.0 }];
    }
    let a = dot3(&tan[0], &tan[0]);
    let b = dot3(&tan[0], &tan[1]);
    let c = dot3(&tan[1], &tan[1]);
    let r0 = dot3(&tan[0], r);
    let r1 = dot3(&tan[1], r);
    let det = a * c - b * b;
    if det.abs() <= 1e-300 {
        return vec![0.0, 0.0];
    }
    vec![(c * r0 - b * r1) / det, (a * r1 - b * r0) / det]
}

/// Determinant and inverse of the leading `dim x dim` block.
pub fn inverse(m: &Mat3, dim: usize) -> (f64, Mat3) {
    let mut inv = [[0.0; 3]; 3];
    if dim == 2 {
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        inv[0][0] = m[1][1] / det;
        inv[0][1] = -m[0][1] / det;
        inv[1][0] = -m[1][0] / det;
        inv[1][1] = m[0][0] / det;
        return (det, inv);
    }
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    for i in 0..3 {
        for j in 0..3 {
            let (i1, i2) = ((j + 1) % 3, (j + 2) % 3);
            let (j1, j2) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[i1][j1] * m[i2][j2] - m[i1][j2] * m[i2][j1]) / det;
        }
    }
    (det, inv)
}

/// Planar or spatial NURBS curve.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub kv: KnotVector,
    pub ctrl: Vec<Point>,
    pub weights: Vec<f64>,
}

impl Curve {
    pub fn eval(&self, t: f64) -> Result<Point> {
        let (f, v) = self.kv.eval_basis(t)?;
        let mut w = 0.0;
        let mut x = [0.0; 3];
        for (j, b) in v.iter().enumerate() {
            let i = f + j;
            let bw = b * self.weights[i];
            w += bw;
            for a in 0..3 {
                x[a] += bw * self.ctrl[i][a];
            }
        }
        Ok([x[0] / w, x[1] / w, x[2] / w])
    }

    /// Polynomial curve collocating `f` at the Greville points of `kv`.
    pub fn interpolate(kv: KnotVector, f: impl Fn(f64) -> Point) -> Result<Self> {
        let pts = kv.greville();
        let n = pts.len();
        let mut g = DenseMatrix::zeros(n, n);
        for (r, &t) in pts.iter().enumerate() {
            let (first, v) = kv.eval_basis(t)?;
            for (j, b) in v.iter().enumerate() {
                g[(r, first + j)] = *b;
            }
        }
        let lu = g.lu()?;
        let mut ctrl = vec![[0.0; 3]; n];
        for a in 0..3 {
            let rhs: Vec<f64> = pts.iter().map(|&t| f(t)[a]).collect();
            let c = lu.solve(&rhs);
            for i in 0..n {
                ctrl[i][a] = c[i];
            }
        }
        Ok(Curve { kv, ctrl, weights: vec![1.0; n] })
    }

    /// Straight segment represented in `kv` with unit weights.
    pub fn line(a: Point, b: Point, kv: KnotVector) -> Self {
        let ctrl = kv
            .greville()
            .iter()
            .map(|&t| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])])
            .collect();
        let n = kv.num_basis();
        Curve { kv, ctrl, weights: vec![1.0; n] }
    }

    /// Circular arc of radius `r` about `c` from `th0` to `th1` (at most a quarter turn).
    pub fn arc(c: Point, r: f64, th0: f64, th1: f64) -> Self {
        let half = 0.5 * (th1 - th0);
        let w = half.cos();
        let mid = 0.5 * (th0 + th1);
        let ctrl = vec![
            [c[0] + r * th0.cos(), c[1] + r * th0.sin(), 0.0],
            [c[0] + r / w * mid.cos(), c[1] + r / w * mid.sin(), 0.0],
            [c[0] + r * th1.cos(), c[1] + r * th1.sin(), 0.0],
        ];
        Curve { kv: KnotVector::open_uniform(2, 1), ctrl, weights: vec![1.0, w, 1.0] }
    }

    /// Straight segment from `a` to `b` with the rational weights of an arc of
    /// the given half angle, so it can be ruled against that arc.
    pub fn segment_like_arc(a: Point, b: Point, half_angle: f64) -> Self {
        let mid = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (a[2] + b[2])];
        Curve { kv: KnotVector::open_uniform(2, 1), ctrl: vec![a, mid, b], weights: vec![1.0, half_angle.cos(), 1.0] }
    }
}

/// Axis-aligned box `[lo, hi]` as a multilinear patch (2D or 3D).
pub fn make_box(lo: &[f64], hi: &[f64]) -> Patch {
    let dim = lo.len();
    let kv = vec![KnotVector::open_uniform(1, 1); dim];
    let mut ctrl = Vec::new();
    for c in 0..1usize << dim {
        let mut p = [0.0; 3];
        for d in 0..dim {
            p[d] = if c >> d & 1 == 1 { hi[d] } else { lo[d] };
        }
        ctrl.push(p);
    }
    Patch::new(kv, ctrl, vec![1.0; 1 << dim]).expect("box patch")
}

/// Ring sector `r_in <= r <= r_out`, `th0 <= theta <= th1`; first direction radial.
pub fn make_ring_sector(r_in: f64, r_out: f64, th0: f64, th1: f64) -> Result<Patch> {
    if !(r_in > 0.0 && r_out > r_in) {
        return Err(Error::InvalidGeometry("ring sector needs 0 < r_in < r_out".into()));
    }
    if !(th1 > th0 && th1 - th0 <= std::f64::consts::FRAC_PI_2 + 1e-12) {
        return Err(Error::InvalidGeometry("ring sector angle must lie in (0, pi/2]".into()));
    }
    let inner = Curve::arc([0.0; 3], r_in, th0, th1);
    let outer = Curve::arc([0.0; 3], r_out, th0, th1);
    make_ruled(&inner, &outer)
}

/// Ruled patch linear in the first direction between `c0` (at 0) and `c1` (at 1).
pub fn make_ruled(c0: &Curve, c1: &Curve) -> Result<Patch> {
    if c0.kv != c1.kv || c0.weights.iter().zip(&c1.weights).any(|(a, b)| (a - b).abs() > 1e-14) {
        return Err(Error::InvalidGeometry("ruled curves need the same knots and weights".into()));
    }
    let mut ctrl = Vec::new();
    let mut weights = Vec::new();
    for j in 0..c0.ctrl.len() {
        ctrl.push(c0.ctrl[j]);
        ctrl.push(c1.ctrl[j]);
        weights.push(c0.weights[j]);
        weights.push(c1.weights[j]);
    }
    Patch::new(vec![KnotVector::open_uniform(1, 1), c0.kv.clone()], ctrl, weights)
}

/// Bilinearly blended Coons patch of four polynomial Bezier curves of one degree.
/// `bottom`/`top` run along the first direction, `left`/`right` along the second.
pub fn make_coons(bottom: &Curve, top: &Curve, left: &Curve, right: &Curve) -> Result<Patch> {
    let p = bottom.kv.degree();
    for c in [bottom, top, left, right] {
        if c.kv != KnotVector::open_uniform(p, 1) || c.weights.iter().any(|&w| w != 1.0) {
            return Err(Error::InvalidGeometry("Coons patch needs polynomial Bezier curves of one degree".into()));
        }
    }
    let corners_match = dist(&bottom.ctrl[0], &left.ctrl[0]) < 1e-12
        && dist(&bottom.ctrl[p], &right.ctrl[0]) < 1e-12
        && dist(&top.ctrl[0], &left.ctrl[p]) < 1e-12
        && dist(&top.ctrl[p], &right.ctrl[p]) < 1e-12;
    if !corners_match {
        return Err(Error::InvalidGeometry("Coons boundary curves do not meet".into()));
    }
    let mut ctrl = Vec::new();
    for j in 0..=p {
        let v = j as f64 / p as f64;
        for i in 0..=p {
            let u = i as f64 / p as f64;
            let mut x = [0.0; 3];
            for a in 0..3 {
                let ruled_v = (1.0 - v) * bottom.ctrl[i][a] + v * top.ctrl[i][a];
                let ruled_u = (1.0 - u) * left.ctrl[j][a] + u * right.ctrl[j][a];
                let bilinear = (1.0 - u) * (1.0 - v) * bottom.ctrl[0][a]
                    + u * (1.0 - v) * bottom.ctrl[p][a]
                    + (1.0 - u) * v * top.ctrl[0][a]
                    + u * v * top.ctrl[p][a];
                x[a] = ruled_v + ruled_u - bilinear;
            }
            ctrl.push(x);
        }
    }
    let kv = KnotVector::open_uniform(p, 1);
    Patch::new(vec![kv.clone(), kv], ctrl, vec![1.0; (p + 1) * (p + 1)])
}

/// Extrudes a planar patch linearly in `z` from `z0` to `z1` (third direction).
pub fn make_extruded(base: &Patch, z0: f64, z1: f64) -> Result<Patch> {
    if base.dim() != 2 {
        return Err(Error::InvalidGeometry("extrusion needs a planar patch".into()));
    }
    let mut ctrl = Vec::new();
    let mut weights = Vec::new();
    for z in [z0, z1] {
        for (c, &w) in base.control_points().iter().zip(base.weights()) {
            ctrl.push([c[0], c[1], z]);
            weights.push(w);
        }
    }
    Patch::new(vec![base.knots(0).clone(), base.knots(1).clone(), KnotVector::open_uniform(1, 1)], ctrl, weights)
}
