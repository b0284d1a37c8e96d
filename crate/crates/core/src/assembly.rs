//! Per-patch Galerkin assembly for `-div(nu grad u) + b.grad u + alpha u = f`:
//! volume matrices, boundary integrals, Dirichlet data and residual rows.

use crate::bspline::gauss_legendre;
use crate::error::{Error, Result};
use crate::geometry::{Patch, PhysEval, Point, Side};
use crate::linalg::{CsrMatrix, DenseMatrix};
use std::sync::Arc;

pub type ScalarFn = Arc<dyn Fn(&Point) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&Point) -> Point + Send + Sync>;
/// Neumann datum `nu du/dn` as a function of position and outward unit normal.
pub type FluxFn = Arc<dyn Fn(&Point, &Point) -> f64 + Send + Sync>;

pub fn constant(c: f64) -> ScalarFn {
    Arc::new(move |_| c)
}

/// Boundary tag of one patch side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryKind {
    Dirichlet,
    Neumann,
    Interface,
}

/// Coefficients of the operator on one patch.
#[derive(Clone)]
pub struct Coefficients {
    pub nu: ScalarFn,
    pub beta: Option<VectorFn>,
    pub alpha: ScalarFn,
    pub f: ScalarFn,
}

impl Coefficients {
    pub fn poisson(f: ScalarFn) -> Self {
        Self { nu: constant(1.0), beta: None, alpha: constant(0.0), f }
    }
}

/// Assembled stiffness matrix and load vector of one patch.
#[derive(Clone, Debug)]
pub struct PatchSystem {
    pub a: CsrMatrix,
    pub f: Vec<f64>,
}

/// Physical evaluation at a quadrature point with its integration weight.
pub struct QuadPoint {
    pub eval: PhysEval,
    pub weight: f64,
}

/// Volume quadrature points of every element, `n_per_dir[d]` Gauss points per span.
pub fn volume_quadrature(patch: &Patch, n_per_dir: &[usize]) -> Vec<Vec<QuadPoint>> {
    let dim = patch.dim();
    let rules: Vec<(Vec<f64>, Vec<f64>)> = (0..dim).map(|d| gauss_legendre(n_per_dir[d])).collect();
    let elems: Vec<Vec<(usize, f64, f64)>> = (0..dim).map(|d| patch.knots(d).elements()).collect();
    let ecount: Vec<usize> = elems.iter().map(Vec::len).collect();
    let total: usize = ecount.iter().product();
    let mut out = Vec::with_capacity(total);
    for e in 0..total {
        let mut r = e;
        let mut el = [(0usize, 0.0, 0.0); 3];
        for d in 0..dim {
            el[d] = elems[d][r % ecount[d]];
            r /= ecount[d];
        }
        let mut spans = [0usize; 3];
        for d in 0..dim {
            spans[d] = el[d].0;
        }
        let qcount: Vec<usize> = n_per_dir[..dim].to_vec();
        let qtotal: usize = qcount.iter().product();
        let mut pts = Vec::with_capacity(qtotal);
        for q in 0..qtotal {
            let mut r = q;
            let mut xi = [0.0; 3];
            let mut w = 1.0;
            for d in 0..dim {
                let k = r % qcount[d];
                r /= qcount[d];
                let (a, b) = (el[d].1, el[d].2);
                xi[d] = 0.5 * (a + b) + 0.5 * (b - a) * rules[d].0[k];
                w *= 0.5 * (b - a) * rules[d].1[k];
            }
            let eval = patch.physical(patch.eval_basis_in(&spans, &xi[..dim]));
            let weight = w * eval.det.abs();
            pts.push(QuadPoint { eval, weight });
        }
        out.push(pts);
    }
    out
}

/// Face quadrature point with outward unit normal and surface weight.
pub struct FacePoint {
    pub eval: PhysEval,
    pub normal: Point,
    pub weight: f64,
    pub s: Vec<f64>,
}

/// Quadrature on side `side`, `n_per_dir` Gauss points per span of each free direction.
pub fn face_quadrature(patch: &Patch, side: Side, n_per_dir: usize) -> Vec<FacePoint> {
    let dim = patch.dim();
    let free = patch.free_dirs(side);
    let (gx, gw) = gauss_legendre(n_per_dir);
    let elems: Vec<Vec<(usize, f64, f64)>> = free.iter().map(|&d| patch.knots(d).elements()).collect();
    let ecount: Vec<usize> = elems.iter().map(Vec::len).collect();
    let total: usize = ecount.iter().product();
    let fixed_span = {
        let kv = patch.knots(side.dir);
        kv.find_span(side.value()).expect("endpoint lies in the domain")
    };
    let mut out = Vec::new();
    for e in 0..total {
        let mut r = e;
        let el: Vec<(usize, f64, f64)> = (0..free.len())
            .map(|k| {
                let v = elems[k][r % ecount[k]];
                r /= ecount[k];
                v
            })
            .collect();
        let qtotal = n_per_dir.pow(free.len() as u32);
        for q in 0..qtotal {
            let mut r = q;
            let mut s = Vec::with_capacity(free.len());
            let mut w = 1.0;
            for (a, b) in el.iter().map(|e| (e.1, e.2)) {
                let k = r % n_per_dir;
                r /= n_per_dir;
                s.push(0.5 * (a + b) + 0.5 * (b - a) * gx[k]);
                w *= 0.5 * (b - a) * gw[k];
            }
            let xi = patch.face_param(side, &s);
            let mut spans = [0usize; 3];
            spans[side.dir] = fixed_span;
            for (k, &d) in free.iter().enumerate() {
                spans[d] = el[k].0;
            }
            let eval = patch.physical(patch.eval_basis_in(&spans, &xi[..dim]));
            // Nanson: dGamma = |det J| |J^{-T} e_dir| dGamma_hat.
            let mut nvec = [0.0; 3];
            for a in 0..dim {
                nvec[a] = eval.inv_t[a][side.dir];
            }
            let len = (nvec[0] * nvec[0] + nvec[1] * nvec[1] + nvec[2] * nvec[2]).sqrt();
            let sign = if side.end == 1 { 1.0 } else { -1.0 };
            let normal = [sign * nvec[0] / len, sign * nvec[1] / len, sign * nvec[2] / len];
            let weight = w * eval.det.abs() * len;
            out.push(FacePoint { eval, normal, weight, s });
        }
    }
    out
}

fn default_points(patch: &Patch) -> Vec<usize> {
    (0..patch.dim()).map(|d| patch.degree(d) + 1).collect()
}

/// Stiffness matrix and load vector of the volume terms.
pub fn assemble_patch(patch: &Patch, c: &Coefficients) -> PatchSystem {
    let n = patch.num_dofs();
    let mut trip = Vec::new();
    let mut f = vec![0.0; n];
    let quad = volume_quadrature(patch, &default_points(patch));
    for elem in &quad {
        let nb = elem[0].eval.indices.len();
        let mut ke = vec![0.0; nb * nb];
        for qp in elem {
            let e = &qp.eval;
            let nu = (c.nu)(&e.x);
            let al = (c.alpha)(&e.x);
            let be = c.beta.as_ref().map(|b| b(&e.x));
            let fx = (c.f)(&e.x);
            for i in 0..nb {
                f[e.indices[i]] += qp.weight * fx * e.values[i];
                let gi = e.grads[i];
                let vi = e.values[i];
                for j in 0..nb {
                    let gj = e.grads[j];
                    let mut v = nu * (gi[0] * gj[0] + gi[1] * gj[1] + gi[2] * gj[2]) + al * vi * e.values[j];
                    if let Some(b) = be {
                        v += (b[0] * gj[0] + b[1] * gj[1] + b[2] * gj[2]) * vi;
                    }
                    ke[i * nb + j] += qp.weight * v;
                }
            }
        }
        let idx = &elem[0].eval.indices;
        for i in 0..nb {
            for j in 0..nb {
                trip.push((idx[i], idx[j], ke[i * nb + j]));
            }
        }
    }
    PatchSystem { a: CsrMatrix::from_triplets(n, n, trip), f }
}

/// Mass matrix `int phi_j phi_i` of the patch.
pub fn assemble_mass(patch: &Patch) -> CsrMatrix {
    let n = patch.num_dofs();
    let mut trip = Vec::new();
    for elem in volume_quadrature(patch, &default_points(patch)) {
        let nb = elem[0].eval.indices.len();
        let mut me = vec![0.0; nb * nb];
        for qp in &elem {
            for i in 0..nb {
                for j in 0..nb {
                    me[i * nb + j] += qp.weight * qp.eval.values[i] * qp.eval.values[j];
                }
            }
        }
        let idx = &elem[0].eval.indices;
        for i in 0..nb {
            for j in 0..nb {
                trip.push((idx[i], idx[j], me[i * nb + j]));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, trip)
}

fn face_points(patch: &Patch, side: Side) -> usize {
    patch.free_dirs(side).iter().map(|&d| patch.degree(d) + 1).max().unwrap_or(1)
}

/// Interface masses integrate products of two traces against a rational
/// surface element, so they get extra points.
fn face_mass_points(patch: &Patch, side: Side) -> usize {
    face_points(patch, side) + 6
}

/// Adds `int_side h phi_i` to `f`.
pub fn assemble_neumann(patch: &Patch, side: Side, h: &FluxFn, f: &mut [f64]) {
    for fp in face_quadrature(patch, side, face_points(patch, side)) {
        let hv = h(&fp.eval.x, &fp.normal);
        for (k, &i) in fp.eval.indices.iter().enumerate() {
            f[i] += fp.weight * hv * fp.eval.values[k];
        }
    }
}

/// Interface mass matrix `int_gamma mu_j mu_i` in face-local numbering.
pub fn face_mass(patch: &Patch, side: Side) -> DenseMatrix {
    let nf = patch.face_size(side);
    let mut m = DenseMatrix::zeros(nf, nf);
    for fp in face_quadrature(patch, side, face_mass_points(patch, side)) {
        let loc: Vec<(usize, f64)> = fp
            .eval
            .indices
            .iter()
            .zip(&fp.eval.values)
            .filter_map(|(&i, &v)| patch.face_local(side, i).map(|l| (l, v)))
            .collect();
        for &(a, va) in &loc {
            for &(b, vb) in &loc {
                m[(a, b)] += fp.weight * va * vb;
            }
        }
    }
    m
}

/// Measure (length or area) of a side.
pub fn face_measure(patch: &Patch, side: Side) -> f64 {
    face_quadrature(patch, side, face_mass_points(patch, side)).iter().map(|fp| fp.weight).sum()
}

/// Boundary correction rows `C_ij = -int_G nu dphi_j/dn phi_i` for the
/// face-local rows `i` on the relative boundary of `side`; other rows are zero.
/// `G` is the patch boundary minus `side` and minus the Neumann sides.
pub fn correction_matrix(patch: &Patch, side: Side, nu: &ScalarFn, kinds: &[BoundaryKind]) -> CsrMatrix {
    let nf = patch.face_size(side);
    let n = patch.num_dofs();
    let face_dofs = patch.face_dofs(side);
    let mut row_of = std::collections::HashMap::new();
    for (k, &i) in face_dofs.iter().enumerate() {
        if !patch.face_local_is_interior(side, k) {
            row_of.insert(i, k);
        }
    }
    let mut trip = Vec::new();
    for other in Side::all(patch.dim()) {
        if other == side || kinds[other.id()] == BoundaryKind::Neumann {
            continue;
        }
        for fp in face_quadrature(patch, other, face_points(patch, other)) {
            let e = &fp.eval;
            let nuv = nu(&e.x);
            let dn: Vec<f64> =
                e.grads.iter().map(|g| g[0] * fp.normal[0] + g[1] * fp.normal[1] + g[2] * fp.normal[2]).collect();
            for (a, &i) in e.indices.iter().enumerate() {
                let Some(&row) = row_of.get(&i) else { continue };
                let vi = e.values[a];
                if vi == 0.0 {
                    continue;
                }
                for (b, &j) in e.indices.iter().enumerate() {
                    trip.push((row, j, -fp.weight * nuv * dn[b] * vi));
                }
            }
        }
    }
    CsrMatrix::from_triplets(nf, n, trip)
}

/// Face-local coefficients interpolating `g` at the face Greville points.
pub fn dirichlet_face_values(patch: &Patch, side: Side, g: &ScalarFn) -> Result<Vec<f64>> {
    let nodes = patch.face_greville(side);
    let gmat = patch.face_collocation(side)?;
    let mut rhs = Vec::with_capacity(nodes.len());
    for s in &nodes {
        let xi = patch.face_param(side, s);
        rhs.push(g(&patch.map(&xi[..patch.dim()])?));
    }
    Ok(gmat.lu()?.solve(&rhs))
}

/// Dirichlet values on every Dirichlet side, keyed by patch dof.
pub fn dirichlet_values(patch: &Patch, kinds: &[BoundaryKind], g: &ScalarFn) -> Result<Vec<Option<f64>>> {
    let mut vals = vec![None; patch.num_dofs()];
    for side in Side::all(patch.dim()) {
        if kinds[side.id()] != BoundaryKind::Dirichlet {
            continue;
        }
        let v = dirichlet_face_values(patch, side, g)?;
        for (k, &i) in patch.face_dofs(side).iter().enumerate() {
            vals[i].get_or_insert(v[k]);
        }
    }
    Ok(vals)
}

/// Exact solution with gradient, used for error norms.
pub trait ExactSolution: Send + Sync {
    fn value(&self, x: &Point) -> f64;
    fn gradient(&self, x: &Point) -> Point;
}

/// Squared H1 error and squared H1 norm of the exact solution on one patch,
/// with `2 (p + 1)` Gauss points per span.
pub fn h1_error_sq(patch: &Patch, u: &[f64], exact: &dyn ExactSolution) -> Result<(f64, f64)> {
    if u.len() != patch.num_dofs() {
        return Err(Error::Dimension(format!("{} coefficients for {} dofs", u.len(), patch.num_dofs())));
    }
    let npts: Vec<usize> = (0..patch.dim()).map(|d| 2 * (patch.degree(d) + 1)).collect();
    let mut err = 0.0;
    let mut norm = 0.0;
    for elem in volume_quadrature(patch, &npts) {
        for qp in elem {
            let e = &qp.eval;
            let mut v = 0.0;
            let mut g = [0.0; 3];
            for (k, &i) in e.indices.iter().enumerate() {
                v += u[i] * e.values[k];
                for a in 0..3 {
                    g[a] += u[i] * e.grads[k][a];
                }
            }
            let ue = exact.value(&e.x);
            let ge = exact.gradient(&e.x);
            let dg = (g[0] - ge[0]).powi(2) + (g[1] - ge[1]).powi(2) + (g[2] - ge[2]).powi(2);
            err += qp.weight * ((v - ue).powi(2) + dg);
            norm += qp.weight * (ue * ue + ge[0] * ge[0] + ge[1] * ge[1] + ge[2] * ge[2]);
        }
    }
    Ok((err, norm))
}
