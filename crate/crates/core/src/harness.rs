//! Built-in test cases, exact solutions, broken-norm errors, convergence
//! sweeps and report files.

use crate::assembly::{constant, h1_error_sq, BoundaryKind, Coefficients, ExactSolution};
use crate::bspline::KnotVector;
use crate::coupling::{build_adjacency, measure_gap, FaceRef, InterfacePair};
use crate::error::{Error, Result};
use crate::geometry::{
    make_box, make_coons, make_extruded, make_ring_sector, make_ruled, Curve, Patch, PatchDesc, Point, Side,
};
use crate::solver::{solve_monolithic, KrylovMethod, KrylovReport, Precond, Problem, SchurSystem};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

// ---------------------------------------------------------------- exact solutions

/// Parameters of the Kellogg solution `r^gamma mu(theta)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kellogg {
    pub gamma: f64,
    pub r: f64,
    pub rho: f64,
    pub sigma: f64,
}

fn kellogg_residual(gamma: f64, rho: f64, sigma: f64) -> (f64, [f64; 2]) {
    let g = gamma;
    let r = -((FRAC_PI_2 - sigma) * g).tan() / (rho * g).tan();
    let f1 = 1.0 / r + (rho * g).tan() / (sigma * g).tan();
    let f2 = r + (sigma * g).tan() / ((FRAC_PI_2 - rho) * g).tan();
    (r, [f1 * r.abs().max(1.0), f2 / r.abs().max(1.0)])
}

fn kellogg_bounds(gamma: f64) -> ((f64, f64), (f64, f64)) {
    let g = gamma;
    let rho = ((PI * g - PI).max(0.0) / (2.0 * g), (g * PI).min(PI) / (2.0 * g));
    let sig = (-(PI).min(2.0 * PI - g * PI) / (2.0 * g), -(PI - g * PI).max(0.0) / (2.0 * g));
    (rho, sig)
}

/// Solves the Kellogg compatibility system for `gamma` in (0, 2), `gamma != 1`.
pub fn kellogg_parameters(gamma: f64) -> Result<Kellogg> {
    if !(gamma > 0.0 && gamma < 2.0) || (gamma - 1.0).abs() < 1e-12 {
        return Err(Error::InvalidArgument(format!("Kellogg gamma must lie in (0, 2) without 1, got {gamma}")));
    }
    let ((r0, r1), (s0, s1)) = kellogg_bounds(gamma);
    let norm = |v: [f64; 2]| v[0].hypot(v[1]);
    let admissible =
        |rho: f64, sigma: f64, r: f64| rho > r0 && rho < r1 && sigma > s0 && sigma < s1 && r > 0.0 && r.is_finite();
    let n = 200;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 1..n {
        let rho = r0 + (r1 - r0) * i as f64 / n as f64;
        for j in 1..n {
            let sigma = s0 + (s1 - s0) * j as f64 / n as f64;
            let (r, res) = kellogg_residual(gamma, rho, sigma);
            let v = norm(res);
            if admissible(rho, sigma, r) && v < best.0 {
                best = (v, rho, sigma);
            }
        }
    }
    let (_, mut rho, mut sigma) = best;
    for _ in 0..100 {
        let (_, f) = kellogg_residual(gamma, rho, sigma);
        if norm(f) <= 1e-14 {
            break;
        }
        let h = 1e-7;
        let (_, fr) = kellogg_residual(gamma, rho + h, sigma);
        let (_, fl) = kellogg_residual(gamma, rho - h, sigma);
        let (_, fu) = kellogg_residual(gamma, rho, sigma + h);
        let (_, fd) = kellogg_residual(gamma, rho, sigma - h);
        let j = [
            [(fr[0] - fl[0]) / (2.0 * h), (fu[0] - fd[0]) / (2.0 * h)],
            [(fr[1] - fl[1]) / (2.0 * h), (fu[1] - fd[1]) / (2.0 * h)],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let dr = (j[1][1] * f[0] - j[0][1] * f[1]) / det;
        let ds = (j[0][0] * f[1] - j[1][0] * f[0]) / det;
        let mut t = 1.0;
        loop {
            let (r, fnew) = kellogg_residual(gamma, rho - t * dr, sigma - t * ds);
            if admissible(rho - t * dr, sigma - t * ds, r) && norm(fnew) < norm(f) {
                rho -= t * dr;
                sigma -= t * ds;
                break;
            }
            t *= 0.5;
            if t < 1e-10 {
                break;
            }
        }
        if t < 1e-10 {
            break;
        }
    }
    let (r, f) = kellogg_residual(gamma, rho, sigma);
    if !(norm(f) <= 1e-12) || !admissible(rho, sigma, r) {
        return Err(Error::InvalidArgument(format!(
            "Kellogg system did not converge for gamma = {gamma} (residual {:.3e})",
            norm(f)
        )));
    }
    Ok(Kellogg { gamma, r, rho, sigma })
}

impl Kellogg {
    /// Angular factor and its derivative, `theta` in [0, 2 pi].
    pub fn mu(&self, theta: f64) -> (f64, f64) {
        let g = self.gamma;
        let (a, shift) = if theta <= FRAC_PI_2 {
            (((FRAC_PI_2 - self.sigma) * g).cos(), FRAC_PI_2 - self.rho)
        } else if theta <= PI {
            ((self.rho * g).cos(), PI - self.sigma)
        } else if theta <= 1.5 * PI {
            ((self.sigma * g).cos(), PI + self.rho)
        } else {
            (((FRAC_PI_2 - self.rho) * g).cos(), 1.5 * PI + self.sigma)
        };
        let arg = (theta - shift) * g;
        (a * arg.cos(), -a * g * arg.sin())
    }
}

/// Closed-form solutions used by the built-in cases.
#[derive(Clone, Debug, PartialEq)]
pub enum Exact {
    /// `sin(1.5 pi x) sin(3 pi y)`.
    RingSine,
    /// `exp(-3 (x-1)^2 - 4 (y-0.6)^2) (1 + sin(3 pi x) cos(3 pi y))`.
    Gaussian,
    Kellogg(Kellogg),
    /// `sin(pi x) sin(pi y) cos(2 pi z)`.
    CylinderSine,
    /// `r^beta sin(beta theta) sin(beta z)` about the re-entrant edge, `theta` from the face `x = 0, y < 0`.
    Reentrant {
        beta: f64,
    },
    /// `c0 + c . x`.
    Affine {
        c0: f64,
        c: [f64; 3],
    },
}

impl Exact {
    pub fn value(&self, x: &Point) -> f64 {
        match self {
            Exact::RingSine => (1.5 * PI * x[0]).sin() * (3.0 * PI * x[1]).sin(),
            Exact::Gaussian => {
                let e = (-3.0 * (x[0] - 1.0).powi(2) - 4.0 * (x[1] - 0.6).powi(2)).exp();
                e * (1.0 + (3.0 * PI * x[0]).sin() * (3.0 * PI * x[1]).cos())
            }
            Exact::Kellogg(k) => {
                let (r, th) = polar(x);
                r.powf(k.gamma) * k.mu(th).0
            }
            Exact::CylinderSine => (PI * x[0]).sin() * (PI * x[1]).sin() * (2.0 * PI * x[2]).cos(),
            Exact::Reentrant { beta } => {
                let (r, th) = reentrant_polar(x);
                r.powf(*beta) * (beta * th).sin() * (beta * x[2]).sin()
            }
            Exact::Affine { c0, c } => c0 + c[0] * x[0] + c[1] * x[1] + c[2] * x[2],
        }
    }

    pub fn gradient(&self, x: &Point) -> Point {
        match self {
            Exact::RingSine => {
                let (a, b) = (1.5 * PI, 3.0 * PI);
                [a * (a * x[0]).cos() * (b * x[1]).sin(), b * (a * x[0]).sin() * (b * x[1]).cos(), 0.0]
            }
            Exact::Gaussian => {
                let e = (-3.0 * (x[0] - 1.0).powi(2) - 4.0 * (x[1] - 0.6).powi(2)).exp();
                let k = 3.0 * PI;
                let s = 1.0 + (k * x[0]).sin() * (k * x[1]).cos();
                let sx = k * (k * x[0]).cos() * (k * x[1]).cos();
                let sy = -k * (k * x[0]).sin() * (k * x[1]).sin();
                [e * (-6.0 * (x[0] - 1.0) * s + sx), e * (-8.0 * (x[1] - 0.6) * s + sy), 0.0]
            }
            Exact::Kellogg(k) => {
                let (r, th) = polar(x);
                let (m, dm) = k.mu(th);
                let gr = k.gamma * r.powf(k.gamma - 1.0) * m;
                let gt = r.powf(k.gamma - 1.0) * dm;
                let (c, s) = (th.cos(), th.sin());
                [gr * c - gt * s, gr * s + gt * c, 0.0]
            }
            Exact::CylinderSine => {
                let (sx, cx) = (PI * x[0]).sin_cos();
                let (sy, cy) = (PI * x[1]).sin_cos();
                let (sz, cz) = (2.0 * PI * x[2]).sin_cos();
                [PI * cx * sy * cz, PI * sx * cy * cz, -2.0 * PI * sx * sy * sz]
            }
            Exact::Reentrant { beta } => {
                let b = *beta;
                let (r, th) = reentrant_polar(x);
                let phi = x[1].atan2(x[0]);
                let (sz, cz) = (b * x[2]).sin_cos();
                let gr = b * r.powf(b - 1.0) * (b * th).sin() * sz;
                let gt = b * r.powf(b - 1.0) * (b * th).cos() * sz;
                let (c, s) = (phi.cos(), phi.sin());
                [gr * c - gt * s, gr * s + gt * c, r.powf(b) * (b * th).sin() * b * cz]
            }
            Exact::Affine { c, .. } => *c,
        }
    }

    /// Laplacian away from coefficient jumps and singular points.
    pub fn laplacian(&self, x: &Point) -> f64 {
        match self {
            Exact::RingSine => -(2.25 + 9.0) * PI * PI * self.value(x),
            Exact::Gaussian => {
                let e = (-3.0 * (x[0] - 1.0).powi(2) - 4.0 * (x[1] - 0.6).powi(2)).exp();
                let k = 3.0 * PI;
                let (sx0, cx0) = (k * x[0]).sin_cos();
                let (sy0, cy0) = (k * x[1]).sin_cos();
                let s = 1.0 + sx0 * cy0;
                let ex = -6.0 * (x[0] - 1.0);
                let ey = -8.0 * (x[1] - 0.6);
                let lap_e = ex * ex - 6.0 + ey * ey - 8.0;
                let sx = k * cx0 * cy0;
                let sy = -k * sx0 * sy0;
                let lap_s = -2.0 * k * k * sx0 * cy0;
                e * (lap_e * s + 2.0 * (ex * sx + ey * sy) + lap_s)
            }
            Exact::Kellogg(_) => 0.0,
            Exact::CylinderSine => -6.0 * PI * PI * self.value(x),
            Exact::Reentrant { beta } => -beta * beta * self.value(x),
            Exact::Affine { .. } => 0.0,
        }
    }

    fn name(&self) -> String {
        match self {
            Exact::RingSine => "ring_sine".into(),
            Exact::Gaussian => "gaussian".into(),
            Exact::Kellogg(k) => format!("kellogg(gamma={})", k.gamma),
            Exact::CylinderSine => "cylinder_sine".into(),
            Exact::Reentrant { beta } => format!("reentrant(beta={beta})"),
            Exact::Affine { c0, c } => format!("affine({c0},{},{},{})", c[0], c[1], c[2]),
        }
    }
}

impl ExactSolution for Exact {
    fn value(&self, x: &Point) -> f64 {
        Exact::value(self, x)
    }
    fn gradient(&self, x: &Point) -> Point {
        Exact::gradient(self, x)
    }
}

fn polar(x: &Point) -> (f64, f64) {
    let mut th = x[1].atan2(x[0]);
    if th < 0.0 {
        th += 2.0 * PI;
    }
    (x[0].hypot(x[1]), th)
}

fn reentrant_polar(x: &Point) -> (f64, f64) {
    let mut th = x[1].atan2(x[0]) + FRAC_PI_2;
    if th < 0.0 {
        th += 2.0 * PI;
    }
    (x[0].hypot(x[1]), th)
}

// ---------------------------------------------------------------- cases

/// A fully specified problem together with its reference solution.
#[derive(Clone)]
pub struct Case {
    pub name: String,
    pub degrees: Vec<usize>,
    pub nbar: usize,
    pub problem: Problem,
    pub exact: Option<Exact>,
    pub nu: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Constant source when no exact solution is given.
    pub source: f64,
    /// Preconditioner used when the configuration does not name one.
    pub default_precond: Precond,
}

/// Variant selectors of the built-in cases.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseOptions {
    /// One degree, or one per role as the case defines.
    pub p: Vec<usize>,
    pub nbar: usize,
    pub gamma: f64,
    pub beta: f64,
    /// Test #2: interpolate the interface on the final knots.
    pub variable_gap: bool,
    /// Kellogg master configuration: `a`, `b` or `c`.
    pub masters: char,
}

impl Default for CaseOptions {
    fn default() -> Self {
        CaseOptions { p: vec![2], nbar: 8, gamma: 0.6, beta: 2.0 / 3.0, variable_gap: false, masters: 'b' }
    }
}

pub const BUILTIN_CASES: [&str; 9] = [
    "t1_balanced",
    "t1_master_refined",
    "t1_slave_refined",
    "t2_nonwatertight",
    "t3_ring7",
    "t4_kellogg",
    "t5_nine_nonwatertight",
    "t6_3d_smoke",
    "t7_reentrant_smoke",
];

/// One-line description of every built-in case.
pub fn builtin_cases() -> Vec<(&'static str, &'static str)> {
    vec![
        ("t1_balanced", "quarter annulus, 2 patches, (n/2 x n) | (n/2 x n+1) elements"),
        ("t1_master_refined", "quarter annulus, 2 patches, (n-1 x 2(n-1)) | (n/2 x n) elements"),
        ("t1_slave_refined", "quarter annulus, 2 patches, (n/2 x n) | (n x 2n+1) elements"),
        ("t2_nonwatertight", "rectangle split by a sinusoid, non-watertight RL-RBF coupling"),
        ("t3_ring7", "quarter annulus, 7 watertight patches"),
        ("t4_kellogg", "Kellogg checkerboard coefficient, 4 patches"),
        ("t5_nine_nonwatertight", "3 x 3 patches with sinusoidal non-watertight interfaces"),
        ("t6_3d_smoke", "3D annular cylinder, 4 patches"),
        ("t7_reentrant_smoke", "3D re-entrant corner, 4 patches"),
    ]
}

fn side(dir: usize, end: usize) -> Side {
    Side { dir, end }
}

fn face(patch: usize, dir: usize, end: usize) -> FaceRef {
    FaceRef { patch, side: side(dir, end) }
}

fn pair(master: FaceRef, slave: FaceRef, watertight: bool) -> InterfacePair {
    InterfacePair { master, slave, watertight, rbf_radius: None }
}

/// Boundary tags: Dirichlet everywhere except the interface sides.
fn tags(patches: &[Patch], pairs: &[InterfacePair]) -> Vec<Vec<BoundaryKind>> {
    let mut out: Vec<Vec<BoundaryKind>> = patches.iter().map(|p| vec![BoundaryKind::Dirichlet; 2 * p.dim()]).collect();
    for pr in pairs {
        for f in [pr.master, pr.slave] {
            out[f.patch][f.side.id()] = BoundaryKind::Interface;
        }
    }
    out
}

fn degree_of(p: &[usize], i: usize) -> usize {
    p[i.min(p.len() - 1)]
}

/// Assembles a case from geometry, coefficients and either an exact solution or a constant source.
#[allow(clippy::too_many_arguments)]
pub fn make_case(
    name: &str,
    degrees: Vec<usize>,
    nbar: usize,
    patches: Vec<Patch>,
    boundary: Vec<Vec<BoundaryKind>>,
    interfaces: Vec<InterfacePair>,
    nu: Vec<f64>,
    alpha: Vec<f64>,
    exact: Option<Exact>,
    source: f64,
    dirichlet: f64,
) -> Case {
    let coeffs = nu
        .iter()
        .zip(&alpha)
        .map(|(&n, &a)| {
            let f: crate::assembly::ScalarFn = match &exact {
                Some(e) => {
                    let e = e.clone();
                    Arc::new(move |x: &Point| -n * e.laplacian(x) + a * e.value(x))
                }
                None => constant(source),
            };
            Coefficients { nu: constant(n), beta: None, alpha: constant(a), f }
        })
        .collect();
    let g: crate::assembly::ScalarFn = match &exact {
        Some(e) => {
            let e = e.clone();
            Arc::new(move |x: &Point| e.value(x))
        }
        None => constant(dirichlet),
    };
    Case {
        name: name.to_string(),
        degrees,
        nbar,
        problem: Problem { patches, boundary, coeffs, dirichlet: g, neumann: None, interfaces },
        exact,
        nu,
        alpha,
        source,
        default_precond: Precond::None,
    }
}

fn t1(name: &str, o: &CaseOptions) -> Result<Case> {
    let n = o.nbar;
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::Config("test #1 needs an even nbar >= 2".into()));
    }
    let (e1, e2) = match name {
        "t1_balanced" => ([n / 2, n], [n / 2, n + 1]),
        "t1_master_refined" => ([n - 1, 2 * (n - 1)], [n / 2, n]),
        _ => ([n / 2, n], [n, 2 * n + 1]),
    };
    let (p1, p2) = (degree_of(&o.p, 0), degree_of(&o.p, 1));
    let a = make_ring_sector(1.0, 1.5, 0.0, FRAC_PI_2)?.refine(&[p1, p1], &e1)?;
    let b = make_ring_sector(1.5, 2.0, 0.0, FRAC_PI_2)?.refine(&[p2, p2], &e2)?;
    let pairs = vec![pair(face(0, 0, 1), face(1, 0, 0), true)];
    let patches = vec![a, b];
    let bd = tags(&patches, &pairs);
    let mut c = make_case(
        name,
        vec![p1, p2],
        n,
        patches,
        bd,
        pairs,
        vec![1.0; 2],
        vec![0.0; 2],
        Some(Exact::RingSine),
        0.0,
        0.0,
    );
    c.default_precond = Precond::LocalSchur;
    Ok(c)
}

fn t2_interface(y: f64) -> Point {
    [1.0 + 0.2 * (2.0 * PI * y).sin(), y, 0.0]
}

/// Patch of test #2 between `x = x_line` and the interpolated sinusoid.
fn t2_patch(p: usize, n_el: usize, left: bool, variable: bool) -> Result<Patch> {
    let kv = if variable { KnotVector::open_uniform(p, n_el) } else { KnotVector::open_uniform(p, 1) };
    let curve = Curve::interpolate(kv.clone(), t2_interface)?;
    let line = if left {
        Curve::line([0.0, 0.0, 0.0], [0.0, 1.0, 0.0], kv)
    } else {
        Curve::line([2.0, 0.0, 0.0], [2.0, 1.0, 0.0], kv)
    };
    let ruled = if left { make_ruled(&line, &curve)? } else { make_ruled(&curve, &line)? };
    ruled.refine(&[p, p], &[n_el, n_el])
}

fn t2(o: &CaseOptions) -> Result<Case> {
    let n = o.nbar;
    if n < 2 {
        return Err(Error::Config("test #2 needs nbar >= 2".into()));
    }
    let (p1, p2) = (degree_of(&o.p, 0), degree_of(&o.p, 1));
    if o.variable_gap && p1 != p2 {
        return Err(Error::Config("test #2 with variable gap uses one degree".into()));
    }
    let a = t2_patch(p1, n - 1, true, o.variable_gap)?;
    let b = t2_patch(p2, n + 1, false, o.variable_gap)?;
    let pairs = vec![pair(face(0, 0, 1), face(1, 0, 0), false)];
    let patches = vec![a, b];
    let bd = tags(&patches, &pairs);
    let mut c = make_case(
        "t2_nonwatertight",
        vec![p1, p2],
        n,
        patches,
        bd,
        pairs,
        vec![1.0; 2],
        vec![0.0; 2],
        Some(Exact::Gaussian),
        0.0,
        0.0,
    );
    c.default_precond = Precond::LocalSchur;
    Ok(c)
}

fn t3(o: &CaseOptions) -> Result<Case> {
    let n = o.nbar;
    if n < 1 {
        return Err(Error::Config("test #3 needs nbar >= 1".into()));
    }
    let p = degree_of(&o.p, 0);
    let d = PI / 180.0;
    // (r_in, r_out, theta_0, theta_1, radial elements, angular elements)
    let layout = [
        (1.0, 1.5, 0.0, 30.0, n + 2, n),
        (1.0, 1.25, 30.0, 60.0, n, n),
        (1.0, 1.25, 60.0, 90.0, n + 1, n + 1),
        (1.25, 1.5, 30.0, 60.0, n + 1, n + 1),
        (1.25, 1.5, 60.0, 90.0, n, n),
        (1.5, 2.0, 0.0, 45.0, n, 3 * n),
        (1.5, 2.0, 45.0, 90.0, n + 2, n),
    ];
    let patches = layout
        .iter()
        .map(|&(r0, r1, t0, t1, er, et)| make_ring_sector(r0, r1, t0 * d, t1 * d)?.refine(&[p, p], &[er, et]))
        .collect::<Result<Vec<_>>>()?;
    let pairs = vec![
        pair(face(0, 1, 1), face(1, 1, 0), true),
        pair(face(0, 1, 1), face(3, 1, 0), true),
        pair(face(1, 0, 1), face(3, 0, 0), true),
        pair(face(1, 1, 1), face(2, 1, 0), true),
        pair(face(3, 1, 1), face(4, 1, 0), true),
        pair(face(2, 0, 1), face(4, 0, 0), true),
        pair(face(5, 0, 0), face(0, 0, 1), true),
        pair(face(5, 0, 0), face(3, 0, 1), true),
        pair(face(6, 0, 0), face(3, 0, 1), true),
        pair(face(6, 0, 0), face(4, 0, 1), true),
        pair(face(5, 1, 1), face(6, 1, 0), true),
    ];
    let bd = tags(&patches, &pairs);
    Ok(make_case(
        "t3_ring7",
        vec![p],
        n,
        patches,
        bd,
        pairs,
        vec![1.0; 7],
        vec![0.0; 7],
        Some(Exact::RingSine),
        0.0,
        0.0,
    ))
}

fn t4(o: &CaseOptions) -> Result<Case> {
    let n = o.nbar;
    if n < 2 {
        return Err(Error::Config("Kellogg case needs nbar >= 2".into()));
    }
    let p = degree_of(&o.p, 0);
    let k = kellogg_parameters(o.gamma)?;
    let fine = 2 * n + 1;
    let coarse = n - 1;
    let patches = vec![
        make_box(&[0.0, 0.0], &[1.0, 1.0]).refine(&[p, p], &[fine, fine])?,
        make_box(&[-1.0, 0.0], &[0.0, 1.0]).refine(&[p, p], &[coarse, coarse])?,
        make_box(&[-1.0, -1.0], &[0.0, 0.0]).refine(&[p, p], &[fine, fine])?,
        make_box(&[0.0, -1.0], &[1.0, 0.0]).refine(&[p, p], &[coarse, coarse])?,
    ];
    // Shared edges: 1|2 at x = 0 (y > 0), 2|3 at y = 0 (x < 0), 3|4 at x = 0 (y < 0), 4|1 at y = 0 (x > 0).
    let e12 = (face(0, 0, 0), face(1, 0, 1));
    let e23 = (face(1, 1, 0), face(2, 1, 1));
    let e34 = (face(2, 0, 1), face(3, 0, 0));
    let e41 = (face(3, 1, 1), face(0, 1, 0));
    let pairs = match o.masters {
        'a' => {
            vec![pair(e12.0, e12.1, true), pair(e23.1, e23.0, true), pair(e34.0, e34.1, true), pair(e41.1, e41.0, true)]
        }
        'b' => {
            vec![pair(e12.1, e12.0, true), pair(e23.0, e23.1, true), pair(e34.1, e34.0, true), pair(e41.0, e41.1, true)]
        }
        'c' => {
            vec![pair(e12.0, e12.1, true), pair(e23.0, e23.1, true), pair(e34.0, e34.1, true), pair(e41.0, e41.1, true)]
        }
        m => return Err(Error::Config(format!("unknown Kellogg master configuration '{m}'"))),
    };
    let bd = tags(&patches, &pairs);
    let nu = vec![k.r, 1.0, k.r, 1.0];
    let mut c =
        make_case("t4_kellogg", vec![p], n, patches, bd, pairs, nu, vec![0.0; 4], Some(Exact::Kellogg(k)), 0.0, 0.0);
    if o.masters != 'c' {
        c.default_precond = Precond::Dn;
    }
    Ok(c)
}

/// Amplitude of the sinusoidal interfaces of test #5.
pub const T5_AMPLITUDE: f64 = 0.28;
/// Diffusion coefficients of test #5, patches numbered row by row from the origin.
pub const T5_NU: [f64; 9] = [10.0, 0.005, 1.0, 0.01, 100.0, 0.005, 1.0, 0.005, 0.1];

fn t5(o: &CaseOptions) -> Result<Case> {
    let n = o.nbar;
    if n < 1 {
        return Err(Error::Config("test #5 needs nbar >= 1".into()));
    }
    let (pm, ps) = (degree_of(&o.p, 0), degree_of(&o.p, 1));
    let a = T5_AMPLITUDE;
    let vertical = move |i: usize| {
        move |y: f64| {
            let s = if i == 0 || i == 3 { 0.0 } else { a * (2.0 * PI * y).sin() };
            [i as f64 + s, y, 0.0]
        }
    };
    let horizontal = move |j: usize| {
        move |x: f64| {
            let s = if j == 0 || j == 3 { 0.0 } else { a * (2.0 * PI * x).sin() };
            [x, j as f64 + s, 0.0]
        }
    };
    let mut patches = Vec::new();
    let mut degrees = Vec::new();
    for r in 0..3 {
        for c in 0..3 {
            let master = (3 * r + c) % 2 == 0;
            let p = if master { pm } else { ps };
            let e = if master { n } else { n + 1 };
            let kv = KnotVector::open_uniform(p, 1);
            let (x0, y0) = (c as f64, r as f64);
            let bottom = Curve::interpolate(kv.clone(), |t| horizontal(r)(x0 + t))?;
            let top = Curve::interpolate(kv.clone(), |t| horizontal(r + 1)(x0 + t))?;
            let left = Curve::interpolate(kv.clone(), |t| vertical(c)(y0 + t))?;
            let right = Curve::interpolate(kv, |t| vertical(c + 1)(y0 + t))?;
            patches.push(make_coons(&bottom, &top, &left, &right)?.refine(&[p, p], &[e, e])?);
            degrees.push(p);
        }
    }
    let mut pairs = Vec::new();
    for r in 0..3 {
        for c in 0..3 {
            let k = 3 * r + c;
            let mut link = |this: FaceRef, other: FaceRef| {
                if k % 2 == 0 {
                    pairs.push(pair(this, other, false));
                } else {
                    pairs.push(pair(other, this, false));
                }
            };
            if c < 2 {
                link(face(k, 0, 1), face(k + 1, 0, 0));
            }
            if r < 2 {
                link(face(k, 1, 1), face(k + 3, 1, 0));
            }
        }
    }
    let bd = tags(&patches, &pairs);
    let mut cs = make_case(
        "t5_nine_nonwatertight",
        vec![pm, ps],
        n,
        patches,
        bd,
        pairs,
        T5_NU.to_vec(),
        vec![1.0; 9],
        None,
        1.0,
        0.0,
    );
    cs.default_precond = Precond::Dn;
    Ok(cs)
}

fn t6(o: &CaseOptions) -> Result<Case> {
    let n = o.nbar;
    if n < 1 {
        return Err(Error::Config("test #6 needs nbar >= 1".into()));
    }
    let p = degree_of(&o.p, 0);
    let cyl = |r0, r1, t0, t1, z0, z1, e: usize| -> Result<Patch> {
        make_extruded(&make_ring_sector(r0, r1, t0, t1)?, z0, z1)?.refine(&[p, p, p], &[e, e, e])
    };
    let patches = vec![
        cyl(0.5, 1.0, 0.0, FRAC_PI_2, 0.0, 1.0, n)?,
        cyl(1.0, 1.5, 0.0, FRAC_PI_2, 0.0, 0.5, n + 1)?,
        cyl(1.0, 1.5, 0.0, FRAC_PI_4, 0.5, 1.0, n + 1)?,
        cyl(1.0, 1.5, FRAC_PI_4, FRAC_PI_2, 0.5, 1.0, n)?,
    ];
    let pairs = vec![
        pair(face(0, 0, 1), face(1, 0, 0), true),
        pair(face(0, 0, 1), face(2, 0, 0), true),
        pair(face(0, 0, 1), face(3, 0, 0), true),
        pair(face(2, 1, 1), face(3, 1, 0), true),
        pair(face(2, 2, 0), face(1, 2, 1), true),
        pair(face(3, 2, 0), face(1, 2, 1), true),
    ];
    let bd = tags(&patches, &pairs);
    Ok(make_case(
        "t6_3d_smoke",
        vec![p],
        n,
        patches,
        bd,
        pairs,
        vec![1.0; 4],
        vec![1.0; 4],
        Some(Exact::CylinderSine),
        0.0,
        0.0,
    ))
}

fn t7(o: &CaseOptions) -> Result<Case> {
    let n = o.nbar;
    if n < 1 {
        return Err(Error::Config("test #7 needs nbar >= 1".into()));
    }
    let p = degree_of(&o.p, 0);
    let c = [-0.5, -0.5, 0.0];
    let inner = |phi: f64| -> Point {
        if phi <= FRAC_PI_4 + 1e-14 {
            [0.0, -0.5 + 0.5 * phi.tan(), 0.0]
        } else {
            [-0.5 + 0.5 / phi.tan(), 0.0, 0.0]
        }
    };
    let elements = [[n, 3 * n, n], [3 * n, n, n], [n, n + 2, n], [n, n + 1, n]];
    let mut patches = Vec::new();
    for k in 0..4 {
        let (a, b) = (k as f64 * PI / 8.0, (k + 1) as f64 * PI / 8.0);
        let arc = Curve::arc(c, 2.0, a, b);
        let seg = Curve::segment_like_arc(inner(a), inner(b), 0.5 * (b - a));
        let base = make_ruled(&seg, &arc)?;
        patches.push(make_extruded(&base, 0.0, 1.0)?.refine(&[p, p, p], &elements[k])?);
    }
    let pairs = vec![
        pair(face(0, 1, 1), face(1, 1, 0), true),
        pair(face(2, 1, 0), face(1, 1, 1), true),
        pair(face(2, 1, 1), face(3, 1, 0), true),
    ];
    let bd = tags(&patches, &pairs);
    let mut cs = make_case(
        "t7_reentrant_smoke",
        vec![p],
        n,
        patches,
        bd,
        pairs,
        vec![1.0; 4],
        vec![0.0; 4],
        Some(Exact::Reentrant { beta: o.beta }),
        0.0,
        0.0,
    );
    cs.default_precond = Precond::Dn;
    Ok(cs)
}

/// Builds a named built-in case.
pub fn builtin_case(name: &str, o: &CaseOptions) -> Result<Case> {
    if o.p.is_empty() || o.p.iter().any(|&p| p == 0 || p > 12) {
        return Err(Error::Config("degrees must lie in 1..=12".into()));
    }
    match name {
        "t1_balanced" | "t1_master_refined" | "t1_slave_refined" => t1(name, o),
        "t2_nonwatertight" => t2(o),
        "t3_ring7" => t3(o),
        "t4_kellogg" => t4(o),
        "t5_nine_nonwatertight" => t5(o),
        "t6_3d_smoke" => t6(o),
        "t7_reentrant_smoke" => t7(o),
        _ => Err(Error::Config(format!("unknown case '{name}' (see list-cases)"))),
    }
}

// ---------------------------------------------------------------- configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Degrees {
    One(usize),
    Many(Vec<usize>),
}

impl Degrees {
    pub fn to_vec(&self) -> Vec<usize> {
        match self {
            Degrees::One(p) => vec![*p],
            Degrees::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Bicgstab,
    Gmres,
    Monolithic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecondName {
    None,
    LocalSchur,
    Dn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_it")]
    pub max_it: usize,
    /// Defaults to the case's own choice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precond: Option<PrecondName>,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_it() -> usize {
    1000
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { method: Method::Bicgstab, tol: default_tol(), max_it: default_max_it(), precond: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    /// Write `solution_grid.csv`.
    #[serde(default)]
    pub grid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExactConfig {
    /// `ring_sine`, `gaussian`, `kellogg`, `cylinder_sine`, `reentrant` or `affine`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Affine coefficients `[c0, cx, cy, cz]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub degrees: Vec<usize>,
    pub knots: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub control_points: Vec<Vec<f64>>,
    /// One tag per side, ordered by side id: `dirichlet`, `neumann` or `interface`.
    pub boundary: Vec<String>,
    #[serde(default = "one")]
    pub nu: f64,
    #[serde(default)]
    pub alpha: f64,
    /// Optional k-refinement degrees followed by uniform element counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine_degrees: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine_elements: Option<Vec<usize>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceConfig {
    /// `[patch, side id]`.
    pub master: [usize; 2],
    pub slave: [usize; 2],
    #[serde(default = "yes")]
    pub watertight: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rbf_radius: Option<f64>,
}

fn yes() -> bool {
    true
}

/// Run configuration: a built-in case with variant keys, or an explicit patch list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Degrees>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nbar: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variable_gap: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masters: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<ExactConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dirichlet: Option<f64>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub patch: Vec<PatchConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interface: Vec<InterfaceConfig>,
}

/// Parses a configuration document.
pub fn parse_config(text: &str) -> Result<CaseConfig> {
    let cfg: CaseConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_kind(s: &str) -> Result<BoundaryKind> {
    match s {
        "dirichlet" => Ok(BoundaryKind::Dirichlet),
        "neumann" => Ok(BoundaryKind::Neumann),
        "interface" => Ok(BoundaryKind::Interface),
        _ => Err(Error::Config(format!("unknown boundary kind '{s}'"))),
    }
}

fn kind_name(k: BoundaryKind) -> &'static str {
    match k {
        BoundaryKind::Dirichlet => "dirichlet",
        BoundaryKind::Neumann => "neumann",
        BoundaryKind::Interface => "interface",
    }
}

impl CaseConfig {
    pub fn validate(&self) -> Result<()> {
        let explicit = !self.patch.is_empty();
        match (&self.case, explicit) {
            (Some(_), true) => return Err(Error::Config("give either `case` or `[[patch]]` tables, not both".into())),
            (None, false) => return Err(Error::Config("no `case` and no `[[patch]]` tables".into())),
            _ => {}
        }
        if !(self.solver.tol > 0.0 && self.solver.tol < 1.0) {
            return Err(Error::Config("solver tolerance must lie in (0, 1)".into()));
        }
        if self.solver.max_it == 0 {
            return Err(Error::Config("solver max_it must be positive".into()));
        }
        if let Some(m) = &self.masters {
            if !matches!(m.as_str(), "a" | "b" | "c") {
                return Err(Error::Config(format!("masters must be a, b or c, got '{m}'")));
            }
        }
        if explicit {
            if self.exact.is_none() && self.source.is_none() {
                return Err(Error::Config("explicit cases need `exact` or `source`".into()));
            }
            for (k, p) in self.patch.iter().enumerate() {
                if p.boundary.len() != 2 * p.degrees.len() {
                    return Err(Error::Config(format!(
                        "patch {k}: {} boundary tags for dimension {}",
                        p.boundary.len(),
                        p.degrees.len()
                    )));
                }
                for b in &p.boundary {
                    parse_kind(b)?;
                }
                if !(p.nu > 0.0) || !p.nu.is_finite() || !p.alpha.is_finite() {
                    return Err(Error::Config(format!("patch {k}: nu must be positive and finite")));
                }
            }
            let mut seen = std::collections::BTreeSet::new();
            for i in &self.interface {
                for f in [i.master, i.slave] {
                    if f[0] >= self.patch.len() {
                        return Err(Error::Config(format!("interface refers to missing patch {}", f[0])));
                    }
                    if f[1] >= self.patch[f[0]].boundary.len() {
                        return Err(Error::Config(format!(
                            "interface refers to missing side {} of patch {}",
                            f[1], f[0]
                        )));
                    }
                }
                if !seen.insert((i.master, i.slave)) {
                    return Err(Error::Config("duplicate interface pair".into()));
                }
                if let Some(r) = i.rbf_radius {
                    if !(r > 0.0) {
                        return Err(Error::Config("rbf_radius must be positive".into()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn options(&self) -> CaseOptions {
        let d = CaseOptions::default();
        CaseOptions {
            p: self.p.as_ref().map(Degrees::to_vec).unwrap_or(d.p),
            nbar: self.nbar.unwrap_or(match self.case.as_deref() {
                Some("t6_3d_smoke" | "t7_reentrant_smoke") => 2,
                _ => d.nbar,
            }),
            gamma: self.gamma.unwrap_or(d.gamma),
            beta: self.beta.unwrap_or(d.beta),
            variable_gap: self.variable_gap.unwrap_or(d.variable_gap),
            masters: self.masters.as_ref().and_then(|m| m.chars().next()).unwrap_or(d.masters),
        }
    }

    /// Builds the case described by this configuration.
    pub fn build(&self) -> Result<Case> {
        self.validate()?;
        if let Some(name) = &self.case {
            let o = self.options();
            if name == "t2_nonwatertight" && self.p.is_none() {
                return builtin_case(name, &CaseOptions { p: vec![4, 3], ..o });
            }
            if name == "t5_nine_nonwatertight" && self.p.is_none() {
                return builtin_case(name, &CaseOptions { p: vec![4, 3], ..o });
            }
            return builtin_case(name, &o);
        }
        let mut patches = Vec::new();
        let mut boundary = Vec::new();
        for p in &self.patch {
            let desc = PatchDesc {
                degrees: p.degrees.clone(),
                knots: p.knots.clone(),
                weights: p.weights.clone(),
                control_points: p.control_points.clone(),
            };
            let mut patch = Patch::from_desc(&desc)?;
            if let (Some(deg), Some(el)) = (&p.refine_degrees, &p.refine_elements) {
                if deg.len() != patch.dim() || el.len() != patch.dim() || el.iter().any(|&e| e == 0 || e > 4096) {
                    return Err(Error::Config("refinement lists need one positive entry per direction".into()));
                }
                if deg.iter().any(|&d| d > 12) {
                    return Err(Error::Config("degree above 12".into()));
                }
                patch = patch.refine(deg, el)?;
            }
            patch.check_jacobian()?;
            patches.push(patch);
            boundary.push(p.boundary.iter().map(|b| parse_kind(b)).collect::<Result<Vec<_>>>()?);
        }
        let interfaces = self
            .interface
            .iter()
            .map(|i| InterfacePair {
                master: FaceRef { patch: i.master[0], side: Side::from_id(i.master[1]) },
                slave: FaceRef { patch: i.slave[0], side: Side::from_id(i.slave[1]) },
                watertight: i.watertight,
                rbf_radius: i.rbf_radius,
            })
            .collect();
        let exact = self.exact.as_ref().map(exact_from_config).transpose()?;
        let degrees = patches.iter().map(|p| p.degree(0)).collect();
        let mut c = make_case(
            self.name.as_deref().unwrap_or("explicit"),
            degrees,
            0,
            patches,
            boundary,
            interfaces,
            self.patch.iter().map(|p| p.nu).collect(),
            self.patch.iter().map(|p| p.alpha).collect(),
            exact,
            self.source.unwrap_or(0.0),
            self.dirichlet.unwrap_or(0.0),
        );
        c.default_precond = Precond::None;
        c.problem.validate()?;
        Ok(c)
    }
}

fn exact_from_config(e: &ExactConfig) -> Result<Exact> {
    Ok(match e.kind.as_str() {
        "ring_sine" => Exact::RingSine,
        "gaussian" => Exact::Gaussian,
        "kellogg" => Exact::Kellogg(kellogg_parameters(e.gamma.unwrap_or(0.6))?),
        "cylinder_sine" => Exact::CylinderSine,
        "reentrant" => Exact::Reentrant { beta: e.beta.unwrap_or(2.0 / 3.0) },
        "affine" => {
            let c = e.coefficients.clone().unwrap_or_default();
            if c.len() != 4 {
                return Err(Error::Config("affine exact solution needs 4 coefficients".into()));
            }
            Exact::Affine { c0: c[0], c: [c[1], c[2], c[3]] }
        }
        k => return Err(Error::Config(format!("unknown exact solution '{k}'"))),
    })
}

fn exact_to_config(e: &Exact) -> ExactConfig {
    let mut out = ExactConfig { kind: String::new(), gamma: None, beta: None, coefficients: None };
    out.kind = match e {
        Exact::RingSine => "ring_sine",
        Exact::Gaussian => "gaussian",
        Exact::Kellogg(k) => {
            out.gamma = Some(k.gamma);
            "kellogg"
        }
        Exact::CylinderSine => "cylinder_sine",
        Exact::Reentrant { beta } => {
            out.beta = Some(*beta);
            "reentrant"
        }
        Exact::Affine { c0, c } => {
            out.coefficients = Some(vec![*c0, c[0], c[1], c[2]]);
            "affine"
        }
    }
    .to_string();
    out
}

/// Explicit configuration reproducing a case.
pub fn case_to_config(case: &Case) -> CaseConfig {
    let patch = case
        .problem
        .patches
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let d = p.to_desc();
            PatchConfig {
                degrees: d.degrees,
                knots: d.knots,
                weights: d.weights,
                control_points: d.control_points,
                boundary: case.problem.boundary[k].iter().map(|&b| kind_name(b).to_string()).collect(),
                nu: case.nu[k],
                alpha: case.alpha[k],
                refine_degrees: None,
                refine_elements: None,
            }
        })
        .collect();
    let interface = case
        .problem
        .interfaces
        .iter()
        .map(|i| InterfaceConfig {
            master: [i.master.patch, i.master.side.id()],
            slave: [i.slave.patch, i.slave.side.id()],
            watertight: i.watertight,
            rbf_radius: i.rbf_radius,
        })
        .collect();
    CaseConfig {
        name: Some(case.name.clone()),
        exact: case.exact.as_ref().map(exact_to_config),
        source: if case.exact.is_none() { Some(case.source) } else { None },
        dirichlet: if case.exact.is_none() { Some(0.0) } else { None },
        solver: SolverConfig { precond: Some(precond_name(case.default_precond)), ..SolverConfig::default() },
        patch,
        interface,
        ..CaseConfig::default()
    }
}

fn precond_name(p: Precond) -> PrecondName {
    match p {
        Precond::None => PrecondName::None,
        Precond::LocalSchur => PrecondName::LocalSchur,
        Precond::Dn => PrecondName::Dn,
    }
}

fn precond_from(p: PrecondName) -> Precond {
    match p {
        PrecondName::None => Precond::None,
        PrecondName::LocalSchur => Precond::LocalSchur,
        PrecondName::Dn => Precond::Dn,
    }
}

/// Largest `nbar` of the 3D cases allowed without an explicit opt-in.
pub const SMOKE_NBAR_3D: usize = 3;

/// Rejects 3D built-in cases above smoke scale unless `full` is set.
pub fn check_scale(cfg: &CaseConfig, nbars: &[usize], full: bool) -> Result<()> {
    let three_d = matches!(cfg.case.as_deref(), Some("t6_3d_smoke" | "t7_reentrant_smoke"));
    if three_d && !full {
        if let Some(n) = nbars.iter().find(|&&n| n > SMOKE_NBAR_3D) {
            return Err(Error::Config(format!(
                "nbar = {n} exceeds the 3D smoke scale ({SMOKE_NBAR_3D}); pass --full to run it"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- runs

/// Broken-norm error and per-patch relative H1 errors.
pub fn broken_error(patches: &[Patch], solution: &[Vec<f64>], exact: &dyn ExactSolution) -> Result<(f64, Vec<f64>)> {
    let mut total = 0.0;
    let mut per = Vec::with_capacity(patches.len());
    for (k, (p, u)) in patches.iter().zip(solution).enumerate() {
        let (e2, n2) = h1_error_sq(p, u, exact)?;
        if !(n2 > 0.0) {
            return Err(Error::InvalidArgument(format!("exact solution has zero H1 norm on patch {k}")));
        }
        total += e2 / n2;
        per.push((e2 / n2).sqrt());
    }
    Ok((total.sqrt(), per))
}

/// Outcome of one run.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub case: String,
    pub degrees: Vec<usize>,
    pub nbar: usize,
    pub h: f64,
    pub dofs: usize,
    pub patch_errors: Vec<f64>,
    pub err_broken: Option<f64>,
    pub krylov: KrylovReport,
    pub d_gamma: f64,
    pub seconds: f64,
    pub solution: Vec<Vec<f64>>,
}

/// Failure of a run, tagged with the stage that failed.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

fn stage<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|error| StageError { stage: name, error })
}

/// Runs one case: skeleton (or monolithic) solve, errors and interface gap.
pub fn run_case(case: &Case, solver: &SolverConfig) -> std::result::Result<RunReport, StageError> {
    let start = Instant::now();
    let prob = &case.problem;
    let precond = solver.precond.map(precond_from).unwrap_or(case.default_precond);
    let (solution, krylov) = match solver.method {
        Method::Monolithic => {
            let u = stage("monolithic", solve_monolithic(prob))?;
            (u, KrylovReport { iterations: 0, residual: 0.0, converged: true, breakdown: false, history: vec![] })
        }
        m => {
            let sys = stage("initialize", SchurSystem::initialize(prob, precond))?;
            let method = if m == Method::Gmres { KrylovMethod::Gmres } else { KrylovMethod::Bicgstab };
            stage("solve", sys.solve(method, solver.tol, solver.max_it))?
        }
    };
    let (err_broken, patch_errors) = match &case.exact {
        Some(e) => {
            let (b, per) = stage("error", broken_error(&prob.patches, &solution, e))?;
            (Some(b), per)
        }
        None => (None, vec![]),
    };
    let adj = stage("gap", build_adjacency(&prob.patches, &prob.interfaces, 1e-8 * prob.diameter()))?;
    let d_gamma = stage("gap", measure_gap(&prob.patches, &adj, 1000))?;
    Ok(RunReport {
        case: case.name.clone(),
        degrees: case.degrees.clone(),
        nbar: case.nbar,
        h: prob.patches.iter().map(Patch::mesh_size).fold(0.0, f64::max),
        dofs: prob.patches.iter().map(Patch::num_dofs).sum(),
        patch_errors,
        err_broken,
        krylov,
        d_gamma,
        seconds: start.elapsed().as_secs_f64(),
        solution,
    })
}

/// Least-squares slope of `log err` against `log h` with its 95% interval half-width.
pub fn fit_slope(h: &[f64], err: &[f64]) -> Option<(f64, Option<f64>)> {
    let pts: Vec<(f64, f64)> =
        h.iter().zip(err).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    let n = pts.len();
    if n < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let ci = if n > 2 {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        let resid: f64 = pts.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
        let se = (resid / (n - 2) as f64 / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, (n - 2) as f64).ok()?.inverse_cdf(0.975);
        Some(t * se)
    } else {
        None
    };
    Some((slope, ci))
}

/// One row of a sweep: a report or the failure that replaced it.
pub type SweepRow = (Vec<usize>, usize, std::result::Result<RunReport, String>);

/// Fitted rate of one degree set.
#[derive(Clone, Debug, PartialEq)]
pub struct Rate {
    pub degrees: Vec<usize>,
    pub slope: f64,
    pub ci95: Option<f64>,
    pub points: usize,
}

/// Runs a built-in case over degree sets and `nbar` values; rates use the finest half of each series.
pub fn run_sweep(base: &CaseConfig, degrees: &[Vec<usize>], nbars: &[usize]) -> Result<(Vec<SweepRow>, Vec<Rate>)> {
    if base.case.is_none() {
        return Err(Error::Config("sweeps need a built-in case".into()));
    }
    let mut rows = Vec::new();
    let mut rates = Vec::new();
    for p in degrees {
        let mut series = Vec::new();
        for &n in nbars {
            let cfg = CaseConfig { p: Some(Degrees::Many(p.clone())), nbar: Some(n), ..base.clone() };
            let out = cfg
                .build()
                .map_err(|e| format!("build: {e}"))
                .and_then(|c| run_case(&c, &base.solver).map_err(|e| e.to_string()));
            if let Ok(r) = &out {
                if let Some(e) = r.err_broken {
                    series.push((r.h, e));
                }
            }
            rows.push((p.clone(), n, out));
        }
        series.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let keep = series.len().div_ceil(2);
        let fine = &series[series.len() - keep..];
        let (h, e): (Vec<f64>, Vec<f64>) = fine.iter().copied().unzip();
        if let Some((slope, ci95)) = fit_slope(&h, &e) {
            rates.push(Rate { degrees: p.clone(), slope, ci95, points: fine.len() });
        }
    }
    Ok((rows, rates))
}

// ---------------------------------------------------------------- output

pub const CSV_HEADER: [&str; 10] =
    ["case", "p", "nbar", "h", "dofs", "err_broken", "its", "converged", "d_gamma", "seconds"];

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn join_degrees(p: &[usize]) -> String {
    p.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("/")
}

/// Writes `report.csv`; failed rows keep their parameters and leave results empty.
pub fn write_report(path: &Path, rows: &[SweepRow], timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for (p, n, out) in rows {
        let rec = match out {
            Ok(r) => vec![
                r.case.clone(),
                join_degrees(&r.degrees),
                r.nbar.to_string(),
                format!("{:.6e}", r.h),
                r.dofs.to_string(),
                r.err_broken.map(|e| format!("{e:.6e}")).unwrap_or_default(),
                r.krylov.iterations.to_string(),
                r.krylov.converged.to_string(),
                format!("{:.6e}", r.d_gamma),
                if timing { format!("{:.3}", r.seconds) } else { "0".into() },
            ],
            Err(e) => {
                let mut v = vec![String::new(); 10];
                v[1] = join_degrees(p);
                v[2] = n.to_string();
                v[7] = format!("failed: {e}");
                v
            }
        };
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `meta.txt` with the configuration echo and run details.
pub fn write_meta(path: &Path, cfg: &CaseConfig, rows: &[SweepRow], rates: &[Rate]) -> Result<()> {
    let mut s = String::new();
    s.push_str(&format!("internodes {}\n", env!("CARGO_PKG_VERSION")));
    s.push_str("quadrature: p+1 Gauss points per span (assembly), p+7 (interface mass), 2(p+1) (errors)\n");
    s.push_str("rbf radius: 3 x max Greville spacing of the source face unless configured\n");
    for (p, n, out) in rows {
        match out {
            Ok(r) => s.push_str(&format!(
                "run p={} nbar={n}: d_gamma={:.6e} its={} converged={} relative_residual={:.3e}\n",
                join_degrees(p),
                r.d_gamma,
                r.krylov.iterations,
                r.krylov.converged,
                r.krylov.relative_residual().unwrap_or(0.0)
            )),
            Err(e) => s.push_str(&format!("run p={} nbar={n}: failed: {e}\n", join_degrees(p))),
        }
    }
    for r in rates {
        let ci = r.ci95.map(|c| format!("+/- {c:.3}")).unwrap_or_else(|| "(interval needs 3 points)".into());
        s.push_str(&format!("rate p={}: {:.4} {ci} over {} points\n", join_degrees(&r.degrees), r.slope, r.points));
    }
    s.push_str("\n# configuration\n");
    s.push_str(&toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?);
    std::fs::write(path, s)?;
    Ok(())
}

/// Writes `solution_grid.csv`: samples on a uniform parameter grid with
/// twice as many points per direction as basis functions.
pub fn write_solution_grid(path: &Path, patches: &[Patch], solution: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["patch", "xi", "eta", "zeta", "x", "y", "z", "u"]).map_err(csv_err)?;
    for (k, (p, u)) in patches.iter().zip(solution).enumerate() {
        let counts: Vec<usize> = (0..3).map(|d| if d < p.dim() { 2 * p.n(d) } else { 1 }).collect();
        for c in 0..counts[2] {
            for b in 0..counts[1] {
                for a in 0..counts[0] {
                    let t = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                    let xi = [t(a, counts[0]), t(b, counts[1]), t(c, counts[2])];
                    let x = p.map(&xi[..p.dim()])?;
                    let (v, _) = p.eval_field(u, &xi[..p.dim()])?;
                    let rec: Vec<String> = std::iter::once(k.to_string())
                        .chain(xi.iter().map(|v| format!("{v:.6}")))
                        .chain(x.iter().map(|v| format!("{v:.9e}")))
                        .chain(std::iter::once(format!("{v:.9e}")))
                        .collect();
                    w.write_record(&rec).map_err(csv_err)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Identifier of the exact solution used by a case.
pub fn exact_name(case: &Case) -> String {
    case.exact.as_ref().map(Exact::name).unwrap_or_else(|| format!("none (source {})", case.source))
}
