//! Krylov solvers, the multipatch Schur-complement system on the master
//! skeleton with its Dirichlet-Neumann preconditioner, and the monolithic
//! two-patch block system.

use crate::assembly::{
    assemble_mass, assemble_neumann, assemble_patch, correction_matrix, dirichlet_values, BoundaryKind, Coefficients,
    FluxFn, ScalarFn,
};
use crate::coupling::{build_adjacency, build_operators, Adjacency, FaceOperators, InterfacePair, Role};
use crate::error::{Error, Result};
use crate::geometry::{dist, Patch, Point, Side};
use crate::linalg::{dot, norm2, BandLu, CsrMatrix, SparseFactor};
use std::collections::BTreeSet;

/// Outcome of a Krylov solve.
#[derive(Clone, Debug, PartialEq)]
pub struct KrylovReport {
    pub iterations: usize,
    /// Final true residual `||b - A x||`.
    pub residual: f64,
    pub converged: bool,
    /// Set when the method broke down before reaching the tolerance.
    pub breakdown: bool,
    /// Relative residual after every iteration: the tracked true residual
    /// for Bi-CGStab; for GMRES the preconditioned estimate inside a cycle
    /// and the true residual at each restart and at the end.
    pub history: Vec<f64>,
}

impl KrylovReport {
    /// Final relative residual, or `None` before any iteration.
    pub fn relative_residual(&self) -> Option<f64> {
        self.history.last().copied()
    }
}

pub type Operator<'a> = &'a dyn Fn(&[f64]) -> Result<Vec<f64>>;

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn apply_precond(m: Option<Operator>, x: &[f64]) -> Result<Vec<f64>> {
    match m {
        Some(m) => m(x),
        None => Ok(x.to_vec()),
    }
}

fn true_residual(op: Operator, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let ax = op(x)?;
    Ok(b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect())
}

/// Left-preconditioned Bi-CGStab. Stops when `||b - A x|| <= tol ||b||`.
pub fn bicgstab(
    op: Operator,
    b: &[f64],
    precond: Option<Operator>,
    tol: f64,
    max_it: usize,
) -> Result<(Vec<f64>, KrylovReport)> {
    let n = b.len();
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    let mut report =
        KrylovReport { iterations: 0, residual: bnorm, converged: false, breakdown: false, history: vec![] };
    if bnorm == 0.0 {
        report.converged = true;
        return Ok((x, report));
    }
    let target = tol * bnorm;
    let mut r_true = b.to_vec();
    let mut r = apply_precond(precond, b)?;
    let rhat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let tiny = 1e-300;
    for it in 1..=max_it {
        let rho_new = dot(&rhat, &r);
        if rho_new.abs() < tiny || !rho_new.is_finite() {
            report.breakdown = true;
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let ap = op(&p)?;
        v = apply_precond(precond, &ap)?;
        let denom = dot(&rhat, &v);
        if denom.abs() < tiny || !denom.is_finite() {
            report.breakdown = true;
            break;
        }
        alpha = rho_new / denom;
        let mut s = r.clone();
        axpy(-alpha, &v, &mut s);
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r_true);
        report.iterations = it;
        if norm2(&r_true) <= target {
            r_true = true_residual(op, b, &x)?;
            if norm2(&r_true) <= target {
                report.history.push(norm2(&r_true) / bnorm);
                report.converged = true;
                break;
            }
        }
        let as_ = op(&s)?;
        let t = apply_precond(precond, &as_)?;
        let tt = dot(&t, &t);
        if tt == 0.0 {
            // s = 0: the half step is exact in the preconditioned norm.
            r_true = true_residual(op, b, &x)?;
            report.history.push(norm2(&r_true) / bnorm);
            report.converged = norm2(&r_true) <= target;
            report.breakdown = !report.converged;
            break;
        }
        omega = dot(&t, &s) / tt;
        axpy(omega, &s, &mut x);
        r = s;
        axpy(-omega, &t, &mut r);
        axpy(-omega, &as_, &mut r_true);
        if norm2(&r_true) <= target {
            r_true = true_residual(op, b, &x)?;
        }
        let rel = norm2(&r_true) / bnorm;
        report.history.push(rel);
        if norm2(&r_true) <= target {
            report.converged = true;
            break;
        }
        if omega == 0.0 {
            report.breakdown = true;
            break;
        }
        rho = rho_new;
    }
    report.residual = norm2(&true_residual(op, b, &x)?);
    Ok((x, report))
}

/// Left-preconditioned restarted GMRES. Stops when `||b - A x|| <= tol ||b||`.
pub fn gmres(
    op: Operator,
    b: &[f64],
    precond: Option<Operator>,
    tol: f64,
    max_it: usize,
    restart: usize,
) -> Result<(Vec<f64>, KrylovReport)> {
    let n = b.len();
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    let mut report =
        KrylovReport { iterations: 0, residual: bnorm, converged: false, breakdown: false, history: vec![] };
    if bnorm == 0.0 {
        report.converged = true;
        return Ok((x, report));
    }
    let m = restart.max(1);
    let zb = apply_precond(precond, b)?;
    let zbnorm = norm2(&zb);
    // Inner tolerance on the preconditioned residual, tightened if the true residual lags.
    let mut inner_tol = tol * zbnorm;
    let mut total = 0;
    'outer: while total < max_it {
        let r_true = true_residual(op, b, &x)?;
        if norm2(&r_true) <= tol * bnorm {
            report.converged = true;
            break;
        }
        let r = apply_precond(precond, &r_true)?;
        let beta = norm2(&r);
        if beta == 0.0 {
            report.breakdown = true;
            break;
        }
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            if total >= max_it {
                break;
            }
            let mut w = apply_precond(precond, &op(&basis[k])?)?;
            for j in 0..=k {
                h[j][k] = dot(&w, &basis[j]);
                axpy(-h[j][k], &basis[j], &mut w);
            }
            h[k + 1][k] = norm2(&w);
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let den = h[k][k].hypot(h[k + 1][k]);
            if den == 0.0 {
                report.breakdown = true;
                break 'outer;
            }
            cs[k] = h[k][k] / den;
            sn[k] = h[k + 1][k] / den;
            h[k][k] = den;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            total += 1;
            k_used = k + 1;
            report.history.push(g[k + 1].abs() / zbnorm);
            let hnext = norm2(&w);
            if g[k + 1].abs() <= inner_tol || hnext == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / hnext).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            axpy(*yj, &basis[j], &mut x);
        }
        report.iterations = total;
        let rt = norm2(&true_residual(op, b, &x)?);
        if rt <= tol * bnorm {
            report.converged = true;
            break;
        }
        if g[k_used].abs() <= inner_tol {
            inner_tol *= 0.1;
        }
    }
    report.iterations = total;
    report.residual = norm2(&true_residual(op, b, &x)?);
    report.converged = report.residual <= tol * bnorm;
    if let Some(last) = report.history.last_mut() {
        *last = report.residual / bnorm;
    }
    Ok((x, report))
}

/// Elliptic problem on a multipatch geometry.
#[derive(Clone)]
pub struct Problem {
    pub patches: Vec<Patch>,
    /// Boundary kind of every side, indexed by `Side::id`.
    pub boundary: Vec<Vec<BoundaryKind>>,
    pub coeffs: Vec<Coefficients>,
    pub dirichlet: ScalarFn,
    pub neumann: Option<FluxFn>,
    pub interfaces: Vec<InterfacePair>,
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        let m = self.patches.len();
        if m == 0 || self.boundary.len() != m || self.coeffs.len() != m {
            return Err(Error::Config("patches, boundary tags and coefficients must have equal length".into()));
        }
        let mut iface = BTreeSet::new();
        for pair in &self.interfaces {
            iface.insert((pair.master.patch, pair.master.side));
            iface.insert((pair.slave.patch, pair.slave.side));
        }
        for (k, p) in self.patches.iter().enumerate() {
            if self.boundary[k].len() != 2 * p.dim() {
                return Err(Error::Config(format!("patch {k} needs {} boundary tags", 2 * p.dim())));
            }
            for side in Side::all(p.dim()) {
                let tagged = self.boundary[k][side.id()] == BoundaryKind::Interface;
                if tagged != iface.contains(&(k, side)) {
                    return Err(Error::Config(format!(
                        "side {} of patch {k} is {} but {} an interface pair",
                        side.id(),
                        if tagged { "tagged interface" } else { "not tagged interface" },
                        if tagged { "is in no" } else { "appears in" }
                    )));
                }
                if self.boundary[k][side.id()] == BoundaryKind::Neumann && self.neumann.is_none() {
                    return Err(Error::Config(format!("patch {k} has a Neumann side but no flux is given")));
                }
            }
        }
        Ok(())
    }

    /// Diameter of the bounding box of all control points.
    pub fn diameter(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.patches {
            for c in p.control_points() {
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        dist(&lo, &hi)
    }
}

/// Role of a patch dof in the skeleton formulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DofRole {
    Dirichlet,
    /// Index into the patch's local unknowns.
    Interior(usize),
    /// Index into the reduced skeleton vector.
    Skeleton(usize),
    /// Filled by interpolation from master faces.
    Slave,
}

/// Preconditioner selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precond {
    None,
    /// Two-patch alias of `Dn`.
    LocalSchur,
    Dn,
}

struct PatchData {
    a: CsrMatrix,
    f: Vec<f64>,
    g: Vec<f64>,
    roles: Vec<DofRole>,
    interior: Vec<usize>,
    factor: SparseFactor,
}

struct DnBlock {
    /// Local dofs of the Neumann matrix: interior first, then skeleton.
    skeleton: Vec<(usize, usize)>,
    n_interior: usize,
    factor: SparseFactor,
}

/// Master-skeleton Schur complement system, built once and applied matrix-free.
pub struct SchurSystem {
    pub patches: Vec<Patch>,
    pub adjacency: Adjacency,
    pub operators: Vec<FaceOperators>,
    data: Vec<PatchData>,
    /// `A + C` rows of every interface face.
    face_rows: Vec<CsrMatrix>,
    /// Slave faces in dependency order with the dofs each one writes.
    slave_order: Vec<(usize, Vec<(usize, usize)>)>,
    n_skeleton: usize,
    /// Number of master patches holding each skeleton dof.
    pub multiplicity: Vec<f64>,
    dn: Option<Vec<DnBlock>>,
}

impl SchurSystem {
    /// Assembles and factorizes everything needed by the skeleton solve.
    pub fn initialize(problem: &Problem, precond: Precond) -> Result<Self> {
        problem.validate()?;
        let node_tol = 1e-8 * problem.diameter();
        let patches = problem.patches.clone();
        let adjacency = build_adjacency(&patches, &problem.interfaces, node_tol)?;
        let operators = build_operators(&patches, &adjacency, node_tol)?;
        let m = patches.len();

        let mut systems = Vec::with_capacity(m);
        for k in 0..m {
            let sys = assemble_patch(&patches[k], &problem.coeffs[k]);
            let mut f = sys.f;
            for side in Side::all(patches[k].dim()) {
                if problem.boundary[k][side.id()] == BoundaryKind::Neumann {
                    if let Some(h) = &problem.neumann {
                        assemble_neumann(&patches[k], side, h, &mut f);
                    }
                }
            }
            let g = dirichlet_values(&patches[k], &problem.boundary[k], &problem.dirichlet)?;
            systems.push((sys.a, f, g));
        }

        let mut face_rows = Vec::with_capacity(adjacency.faces.len());
        for face in &adjacency.faces {
            let k = face.face.patch;
            let c = correction_matrix(&patches[k], face.face.side, &problem.coeffs[k].nu, &problem.boundary[k]);
            let n = patches[k].num_dofs();
            let rows = systems[k].0.submatrix(&face.dofs, &(0..n).collect::<Vec<_>>());
            face_rows.push(rows.add(&c));
        }

        // Dof roles before cycle handling: Dirichlet > slave face > master face > interior.
        #[derive(Clone, Copy, PartialEq)]
        enum Pre {
            Dirichlet,
            Slave,
            Master,
            Interior,
        }
        let mut pre: Vec<Vec<Pre>> = (0..m)
            .map(|k| systems[k].2.iter().map(|g| if g.is_some() { Pre::Dirichlet } else { Pre::Interior }).collect())
            .collect();
        for face in &adjacency.faces {
            let k = face.face.patch;
            for &i in &face.dofs {
                let r = &mut pre[k][i];
                match (face.role, *r) {
                    (_, Pre::Dirichlet) | (Role::Master, Pre::Slave) => {}
                    (Role::Slave, _) => *r = Pre::Slave,
                    (Role::Master, _) => *r = Pre::Master,
                }
            }
        }

        // Order slave faces so that every master trace is complete before it is interpolated.
        let slave_faces: Vec<usize> =
            (0..adjacency.faces.len()).filter(|&i| adjacency.faces[i].role == Role::Slave).collect();
        let (order, owner) = loop {
            let mut owner: Vec<Vec<Option<usize>>> = pre.iter().map(|r| vec![None; r.len()]).collect();
            for &s in &slave_faces {
                let k = adjacency.faces[s].face.patch;
                for &i in &adjacency.faces[s].dofs {
                    if pre[k][i] == Pre::Slave && owner[k][i].is_none() {
                        owner[k][i] = Some(s);
                    }
                }
            }
            let deps: Vec<BTreeSet<usize>> = slave_faces
                .iter()
                .map(|&s| {
                    let mut d = BTreeSet::new();
                    for &n in &adjacency.faces[s].neighbors {
                        let k = adjacency.faces[n].face.patch;
                        for &i in &adjacency.faces[n].dofs {
                            if let Some(o) = owner[k][i] {
                                d.insert(o);
                            }
                        }
                    }
                    d
                })
                .collect();
            let mut done: BTreeSet<usize> = BTreeSet::new();
            let mut order = Vec::new();
            loop {
                let next = slave_faces
                    .iter()
                    .zip(&deps)
                    .find(|(s, d)| !done.contains(*s) && d.iter().all(|x| done.contains(x)));
                match next {
                    Some((&s, _)) => {
                        done.insert(s);
                        order.push(s);
                    }
                    None => break,
                }
            }
            if order.len() == slave_faces.len() {
                break (order, owner);
            }
            // Cyclic dependency: master-face dofs owned by the remaining slave faces become unknowns.
            for (&s, _) in slave_faces.iter().zip(&deps).filter(|(s, _)| !done.contains(*s)) {
                for &n in &adjacency.faces[s].neighbors {
                    let k = adjacency.faces[n].face.patch;
                    for &i in &adjacency.faces[n].dofs {
                        if let Some(o) = owner[k][i] {
                            if !done.contains(&o) {
                                pre[k][i] = Pre::Master;
                            }
                        }
                    }
                }
            }
        };

        // Skeleton numbering; patch-vertex dofs are merged by physical position.
        let mut n_skeleton = 0;
        let mut vertex_nodes: Vec<(Point, usize)> = Vec::new();
        let mut roles: Vec<Vec<DofRole>> = Vec::with_capacity(m);
        let mut interiors = Vec::with_capacity(m);
        for k in 0..m {
            let mut r = Vec::with_capacity(pre[k].len());
            let mut interior = Vec::new();
            for (i, &p) in pre[k].iter().enumerate() {
                r.push(match p {
                    Pre::Dirichlet => DofRole::Dirichlet,
                    Pre::Slave => DofRole::Slave,
                    Pre::Interior => {
                        interior.push(i);
                        DofRole::Interior(interior.len() - 1)
                    }
                    Pre::Master => {
                        let vertex = patches[k].is_vertex_dof(i);
                        let x = patches[k].control_points()[i];
                        let found = if vertex {
                            vertex_nodes.iter().find(|(y, _)| dist(&x, y) <= node_tol).map(|&(_, s)| s)
                        } else {
                            None
                        };
                        let s = found.unwrap_or_else(|| {
                            n_skeleton += 1;
                            if vertex {
                                vertex_nodes.push((x, n_skeleton - 1));
                            }
                            n_skeleton - 1
                        });
                        DofRole::Skeleton(s)
                    }
                });
            }
            roles.push(r);
            interiors.push(interior);
        }

        let slave_order = order
            .iter()
            .map(|&s| {
                let f = &adjacency.faces[s];
                let k = f.face.patch;
                let writes = f
                    .dofs
                    .iter()
                    .enumerate()
                    .filter(|&(_, &i)| roles[k][i] == DofRole::Slave && owner[k][i] == Some(s))
                    .map(|(j, &i)| (j, i))
                    .collect();
                (s, writes)
            })
            .collect();

        let mut multiplicity = vec![0.0; n_skeleton];
        for k in 0..m {
            let set: BTreeSet<usize> =
                roles[k].iter().filter_map(|r| if let DofRole::Skeleton(s) = r { Some(*s) } else { None }).collect();
            for s in set {
                multiplicity[s] += 1.0;
            }
        }

        let mut data = Vec::with_capacity(m);
        for (k, ((a, f, g), interior)) in systems.into_iter().zip(interiors).enumerate() {
            let aii = a.submatrix(&interior, &interior);
            let factor = SparseFactor::new(&aii)?;
            data.push(PatchData {
                a,
                f,
                g: g.into_iter().map(|v| v.unwrap_or(0.0)).collect(),
                roles: std::mem::take(&mut roles[k]),
                interior,
                factor,
            });
        }

        let mut sys = SchurSystem {
            patches,
            adjacency,
            operators,
            data,
            face_rows,
            slave_order,
            n_skeleton,
            multiplicity,
            dn: None,
        };
        if precond != Precond::None {
            sys.dn = Some(sys.build_dn(problem, precond)?);
        }
        Ok(sys)
    }

    pub fn skeleton_size(&self) -> usize {
        self.n_skeleton
    }

    pub fn roles(&self, patch: usize) -> &[DofRole] {
        &self.data[patch].roles
    }

    pub fn has_preconditioner(&self) -> bool {
        self.dn.is_some()
    }

    fn build_dn(&self, problem: &Problem, precond: Precond) -> Result<Vec<DnBlock>> {
        let faces = &self.adjacency.faces;
        let mut masters = BTreeSet::new();
        for (k, _) in self.patches.iter().enumerate() {
            let roles: BTreeSet<_> =
                faces.iter().filter(|f| f.face.patch == k).map(|f| f.role == Role::Master).collect();
            if roles.len() > 1 {
                return Err(Error::Config(format!(
                    "patch {k} holds both master and slave faces; the preconditioner needs wholly master or wholly slave patches"
                )));
            }
            if roles.contains(&true) {
                masters.insert(k);
            }
        }
        if precond == Precond::LocalSchur && masters.len() != 1 {
            return Err(Error::Config("local_schur needs exactly one master patch; use dn".into()));
        }
        let mut blocks = Vec::new();
        for &k in &masters {
            let d = &self.data[k];
            let mut skeleton: Vec<(usize, usize)> = d
                .roles
                .iter()
                .enumerate()
                .filter_map(|(i, r)| if let DofRole::Skeleton(s) = r { Some((i, *s)) } else { None })
                .collect();
            skeleton.sort_unstable();
            let mut local = vec![usize::MAX; d.roles.len()];
            for (j, &i) in d.interior.iter().enumerate() {
                local[i] = j;
            }
            for (j, &(i, _)) in skeleton.iter().enumerate() {
                local[i] = d.interior.len() + j;
            }
            let n = d.interior.len() + skeleton.len();
            let mut trip = Vec::new();
            for &i in &d.interior {
                let (cols, vals) = d.a.row(i);
                for (&c, &v) in cols.iter().zip(vals) {
                    if local[c] != usize::MAX {
                        trip.push((local[i], local[c], v));
                    }
                }
            }
            for (fi, f) in faces.iter().enumerate().filter(|(_, f)| f.face.patch == k) {
                let rows = &self.face_rows[fi];
                for (j, &i) in f.dofs.iter().enumerate() {
                    if !matches!(d.roles[i], DofRole::Skeleton(_)) {
                        continue;
                    }
                    let (cols, vals) = rows.row(j);
                    for (&c, &v) in cols.iter().zip(vals) {
                        if local[c] != usize::MAX {
                            trip.push((local[i], local[c], v));
                        }
                    }
                }
            }
            let floating = !problem.boundary[k].contains(&BoundaryKind::Dirichlet);
            if floating {
                let mass = assemble_mass(&self.patches[k]);
                for (i, c, v) in mass.triplets() {
                    if local[i] != usize::MAX && local[c] != usize::MAX {
                        trip.push((local[i], local[c], v));
                    }
                }
            }
            let factor = SparseFactor::new(&CsrMatrix::from_triplets(n, n, trip))?;
            blocks.push(DnBlock { skeleton, n_interior: d.interior.len(), factor });
        }
        Ok(blocks)
    }

    /// Patch coefficient vectors for skeleton values `lambda`; data terms included when `with_data`.
    fn patch_solutions(&self, lambda: &[f64], with_data: bool) -> Result<Vec<Vec<f64>>> {
        if lambda.len() != self.n_skeleton {
            return Err(Error::Dimension(format!(
                "skeleton vector of length {} (expected {})",
                lambda.len(),
                self.n_skeleton
            )));
        }
        let mut u: Vec<Vec<f64>> = self
            .data
            .iter()
            .map(|d| {
                d.roles
                    .iter()
                    .zip(&d.g)
                    .map(|(r, &g)| match r {
                        DofRole::Dirichlet if with_data => g,
                        DofRole::Skeleton(s) => lambda[*s],
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        for (s, writes) in &self.slave_order {
            let face = &self.adjacency.faces[*s];
            let mut trace = vec![0.0; face.dofs.len()];
            for (n, p) in &self.operators[*s].from {
                let nf = &self.adjacency.faces[*n];
                let src: Vec<f64> = nf.dofs.iter().map(|&i| u[nf.face.patch][i]).collect();
                p.matvec_add(&src, &mut trace);
            }
            for &(j, i) in writes {
                u[face.face.patch][i] = trace[j];
            }
        }
        for (k, d) in self.data.iter().enumerate() {
            let mut rhs = vec![0.0; d.interior.len()];
            for (li, &i) in d.interior.iter().enumerate() {
                let mut v = if with_data { d.f[i] } else { 0.0 };
                let (cols, vals) = d.a.row(i);
                for (&c, &a) in cols.iter().zip(vals) {
                    if !matches!(d.roles[c], DofRole::Interior(_)) {
                        v -= a * u[k][c];
                    }
                }
                rhs[li] = v;
            }
            let x = d.factor.solve(&rhs);
            for (li, &i) in d.interior.iter().enumerate() {
                u[k][i] = x[li];
            }
        }
        Ok(u)
    }

    /// Residual vectors of every interface face.
    pub fn face_residuals(&self, u: &[Vec<f64>], with_data: bool) -> Vec<Vec<f64>> {
        self.adjacency
            .faces
            .iter()
            .zip(&self.face_rows)
            .map(|(face, rows)| {
                let k = face.face.patch;
                let mut r = rows.matvec(&u[k]);
                if with_data {
                    for (rj, &i) in r.iter_mut().zip(&face.dofs) {
                        *rj -= self.data[k].f[i];
                    }
                }
                r
            })
            .collect()
    }

    /// Gathers master-face equilibrium residuals onto the skeleton.
    fn equilibrium(&self, u: &[Vec<f64>], with_data: bool) -> Vec<f64> {
        let res = self.face_residuals(u, with_data);
        let mut psi = vec![0.0; self.n_skeleton];
        for (fi, face) in self.adjacency.faces.iter().enumerate() {
            if face.role != Role::Master {
                continue;
            }
            let mut z = res[fi].clone();
            for (s, q) in &self.operators[fi].dual_from {
                q.matvec_add(&res[*s], &mut z);
            }
            let roles = &self.data[face.face.patch].roles;
            for (j, &i) in face.dofs.iter().enumerate() {
                if let DofRole::Skeleton(s) = roles[i] {
                    psi[s] += z[j];
                }
            }
        }
        psi
    }

    /// Right-hand side of the skeleton system.
    pub fn schur_rhs(&self) -> Result<Vec<f64>> {
        let u = self.patch_solutions(&vec![0.0; self.n_skeleton], true)?;
        Ok(self.equilibrium(&u, true).into_iter().map(|v| -v).collect())
    }

    /// Matrix-free product with the skeleton Schur complement.
    pub fn schur_apply(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        let u = self.patch_solutions(lambda, false)?;
        Ok(self.equilibrium(&u, false))
    }

    /// Patch solutions for a skeleton solution.
    pub fn recover_solution(&self, lambda: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.patch_solutions(lambda, true)
    }

    /// Applies the inverse of the Dirichlet-Neumann preconditioner.
    pub fn apply_preconditioner(&self, v: &[f64]) -> Result<Vec<f64>> {
        let blocks = self.dn.as_ref().ok_or_else(|| Error::Config("no preconditioner was built".into()))?;
        if v.len() != self.n_skeleton {
            return Err(Error::Dimension("preconditioner input".into()));
        }
        let mut out = vec![0.0; self.n_skeleton];
        for b in blocks {
            let mut rhs = vec![0.0; b.n_interior + b.skeleton.len()];
            for (j, &(_, s)) in b.skeleton.iter().enumerate() {
                rhs[b.n_interior + j] = v[s];
            }
            let w = b.factor.solve(&rhs);
            for (j, &(_, s)) in b.skeleton.iter().enumerate() {
                out[s] += w[b.n_interior + j];
            }
        }
        for (o, u) in out.iter_mut().zip(&self.multiplicity) {
            *o /= u;
        }
        Ok(out)
    }

    /// Solves the skeleton system and recovers the patch solutions.
    pub fn solve(&self, method: KrylovMethod, tol: f64, max_it: usize) -> Result<(Vec<Vec<f64>>, KrylovReport)> {
        let b = self.schur_rhs()?;
        let op = |x: &[f64]| self.schur_apply(x);
        let pc = |x: &[f64]| self.apply_preconditioner(x);
        let precond: Option<Operator> = if self.dn.is_some() { Some(&pc) } else { None };
        let (lambda, report) = match method {
            KrylovMethod::Bicgstab => bicgstab(&op, &b, precond, tol, max_it)?,
            KrylovMethod::Gmres => gmres(&op, &b, precond, tol, max_it, 30)?,
        };
        Ok((self.recover_solution(&lambda)?, report))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KrylovMethod {
    Bicgstab,
    Gmres,
}

/// Solves a two-patch problem as one sparse block system in the unknowns
/// (master-patch interior, slave-patch interior, master-face trace).
pub fn solve_monolithic(problem: &Problem) -> Result<Vec<Vec<f64>>> {
    problem.validate()?;
    if problem.patches.len() != 2 || problem.interfaces.len() != 1 {
        return Err(Error::Config("the monolithic solver handles two patches and one interface".into()));
    }
    let pair = &problem.interfaces[0];
    let (km, ks) = (pair.master.patch, pair.slave.patch);
    let node_tol = 1e-8 * problem.diameter();
    let patches = &problem.patches;
    let adj = build_adjacency(patches, &problem.interfaces, node_tol)?;
    let ops = build_operators(patches, &adj, node_tol)?;
    let fm = adj.index[&pair.master];
    let fs = adj.index[&pair.slave];
    let p_sm = &ops[fs].from[0].1;
    let q_ms = &ops[fm].dual_from[0].1;

    let mut a = Vec::new();
    let mut f = Vec::new();
    let mut g = Vec::new();
    let mut c = Vec::new();
    for k in 0..2 {
        let sys = assemble_patch(&patches[k], &problem.coeffs[k]);
        let mut load = sys.f;
        for side in Side::all(patches[k].dim()) {
            if problem.boundary[k][side.id()] == BoundaryKind::Neumann {
                if let Some(h) = &problem.neumann {
                    assemble_neumann(&patches[k], side, h, &mut load);
                }
            }
        }
        a.push(sys.a);
        f.push(load);
        g.push(dirichlet_values(&patches[k], &problem.boundary[k], &problem.dirichlet)?);
        let side = if k == km { pair.master.side } else { pair.slave.side };
        c.push(correction_matrix(&patches[k], side, &problem.coeffs[k].nu, &problem.boundary[k]));
    }
    let mdofs = patches[km].face_dofs(pair.master.side);
    let sdofs = patches[ks].face_dofs(pair.slave.side);

    // Column numbering: interior of master, interior of slave, free master-face dofs.
    let mut col: Vec<Vec<Option<usize>>> = (0..2).map(|k| vec![None; patches[k].num_dofs()]).collect();
    let mut n = 0;
    for &k in &[km, ks] {
        let face: BTreeSet<usize> =
            if k == km { mdofs.iter().copied().collect() } else { sdofs.iter().copied().collect() };
        for i in 0..patches[k].num_dofs() {
            if g[k][i].is_none() && !face.contains(&i) {
                col[k][i] = Some(n);
                n += 1;
            }
        }
    }
    let mut gamma_col = vec![None; mdofs.len()];
    for (j, &i) in mdofs.iter().enumerate() {
        if g[km][i].is_none() {
            col[km][i] = Some(n);
            gamma_col[j] = Some(n);
            n += 1;
        }
    }
    // Each patch dof as an affine combination of unknowns: (terms, constant).
    let affine = |k: usize, i: usize| -> (Vec<(usize, f64)>, f64) {
        if let Some(v) = g[k][i] {
            return (vec![], v);
        }
        if k == ks {
            if let Some(js) = sdofs.iter().position(|&x| x == i) {
                let mut terms = Vec::new();
                let mut cst = 0.0;
                for (jm, &im) in mdofs.iter().enumerate() {
                    let w = p_sm[(js, jm)];
                    if w == 0.0 {
                        continue;
                    }
                    match gamma_col[jm] {
                        Some(cix) => terms.push((cix, w)),
                        None => cst += w * g[km][im].unwrap_or(0.0),
                    }
                }
                return (terms, cst);
            }
        }
        (vec![(col[k][i].expect("free dof has a column"), 1.0)], 0.0)
    };
    let mut trip = Vec::new();
    let mut rhs = vec![0.0; n];
    let add_row = |row: usize,
                   k: usize,
                   cols: &[usize],
                   vals: &[f64],
                   scale: f64,
                   load: f64,
                   trip: &mut Vec<(usize, usize, f64)>,
                   rhs: &mut [f64]| {
        rhs[row] += scale * load;
        for (&j, &v) in cols.iter().zip(vals) {
            let (terms, cst) = affine(k, j);
            for (cix, w) in terms {
                trip.push((row, cix, scale * v * w));
            }
            rhs[row] -= scale * v * cst;
        }
    };
    for &k in &[km, ks] {
        for i in 0..patches[k].num_dofs() {
            if let Some(row) = col[k][i] {
                if k == km && gamma_col.contains(&Some(row)) {
                    continue;
                }
                let (cols, vals) = a[k].row(i);
                add_row(row, k, cols, vals, 1.0, f[k][i], &mut trip, &mut rhs);
            }
        }
    }
    let face_row = |k: usize, dofs: &[usize], j: usize| -> (Vec<usize>, Vec<f64>) {
        let mut acc: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
        let (c1, v1) = a[k].row(dofs[j]);
        for (&cc, &v) in c1.iter().zip(v1) {
            *acc.entry(cc).or_default() += v;
        }
        let (c2, v2) = c[k].row(j);
        for (&cc, &v) in c2.iter().zip(v2) {
            *acc.entry(cc).or_default() += v;
        }
        acc.into_iter().unzip()
    };
    for (jm, &im) in mdofs.iter().enumerate() {
        let Some(row) = gamma_col[jm] else { continue };
        let (cols, vals) = face_row(km, &mdofs, jm);
        add_row(row, km, &cols, &vals, 1.0, f[km][im], &mut trip, &mut rhs);
        for (js, &is) in sdofs.iter().enumerate() {
            let q = q_ms[(jm, js)];
            if q == 0.0 {
                continue;
            }
            let (cols, vals) = face_row(ks, &sdofs, js);
            add_row(row, ks, &cols, &vals, q, f[ks][is], &mut trip, &mut rhs);
        }
    }
    let mat = CsrMatrix::from_triplets(n, n, trip);
    let x = BandLu::factor(&mat)?.solve(&rhs);
    let mut out = vec![vec![0.0; patches[0].num_dofs()], vec![0.0; patches[1].num_dofs()]];
    for k in 0..2 {
        for i in 0..patches[k].num_dofs() {
            let (terms, cst) = affine(k, i);
            out[k][i] = cst + terms.iter().map(|&(cix, w)| w * x[cix]).sum::<f64>();
        }
    }
    Ok(out)
}
