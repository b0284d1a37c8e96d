//! Interface adjacency and intergrid operators: Greville collocation
//! interpolation for watertight faces, rescaled localized RBF interpolation
//! for non-watertight faces, and the dual transfer of residuals.

use crate::assembly::face_mass;
use crate::error::{Error, Result};
use crate::geometry::{dist, Patch, Point, Side};
use crate::linalg::{DenseLu, DenseMatrix};
use std::collections::BTreeMap;

/// A patch side used as an interface face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FaceRef {
    pub patch: usize,
    pub side: Side,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Master,
    Slave,
}

/// One coupled pair of faces.
#[derive(Clone, Debug, PartialEq)]
pub struct InterfacePair {
    pub master: FaceRef,
    pub slave: FaceRef,
    pub watertight: bool,
    pub rbf_radius: Option<f64>,
}

/// Interface face with its Greville nodes and neighbours.
#[derive(Clone, Debug)]
pub struct InterfaceFace {
    pub face: FaceRef,
    pub role: Role,
    /// Patch dofs of the trace basis, in face order.
    pub dofs: Vec<usize>,
    pub params: Vec<Vec<f64>>,
    pub nodes: Vec<Point>,
    /// Adjacent faces (indices into `Adjacency::faces`).
    pub neighbors: Vec<usize>,
    pub watertight: bool,
    pub rbf_radius: Option<f64>,
    /// `membership[n][i]`: node `i` lies on neighbour `n`.
    pub membership: Vec<Vec<bool>>,
    /// Partition-of-unity weight of each node.
    pub u: Vec<f64>,
}

/// All interface faces of a configuration.
#[derive(Clone, Debug)]
pub struct Adjacency {
    pub faces: Vec<InterfaceFace>,
    pub index: BTreeMap<FaceRef, usize>,
}

impl Adjacency {
    pub fn face(&self, f: FaceRef) -> Option<&InterfaceFace> {
        self.index.get(&f).map(|&i| &self.faces[i])
    }

    /// Neighbours of `f` as face references.
    pub fn neighbors_of(&self, f: FaceRef) -> Vec<FaceRef> {
        self.face(f).map(|x| x.neighbors.iter().map(|&n| self.faces[n].face).collect()).unwrap_or_default()
    }
}

/// Physical Greville nodes of a face.
pub fn face_nodes(patch: &Patch, side: Side) -> Result<(Vec<Vec<f64>>, Vec<Point>)> {
    let params = patch.face_greville(side);
    let nodes = params
        .iter()
        .map(|s| {
            let xi = patch.face_param(side, s);
            patch.map(&xi[..patch.dim()])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((params, nodes))
}

/// Trace basis of `target` evaluated at the projections of `nodes`.
/// Rows of nodes farther than `tol` from the face are zero.
/// Returns the matrix, membership flags and the residual of every node.
pub fn cross_collocation(
    nodes: &[Point],
    target: &Patch,
    side: Side,
    tol: f64,
) -> Result<(DenseMatrix, Vec<bool>, Vec<f64>)> {
    let nf = target.face_size(side);
    let mut g = DenseMatrix::zeros(nodes.len(), nf);
    let mut member = vec![false; nodes.len()];
    let mut res = vec![0.0; nodes.len()];
    for (r, x) in nodes.iter().enumerate() {
        let inv = target.invert_face(side, x)?;
        res[r] = inv.residual;
        if inv.residual <= tol {
            member[r] = true;
            let (idx, val) = target.face_basis(side, &inv.params)?;
            for (j, v) in idx.into_iter().zip(val) {
                g[(r, j)] = v;
            }
        }
    }
    Ok((g, member, res))
}

/// Builds faces, neighbour lists, node membership and partition-of-unity weights.
/// `node_tol` is the absolute distance below which a node lies on a face.
pub fn build_adjacency(patches: &[Patch], pairs: &[InterfacePair], node_tol: f64) -> Result<Adjacency> {
    let mut roles: BTreeMap<FaceRef, Role> = BTreeMap::new();
    let mut nbrs: BTreeMap<FaceRef, Vec<FaceRef>> = BTreeMap::new();
    let mut wt: BTreeMap<FaceRef, bool> = BTreeMap::new();
    let mut radius: BTreeMap<FaceRef, Option<f64>> = BTreeMap::new();
    for pair in pairs {
        for f in [pair.master, pair.slave] {
            if f.patch >= patches.len() || f.side.dir >= patches[f.patch].dim() || f.side.end > 1 {
                return Err(Error::Interface(format!("face {f:?} does not exist")));
            }
        }
        if pair.master.patch == pair.slave.patch {
            return Err(Error::Interface("a patch cannot be coupled with itself".into()));
        }
        for (f, role) in [(pair.master, Role::Master), (pair.slave, Role::Slave)] {
            if let Some(&r) = roles.get(&f) {
                if r != role {
                    return Err(Error::Interface(format!(
                        "face {} of patch {} is tagged both master and slave",
                        f.side.id(),
                        f.patch
                    )));
                }
            }
            roles.insert(f, role);
            let w = wt.entry(f).or_insert(pair.watertight);
            *w &= pair.watertight;
            let r = radius.entry(f).or_insert(pair.rbf_radius);
            if r.is_none() {
                *r = pair.rbf_radius;
            }
        }
        let m = nbrs.entry(pair.master).or_default();
        if m.contains(&pair.slave) {
            return Err(Error::Interface("duplicate interface pair".into()));
        }
        m.push(pair.slave);
        nbrs.entry(pair.slave).or_default().push(pair.master);
    }
    for pair in pairs.iter().filter(|p| !p.watertight) {
        if nbrs[&pair.master].len() != 1 || nbrs[&pair.slave].len() != 1 {
            return Err(Error::Interface("non-watertight faces must be adjacent to exactly one face".into()));
        }
    }
    let mut faces = Vec::new();
    let mut index = BTreeMap::new();
    for (&f, &role) in &roles {
        let patch = &patches[f.patch];
        let (params, nodes) = face_nodes(patch, f.side)?;
        index.insert(f, faces.len());
        faces.push(InterfaceFace {
            face: f,
            role,
            dofs: patch.face_dofs(f.side),
            params,
            nodes,
            neighbors: Vec::new(),
            watertight: wt[&f],
            rbf_radius: radius[&f],
            membership: Vec::new(),
            u: Vec::new(),
        });
    }
    for k in 0..faces.len() {
        let f = faces[k].face;
        let mut list: Vec<usize> = nbrs[&f].iter().map(|g| index[g]).collect();
        list.sort_unstable();
        let n_nodes = faces[k].nodes.len();
        let mut membership = Vec::with_capacity(list.len());
        let mut count = vec![0usize; n_nodes];
        for &n in &list {
            let other = faces[n].face;
            let member = if faces[k].watertight {
                let (_, mem, _) = cross_collocation(&faces[k].nodes, &patches[other.patch], other.side, node_tol)?;
                mem
            } else {
                vec![true; n_nodes]
            };
            for (c, &m) in count.iter_mut().zip(&member) {
                *c += m as usize;
            }
            membership.push(member);
        }
        if let Some(i) = count.iter().position(|&c| c == 0) {
            let mut best = f64::INFINITY;
            for &n in &list {
                let other = faces[n].face;
                let inv = patches[other.patch].invert_face(other.side, &faces[k].nodes[i])?;
                best = best.min(inv.residual);
            }
            return Err(Error::NodeOffInterface {
                patch: f.patch,
                node: faces[k].nodes[i],
                residual: best,
                tol: node_tol,
            });
        }
        faces[k].u = count.iter().map(|&c| 1.0 / c as f64).collect();
        faces[k].neighbors = list;
        faces[k].membership = membership;
    }
    Ok(Adjacency { faces, index })
}

/// Compactly supported Wendland function `(1 - d/r)_+^4 (1 + 4 d/r)`.
pub fn wendland_c2(d: f64, r: f64) -> Result<f64> {
    if !(r > 0.0) || d < 0.0 {
        return Err(Error::InvalidArgument(format!("Wendland function needs r > 0 and d >= 0, got r = {r}, d = {d}")));
    }
    Ok(wendland(d, r))
}

fn wendland(d: f64, r: f64) -> f64 {
    let t = d / r;
    if t >= 1.0 {
        0.0
    } else {
        (1.0 - t).powi(4) * (1.0 + 4.0 * t)
    }
}

/// Largest nearest-neighbour distance within a node set.
pub fn max_spacing(nodes: &[Point]) -> f64 {
    let mut out = 0.0f64;
    for (i, a) in nodes.iter().enumerate() {
        let mut near = f64::INFINITY;
        for (j, b) in nodes.iter().enumerate() {
            if i != j {
                near = near.min(dist(a, b));
            }
        }
        if near.is_finite() {
            out = out.max(near);
        }
    }
    out
}

/// Rescaled localized RBF transfer from values at `source` nodes to `target` nodes.
/// Returns the matrix and the radius finally used.
pub fn rbf_transfer(target: &[Point], source: &[Point], radius: Option<f64>) -> Result<(DenseMatrix, f64)> {
    let mut r = radius.unwrap_or_else(|| 3.0 * max_spacing(source));
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Interface("RBF radius must be positive".into()));
    }
    let mut last_err = None;
    for _ in 0..=3 {
        let phi_ss = DenseMatrix::from_fn(source.len(), source.len(), |i, j| wendland(dist(&source[i], &source[j]), r));
        let phi_ts = DenseMatrix::from_fn(target.len(), source.len(), |i, j| wendland(dist(&target[i], &source[j]), r));
        match phi_ss.lu() {
            Ok(lu) => {
                // (Phi_ts Phi_ss^{-1}) = (Phi_ss^{-T} Phi_ts^T)^T; Phi_ss is symmetric.
                let mut p = lu.solve_matrix(&phi_ts.transpose()).transpose();
                let ok = (0..p.rows()).all(|i| {
                    let s: f64 = p.row(i).iter().sum();
                    s.abs() > 1e-12
                });
                if ok {
                    for i in 0..p.rows() {
                        let s: f64 = p.row(i).iter().sum();
                        for v in p.row_mut(i) {
                            *v /= s;
                        }
                    }
                    return Ok((p, r));
                }
                last_err =
                    Some(Error::Interface(format!("RBF radius {r:.3e} leaves target nodes outside every support")));
            }
            Err(e) => last_err = Some(e),
        }
        r *= 1.5;
    }
    Err(last_err.unwrap_or_else(|| Error::Interface("RBF transfer failed".into())))
}

/// Per-face operators built once at initialization.
#[derive(Clone, Debug)]
pub struct FaceOperators {
    pub mass: DenseMatrix,
    pub mass_lu: DenseLu,
    pub colloc_lu: DenseLu,
    /// `(neighbour, P_{self <- neighbour})`.
    pub from: Vec<(usize, DenseMatrix)>,
    /// Master faces only: `(slave, Q = M_self P_{self <- slave} M_slave^{-1})`.
    pub dual_from: Vec<(usize, DenseMatrix)>,
    pub rbf_radius_used: Option<f64>,
}

/// Interpolation matrix `G_aa^{-1} diag(u) G_ab` of the Greville path.
pub fn greville_p(colloc_lu: &DenseLu, u: &[f64], g_ab: &DenseMatrix) -> DenseMatrix {
    let mut rhs = g_ab.clone();
    rhs.scale_rows(u);
    colloc_lu.solve_matrix(&rhs)
}

/// Builds mass matrices, interpolation matrices `P` and intergrid matrices `Q`.
pub fn build_operators(patches: &[Patch], adj: &Adjacency, node_tol: f64) -> Result<Vec<FaceOperators>> {
    let mut ops = Vec::with_capacity(adj.faces.len());
    for f in &adj.faces {
        let patch = &patches[f.face.patch];
        let mass = face_mass(patch, f.face.side);
        let mass_lu = mass.lu()?;
        let colloc_lu = patch.face_collocation(f.face.side)?.lu()?;
        ops.push(FaceOperators {
            mass,
            mass_lu,
            colloc_lu,
            from: Vec::new(),
            dual_from: Vec::new(),
            rbf_radius_used: None,
        });
    }
    for (k, f) in adj.faces.iter().enumerate() {
        let mut from = Vec::new();
        for (nidx, &n) in f.neighbors.iter().enumerate() {
            let other = &adj.faces[n];
            let p = if f.watertight {
                let op = &patches[other.face.patch];
                let (mut g, _, _) = cross_collocation(&f.nodes, op, other.face.side, node_tol)?;
                for (i, &m) in f.membership[nidx].iter().enumerate() {
                    if !m {
                        g.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                greville_p(&ops[k].colloc_lu, &f.u, &g)
            } else {
                let (prbf, r) = rbf_transfer(&f.nodes, &other.nodes, f.rbf_radius)?;
                ops[k].rbf_radius_used = Some(r);
                let g_other = patches[other.face.patch].face_collocation(other.face.side)?;
                ops[k].colloc_lu.solve_matrix(&prbf.matmul(&g_other))
            };
            from.push((n, p));
        }
        ops[k].from = from;
    }
    for (k, f) in adj.faces.iter().enumerate() {
        if f.role != Role::Master {
            continue;
        }
        let mut dual = Vec::new();
        for (n, p) in &ops[k].from {
            // Q = M_k P M_n^{-1}, formed as M_k (M_n^{-T} P^T)^T with M_n symmetric.
            let pmi = ops[*n].mass_lu.solve_matrix(&p.transpose()).transpose();
            dual.push((*n, ops[k].mass.matmul(&pmi)));
        }
        ops[k].dual_from = dual;
    }
    Ok(ops)
}

/// Dual transfer `M_master P M_slave^{-1} r_slave` of residual coefficients.
pub fn transfer_normal_derivative(
    r_slave: &[f64],
    mass_slave: &DenseLu,
    mass_master: &DenseMatrix,
    p_master_from_slave: &DenseMatrix,
) -> Vec<f64> {
    let primal = mass_slave.solve(r_slave);
    mass_master.matvec(&p_master_from_slave.matvec(&primal))
}

/// Largest distance from sample points of each slave face to its adjacent master faces.
pub fn measure_gap(patches: &[Patch], adj: &Adjacency, samples: usize) -> Result<f64> {
    let mut gap = 0.0f64;
    for f in adj.faces.iter().filter(|f| f.role == Role::Slave) {
        let patch = &patches[f.face.patch];
        let nfree = patch.dim() - 1;
        let per = if nfree == 1 { samples } else { (samples as f64).sqrt().ceil() as usize };
        let total = per.pow(nfree as u32);
        for t in 0..total {
            let mut r = t;
            let s: Vec<f64> = (0..nfree)
                .map(|_| {
                    let v = (r % per) as f64 / (per - 1).max(1) as f64;
                    r /= per;
                    v
                })
                .collect();
            let xi = patch.face_param(f.face.side, &s);
            let x = patch.map(&xi[..patch.dim()])?;
            let mut best = f64::INFINITY;
            for &n in &f.neighbors {
                let other = adj.faces[n].face;
                let inv = patches[other.patch].invert_face(other.side, &x)?;
                best = best.min(inv.residual);
            }
            gap = gap.max(best);
        }
    }
    Ok(gap)
}
