use internodes::assembly::{
    assemble_patch, constant, correction_matrix, face_mass, face_measure, BoundaryKind, Coefficients,
};
use internodes::coupling::{
    build_adjacency, build_operators, cross_collocation, face_nodes, rbf_transfer, wendland_c2, FaceRef, InterfacePair,
    Role,
};
use internodes::geometry::{make_box, make_ring_sector, Patch, Side};
use internodes::harness::{builtin_case, CaseOptions};
use proptest::prelude::*;
use std::f64::consts::{FRAC_PI_2, PI};

const D: BoundaryKind = BoundaryKind::Dirichlet;
const I: BoundaryKind = BoundaryKind::Interface;

fn ring(r0: f64, r1: f64, p: usize, n: [usize; 2]) -> Patch {
    make_ring_sector(r0, r1, 0.0, FRAC_PI_2).unwrap().refine(&[p, p], &n).unwrap()
}

fn pair(m: (usize, usize), s: (usize, usize), watertight: bool) -> InterfacePair {
    InterfacePair {
        master: FaceRef { patch: m.0, side: Side::from_id(m.1) },
        slave: FaceRef { patch: s.0, side: Side::from_id(s.1) },
        watertight,
        rbf_radius: None,
    }
}

#[test]
fn stiffness_is_symmetric_with_constants_in_the_kernel() {
    let patch = ring(1.0, 1.5, 3, [3, 4]);
    let sys = assemble_patch(&patch, &Coefficients::poisson(constant(0.0)));
    let scale = sys.a.triplets().fold(0.0f64, |m, (_, _, v)| m.max(v.abs()));
    assert!(sys.a.is_symmetric(1e-12 * scale));
    let r = sys.a.matvec(&vec![1.0; patch.num_dofs()]);
    assert!(r.iter().all(|v| v.abs() < 1e-11));
    assert!(sys.f.iter().all(|&v| v == 0.0));
}

#[test]
fn face_mass_of_a_quarter_circle() {
    let patch = ring(1.0, 1.5, 2, [2, 5]);
    for side in Side::all(2) {
        let m = face_mass(&patch, side);
        let total: f64 = m.as_slice().iter().sum();
        assert!((total - face_measure(&patch, side)).abs() < 1e-10);
        let expect = match (side.dir, side.end) {
            (0, 0) => FRAC_PI_2,
            (0, 1) => 1.5 * FRAC_PI_2,
            _ => 0.5,
        };
        assert!((total - expect).abs() < 1e-10, "side {side:?}: {total}");
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                assert!((m[(i, j)] - m[(j, i)]).abs() <= 1e-14 * m.max_abs());
            }
        }
    }
}

#[test]
fn flux_residual_of_a_linear_field() {
    let patch = make_box(&[0.0, 0.0], &[1.0, 1.0]).refine(&[2, 2], &[3, 3]).unwrap();
    let side = Side { dir: 0, end: 1 };
    let kinds = [D, I, D, D];
    let sys = assemble_patch(&patch, &Coefficients::poisson(constant(0.0)));
    let c = correction_matrix(&patch, side, &constant(1.0), &kinds);
    let u: Vec<f64> = (0..patch.num_dofs()).map(|i| patch.control_points()[i][0]).collect();
    let au = sys.a.matvec(&u);
    let cu = c.matvec(&u);
    let m = face_mass(&patch, side);
    for (j, &i) in patch.face_dofs(side).iter().enumerate() {
        let expect: f64 = m.row(j).iter().sum();
        assert!((au[i] + cu[j] - expect).abs() < 1e-12, "{j}: {} vs {expect}", au[i] + cu[j]);
    }
    // Only dofs on the boundary of the face carry corrections.
    let face = patch.face_dofs(side);
    for j in 1..face.len() - 1 {
        let (cols, vals) = c.row(j);
        assert!(cols.is_empty() || vals.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn wendland_kernel() {
    assert_eq!(wendland_c2(0.0, 2.0).unwrap(), 1.0);
    assert_eq!(wendland_c2(2.0, 2.0).unwrap(), 0.0);
    assert!((wendland_c2(1.0, 2.0).unwrap() - 0.1875).abs() < 1e-15);
    // Second derivative tends to zero at the support radius.
    let (r, h) = (1.0, 1e-4);
    let d2 = |d: f64| {
        (wendland_c2(d + h, r).unwrap() - 2.0 * wendland_c2(d, r).unwrap() + wendland_c2(d - h, r).unwrap()) / (h * h)
    };
    assert!((d2(r - 2.0 * h) - d2(r + 2.0 * h)).abs() < 1e-4 * 20.0);
    assert_eq!(d2(r + 2.0 * h), 0.0);
    assert!(wendland_c2(0.5, 0.0).is_err());
}

#[test]
fn collocation_rows_sum_to_one_and_conforming_faces_agree() {
    let a = ring(1.0, 1.5, 3, [4, 8]);
    let b = ring(1.5, 2.0, 3, [3, 8]);
    let (sa, sb) = (Side { dir: 0, end: 1 }, Side { dir: 0, end: 0 });
    let gaa = a.face_collocation(sa).unwrap();
    for i in 0..gaa.rows() {
        assert!((gaa.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }
    let (_, nodes) = face_nodes(&a, sa).unwrap();
    let (gab, member, _) = cross_collocation(&nodes, &b, sb, 1e-8).unwrap();
    assert!(member.iter().all(|&m| m));
    for i in 0..gaa.rows() {
        for j in 0..gaa.cols() {
            assert!((gab[(i, j)] - gaa[(i, j)]).abs() < 1e-10);
        }
    }
}

#[test]
fn cross_collocation_matches_brute_force_inversion() {
    let a = ring(1.0, 1.5, 2, [4, 8]);
    let b = ring(1.5, 2.0, 2, [4, 9]);
    let (sa, sb) = (Side { dir: 0, end: 1 }, Side { dir: 0, end: 0 });
    let (_, nodes) = face_nodes(&b, sb).unwrap();
    let (g, _, _) = cross_collocation(&nodes, &a, sa, 1e-8).unwrap();
    for (r, x) in nodes.iter().enumerate() {
        // Dense parameter sweep, then bisection on the polar angle (the map is monotone in it).
        let angle = |s: f64| {
            let y = a.map(&[1.0, s]).unwrap();
            y[1].atan2(y[0])
        };
        let target = x[1].atan2(x[0]);
        let (mut lo, mut hi) = (0.0, 1.0);
        let best = (0..=2000)
            .map(|k| k as f64 / 2000.0)
            .min_by(|p, q| (angle(*p) - target).abs().partial_cmp(&(angle(*q) - target).abs()).unwrap());
        let s0 = best.unwrap();
        lo = f64::max(lo, s0 - 1e-3);
        hi = f64::min(hi, s0 + 1e-3);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if angle(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let s = 0.5 * (lo + hi);
        let (idx, vals) = a.face_basis(sa, &[s]).unwrap();
        let mut row = vec![0.0; g.cols()];
        for (j, v) in idx.into_iter().zip(vals) {
            row[j] = v;
        }
        for j in 0..g.cols() {
            assert!((g[(r, j)] - row[j]).abs() < 1e-10, "node {r}, basis {j}");
        }
    }
}

fn two_rings(pm: usize, ps: usize, nm: [usize; 2], ns: [usize; 2]) -> (Vec<Patch>, Vec<InterfacePair>) {
    (vec![ring(1.0, 1.5, pm, nm), ring(1.5, 2.0, ps, ns)], vec![pair((0, 1), (1, 0), true)])
}

#[test]
fn conforming_transfer_is_the_identity() {
    let (patches, pairs) = two_rings(2, 2, [3, 6], [4, 6]);
    let adj = build_adjacency(&patches, &pairs, 1e-8).unwrap();
    assert!(adj.faces.iter().all(|f| f.u.iter().all(|&u| u == 1.0)));
    let ops = build_operators(&patches, &adj, 1e-8).unwrap();
    let s = adj.index[&pairs[0].slave];
    let p = &ops[s].from[0].1;
    for i in 0..p.rows() {
        for j in 0..p.cols() {
            let e = if i == j { 1.0 } else { 0.0 };
            assert!((p[(i, j)] - e).abs() < 1e-12);
        }
    }
}

#[test]
fn interpolation_of_a_smooth_trace() {
    let (patches, pairs) = two_rings(3, 3, [4, 16], [4, 21]);
    let adj = build_adjacency(&patches, &pairs, 1e-8).unwrap();
    let ops = build_operators(&patches, &adj, 1e-8).unwrap();
    let (m, s) = (&adj.faces[adj.index[&pairs[0].master]], &adj.faces[adj.index[&pairs[0].slave]]);
    let g = |x: &[f64; 3]| (3.0 * PI * x[1].atan2(x[0]) / FRAC_PI_2).sin();
    // Master coefficients interpolating g at its own Greville nodes.
    let mi = adj.index[&pairs[0].master];
    let cm = ops[mi].colloc_lu.solve(&m.nodes.iter().map(g).collect::<Vec<_>>());
    let p = &ops[adj.index[&pairs[0].slave]].from[0].1;
    let cs = p.matvec(&cm);
    let side = pairs[0].slave.side;
    let mut worst = 0.0f64;
    for (j, x) in s.nodes.iter().enumerate() {
        let (idx, vals) = patches[1].face_basis(side, &s.params[j]).unwrap();
        let v: f64 = idx.iter().zip(&vals).map(|(&k, b)| cs[k] * b).sum();
        worst = worst.max((v - g(x)).abs());
    }
    // Cubic interpolation error on 16 spans of a 1.5-wavelength sine.
    assert!(worst < 5e-3, "max trace error {worst:.3e}");
}

#[test]
fn dual_transfer_of_constant_residuals() {
    let (patches, pairs) = two_rings(3, 2, [3, 5], [3, 7]);
    let adj = build_adjacency(&patches, &pairs, 1e-8).unwrap();
    let ops = build_operators(&patches, &adj, 1e-8).unwrap();
    let (mi, si) = (adj.index[&pairs[0].master], adj.index[&pairs[0].slave]);
    let ms = ops[si].mass.matvec(&vec![1.0; ops[si].mass.rows()]);
    let mm = ops[mi].mass.matvec(&vec![1.0; ops[mi].mass.rows()]);
    let q = &ops[mi].dual_from[0].1;
    for (a, b) in q.matvec(&ms).iter().zip(&mm) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn rbf_transfer_on_the_sinusoidal_interface_reproduces_lines() {
    let case =
        builtin_case("t2_nonwatertight", &CaseOptions { p: vec![4, 3], nbar: 16, ..CaseOptions::default() }).unwrap();
    let patches = &case.problem.patches;
    let adj = build_adjacency(patches, &case.problem.interfaces, 1e-8).unwrap();
    let (m, s) = (&adj.faces[0], &adj.faces[1]);
    let (p, _) = rbf_transfer(&s.nodes, &m.nodes, None).unwrap();
    let src: Vec<f64> = m.nodes.iter().map(|x| x[1]).collect();
    let out = p.matvec(&src);
    let h = 1.0 / 17.0;
    let worst = s.nodes.iter().zip(&out).fold(0.0f64, |w, (x, v)| w.max((v - x[1]).abs()));
    assert!(worst < 0.0197 + h * h, "{worst}");
}

#[test]
fn ring7_adjacency_matches_the_layout() {
    let case = builtin_case("t3_ring7", &CaseOptions { nbar: 2, ..CaseOptions::default() }).unwrap();
    let adj = build_adjacency(&case.problem.patches, &case.problem.interfaces, 1e-8 * case.problem.diameter()).unwrap();
    for pr in &case.problem.interfaces {
        let m = adj.face(pr.master).unwrap();
        let s = adj.face(pr.slave).unwrap();
        assert_eq!(m.role, Role::Master);
        assert_eq!(s.role, Role::Slave);
        assert!(adj.neighbors_of(pr.slave).contains(&pr.master));
        assert!(adj.neighbors_of(pr.master).contains(&pr.slave));
    }
    // Omega_1 top faces Omega_2 and Omega_4 bottoms; Omega_6 and Omega_7 each see two slaves.
    assert_eq!(adj.neighbors_of(FaceRef { patch: 0, side: Side { dir: 1, end: 1 } }).len(), 2);
    assert_eq!(adj.neighbors_of(FaceRef { patch: 5, side: Side { dir: 0, end: 0 } }).len(), 2);
    assert_eq!(adj.neighbors_of(FaceRef { patch: 3, side: Side { dir: 0, end: 1 } }).len(), 2);
    for f in &adj.faces {
        if f.role == Role::Slave {
            assert!(f.u.iter().all(|&u| u > 0.0 && u <= 1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn transfer_is_row_stochastic(pm in 2usize..6, ps in 2usize..6, nm in 1usize..9, ns in 1usize..9) {
        let (patches, pairs) = two_rings(pm, ps, [2, nm], [2, ns]);
        let adj = build_adjacency(&patches, &pairs, 1e-8).unwrap();
        let ops = build_operators(&patches, &adj, 1e-8).unwrap();
        for (f, op) in adj.faces.iter().zip(&ops) {
            if f.role != Role::Slave {
                continue;
            }
            let mut sum = vec![0.0; f.dofs.len()];
            for (_, p) in &op.from {
                for (i, s) in sum.iter_mut().enumerate() {
                    *s += p.row(i).iter().sum::<f64>();
                }
            }
            for s in sum {
                prop_assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
            }
        }
    }

    #[test]
    fn rbf_rows_sum_to_one(n in 3usize..25, m in 2usize..25, amp in 0.0f64..0.05) {
        let src: Vec<[f64; 3]> = (0..n).map(|i| {
            let t = i as f64 / (n - 1) as f64;
            [amp * (7.0 * t).sin(), t, 0.0]
        }).collect();
        let tgt: Vec<[f64; 3]> = (0..m).map(|i| [0.0, i as f64 / (m - 1) as f64, 0.0]).collect();
        let (p, r) = rbf_transfer(&tgt, &src, None).unwrap();
        prop_assert!(r > 0.0);
        for i in 0..p.rows() {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn face_mass_is_spd_with_face_measure(p in 2usize..6, n in 1usize..7, r0 in 0.5f64..2.0, t1 in 0.3f64..1.5) {
        let patch = make_ring_sector(r0, r0 + 0.5, 0.0, t1).unwrap().refine(&[p, p], &[n, n]).unwrap();
        let side = Side { dir: 0, end: 1 };
        let m = face_mass(&patch, side);
        let total: f64 = m.as_slice().iter().sum();
        prop_assert!((total - (r0 + 0.5) * t1).abs() < 1e-10);
        prop_assert!(m.cholesky().is_ok());
    }

    #[test]
    fn stiffness_annihilates_constants(p in 2usize..6, nx in 1usize..5, ny in 1usize..5, t1 in 0.3f64..1.5) {
        let patch = make_ring_sector(1.0, 1.7, 0.2, 0.2 + t1).unwrap().refine(&[p, p], &[nx, ny]).unwrap();
        let sys = assemble_patch(&patch, &Coefficients::poisson(constant(0.0)));
        let scale = sys.a.triplets().fold(0.0f64, |m, (_, _, v)| m.max(v.abs()));
        for v in sys.a.matvec(&vec![1.0; patch.num_dofs()]) {
            prop_assert!(v.abs() < 1e-11 * scale.max(1.0));
        }
    }
}
