use internodes::bspline::KnotVector;
use internodes::coupling::{build_adjacency, measure_gap, FaceRef, InterfacePair};
use internodes::geometry::{make_box, make_extruded, make_ring_sector, make_ruled, Curve, Patch, Point, Side};
use proptest::prelude::*;
use std::f64::consts::{FRAC_PI_2, PI};

/// Textbook Cox-de Boor recursion with the 0/0 = 0 convention; right end closed.
fn naive_basis(knots: &[f64], p: usize, i: usize, x: f64) -> f64 {
    if p == 0 {
        let last = *knots.last().unwrap();
        let in_span = knots[i] <= x && x < knots[i + 1];
        let at_end = x == last && knots[i] < knots[i + 1] && knots[i + 1] == last;
        return if in_span || at_end { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = knots[i + p] - knots[i];
    if d1 > 0.0 {
        v += (x - knots[i]) / d1 * naive_basis(knots, p - 1, i, x);
    }
    let d2 = knots[i + p + 1] - knots[i + 1];
    if d2 > 0.0 {
        v += (knots[i + p + 1] - x) / d2 * naive_basis(knots, p - 1, i + 1, x);
    }
    v
}

fn dense_basis(kv: &KnotVector, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; kv.num_basis()];
    let (first, v) = kv.eval_basis(x).unwrap();
    for (j, b) in v.iter().enumerate() {
        out[first + j] = *b;
    }
    out
}

fn dense_derivative(kv: &KnotVector, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; kv.num_basis()];
    let (first, d) = kv.eval_basis_derivs(x, 1).unwrap();
    for (j, b) in d[1].iter().enumerate() {
        out[first + j] = *b;
    }
    out
}

#[test]
fn open_uniform_knot_vectors() {
    let kv = KnotVector::open_uniform(2, 2);
    assert_eq!(kv.knots(), &[0.0, 0.0, 0.0, 0.5, 1.0, 1.0, 1.0]);
    assert_eq!(kv.num_basis(), 4);
    let kv = KnotVector::open_uniform(1, 1);
    assert_eq!(kv.knots(), &[0.0, 0.0, 1.0, 1.0]);
    for p in 1..6 {
        for n in 1..9 {
            assert_eq!(KnotVector::open_uniform(p, n).num_basis(), n + p);
        }
    }
}

#[test]
fn hat_functions_and_slopes() {
    let kv = KnotVector::new(1, vec![0.0, 0.0, 0.5, 1.0, 1.0]).unwrap();
    let b = dense_basis(&kv, 0.25);
    assert!((b[0] - 0.5).abs() < 1e-15 && (b[1] - 0.5).abs() < 1e-15 && b[2] == 0.0);
    let d = dense_derivative(&kv, 0.25);
    assert!((d[0] + 2.0).abs() < 1e-14 && (d[1] - 2.0).abs() < 1e-14);
}

#[test]
fn cubic_basis_matches_recursive_definition() {
    let kv = KnotVector::open_uniform(3, 4);
    let b = dense_basis(&kv, 0.37);
    for (i, v) in b.iter().enumerate() {
        assert!((v - naive_basis(kv.knots(), 3, i, 0.37)).abs() < 1e-14);
    }
}

#[test]
fn cubic_derivative_matches_finite_differences() {
    let kv = KnotVector::open_uniform(3, 5);
    let (x, h) = (0.61, 1e-6);
    let d = dense_derivative(&kv, x);
    let (bp, bm) = (dense_basis(&kv, x + h), dense_basis(&kv, x - h));
    for i in 0..d.len() {
        let fd = (bp[i] - bm[i]) / (2.0 * h);
        assert!((d[i] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{i}: {} vs {fd}", d[i]);
    }
}

#[test]
fn greville_points() {
    let g = KnotVector::open_uniform(2, 2).greville();
    assert_eq!(g, vec![0.0, 0.25, 0.75, 1.0]);
    let kv = KnotVector::open_uniform(3, 4);
    let k = kv.knots();
    let brute: Vec<f64> = (0..kv.num_basis()).map(|i| (k[i + 1] + k[i + 2] + k[i + 3]) / 3.0).collect();
    for (a, b) in kv.greville().iter().zip(&brute) {
        assert!((a - b).abs() < 1e-15);
    }
}

fn sample_spline(kv: &KnotVector, c: &[f64], dim: usize) -> Vec<Vec<f64>> {
    (0..50).map(|i| kv.eval_spline(c, dim, i as f64 / 49.0).unwrap()).collect()
}

#[test]
fn knot_insertion_preserves_the_function() {
    let kv = KnotVector::open_uniform(3, 3);
    let c: Vec<f64> = (0..kv.num_basis()).map(|i| (1.3 * i as f64).sin()).collect();
    let before = sample_spline(&kv, &c, 1);
    let (kv1, c1) = kv.insert_knot(0.41, &c, 1).unwrap();
    let (kv2, c2) = kv1.insert_knot(0.41, &c1, 1).unwrap();
    assert_eq!(kv2.multiplicity(0.41), 2);
    for (a, b) in before.iter().zip(sample_spline(&kv2, &c2, 1)) {
        assert!((a[0] - b[0]).abs() < 1e-12);
    }
    let ones = vec![1.0; kv.num_basis()];
    let (_, c3) = kv.insert_knot(0.7, &ones, 1).unwrap();
    assert!(c3.iter().all(|v| (v - 1.0).abs() < 1e-15));
}

#[test]
fn degree_elevation_preserves_lines_and_arcs() {
    let kv = KnotVector::open_uniform(1, 3);
    let c = kv.greville();
    let (kv2, c2) = kv.elevate_degree(&c, 1).unwrap();
    assert_eq!(kv2.degree(), 2);
    for i in 0..50 {
        let x = i as f64 / 49.0;
        assert!((kv2.eval_spline(&c2, 1, x).unwrap()[0] - x).abs() < 1e-12);
    }
    // Quarter arc in homogeneous coordinates (w x, w y, w).
    let arc = Curve::arc([0.0; 3], 1.0, 0.0, FRAC_PI_2);
    let hom: Vec<f64> = arc.ctrl.iter().zip(&arc.weights).flat_map(|(p, w)| [w * p[0], w * p[1], *w]).collect();
    let (kv3, h3) = arc.kv.elevate_degree(&hom, 3).unwrap();
    for i in 0..50 {
        let t = i as f64 / 49.0;
        let a = arc.eval(t).unwrap();
        let h = kv3.eval_spline(&h3, 3, t).unwrap();
        assert!((h[0] / h[2] - a[0]).abs() < 1e-12 && (h[1] / h[2] - a[1]).abs() < 1e-12);
        assert!((a[0].hypot(a[1]) - 1.0).abs() < 1e-12);
    }
}

fn curve_patch(p: usize, weights: Vec<f64>) -> Patch {
    let kv = KnotVector::open_uniform(p, 1);
    let n = kv.num_basis();
    let ctrl: Vec<Point> = (0..n * n).map(|i| [(i % n) as f64, (i / n) as f64 + 0.1 * (i % n) as f64, 0.0]).collect();
    Patch::new(vec![kv.clone(), kv], ctrl, weights).unwrap()
}

#[test]
fn unit_weights_reduce_to_tensor_bsplines() {
    let kv = KnotVector::open_uniform(2, 3);
    let n = kv.num_basis();
    let ctrl: Vec<Point> = (0..n * n).map(|i| [(i % n) as f64, (i / n) as f64, 0.0]).collect();
    let patch = Patch::new(vec![kv.clone(), kv.clone()], ctrl, vec![1.0; n * n]).unwrap();
    let xi = [0.31, 0.77];
    let b = patch.eval_basis(&xi).unwrap();
    let (bx, by) = (dense_basis(&kv, xi[0]), dense_basis(&kv, xi[1]));
    for (&i, v) in b.indices.iter().zip(&b.values) {
        let [a, c, _] = patch.multi(i);
        assert!((v - bx[a] * by[c]).abs() < 1e-14);
    }
}

#[test]
fn rational_gradients_match_finite_differences() {
    let r = 0.5f64.sqrt();
    let patch = curve_patch(2, vec![1.0, r, 1.0, r, 0.5, r, 1.0, r, 1.0]);
    let xi = [0.3, 0.6];
    let b = patch.eval_basis(&xi).unwrap();
    let h = 1e-6;
    for d in 0..2 {
        let mut xp = xi;
        let mut xm = xi;
        xp[d] += h;
        xm[d] -= h;
        let (bp, bm) = (patch.eval_basis(&xp).unwrap(), patch.eval_basis(&xm).unwrap());
        for (k, &i) in b.indices.iter().enumerate() {
            let vp = bp.indices.iter().position(|&j| j == i).map_or(0.0, |q| bp.values[q]);
            let vm = bm.indices.iter().position(|&j| j == i).map_or(0.0, |q| bm.values[q]);
            let fd = (vp - vm) / (2.0 * h);
            assert!((b.grads[k][d] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }
}

#[test]
fn maps_identity_and_annulus() {
    let unit = make_box(&[0.0, 0.0], &[1.0, 1.0]);
    let x = unit.map(&[0.3, 0.8]).unwrap();
    assert!((x[0] - 0.3).abs() < 1e-15 && (x[1] - 0.8).abs() < 1e-15);
    let ring = make_ring_sector(1.0, 1.5, 0.0, FRAC_PI_2).unwrap().refine(&[3, 3], &[2, 5]).unwrap();
    for i in 0..40 {
        let t = i as f64 / 39.0;
        let x = ring.map(&[0.0, t]).unwrap();
        assert!((x[0].hypot(x[1]) - 1.0).abs() < 1e-12);
    }
    let xi = [0.4, 0.7];
    let e = ring.eval_physical(&xi).unwrap();
    let h = 1e-6;
    for d in 0..2 {
        let mut xp = xi;
        let mut xm = xi;
        xp[d] += h;
        xm[d] -= h;
        let (p, m) = (ring.map(&xp).unwrap(), ring.map(&xm).unwrap());
        for a in 0..2 {
            let fd = (p[a] - m[a]) / (2.0 * h);
            assert!((e.jac[a][d] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "J[{a}][{d}] = {} vs {fd}", e.jac[a][d]);
        }
    }
}

#[test]
fn point_inversion_round_trip_and_offsets() {
    let ring = make_ring_sector(1.0, 1.5, 0.0, FRAC_PI_2).unwrap().refine(&[2, 2], &[3, 4]).unwrap();
    let side = Side { dir: 0, end: 1 };
    for &s in &[0.0, 0.13, 0.5, 0.91, 1.0] {
        let x = ring.map(&[1.0, s]).unwrap();
        let inv = ring.invert_face(side, &x).unwrap();
        assert!((inv.params[0] - s).abs() < 1e-10 && inv.residual < 1e-10);
        if s == 0.0 || s == 1.0 {
            assert_eq!(inv.params[0], s);
        }
    }
    let unit = make_box(&[0.0, 0.0], &[1.0, 1.0]).refine(&[2, 2], &[2, 2]).unwrap();
    let inv = unit.invert_face(Side { dir: 0, end: 1 }, &[1.05, 0.4, 0.0]).unwrap();
    assert!((inv.residual - 0.05).abs() < 1e-12);
}

#[test]
fn face_traces() {
    let unit = make_box(&[0.0, 0.0], &[1.0, 1.0]).refine(&[2, 2], &[2, 2]).unwrap();
    for side in Side::all(2) {
        assert_eq!(unit.face_dofs(side).len(), 4);
        let g: Vec<f64> = unit.face_greville(side).iter().map(|s| s[0]).collect();
        assert_eq!(g, vec![0.0, 0.25, 0.75, 1.0]);
    }
    let side = Side { dir: 1, end: 0 };
    let s = [0.37];
    let (idx, vals) = unit.face_basis(side, &s).unwrap();
    let b = unit.eval_basis(&unit.face_param(side, &s)[..2]).unwrap();
    let dofs = unit.face_dofs(side);
    for (j, v) in idx.iter().zip(&vals) {
        let k = b.indices.iter().position(|&i| i == dofs[*j]).unwrap();
        assert!((b.values[k] - v).abs() < 1e-15);
    }
    let cube = make_box(&[0.0; 3], &[1.0; 3]).refine(&[2, 2, 2], &[3, 3, 3]).unwrap();
    assert_eq!(cube.face_dofs(Side { dir: 2, end: 1 }).len(), 5 * 5);
}

#[test]
fn extrusion_has_unit_vertical_jacobian_row() {
    let base = make_ring_sector(0.5, 1.0, 0.0, FRAC_PI_2).unwrap();
    let cyl = make_extruded(&base, 0.0, 1.0).unwrap();
    let e = cyl.eval_physical(&[0.3, 0.6, 0.2]).unwrap();
    assert!((e.jac[2][2] - 1.0).abs() < 1e-14);
    assert!(e.jac[2][0].abs() < 1e-14 && e.jac[2][1].abs() < 1e-14);
    assert!(e.jac[0][2].abs() < 1e-14 && e.jac[1][2].abs() < 1e-14);
}

#[test]
fn interpolated_curves() {
    let kv = KnotVector::open_uniform(3, 4);
    let line = Curve::interpolate(kv.clone(), |t| [2.0 * t - 1.0, 0.5 + t, 0.0]).unwrap();
    for i in 0..30 {
        let t = i as f64 / 29.0;
        let x = line.eval(t).unwrap();
        assert!((x[0] - 2.0 * t + 1.0).abs() < 1e-12 && (x[1] - 0.5 - t).abs() < 1e-12);
    }
    let g = |t: f64| [1.0 + 0.2 * (2.0 * PI * t).sin(), t, 0.0];
    let c = Curve::interpolate(kv.clone(), g).unwrap();
    for t in kv.greville() {
        let x = c.eval(t).unwrap();
        assert!((x[0] - g(t)[0]).abs() < 1e-12 && (x[1] - t).abs() < 1e-12);
    }
}

fn t2_side(p: usize, left: bool) -> Patch {
    let kv = KnotVector::open_uniform(p, 1);
    let c = Curve::interpolate(kv.clone(), |y| [1.0 + 0.2 * (2.0 * PI * y).sin(), y, 0.0]).unwrap();
    let x0 = if left { 0.0 } else { 2.0 };
    let l = Curve::line([x0, 0.0, 0.0], [x0, 1.0, 0.0], kv);
    if left {
        make_ruled(&l, &c).unwrap()
    } else {
        make_ruled(&c, &l).unwrap()
    }
}

#[test]
fn sinusoidal_interface_gap_for_degrees_four_and_three() {
    let patches = vec![t2_side(4, true), t2_side(3, false)];
    let pairs = [InterfacePair {
        master: FaceRef { patch: 0, side: Side { dir: 0, end: 1 } },
        slave: FaceRef { patch: 1, side: Side { dir: 0, end: 0 } },
        watertight: false,
        rbf_radius: None,
    }];
    let adj = build_adjacency(&patches, &pairs, 1e-8).unwrap();
    let d = measure_gap(&patches, &adj, 2000).unwrap();
    assert!((d - 0.0197).abs() <= 0.1 * 0.0197, "d_gamma = {d}");
}

#[test]
fn translation_moves_the_map() {
    let ring = make_ring_sector(1.0, 2.0, 0.1, 1.2).unwrap().refine(&[3, 2], &[2, 3]).unwrap();
    let v = [0.3, -1.1, 0.0];
    let mut d = ring.to_desc();
    for c in &mut d.control_points {
        c[0] += v[0];
        c[1] += v[1];
    }
    let moved = Patch::from_desc(&d).unwrap();
    for xi in [[0.0, 0.0], [0.2, 0.9], [0.5, 0.5], [1.0, 0.3]] {
        let (a, b) = (ring.map(&xi).unwrap(), moved.map(&xi).unwrap());
        assert!((b[0] - a[0] - v[0]).abs() < 1e-14 && (b[1] - a[1] - v[1]).abs() < 1e-14);
    }
}

fn knot_vector() -> impl Strategy<Value = KnotVector> {
    (1usize..6, prop::collection::vec(0.01f64..0.99, 0..6)).prop_map(|(p, mut inner)| {
        inner.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut k = vec![0.0; p + 1];
        k.extend(inner);
        k.extend(vec![1.0; p + 1]);
        KnotVector::new(p, k).unwrap()
    })
}

proptest! {
    #[test]
    fn partition_of_unity(kv in knot_vector(), x in 0.0f64..=1.0) {
        let b = dense_basis(&kv, x);
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        prop_assert!(b.iter().all(|&v| v >= -1e-15));
        let d = dense_derivative(&kv, x);
        let scale = d.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(d.iter().sum::<f64>().abs() < 1e-11 * scale);
    }

    #[test]
    fn basis_matches_recursion(kv in knot_vector(), x in 0.0f64..=1.0) {
        let b = dense_basis(&kv, x);
        for (i, v) in b.iter().enumerate() {
            prop_assert!((v - naive_basis(kv.knots(), kv.degree(), i, x)).abs() < 1e-12);
        }
    }

    #[test]
    fn greville_endpoints_and_interpolation(kv in knot_vector()) {
        let g = kv.greville();
        prop_assert_eq!(g[0], 0.0);
        prop_assert_eq!(*g.last().unwrap(), 1.0);
        let b0 = dense_basis(&kv, 0.0);
        let b1 = dense_basis(&kv, 1.0);
        prop_assert!((b0[0] - 1.0).abs() < 1e-14, "first basis at 0: {}", b0[0]);
        prop_assert!((b1.last().unwrap() - 1.0).abs() < 1e-14, "last basis at 1: {}", b1.last().unwrap());
    }

    #[test]
    fn refinement_keeps_the_curve(kv in knot_vector(), z in 0.01f64..0.99, seed in 0u64..1000) {
        let c: Vec<f64> = (0..kv.num_basis()).map(|i| ((i as u64 + seed) as f64 * 0.7).cos()).collect();
        let (ki, ci) = kv.insert_knot(z, &c, 1).unwrap();
        let (ke, ce) = kv.elevate_degree(&c, 1).unwrap();
        for i in 0..25 {
            let x = i as f64 / 24.0;
            let v = kv.eval_spline(&c, 1, x).unwrap()[0];
            prop_assert!((ki.eval_spline(&ci, 1, x).unwrap()[0] - v).abs() < 1e-12);
            prop_assert!((ke.eval_spline(&ce, 1, x).unwrap()[0] - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rational_partition_of_unity(w in prop::collection::vec(0.2f64..3.0, 9), x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
        let patch = curve_patch(2, w);
        let b = patch.eval_basis(&[x, y]).unwrap();
        prop_assert!((b.values.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        let gx: f64 = b.grads.iter().map(|g| g[0]).sum();
        let gy: f64 = b.grads.iter().map(|g| g[1]).sum();
        prop_assert!(gx.abs() < 1e-11 && gy.abs() < 1e-11);
    }

    #[test]
    fn patch_refinement_keeps_the_map(p in 1usize..4, nx in 1usize..5, ny in 1usize..5, x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
        let ring = make_ring_sector(1.0, 1.5, 0.0, FRAC_PI_2).unwrap();
        let fine = ring.refine(&[p.max(2), p + 1], &[nx, ny]).unwrap();
        let (a, b) = (ring.map(&[x, y]).unwrap(), fine.map(&[x, y]).unwrap());
        prop_assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }
}
