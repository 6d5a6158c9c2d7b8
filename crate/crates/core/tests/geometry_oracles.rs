//! Oracle-backed checks for the polytope layer: every derived expectation is
//! recomputed here through an independent route (vertex enumeration, grids,
//! direct sampling) rather than trusting the LP/QP implementation.

mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safekernel::geometry::{lp, Sense};
use safekernel::Polytope;

#[test]
fn support_matches_vertex_oracle_4d() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let p = random_polytope(&mut rng, 4, 6);
        let l = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let got = p.support(&l).unwrap();
        let want = support_by_vertices(&p, &l);
        assert!((got - want).abs() < 1e-6, "case {case}: {got} vs {want}");
    }
}

#[test]
fn solve_lp_matches_vertex_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for dim in [2usize, 3, 4] {
        for _ in 0..10 {
            let p = random_polytope(&mut rng, dim, 5);
            let c = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
            let sol = lp::optimize(&c, p.normals(), p.offsets(), Sense::Max).unwrap();
            let want = support_by_vertices(&p, &c);
            assert!((sol.value - want).abs() < 1e-6);
            assert!(p.contains(&sol.optimizer, 1e-6).unwrap());
        }
    }
}

#[test]
fn minkowski_triangle_segment_matches_vertex_sum_hull() {
    // Triangle (0,0),(1,0),(0,1) in H-form.
    let tri = Polytope::from_rows(
        DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]),
        DVector::from_vec(vec![0.0, 0.0, 1.0]),
    )
    .unwrap();
    let a = DVector::from_vec(vec![0.2, -0.4]);
    let b = DVector::from_vec(vec![-0.3, 0.5]);
    let seg = Polytope::segment(&a, &b).unwrap();
    let sum = tri.minkowski_sum_box(&seg).unwrap();

    // Oracle: support of conv{v + e : v vertex of tri, e endpoint of seg}.
    let tri_verts = enumerate_vertices(&tri);
    assert_eq!(tri_verts.len(), 3);
    let mut sum_verts = Vec::new();
    for v in &tri_verts {
        sum_verts.push(v + &a);
        sum_verts.push(v + &b);
    }
    for k in 0..64 {
        let th = std::f64::consts::TAU * (k as f64) / 64.0;
        let l = DVector::from_vec(vec![th.cos(), th.sin()]);
        let want = sum_verts.iter().map(|v| l.dot(v)).fold(f64::NEG_INFINITY, f64::max);
        let got = sum.support(&l).unwrap();
        assert!((got - want).abs() < 1e-7, "theta {th}: {got} vs {want}");
    }
}

#[test]
fn minkowski_box_summand_matches_vertex_sum_hull() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = random_polytope(&mut rng, 2, 4);
    let s = Polytope::bounding_box(
        &DVector::from_vec(vec![-0.3, -0.1]),
        &DVector::from_vec(vec![0.2, 0.4]),
    )
    .unwrap();
    let sum = p.minkowski_sum_box(&s).unwrap();
    let pv = enumerate_vertices(&p);
    let sv = enumerate_vertices(&s);
    for k in 0..48 {
        let th = std::f64::consts::TAU * (k as f64) / 48.0;
        let l = DVector::from_vec(vec![th.cos(), th.sin()]);
        let mut want = f64::NEG_INFINITY;
        for v in &pv {
            for w in &sv {
                want = want.max(l.dot(v) + l.dot(w));
            }
        }
        let got = sum.support(&l).unwrap();
        assert!((got - want).abs() < 1e-7);
    }
}

#[test]
fn affine_preimage_membership_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = Polytope::bounding_box(
        &DVector::from_vec(vec![-1.0, -0.5, 0.0]),
        &DVector::from_vec(vec![1.0, 1.5, 2.0]),
    )
    .unwrap();
    // Random well-conditioned 3x3 map (diagonally dominant).
    let mut m = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-0.3..0.3));
    for i in 0..3 {
        m[(i, i)] += 1.5;
    }
    let pre = p.affine_preimage(&m).unwrap();
    for _ in 0..1000 {
        let x = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
        let in_pre = pre.contains(&x, 1e-9).unwrap();
        let fwd_in = p.contains(&(&m * &x), 1e-9).unwrap();
        assert_eq!(in_pre, fwd_in);
    }
}

#[test]
fn projection_distance_matches_grid_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..5 {
        let p = random_polytope(&mut rng, 2, 5);
        let x = DVector::from_vec(vec![rng.gen_range(1.5..4.0), rng.gen_range(1.5..4.0)]);
        let (_, dist, _) = p.euclidean_project(&x).unwrap();
        // Dense-grid minimum over the bounding box.
        let h = 0.01;
        let mut best = f64::INFINITY;
        let mut gy = -2.0;
        while gy <= 2.0 {
            let mut gx = -2.0;
            while gx <= 2.0 {
                let g = DVector::from_vec(vec![gx, gy]);
                if p.contains(&g, 1e-9).unwrap() {
                    best = best.min((&g - &x).norm());
                }
                gx += h;
            }
            gy += h;
        }
        assert!(dist <= best + 1e-9, "QP above grid minimum");
        assert!(best - dist <= 2.0 * h, "grid gap too large: {best} vs {dist}");
    }
}

#[test]
fn projection_variational_inequality_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..50 {
        let p = random_polytope(&mut rng, 3, 6);
        let x = DVector::from_fn(3, |_, _| rng.gen_range(-4.0..4.0));
        let (point, dist, l0) = p.euclidean_project(&x).unwrap();
        assert!(p.contains(&point, 1e-6).unwrap());
        if l0.is_zero() {
            assert!(dist <= 1e-9);
            continue;
        }
        assert!((l0.vector().dot(&(&x - &point)) - dist).abs() < 1e-7);
        for _ in 0..30 {
            let v = sample_in_polytope(&mut rng, &p);
            assert!(l0.vector().dot(&(&v - &point)) <= 1e-6);
        }
    }
}

#[test]
fn reduce_preserves_membership_random_3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // Redundant system: random rows plus duplicates at looser offsets.
    let base = random_polytope(&mut rng, 3, 8);
    let m = base.num_facets();
    let mut nm = DMatrix::zeros(2 * m, 3);
    let mut off = DVector::zeros(2 * m);
    for i in 0..m {
        nm.row_mut(i).copy_from(&base.normals().row(i));
        off[i] = base.offsets()[i];
        nm.row_mut(m + i).copy_from(&base.normals().row(i));
        off[m + i] = base.offsets()[i] + rng.gen_range(0.1..1.0);
    }
    let fat = Polytope::from_rows(nm, off).unwrap();
    let red = fat.reduce().unwrap();
    assert!(red.num_facets() <= base.num_facets());
    for _ in 0..10_000 {
        let x = DVector::from_fn(3, |_, _| rng.gen_range(-2.5..2.5));
        assert_eq!(
            fat.contains(&x, 1e-9).unwrap(),
            red.contains(&x, 1e-9).unwrap()
        );
    }
}

#[test]
fn support_dominates_members() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..20 {
        let p = random_polytope(&mut rng, 3, 5);
        let l = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let s = p.support(&l).unwrap();
        for _ in 0..50 {
            let x = sample_in_polytope(&mut rng, &p);
            assert!(l.dot(&x) <= s + 1e-7);
        }
    }
}

#[test]
fn intersect_commutative_associative_membership() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let a = random_polytope(&mut rng, 2, 4);
    let b = random_polytope(&mut rng, 2, 4);
    let c = random_polytope(&mut rng, 2, 4);
    let ab = a.intersect(&b).unwrap();
    let ba = b.intersect(&a).unwrap();
    let ab_c = ab.intersect(&c).unwrap();
    let a_bc = a.intersect(&b.intersect(&c).unwrap()).unwrap();
    for _ in 0..2000 {
        let x = DVector::from_fn(2, |_, _| rng.gen_range(-2.5..2.5));
        assert_eq!(ab.contains(&x, 1e-9).unwrap(), ba.contains(&x, 1e-9).unwrap());
        assert_eq!(
            ab_c.contains(&x, 1e-9).unwrap(),
            a_bc.contains(&x, 1e-9).unwrap()
        );
    }
}
