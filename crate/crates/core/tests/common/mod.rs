//! Shared test oracles, independent of the library's solver paths.
//!
//! Vertex enumeration brute-forces every n-row subsystem; it is only usable
//! at small dimension and facet count, which is exactly the test regime.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use safekernel::Polytope;

/// All vertices of a bounded H-polytope by exhaustive basis enumeration.
pub fn enumerate_vertices(p: &Polytope) -> Vec<DVector<f64>> {
    let n = p.dim();
    let m = p.num_facets();
    assert!(n <= 4, "vertex oracle is test-scale only");
    let mut verts: Vec<DVector<f64>> = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    if m < n {
        return verts;
    }
    loop {
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for (r, &i) in idx.iter().enumerate() {
            a.row_mut(r).copy_from(&p.normals().row(i));
            b[r] = p.offsets()[i];
        }
        if let Some(x) = a.lu().solve(&b) {
            if x.iter().all(|v| v.is_finite()) && p.contains(&x, 1e-7).unwrap() {
                if !verts.iter().any(|v| (v - &x).norm() < 1e-7) {
                    verts.push(x);
                }
            }
        }
        // next combination
        let mut k = n;
        loop {
            if k == 0 {
                return verts;
            }
            k -= 1;
            if idx[k] + (n - k) < m {
                idx[k] += 1;
                for j in (k + 1)..n {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Support by maximizing over enumerated vertices.
pub fn support_by_vertices(p: &Polytope, l: &DVector<f64>) -> f64 {
    enumerate_vertices(p)
        .iter()
        .map(|v| l.dot(v))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// A random bounded polytope: random unit facet normals at offset >= 0.3
/// (so the origin is interior) intersected with a bounding box.
pub fn random_polytope<R: Rng>(rng: &mut R, dim: usize, extra_rows: usize) -> Polytope {
    let mut rows = Vec::new();
    let mut offs = Vec::new();
    for i in 0..dim {
        let mut e = vec![0.0; dim];
        e[i] = 1.0;
        rows.push(e.clone());
        offs.push(2.0);
        e[i] = -1.0;
        rows.push(e);
        offs.push(2.0);
    }
    for _ in 0..extra_rows {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        rows.push(v.into_iter().map(|x| x / norm).collect());
        offs.push(rng.gen_range(0.3..1.8));
    }
    let m = rows.len();
    let mut nm = DMatrix::zeros(m, dim);
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            nm[(i, j)] = *v;
        }
    }
    Polytope::from_rows(nm, DVector::from_vec(offs)).unwrap()
}

/// Uniform sample from the bounding box of `p` (box inferred via support).
pub fn sample_in_bbox<R: Rng>(rng: &mut R, p: &Polytope) -> DVector<f64> {
    let n = p.dim();
    let mut x = DVector::zeros(n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        let hi = p.support(&e).unwrap();
        e[j] = -1.0;
        let lo = -p.support(&e).unwrap();
        x[j] = rng.gen_range(lo..=hi.max(lo + 1e-12));
    }
    x
}

/// Rejection-sample a point of `p`; panics if the acceptance rate collapses.
pub fn sample_in_polytope<R: Rng>(rng: &mut R, p: &Polytope) -> DVector<f64> {
    for _ in 0..20_000 {
        let x = sample_in_bbox(rng, p);
        if p.contains(&x, 0.0).unwrap() {
            return x;
        }
    }
    panic!("rejection sampling failed; polytope too thin for this test");
}
