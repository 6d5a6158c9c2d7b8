//! Convex polytopes in half-space representation and the set operations the
//! kernel recursion is built from.
//!
//! Conventions:
//! - a polytope is `{x : normals * x <= offsets}` with unit-norm rows in a
//!   canonical (lexicographic) order, so equal sets built along different
//!   paths serialize identically;
//! - the empty set carries an explicit flag instead of inconsistent rows;
//! - every operation errs toward smaller sets (the facet cap shrinks offsets,
//!   never grows them) so downstream safety arguments survive reduction.

pub mod lp;
pub mod qp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lp::{LpSolution, LpStatus, Sense};

/// Feasibility tolerance for membership and LP status decisions.
pub const FEASIBILITY_TOL: f64 = 1e-7;
/// Slack threshold below which a facet counts as redundant.
pub const REDUNDANCY_TOL: f64 = 1e-7;
/// Unit-norm tolerance for directions.
pub const UNIT_TOL: f64 = 1e-9;
/// Row normals shorter than this are treated as zero rows.
const ZERO_ROW_TOL: f64 = 1e-12;

/// A unit-norm direction in state space, or the zero flag when the queried
/// point lies inside the set and no maximizing direction exists.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    l: DVector<f64>,
    zero: bool,
}

impl Direction {
    pub fn unit(v: DVector<f64>) -> Result<Self> {
        let n = v.norm();
        if n < ZERO_ROW_TOL {
            return Err(Error::Domain("cannot normalize a near-zero direction".into()));
        }
        let l = v / n;
        debug_assert!((l.norm() - 1.0).abs() <= UNIT_TOL);
        Ok(Self { l, zero: false })
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            l: DVector::zeros(dim),
            zero: true,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// The unit vector; all zeros when the zero flag is set.
    pub fn vector(&self) -> &DVector<f64> {
        &self.l
    }
}

#[derive(Debug, Clone)]
pub struct Polytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
    dim: usize,
    empty: bool,
}

impl Polytope {
    /// Build from raw half-space rows. Rows are normalized to unit norm,
    /// sorted lexicographically and deduplicated; an infeasible zero row
    /// (`0.x <= b` with `b < 0`) yields the empty set.
    pub fn from_rows(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self> {
        let dim = normals.ncols();
        if dim == 0 {
            return Err(Error::Domain("polytope dimension must be positive".into()));
        }
        if normals.nrows() != offsets.len() {
            return Err(Error::DimensionMismatch {
                expected: normals.nrows(),
                got: offsets.len(),
            });
        }
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(normals.nrows());
        for i in 0..normals.nrows() {
            let r = normals.row(i);
            let norm = r.norm();
            let b = offsets[i];
            if norm < ZERO_ROW_TOL {
                if b < -FEASIBILITY_TOL {
                    return Ok(Self::empty(dim));
                }
                continue; // trivially satisfied row
            }
            if !r.iter().all(|v| v.is_finite()) || !b.is_finite() {
                return Err(Error::Domain("non-finite half-space row".into()));
            }
            rows.push((r.iter().map(|v| v / norm).collect(), b / norm));
        }
        rows.sort_by(|a, b| lex_cmp(&a.0, a.1, &b.0, b.1));
        // Rows with (nearly) identical normals collapse to the tightest offset.
        let mut kept: Vec<(Vec<f64>, f64)> = Vec::with_capacity(rows.len());
        for (n, b) in rows {
            match kept.last_mut() {
                Some((pn, pb)) if normals_close(pn, &n) => {
                    if b < *pb {
                        *pb = b;
                    }
                }
                _ => kept.push((n, b)),
            }
        }
        let m = kept.len();
        let mut nm = DMatrix::zeros(m, dim);
        let mut off = DVector::zeros(m);
        for (i, (n, b)) in kept.into_iter().enumerate() {
            for (j, v) in n.into_iter().enumerate() {
                nm[(i, j)] = v;
            }
            off[i] = b;
        }
        Ok(Self {
            normals: nm,
            offsets: off,
            dim,
            empty: false,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            normals: DMatrix::zeros(0, dim),
            offsets: DVector::zeros(0),
            dim,
            empty: true,
        }
    }

    /// Axis-aligned box `[lo, hi]` (componentwise, degenerate widths allowed).
    pub fn bounding_box(lo: &DVector<f64>, hi: &DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        let dim = lo.len();
        if (0..dim).any(|i| lo[i] > hi[i]) {
            return Ok(Self::empty(dim));
        }
        let mut nm = DMatrix::zeros(2 * dim, dim);
        let mut off = DVector::zeros(2 * dim);
        for i in 0..dim {
            nm[(2 * i, i)] = 1.0;
            off[2 * i] = hi[i];
            nm[(2 * i + 1, i)] = -1.0;
            off[2 * i + 1] = -lo[i];
        }
        Self::from_rows(nm, off)
    }

    /// 1D interval helper.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::bounding_box(&DVector::from_vec(vec![lo]), &DVector::from_vec(vec![hi]))
    }

    /// H-representation of the segment `conv{a, b}` (degenerates to a point).
    pub fn segment(a: &DVector<f64>, b: &DVector<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                got: b.len(),
            });
        }
        let dim = a.len();
        let d = b - a;
        if d.norm() < ZERO_ROW_TOL {
            return Self::bounding_box(a, a);
        }
        let basis = orthonormal_with_first(&d);
        let mut nm = DMatrix::zeros(2 * dim, dim);
        let mut off = DVector::zeros(2 * dim);
        for (k, q) in basis.iter().enumerate() {
            let qa = q.dot(a);
            let qb = q.dot(b);
            nm.row_mut(2 * k).copy_from(&q.transpose());
            off[2 * k] = qa.max(qb);
            nm.row_mut(2 * k + 1).copy_from(&(-q).transpose());
            off[2 * k + 1] = -qa.min(qb);
        }
        Self::from_rows(nm, off)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_facets(&self) -> usize {
        self.normals.nrows()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    /// The explicit empty flag (does not run a feasibility check).
    pub fn is_empty(&self) -> bool {
        self.empty
    }

    /// LP-backed emptiness check.
    pub fn detect_empty(&self) -> Result<bool> {
        if self.empty {
            return Ok(true);
        }
        let sol = lp::maximize(&DVector::zeros(self.dim), &self.normals, &self.offsets)?;
        Ok(sol.status == LpStatus::Infeasible)
    }

    /// Support function `max { <l, z> : z in P }`; `+inf` when unbounded in
    /// direction `l`.
    pub fn support(&self, l: &DVector<f64>) -> Result<f64> {
        Ok(self.support_with_point(l)?.0)
    }

    /// Support value together with a maximizer (the maximizer is unspecified
    /// for unbounded directions).
    pub fn support_with_point(&self, l: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        if self.empty {
            return Err(Error::EmptySet);
        }
        if l.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: l.len(),
            });
        }
        if !l.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("support direction must be finite".into()));
        }
        let sol = lp::maximize(l, &self.normals, &self.offsets)?;
        match sol.status {
            LpStatus::Optimal => Ok((sol.value, sol.optimizer)),
            LpStatus::Unbounded => Ok((f64::INFINITY, sol.optimizer)),
            LpStatus::Infeasible => Err(Error::EmptySet),
        }
    }

    /// Componentwise membership test `normals.x <= offsets + tol`.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if self.empty {
            return Ok(false);
        }
        for i in 0..self.normals.nrows() {
            if self.normals.row(i).transpose().dot(x) > self.offsets[i] + tol {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Row concatenation followed by redundancy removal.
    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        if self.empty || other.empty {
            return Ok(Polytope::empty(self.dim));
        }
        let m = self.normals.nrows() + other.normals.nrows();
        let mut nm = DMatrix::zeros(m, self.dim);
        let mut off = DVector::zeros(m);
        nm.rows_mut(0, self.normals.nrows()).copy_from(&self.normals);
        off.rows_mut(0, self.offsets.len()).copy_from(&self.offsets);
        nm.rows_mut(self.normals.nrows(), other.normals.nrows())
            .copy_from(&other.normals);
        off.rows_mut(self.offsets.len(), other.offsets.len())
            .copy_from(&other.offsets);
        Polytope::from_rows(nm, off)?.reduce()
    }

    /// Translate by `v`.
    pub fn translate(&self, v: &DVector<f64>) -> Result<Polytope> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        if self.empty {
            return Ok(self.clone());
        }
        let off = &self.offsets + &self.normals * v;
        Polytope::from_rows(self.normals.clone(), off)
    }

    /// Minkowski sum with an axis-aligned box or a segment, exact via
    /// one-variable Fourier-Motzkin sweeps along the summand generators.
    pub fn minkowski_sum_box(&self, summand: &Polytope) -> Result<Polytope> {
        if self.dim != summand.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: summand.dim,
            });
        }
        if summand.empty {
            return Err(Error::EmptySet);
        }
        if self.empty {
            return Ok(self.clone());
        }
        if let Some((lo, hi)) = summand.as_axis_box()? {
            let mut acc = self.translate(&lo)?;
            for i in 0..self.dim {
                let w = hi[i] - lo[i];
                if w > ZERO_ROW_TOL {
                    let mut s = DVector::zeros(self.dim);
                    s[i] = w;
                    acc = acc.fm_sweep(&s)?.reduce()?;
                }
            }
            return Ok(acc);
        }
        if let Some((a, b)) = summand.as_segment()? {
            let shifted = self.translate(&a)?;
            let d = &b - &a;
            if d.norm() < ZERO_ROW_TOL {
                return Ok(shifted);
            }
            return shifted.fm_sweep(&d)?.reduce();
        }
        Err(Error::UnsupportedSummand)
    }

    /// `P (+) conv{0, s}` by eliminating the sweep variable `t in [0,1]`.
    fn fm_sweep(&self, s: &DVector<f64>) -> Result<Polytope> {
        let m = self.normals.nrows();
        let gammas: Vec<f64> = (0..m).map(|i| self.normals.row(i).transpose().dot(s)).collect();
        let mut out_rows: Vec<Vec<f64>> = Vec::new();
        let mut out_off: Vec<f64> = Vec::new();
        let mut push = |row: Vec<f64>, b: f64| {
            out_rows.push(row);
            out_off.push(b);
        };
        let uppers: Vec<usize> = (0..m).filter(|&i| gammas[i] < -ZERO_ROW_TOL).collect();
        let lowers: Vec<usize> = (0..m).filter(|&i| gammas[i] > ZERO_ROW_TOL).collect();
        for i in 0..m {
            let g = gammas[i];
            let row: Vec<f64> = self.normals.row(i).iter().copied().collect();
            if g.abs() <= ZERO_ROW_TOL {
                push(row, self.offsets[i]);
            } else if g < 0.0 {
                // Pairs with t >= 0: row unchanged.
                push(row, self.offsets[i]);
            } else {
                // Pairs with t <= 1: row shifted to the far end of the sweep.
                push(row, self.offsets[i] + g);
            }
        }
        for &i in &uppers {
            for &j in &lowers {
                // Eliminate t between an upper (gamma_i < 0) and a lower row.
                let (gi, gj) = (gammas[i], gammas[j]);
                let mut row = vec![0.0; self.dim];
                for k in 0..self.dim {
                    row[k] = gj * self.normals[(i, k)] - gi * self.normals[(j, k)];
                }
                push(row, gj * self.offsets[i] - gi * self.offsets[j]);
            }
        }
        let mr = out_rows.len();
        let mut nm = DMatrix::zeros(mr, self.dim);
        let mut off = DVector::zeros(mr);
        for (i, (r, b)) in out_rows.into_iter().zip(out_off).enumerate() {
            for (j, v) in r.into_iter().enumerate() {
                nm[(i, j)] = v;
            }
            off[i] = b;
        }
        Polytope::from_rows(nm, off)
    }

    /// `{x : M x in P}` for invertible `M`.
    pub fn affine_preimage(&self, m: &DMatrix<f64>) -> Result<Polytope> {
        if m.nrows() != self.dim || m.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: m.nrows().max(m.ncols()),
            });
        }
        let svd = m.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(smin > smax * 1e-12) {
            return Err(Error::SingularMatrix { cond });
        }
        if self.empty {
            return Ok(self.clone());
        }
        Polytope::from_rows(&self.normals * m, self.offsets.clone())
    }

    /// Euclidean projection: closest point, distance and the maximizing unit
    /// direction of the distance program (zero-flagged for interior points).
    pub fn euclidean_project(&self, x: &DVector<f64>) -> Result<(DVector<f64>, f64, Direction)> {
        self.euclidean_project_warm(x, &[]).map(|(p, d, l, _)| (p, d, l))
    }

    /// Projection with a warm-started active set; returns the active rows for
    /// reuse on the next call.
    pub fn euclidean_project_warm(
        &self,
        x: &DVector<f64>,
        warm: &[usize],
    ) -> Result<(DVector<f64>, f64, Direction, Vec<usize>)> {
        if self.empty {
            return Err(Error::EmptySet);
        }
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let proj = qp::project(&self.normals, &self.offsets, x, warm)?;
        if proj.dist <= UNIT_TOL {
            return Ok((x.clone(), 0.0, Direction::zero(self.dim), proj.active));
        }
        let l0 = Direction::unit(x - &proj.point)?;
        Ok((proj.point, proj.dist, l0, proj.active))
    }

    /// Signed inner distance: the inscribed-ball radius around `x` for
    /// interior points (min facet slack), minus the projection distance
    /// outside, and `-inf`-free for the empty set (error instead).
    pub fn signed_distance(&self, x: &DVector<f64>) -> Result<f64> {
        if self.empty {
            return Err(Error::EmptySet);
        }
        if self.contains(x, 0.0)? {
            let mut d = f64::INFINITY;
            for i in 0..self.normals.nrows() {
                d = d.min(self.offsets[i] - self.normals.row(i).transpose().dot(x));
            }
            Ok(d)
        } else {
            let (_, dist, _) = self.euclidean_project(x)?;
            Ok(-dist)
        }
    }

    /// Remove every redundant facet (LP test per row, with a sound
    /// bounding-box prefilter). Set equality is preserved.
    pub fn reduce(&self) -> Result<Polytope> {
        self.reduce_impl(None)
    }

    /// Redundancy removal plus a facet cap: when more than `cap` facets
    /// survive, the least-binding ones are dropped and all remaining offsets
    /// are shrunk by the worst induced gap, so the result is contained in the
    /// original set.
    pub fn reduce_capped(&self, cap: usize) -> Result<Polytope> {
        self.reduce_impl(Some(cap))
    }

    fn reduce_impl(&self, cap: Option<usize>) -> Result<Polytope> {
        if self.empty || self.normals.nrows() == 0 {
            return Ok(self.clone());
        }
        let feas = lp::maximize(&DVector::zeros(self.dim), &self.normals, &self.offsets)?;
        if feas.status == LpStatus::Infeasible {
            return Ok(Polytope::empty(self.dim));
        }
        let interior = feas.optimizer;

        // Bounding box of the whole set: a row strictly slack on the box is
        // slack on the set, hence redundant (and dropping redundant rows does
        // not change the set, so several may go at once).
        let m = self.normals.nrows();
        let mut lo = vec![f64::NEG_INFINITY; self.dim];
        let mut hi = vec![f64::INFINITY; self.dim];
        for j in 0..self.dim {
            let mut e = DVector::zeros(self.dim);
            e[j] = 1.0;
            let up = lp::maximize(&e, &self.normals, &self.offsets)?;
            if up.status == LpStatus::Optimal {
                hi[j] = up.value;
            }
            e[j] = -1.0;
            let dn = lp::maximize(&e, &self.normals, &self.offsets)?;
            if dn.status == LpStatus::Optimal {
                lo[j] = -dn.value;
            }
        }
        let mut alive: Vec<bool> = vec![true; m];
        for i in 0..m {
            let mut worst = 0.0;
            for j in 0..self.dim {
                let a = self.normals[(i, j)];
                worst += if a >= 0.0 { a * hi[j] } else { a * lo[j] };
                if !worst.is_finite() {
                    break;
                }
            }
            if worst.is_finite() && worst < self.offsets[i] - REDUNDANCY_TOL {
                alive[i] = false;
            }
        }

        // LP pass over the survivors, loosest-at-the-interior-point first so
        // the working system shrinks early.
        let mut order: Vec<usize> = (0..m).filter(|&i| alive[i]).collect();
        order.sort_by(|&a, &b| {
            let sa = self.offsets[a] - self.normals.row(a).transpose().dot(&interior);
            let sb = self.offsets[b] - self.normals.row(b).transpose().dot(&interior);
            sb.partial_cmp(&sa).unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut gaps: Vec<f64> = vec![f64::INFINITY; m];
        for &i in &order {
            let (rows, offs, _) = gather(&self.normals, &self.offsets, &alive, Some(i));
            let c = self.normals.row(i).transpose();
            let sol = lp::maximize(&c, &rows, &offs)?;
            match sol.status {
                LpStatus::Optimal => {
                    let gap = sol.value - self.offsets[i];
                    if gap <= REDUNDANCY_TOL {
                        alive[i] = false;
                    } else {
                        gaps[i] = gap;
                    }
                }
                LpStatus::Unbounded => {
                    gaps[i] = f64::INFINITY;
                }
                LpStatus::Infeasible => return Ok(Polytope::empty(self.dim)),
            }
        }

        let kept: Vec<usize> = (0..m).filter(|&i| alive[i]).collect();
        if let Some(cap) = cap {
            if kept.len() > cap {
                return self.apply_cap(&kept, &gaps, cap);
            }
        }
        let (rows, offs, _) = gather(&self.normals, &self.offsets, &alive, None);
        Polytope::from_rows(rows, offs)
    }

    /// Drop the least-binding facets down to `cap` (greedily, one at a time,
    /// so ties spread out instead of carving a wedge), then shrink every kept
    /// offset by the worst gap among the dropped ones, which keeps the result
    /// inside the original set (erosion by a ball dominates the droppage).
    fn apply_cap(&self, kept: &[usize], gaps: &[f64], cap: usize) -> Result<Polytope> {
        let mut survivors: Vec<usize> = kept.to_vec();
        let mut cur_gaps: std::collections::HashMap<usize, f64> =
            kept.iter().map(|&i| (i, gaps[i])).collect();
        let mut dropped: Vec<usize> = Vec::new();
        while survivors.len() > cap {
            let pick = survivors
                .iter()
                .copied()
                .filter(|i| cur_gaps[i].is_finite())
                .min_by(|a, b| cur_gaps[a].partial_cmp(&cur_gaps[b]).unwrap());
            let Some(d) = pick else { break };
            survivors.retain(|&i| i != d);
            dropped.push(d);
            // The set grew: refresh the gap of every remaining facet.
            for &i in &survivors {
                let keep: Vec<bool> = (0..self.normals.nrows())
                    .map(|k| survivors.contains(&k) && k != i)
                    .collect();
                let (rows, offs, _) = gather(&self.normals, &self.offsets, &keep, None);
                let c = self.normals.row(i).transpose();
                let sol = lp::maximize(&c, &rows, &offs)?;
                let g = match sol.status {
                    LpStatus::Optimal => sol.value - self.offsets[i],
                    LpStatus::Unbounded => f64::INFINITY,
                    LpStatus::Infeasible => return Ok(Polytope::empty(self.dim)),
                };
                cur_gaps.insert(i, g);
            }
        }
        if dropped.is_empty() {
            // Every candidate had an unbounded gap; nothing sound to drop.
            let idx: Vec<bool> = (0..self.normals.nrows()).map(|i| kept.contains(&i)).collect();
            let (rows, offs, _) = gather(&self.normals, &self.offsets, &idx, None);
            return Polytope::from_rows(rows, offs);
        }
        survivors.sort_unstable();
        let mut rows = DMatrix::zeros(survivors.len(), self.dim);
        let mut offs = DVector::zeros(survivors.len());
        for (k, &i) in survivors.iter().enumerate() {
            rows.row_mut(k).copy_from(&self.normals.row(i));
            offs[k] = self.offsets[i];
        }
        // Recompute the true gap of each dropped row against the survivors.
        let mut erosion = 0.0f64;
        for &d in &dropped {
            let c = self.normals.row(d).transpose();
            let sol = lp::maximize(&c, &rows, &offs)?;
            let gap = match sol.status {
                LpStatus::Optimal => (sol.value - self.offsets[d]).max(0.0),
                LpStatus::Unbounded => {
                    return Err(Error::Numerical(
                        "facet cap dropped a row that bounded the set".into(),
                    ))
                }
                LpStatus::Infeasible => return Ok(Polytope::empty(self.dim)),
            };
            erosion = erosion.max(gap);
        }
        for k in 0..offs.len() {
            offs[k] -= erosion;
        }
        let shrunk = Polytope::from_rows(rows, offs)?;
        if shrunk.detect_empty()? {
            return Ok(Polytope::empty(self.dim));
        }
        shrunk.reduce()
    }

    /// Chebyshev center and radius (largest inscribed ball).
    pub fn chebyshev(&self) -> Result<(DVector<f64>, f64)> {
        if self.empty {
            return Err(Error::EmptySet);
        }
        let m = self.normals.nrows();
        let mut rows = DMatrix::zeros(m, self.dim + 1);
        for i in 0..m {
            for j in 0..self.dim {
                rows[(i, j)] = self.normals[(i, j)];
            }
            rows[(i, self.dim)] = 1.0; // unit-norm rows
        }
        let mut c = DVector::zeros(self.dim + 1);
        c[self.dim] = 1.0;
        let sol = lp::maximize(&c, &rows, &self.offsets)?;
        match sol.status {
            LpStatus::Optimal => {
                let center = sol.optimizer.rows(0, self.dim).into_owned();
                Ok((center, sol.value))
            }
            LpStatus::Unbounded => Ok((DVector::zeros(self.dim), f64::INFINITY)),
            LpStatus::Infeasible => Err(Error::EmptySet),
        }
    }

    /// Interval bounds when this set is an axis-aligned box in disguise.
    fn as_axis_box(&self) -> Result<Option<(DVector<f64>, DVector<f64>)>> {
        let m = self.normals.nrows();
        let mut lo = vec![f64::NEG_INFINITY; self.dim];
        let mut hi = vec![f64::INFINITY; self.dim];
        for i in 0..m {
            let row = self.normals.row(i);
            let mut axis = None;
            for j in 0..self.dim {
                let v = row[j];
                if v.abs() > 1.0 - UNIT_TOL {
                    axis = Some((j, v.signum()));
                } else if v.abs() > UNIT_TOL {
                    return Ok(None);
                }
            }
            let Some((j, s)) = axis else { return Ok(None) };
            if s > 0.0 {
                hi[j] = hi[j].min(self.offsets[i]);
            } else {
                lo[j] = lo[j].max(-self.offsets[i]);
            }
        }
        if lo.iter().any(|v| !v.is_finite()) || hi.iter().any(|v| !v.is_finite()) {
            return Ok(None);
        }
        Ok(Some((DVector::from_vec(lo), DVector::from_vec(hi))))
    }

    /// Endpoints when this set is a segment (checked by support probing).
    fn as_segment(&self) -> Result<Option<(DVector<f64>, DVector<f64>)>> {
        let mut probes: Vec<DVector<f64>> = Vec::new();
        for j in 0..self.dim {
            let mut e = DVector::zeros(self.dim);
            e[j] = 1.0;
            probes.push(e.clone());
            probes.push(-e);
        }
        probes.push(DVector::from_element(self.dim, 1.0 / (self.dim as f64).sqrt()));
        let mut pts: Vec<DVector<f64>> = Vec::new();
        for p in &probes {
            let (v, x) = self.support_with_point(p)?;
            if !v.is_finite() {
                return Ok(None);
            }
            pts.push(x);
        }
        let mut best = (0usize, 0usize, 0.0f64);
        for i in 0..pts.len() {
            for j in (i + 1)..pts.len() {
                let d = (&pts[i] - &pts[j]).norm();
                if d > best.2 {
                    best = (i, j, d);
                }
            }
        }
        let (a, b) = (pts[best.0].clone(), pts[best.1].clone());
        let scale = 1.0 + a.amax().max(b.amax());
        let tol = 1e-7 * scale;
        if best.2 < ZERO_ROW_TOL {
            return Ok(Some((a.clone(), a))); // a point
        }
        // Verify: the support of the set matches the segment's support along
        // the set's own rows and along directions orthogonal to the chord.
        let mut checks: Vec<DVector<f64>> = (0..self.normals.nrows())
            .map(|i| self.normals.row(i).transpose())
            .collect();
        for q in orthonormal_with_first(&(&b - &a)).into_iter().skip(1) {
            checks.push(q.clone());
            checks.push(-q);
        }
        for q in checks {
            let v = self.support(&q)?;
            let seg = q.dot(&a).max(q.dot(&b));
            if !v.is_finite() || (v - seg).abs() > tol {
                return Ok(None);
            }
        }
        Ok(Some((a, b)))
    }
}

fn gather(
    normals: &DMatrix<f64>,
    offsets: &DVector<f64>,
    alive: &[bool],
    skip: Option<usize>,
) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
    let idx: Vec<usize> = (0..normals.nrows())
        .filter(|&i| alive[i] && Some(i) != skip)
        .collect();
    let mut rows = DMatrix::zeros(idx.len(), normals.ncols());
    let mut offs = DVector::zeros(idx.len());
    for (k, &i) in idx.iter().enumerate() {
        rows.row_mut(k).copy_from(&normals.row(i));
        offs[k] = offsets[i];
    }
    (rows, offs, idx)
}

fn lex_cmp(a: &[f64], ab: f64, b: &[f64], bb: f64) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    ab.partial_cmp(&bb).unwrap_or(std::cmp::Ordering::Equal)
}

fn normals_close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-9)
}

/// Orthonormal basis whose first vector is `d / ||d||` (Gram-Schmidt over the
/// standard basis).
fn orthonormal_with_first(d: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = d.len();
    let mut basis: Vec<DVector<f64>> = vec![d / d.norm()];
    for j in 0..n {
        if basis.len() == n {
            break;
        }
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        for q in &basis {
            let p = q.dot(&e);
            e -= q * p;
        }
        let norm = e.norm();
        if norm > 1e-9 {
            basis.push(e / norm);
        }
    }
    basis
}

// --- serde: fixed exchange schema with deterministic row order -------------

#[derive(Serialize, Deserialize)]
struct PolytopeRepr {
    dim: usize,
    normals: Vec<Vec<f64>>,
    offsets: Vec<f64>,
    empty: bool,
}

impl Serialize for Polytope {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = PolytopeRepr {
            dim: self.dim,
            normals: (0..self.normals.nrows())
                .map(|i| self.normals.row(i).iter().copied().collect())
                .collect(),
            offsets: self.offsets.iter().copied().collect(),
            empty: self.empty,
        };
        repr.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Polytope {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let repr = PolytopeRepr::deserialize(de)?;
        if repr.empty {
            return Ok(Polytope::empty(repr.dim.max(1)));
        }
        let m = repr.normals.len();
        let dim = repr.dim;
        let mut nm = DMatrix::zeros(m, dim);
        for (i, row) in repr.normals.iter().enumerate() {
            if row.len() != dim {
                return Err(serde::de::Error::custom("normal row length mismatch"));
            }
            for (j, v) in row.iter().enumerate() {
                nm[(i, j)] = *v;
            }
        }
        if repr.offsets.len() != m {
            return Err(serde::de::Error::custom("offsets length mismatch"));
        }
        Polytope::from_rows(nm, DVector::from_vec(repr.offsets))
            .map_err(|e| serde::de::Error::custom(e.to_string()))
    }
}
