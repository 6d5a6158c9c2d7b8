//! Euclidean projection onto `{z : A z <= b}` by a dual active-set method.
//!
//! Minimizing `0.5 ||z - x||^2` has the dual `min 0.5 l'(A A')l - l'(A x - b)`
//! over `l >= 0` with recovery `z = x - A' l`; the dual gradient coordinate of
//! a row equals its primal slack at `z`. The active set is kept linearly
//! independent, so the restricted KKT systems stay positive definite and the
//! freshly added row provably receives a positive multiplier. A dependent
//! incoming row triggers the dual swap step instead (multipliers shift along
//! the dependence coefficients until a blocking row leaves). The final active
//! set is returned so the control loop can warm-start the next sample.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Projection {
    pub point: DVector<f64>,
    pub dist: f64,
    /// Indices of rows active at the projected point.
    pub active: Vec<usize>,
}

/// Multiplier magnitude below which an active row is considered released.
const LAMBDA_TOL: f64 = 1e-11;
/// Residual norm below which an incoming row counts as dependent.
const INDEP_TOL: f64 = 1e-8;

struct Workspace<'a> {
    rows: &'a DMatrix<f64>,
    offsets: &'a DVector<f64>,
    x: &'a DVector<f64>,
    active: Vec<usize>,
    lambda: Vec<f64>,
}

impl Workspace<'_> {
    fn point(&self) -> DVector<f64> {
        let mut z = self.x.clone();
        for (k, &i) in self.active.iter().enumerate() {
            if self.lambda[k] != 0.0 {
                z -= self.rows.row(i).transpose() * self.lambda[k];
            }
        }
        z
    }

    /// KKT multipliers of the equality-constrained projection on the active
    /// rows. The set is independent by construction; a tiny ridge absorbs
    /// borderline conditioning.
    fn solve_kkt(&self) -> Result<Vec<f64>> {
        let k = self.active.len();
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut g = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for (a, &i) in self.active.iter().enumerate() {
            let ri = self.rows.row(i);
            for (b, &j) in self.active.iter().enumerate() {
                g[(a, b)] = ri.transpose().dot(&self.rows.row(j).transpose());
            }
            rhs[a] = ri.transpose().dot(self.x) - self.offsets[i];
        }
        if let Some(ch) = g.clone().cholesky() {
            return Ok(ch.solve(&rhs).iter().copied().collect());
        }
        for a in 0..k {
            g[(a, a)] += 1e-12;
        }
        g.cholesky()
            .map(|ch| ch.solve(&rhs).iter().copied().collect())
            .ok_or_else(|| Error::Numerical("projection KKT system not positive definite".into()))
    }

    /// Least-squares coefficients expressing row `j` over the active rows,
    /// with the residual norm.
    fn dependence(&self, j: usize) -> (DVector<f64>, f64) {
        let k = self.active.len();
        let n = self.rows.ncols();
        let aj = self.rows.row(j).transpose();
        if k == 0 {
            return (DVector::zeros(0), aj.norm());
        }
        let mut nt = DMatrix::zeros(n, k);
        for (c, &i) in self.active.iter().enumerate() {
            nt.column_mut(c).copy_from(&self.rows.row(i).transpose());
        }
        let svd = nt.clone().svd(true, true);
        match svd.solve(&aj, 1e-12) {
            Ok(alpha) => {
                let resid = (&nt * &alpha - &aj).norm();
                (alpha, resid)
            }
            Err(_) => (DVector::zeros(k), aj.norm()),
        }
    }

    /// Classical inner loop: re-solve on the active set, interpolating back
    /// whenever a multiplier would turn negative (the blocking row leaves).
    fn restore(&mut self) -> Result<()> {
        let max_inner = 6 * (self.rows.nrows() + 4);
        for _ in 0..max_inner {
            let trial = self.solve_kkt()?;
            if trial.iter().all(|&l| l >= -LAMBDA_TOL) {
                self.lambda = trial.iter().map(|&l| l.max(0.0)).collect();
                return Ok(());
            }
            let mut t = 1.0f64;
            let mut pivot = None;
            for k in 0..trial.len() {
                if trial[k] < -LAMBDA_TOL {
                    let denom = self.lambda[k] - trial[k];
                    if denom > 0.0 {
                        let tk = (self.lambda[k] / denom).max(0.0);
                        if tk < t {
                            t = tk;
                            pivot = Some(k);
                        }
                    }
                }
            }
            let k = match pivot {
                Some(k) => k,
                None => trial
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(k, _)| k)
                    .expect("nonempty"),
            };
            for (l, tr) in self.lambda.iter_mut().zip(trial.iter()) {
                *l += t * (tr - *l);
            }
            self.active.remove(k);
            self.lambda.remove(k);
        }
        Err(Error::Numerical("projection inner loop failed to settle".into()))
    }
}

pub fn project(
    rows: &DMatrix<f64>,
    offsets: &DVector<f64>,
    x: &DVector<f64>,
    warm: &[usize],
) -> Result<Projection> {
    let m = rows.nrows();
    let n = x.len();
    if m > 0 && rows.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: rows.ncols(),
        });
    }
    let scale = 1.0 + x.amax() + if m > 0 { offsets.amax() } else { 0.0 };
    let vtol = 1e-9 * scale;

    let mut ws = Workspace {
        rows,
        offsets,
        x,
        active: Vec::new(),
        lambda: Vec::new(),
    };
    for &w in warm {
        if w < m && !ws.active.contains(&w) && ws.dependence(w).1 > INDEP_TOL {
            ws.active.push(w);
            ws.lambda.push(0.0);
        }
    }
    if !ws.active.is_empty() {
        ws.restore()?;
    }

    let max_outer = 60 + 12 * m;
    for _ in 0..max_outer {
        let z = ws.point();
        let mut worst: Option<(usize, f64)> = None;
        for i in 0..m {
            if ws.active.contains(&i) {
                continue;
            }
            let slack = offsets[i] - rows.row(i).transpose().dot(&z);
            if slack < -vtol && worst.map_or(true, |(_, s)| slack < s) {
                worst = Some((i, slack));
            }
        }
        let Some((j, _)) = worst else {
            let dist = (x - &z).norm();
            return Ok(Projection {
                point: z,
                dist,
                active: ws.active,
            });
        };
        let (alpha, resid) = ws.dependence(j);
        if resid > INDEP_TOL {
            ws.active.push(j);
            ws.lambda.push(0.0);
            ws.restore()?;
        } else {
            // Dependent row: shift multipliers along the dependence until a
            // blocking row leaves, then swap `j` in. Strictly improves the
            // dual because the violated slack is negative.
            let mut t = f64::INFINITY;
            let mut blocker = None;
            for k in 0..alpha.len() {
                if alpha[k] > INDEP_TOL {
                    let tk = ws.lambda[k] / alpha[k];
                    if tk < t - 1e-15 || (tk < t + 1e-15 && blocker.is_some_and(|b| k > b)) {
                        t = tk;
                        blocker = Some(k);
                    }
                }
            }
            let Some(k) = blocker else {
                return Err(Error::Numerical(
                    "projection dual step unbounded; inconsistent constraint rows".into(),
                ));
            };
            for (l, a) in ws.lambda.iter_mut().zip(alpha.iter()) {
                *l = (*l - t * a).max(0.0);
            }
            ws.active.remove(k);
            ws.lambda.remove(k);
            ws.active.push(j);
            ws.lambda.push(t.max(0.0));
            ws.restore()?;
        }
    }
    Err(Error::Numerical("projection active-set iteration limit exceeded".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(dim: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut rows = DMatrix::zeros(2 * dim, dim);
        let mut off = DVector::zeros(2 * dim);
        for i in 0..dim {
            rows[(2 * i, i)] = 1.0;
            off[2 * i] = 1.0;
            rows[(2 * i + 1, i)] = -1.0;
            off[2 * i + 1] = 0.0;
        }
        (rows, off)
    }

    #[test]
    fn axis_projection() {
        let (rows, off) = unit_box(2);
        let x = DVector::from_vec(vec![2.0, 0.5]);
        let p = project(&rows, &off, &x, &[]).unwrap();
        assert!((p.point[0] - 1.0).abs() < 1e-9);
        assert!((p.point[1] - 0.5).abs() < 1e-9);
        assert!((p.dist - 1.0).abs() < 1e-9);
    }

    #[test]
    fn interior_point_unmoved() {
        let (rows, off) = unit_box(3);
        let x = DVector::from_vec(vec![0.25, 0.5, 0.75]);
        let p = project(&rows, &off, &x, &[]).unwrap();
        assert!(p.dist < 1e-12);
        assert!(p.active.is_empty());
    }

    #[test]
    fn corner_projection_two_active() {
        let (rows, off) = unit_box(2);
        let x = DVector::from_vec(vec![3.0, -2.0]);
        let p = project(&rows, &off, &x, &[]).unwrap();
        assert!((p.point[0] - 1.0).abs() < 1e-9);
        assert!(p.point[1].abs() < 1e-9);
        assert_eq!(p.active.len(), 2);
    }

    #[test]
    fn warm_start_agrees_with_cold() {
        let (rows, off) = unit_box(2);
        let x = DVector::from_vec(vec![1.7, 1.4]);
        let cold = project(&rows, &off, &x, &[]).unwrap();
        let warm = project(&rows, &off, &x, &cold.active).unwrap();
        assert!((cold.dist - warm.dist).abs() < 1e-12);
        assert!((&cold.point - &warm.point).norm() < 1e-10);
    }

    #[test]
    fn duplicate_rows_do_not_break() {
        let rows = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let off = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let x = DVector::from_vec(vec![4.0, 0.0]);
        let p = project(&rows, &off, &x, &[]).unwrap();
        assert!((p.point[0] - 1.0).abs() < 1e-8);
        assert!((p.dist - 3.0).abs() < 1e-8);
    }

    #[test]
    fn degenerate_vertex_more_rows_than_dim() {
        // Three rows meeting at the same vertex (1, 0).
        let rows = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, -1.0]);
        let off = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let x = DVector::from_vec(vec![5.0, 0.0]);
        let p = project(&rows, &off, &x, &[]).unwrap();
        assert!((p.point[0] - 1.0).abs() < 1e-8);
        assert!(p.point[1].abs() < 1e-8);
        assert!((p.dist - 4.0).abs() < 1e-8);
    }
}
