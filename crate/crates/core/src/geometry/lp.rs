//! Dense linear programming for inequality systems `A x <= b` with few
//! variables and many rows.
//!
//! The primal `max c.x  s.t.  A x <= b` (x free) is solved through its dual
//! `min b.y  s.t.  A' y = c, y >= 0`, which has only `n` equality rows. A
//! full-tableau two-phase simplex with Bland's rule runs on the dual; the
//! primal optimizer is recovered from the simplex multipliers. Kernel
//! recursions call this thousands of times with n <= 5, so the tableau stays
//! tiny no matter how many facets pile up.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Feasibility tolerance for constraint satisfaction checks.
pub const FEAS_TOL: f64 = 1e-7;
/// Smallest pivot magnitude accepted during elimination.
const PIVOT_TOL: f64 = 1e-9;
/// Reduced-cost threshold below which a column may enter the basis.
const COST_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// Outcome of one LP solve. `optimizer`/`value` are meaningful only when
/// `status == Optimal`; an unbounded maximization reports `value = +inf`.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    pub optimizer: DVector<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Max,
    Min,
}

/// Maximize `c.x` over `{x : rows.x <= offsets}`.
pub fn maximize(c: &DVector<f64>, rows: &DMatrix<f64>, offsets: &DVector<f64>) -> Result<LpSolution> {
    let n = c.len();
    let m = rows.nrows();
    if m > 0 && rows.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: rows.ncols(),
        });
    }
    if m == 0 {
        // No constraints: optimal only for a zero objective.
        return Ok(if c.iter().all(|v| v.abs() <= COST_TOL) {
            LpSolution {
                status: LpStatus::Optimal,
                optimizer: DVector::zeros(n),
                value: 0.0,
            }
        } else {
            LpSolution {
                status: LpStatus::Unbounded,
                optimizer: DVector::zeros(n),
                value: f64::INFINITY,
            }
        });
    }

    let outcome = dual_simplex(c, rows, offsets);
    if outcome.is_err() && std::env::var_os("SAFEKERNEL_LP_DUMP").is_some() {
        let dump = serde_json::json!({
            "c": c.as_slice(),
            "rows": (0..rows.nrows()).map(|i| rows.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
            "offsets": offsets.as_slice(),
        });
        let _ = std::fs::write("/tmp/lp_fail.json", dump.to_string());
    }
    match outcome? {
        DualOutcome::Optimal { x, value } => Ok(LpSolution {
            status: LpStatus::Optimal,
            optimizer: x,
            value,
        }),
        DualOutcome::DualUnbounded => Ok(LpSolution {
            // min b.y unbounded below => primal infeasible (Farkas direction).
            status: LpStatus::Infeasible,
            optimizer: DVector::zeros(n),
            value: f64::NAN,
        }),
        DualOutcome::DualInfeasible => {
            // Primal is unbounded or infeasible; a Farkas check on the zero
            // objective separates the two (it always has a feasible dual).
            let feas = match dual_simplex(&DVector::zeros(n), rows, offsets)? {
                DualOutcome::Optimal { .. } => true,
                DualOutcome::DualUnbounded => false,
                DualOutcome::DualInfeasible => {
                    return Err(Error::Numerical("feasibility probe rejected zero objective".into()))
                }
            };
            Ok(if feas {
                LpSolution {
                    status: LpStatus::Unbounded,
                    optimizer: DVector::zeros(n),
                    value: f64::INFINITY,
                }
            } else {
                LpSolution {
                    status: LpStatus::Infeasible,
                    optimizer: DVector::zeros(n),
                    value: f64::NAN,
                }
            })
        }
    }
}

/// Minimize or maximize `c.x` over the same system.
pub fn optimize(
    c: &DVector<f64>,
    rows: &DMatrix<f64>,
    offsets: &DVector<f64>,
    sense: Sense,
) -> Result<LpSolution> {
    match sense {
        Sense::Max => maximize(c, rows, offsets),
        Sense::Min => {
            let mut sol = maximize(&(-c), rows, offsets)?;
            sol.value = -sol.value;
            Ok(sol)
        }
    }
}

enum DualOutcome {
    Optimal { x: DVector<f64>, value: f64 },
    /// Phase II of the dual diverges: the primal is infeasible.
    DualUnbounded,
    /// Phase I cannot zero the artificials: no dual-feasible point.
    DualInfeasible,
}

struct Tableau {
    /// `rows x (m + rows + 1)` matrix; columns: m dual vars, `rows`
    /// artificials, rhs.
    t: DMatrix<f64>,
    cost: DVector<f64>,
    basis: Vec<usize>,
    m: usize,
    sign: Vec<f64>,
}

impl Tableau {
    fn nrows(&self) -> usize {
        self.t.nrows()
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let piv = self.t[(r, q)];
        let ncols = self.t.ncols();
        for j in 0..ncols {
            self.t[(r, j)] /= piv;
        }
        for i in 0..self.nrows() {
            if i == r {
                continue;
            }
            let f = self.t[(i, q)];
            if f != 0.0 {
                for j in 0..ncols {
                    self.t[(i, j)] -= f * self.t[(r, j)];
                }
            }
        }
        let f = self.cost[q];
        if f != 0.0 {
            for j in 0..ncols {
                self.cost[j] -= f * self.t[(r, j)];
            }
        }
        self.basis[r] = q;
    }

    /// Dantzig entering rule with a lexicographic ratio test. The artificial
    /// block started as an identity, which makes the lexicographic order a
    /// valid implicit perturbation: degenerate ties resolve consistently and
    /// cycling cannot occur.
    fn run<F: Fn(usize) -> bool>(&mut self, allow: F) -> Result<bool> {
        let ncols = self.t.ncols();
        let rhs_col = ncols - 1;
        let max_iters = 400 * (ncols + 8);
        for _ in 0..max_iters {
            let mut entering: Option<(usize, f64)> = None;
            for q in 0..rhs_col {
                let r = self.cost[q];
                if r < -COST_TOL && allow(q) && entering.is_none_or(|(_, best)| r < best) {
                    entering = Some((q, r));
                }
            }
            let Some((q, _)) = entering else { return Ok(true) };
            let mut leave: Option<usize> = None;
            for i in 0..self.nrows() {
                let a = self.t[(i, q)];
                if a <= PIVOT_TOL {
                    continue;
                }
                leave = Some(match leave {
                    None => i,
                    Some(li) => self.lex_smaller(i, li, q, rhs_col),
                });
            }
            match leave {
                Some(r) => self.pivot(r, q),
                None => return Ok(false), // unbounded in column q
            }
        }
        Err(Error::Numerical("simplex iteration limit exceeded".into()))
    }

    /// Of two candidate leaving rows, the one whose scaled row is
    /// lexicographically smaller over (rhs, artificial block).
    fn lex_smaller(&self, i: usize, j: usize, q: usize, rhs_col: usize) -> usize {
        let ai = self.t[(i, q)];
        let aj = self.t[(j, q)];
        let tol = 1e-11;
        let ri = self.t[(i, rhs_col)] / ai;
        let rj = self.t[(j, rhs_col)] / aj;
        if ri < rj - tol {
            return i;
        }
        if rj < ri - tol {
            return j;
        }
        for col in self.m..rhs_col {
            let vi = self.t[(i, col)] / ai;
            let vj = self.t[(j, col)] / aj;
            if vi < vj - tol {
                return i;
            }
            if vj < vi - tol {
                return j;
            }
        }
        if i < j {
            i
        } else {
            j
        }
    }
}

/// Two-phase simplex on `min b.y  s.t.  A' y = c, y >= 0`.
fn dual_simplex(c: &DVector<f64>, rows: &DMatrix<f64>, offsets: &DVector<f64>) -> Result<DualOutcome> {
    let n = c.len();
    let m = rows.nrows();
    let ncols = m + n + 1;

    // Equation i: sum_j A[j][i] y_j = c_i, scaled so the rhs is nonnegative.
    let mut t = DMatrix::zeros(n, ncols);
    let mut sign = vec![1.0; n];
    for i in 0..n {
        let s = if c[i] < 0.0 { -1.0 } else { 1.0 };
        sign[i] = s;
        for j in 0..m {
            t[(i, j)] = s * rows[(j, i)];
        }
        t[(i, m + i)] = 1.0;
        t[(i, ncols - 1)] = s * c[i];
    }
    let basis: Vec<usize> = (0..n).map(|i| m + i).collect();

    // Phase I: minimize the artificial sum.
    let mut cost = DVector::zeros(ncols);
    for i in 0..n {
        cost[m + i] = 1.0;
    }
    for i in 0..n {
        let row = t.row(i).clone_owned();
        for j in 0..ncols {
            cost[j] -= row[j];
        }
    }
    let mut tab = Tableau {
        t,
        cost,
        basis,
        m,
        sign,
    };
    // The artificial sum is bounded below by zero, so an "unbounded" report
    // can only be roundoff on a near-degenerate column; the feasibility
    // decision below is based on the achieved sum either way.
    tab.run(|_| true)?;
    let artificial_sum: f64 = (0..tab.nrows())
        .filter(|&i| tab.basis[i] >= m)
        .map(|i| tab.t[(i, ncols - 1)])
        .sum();
    let scale = 1.0 + offsets.amax().max(c.amax());
    if artificial_sum > FEAS_TOL * scale {
        return Ok(DualOutcome::DualInfeasible);
    }

    // Drive leftover zero-valued artificials out of the basis; a row with no
    // usable pivot is a redundant equation and is dropped.
    let mut drop_rows: Vec<usize> = Vec::new();
    for i in 0..tab.nrows() {
        if tab.basis[i] < m {
            continue;
        }
        let mut pivoted = false;
        for j in 0..m {
            if tab.t[(i, j)].abs() > PIVOT_TOL {
                tab.pivot(i, j);
                pivoted = true;
                break;
            }
        }
        if !pivoted {
            drop_rows.push(i);
        }
    }
    if !drop_rows.is_empty() {
        let keep: Vec<usize> = (0..tab.nrows()).filter(|i| !drop_rows.contains(i)).collect();
        tab.t = tab.t.select_rows(keep.iter());
        tab.basis = keep.iter().map(|&i| tab.basis[i]).collect();
    }

    // Phase II: minimize b.y, artificials barred from re-entering.
    let mut cost = DVector::zeros(ncols);
    for j in 0..m {
        cost[j] = offsets[j];
    }
    for i in 0..tab.nrows() {
        let f = cost[tab.basis[i]];
        if f != 0.0 {
            let row = tab.t.row(i).clone_owned();
            for j in 0..ncols {
                cost[j] -= f * row[j];
            }
        }
    }
    tab.cost = cost;
    let m_cols = tab.m;
    if !tab.run(|q| q < m_cols)? {
        return Ok(DualOutcome::DualUnbounded);
    }

    // Simplex multipliers off the artificial reduced costs: for a dropped
    // (redundant) equation the multiplier is pinned to zero, which stays
    // consistent because its artificial column was never touched afterwards.
    let mut x = DVector::zeros(n);
    for i in 0..n {
        x[i] = -tab.sign[i] * tab.cost[m + i];
    }
    let value = c.dot(&x);
    Ok(DualOutcome::Optimal { x, value })
}
