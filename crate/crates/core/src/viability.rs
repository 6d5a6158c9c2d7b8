//! Finite-horizon viability kernels for discrete-time LTI models in
//! polytopic constraint sets, the model-invariant kernel as a stepwise
//! intersection, and a grid dynamic-programming oracle for small instances.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Polytope, FEASIBILITY_TOL};
use crate::pkpd::{bp_constraint_set, cascade, discretize_zoh, Cohort, LinearStateSpace};

/// Configuration of one kernel recursion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Horizon in minutes.
    pub horizon_min: f64,
    /// Sample period in seconds.
    pub dt_s: f64,
    pub constraint_set: Polytope,
    /// Input set (an interval for the single-input case).
    pub input_set: Polytope,
    pub facet_cap: usize,
}

impl KernelConfig {
    pub fn num_steps(&self) -> usize {
        (self.horizon_min * 60.0 / self.dt_s).round() as usize
    }

    pub fn dt_min(&self) -> f64 {
        self.dt_s / 60.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon_min > 0.0) || !(self.dt_s > 0.0) {
            return Err(Error::Config("horizon and dt must be positive".into()));
        }
        if self.constraint_set.is_empty() {
            return Err(Error::Config("constraint set K is empty".into()));
        }
        if self.input_set.is_empty() || self.input_set.dim() != 1 {
            return Err(Error::Config("input set U must be a nonempty interval".into()));
        }
        if self.facet_cap < 2 * self.constraint_set.dim() {
            return Err(Error::Config("facet cap too small to hold a box".into()));
        }
        Ok(())
    }
}

/// Backward recursion output: `steps[k]` is the k-step kernel, so
/// `steps[0] = K` and the sets shrink as the index grows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSequence {
    pub steps: Vec<Polytope>,
    /// First index `j` with `steps[j] == steps[j+1]` (fixed point reached);
    /// everything after is a copy.
    pub converged_at: Option<usize>,
    /// First index whose set is empty, if any.
    pub emptied_at: Option<usize>,
}

impl KernelSequence {
    /// Kernel valid for `remaining` more steps (clamped to the last set).
    pub fn at_remaining(&self, remaining: usize) -> &Polytope {
        let idx = remaining.min(self.steps.len() - 1);
        &self.steps[idx]
    }

    /// Like `at_remaining`, but once the recursion has converged the fixed
    /// point (a controlled-invariant set) is used for every smaller index,
    /// so the guarantee survives past the nominal horizon.
    pub fn at_remaining_guarded(&self, remaining: usize) -> &Polytope {
        let mut idx = remaining.min(self.steps.len() - 1);
        if let Some(c) = self.converged_at {
            idx = idx.max(c.min(self.steps.len() - 1));
        }
        &self.steps[idx]
    }

    pub fn final_kernel(&self) -> &Polytope {
        self.steps.last().expect("sequence never empty")
    }

    pub fn is_converged(&self) -> bool {
        self.converged_at.is_some()
    }
}

/// Per-model kernels plus their stepwise intersection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelResult {
    pub per_model: BTreeMap<String, KernelSequence>,
    pub intersection: KernelSequence,
    pub meta: KernelMeta,
}

/// Shared recursion metadata stored alongside the kernels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelMeta {
    pub horizon_min: f64,
    pub dt_s: f64,
    pub facet_cap: usize,
    pub input_set: Polytope,
    pub constraint_sets: BTreeMap<String, Polytope>,
}

/// Interval bounds of a 1-D polytope.
pub fn interval_bounds(u: &Polytope) -> Result<(f64, f64)> {
    let one = DVector::from_vec(vec![1.0]);
    let hi = u.support(&one)?;
    let lo = -u.support(&(-one))?;
    if !hi.is_finite() || !lo.is_finite() {
        return Err(Error::Config("input interval must be bounded".into()));
    }
    Ok((lo, hi))
}

/// One-step predecessor `{x : exists u in U with A_d x + B_d u in V}`,
/// computed as `A_d^{-1} (V (+) (-B_d U))`.
pub fn one_step_pre(v: &Polytope, sys_d: &LinearStateSpace, u_set: &Polytope) -> Result<Polytope> {
    if v.is_empty() {
        return Ok(v.clone());
    }
    if sys_d.num_inputs() != 1 || u_set.dim() != 1 {
        return Err(Error::Config("one_step_pre expects a single scalar input".into()));
    }
    let (u_lo, u_hi) = interval_bounds(u_set)?;
    let b = sys_d.b.column(0).into_owned();
    let p0 = -(&b) * u_lo;
    let p1 = -(&b) * u_hi;
    let summand = Polytope::segment(&p0, &p1)?;
    let sum = v.minkowski_sum_box(&summand)?;
    sum.affine_preimage(&sys_d.a)?.reduce()
}

/// Intersect several polytopes in one pass (single capped reduction).
pub fn intersect_many(parts: &[&Polytope], facet_cap: usize) -> Result<Polytope> {
    let dim = parts.first().map_or(0, |p| p.dim());
    if parts.iter().any(|p| p.is_empty()) {
        return Ok(Polytope::empty(dim));
    }
    let total: usize = parts.iter().map(|p| p.num_facets()).sum();
    let mut nm = DMatrix::zeros(total, dim);
    let mut off = DVector::zeros(total);
    let mut at = 0;
    for p in parts {
        if p.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.dim(),
            });
        }
        nm.rows_mut(at, p.num_facets()).copy_from(p.normals());
        off.rows_mut(at, p.num_facets()).copy_from(p.offsets());
        at += p.num_facets();
    }
    Polytope::from_rows(nm, off)?.reduce_capped(facet_cap)
}

/// `a` is contained in `b` within `tol` (support of `a` under every facet
/// of `b`); negative `tol` demands a strict margin.
pub fn included_in_tol(a: &Polytope, b: &Polytope, tol: f64) -> Result<bool> {
    if a.is_empty() {
        return Ok(true);
    }
    if b.is_empty() {
        return Ok(false);
    }
    for i in 0..b.num_facets() {
        let l = b.normals().row(i).transpose();
        let s = a.support(&l)?;
        let scale = 1.0 + b.offsets()[i].abs();
        if s > b.offsets()[i] + tol * scale {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `a` is contained in `b` (support of `a` under every facet of `b`).
pub fn included_in(a: &Polytope, b: &Polytope) -> Result<bool> {
    included_in_tol(a, b, FEASIBILITY_TOL)
}

/// Step-change tolerance at which the recursion is close enough to its fixed
/// point to try certifying an invariant set.
const COARSE_CONV_TOL: f64 = 2e-3;

/// Tighten every facet except the axis floors (`-e_i` rows) by `delta`. The
/// floors of a nonnegative drug model cannot be crossed, and tightening them
/// would evict the zero-drug start state.
fn tighten_crossable(p: &Polytope, delta: f64) -> Result<Polytope> {
    let m = p.num_facets();
    let mut offs = p.offsets().clone();
    for i in 0..m {
        let row = p.normals().row(i);
        let is_floor = (0..p.dim()).any(|j| row[j] < -(1.0 - 1e-9))
            && row.iter().map(|v| v.abs()).sum::<f64>() < 1.0 + 1e-9;
        if !is_floor {
            offs[i] -= delta;
        }
    }
    Polytope::from_rows(p.normals().clone(), offs)
}

/// Try to certify a controlled-invariant subset near the almost-converged
/// set: tighten the crossable facets by a ladder of margins and verify
/// `W ⊆ Pre(W) ∩ K` directly.
fn certify_invariant(
    near: &Polytope,
    k_set: &Polytope,
    sys_d: &LinearStateSpace,
    u_set: &Polytope,
) -> Result<Option<Polytope>> {
    for exp in 0..6 {
        let delta = 0.005 * f64::powi(2.0, exp);
        let w = tighten_crossable(near, delta)?;
        if w.is_empty() || w.detect_empty()? {
            return Ok(None); // larger margins only get emptier
        }
        let pre = one_step_pre(&w, sys_d, u_set)?;
        if included_in_tol(&w, &pre, 1e-9)? && included_in_tol(&w, k_set, 1e-9)? {
            return Ok(Some(w));
        }
    }
    Ok(None)
}

/// Backward viability recursion `V_{k+1} = K cap Pre(V_k)`, reduced under the
/// facet cap, run for `cfg.num_steps()` steps or until the fixed point.
///
/// When the step-to-step change becomes small, the recursion attempts to
/// certify a controlled-invariant under-approximation; on success the tail of
/// the sequence is that invariant set, which is a valid under-approximation
/// of every longer-horizon kernel and supports stationary feedback beyond the
/// nominal horizon.
pub fn viability_kernel(sys_d: &LinearStateSpace, cfg: &KernelConfig) -> Result<KernelSequence> {
    cfg.validate()?;
    let k_set = &cfg.constraint_set;
    if sys_d.num_states() != k_set.dim() {
        return Err(Error::DimensionMismatch {
            expected: k_set.dim(),
            got: sys_d.num_states(),
        });
    }
    if let Some(dt) = sys_d.dt {
        if (dt - cfg.dt_min()).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "model sample period {dt} does not match config dt {} min",
                cfg.dt_min()
            )));
        }
    } else {
        return Err(Error::Config("viability_kernel needs a discretized model".into()));
    }
    let n_steps = cfg.num_steps();
    let mut steps = Vec::with_capacity(n_steps + 1);
    let mut converged_at = None;
    let mut emptied_at = None;
    let mut next_certify_attempt = 0usize;
    let v0 = k_set.reduce()?;
    if v0.is_empty() {
        emptied_at = Some(0);
    }
    steps.push(v0);
    for k in 1..=n_steps {
        let prev = steps.last().unwrap();
        if prev.is_empty() {
            steps.push(Polytope::empty(k_set.dim()));
            continue;
        }
        let pre = one_step_pre(prev, sys_d, &cfg.input_set)?;
        let next = intersect_many(&[k_set, &pre], cfg.facet_cap)?;
        if next.is_empty() {
            if emptied_at.is_none() {
                emptied_at = Some(k);
            }
            steps.push(next);
            continue;
        }
        // Exact fixed point: the monotone recursion repeats from here on. The
        // inclusion is tolerance-based, so the frozen tail may sit above the
        // exact sets by at most FEASIBILITY_TOL over the per-step contraction.
        if included_in(prev, &next)? {
            converged_at = Some(k - 1);
            let fixed = prev.clone();
            while steps.len() <= n_steps {
                steps.push(fixed.clone());
            }
            break;
        }
        // Slow tail: certify an invariant under-approximation instead of
        // grinding out the asymptotics step by step.
        if k >= next_certify_attempt && included_in_tol(prev, &next, COARSE_CONV_TOL)? {
            if let Some(w) = certify_invariant(&next, k_set, sys_d, &cfg.input_set)? {
                // The invariant set under-approximates every kernel from this
                // horizon on, so the whole tail may carry it.
                while steps.len() <= n_steps {
                    steps.push(w.clone());
                }
                converged_at = Some(k);
                break;
            }
            next_certify_attempt = k + 32;
        }
        steps.push(next);
    }
    Ok(KernelSequence {
        steps,
        converged_at,
        emptied_at,
    })
}

/// Stepwise intersection across models (the model-invariant kernel sequence).
pub fn model_invariant_kernel(
    kernels: &BTreeMap<String, KernelSequence>,
    facet_cap: usize,
) -> Result<KernelSequence> {
    let mut iter = kernels.values();
    let first = iter
        .next()
        .ok_or_else(|| Error::Config("model set is empty".into()))?;
    let len = first.steps.len();
    let dim = first.steps[0].dim();
    for seq in kernels.values() {
        if seq.steps.len() != len {
            return Err(Error::Config("kernel sequences have differing lengths".into()));
        }
        if seq.steps[0].dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: seq.steps[0].dim(),
            });
        }
    }
    // Once every per-model sequence has converged the intersection repeats.
    let all_conv = kernels
        .values()
        .map(|s| s.converged_at)
        .collect::<Option<Vec<_>>>()
        .map(|v| v.into_iter().max().unwrap_or(0));
    let mut steps: Vec<Polytope> = Vec::with_capacity(len);
    let mut emptied_at = None;
    for j in 0..len {
        if let Some(c) = all_conv {
            if j > c + 1 {
                steps.push(steps[j - 1].clone());
                continue;
            }
        }
        let parts: Vec<&Polytope> = kernels.values().map(|s| &s.steps[j]).collect();
        let inter = intersect_many(&parts, facet_cap)?;
        if inter.is_empty() && emptied_at.is_none() {
            emptied_at = Some(j);
        }
        steps.push(inter);
    }
    let mut converged_at = None;
    for j in 0..len.saturating_sub(1) {
        if included_in(&steps[j], &steps[j + 1])? {
            converged_at = Some(j);
            break;
        }
    }
    Ok(KernelSequence {
        steps,
        converged_at,
        emptied_at,
    })
}

/// Cohort-level kernel computation for a BP-drop bound: per-model constraint
/// sets from Hill inversion, per-model recursions in parallel, then the
/// stepwise intersection.
pub fn compute_cohort_kernels(
    cohort: &Cohort,
    bound_pct: f64,
    pk_lo: f64,
    pk_hi: f64,
    horizon_min: f64,
    dt_s: f64,
    input_set: &Polytope,
    facet_cap: usize,
) -> Result<KernelResult> {
    cohort.validate()?;
    let dt_min = dt_s / 60.0;
    let jobs: Vec<(String, LinearStateSpace, Polytope)> = cohort
        .models
        .iter()
        .map(|m| {
            let casc = cascade(&m.pk, &m.bp_pd);
            let sys_d = discretize_zoh(&casc, dt_min)?;
            let k_set = bp_constraint_set(m, bound_pct, pk_lo, pk_hi)?;
            Ok((m.id.clone(), sys_d, k_set))
        })
        .collect::<Result<_>>()?;
    let computed: Vec<(String, Polytope, KernelSequence)> = jobs
        .into_par_iter()
        .map(|(id, sys_d, k_set)| {
            let cfg = KernelConfig {
                horizon_min,
                dt_s,
                constraint_set: k_set.clone(),
                input_set: input_set.clone(),
                facet_cap,
            };
            viability_kernel(&sys_d, &cfg).map(|seq| (id, k_set, seq))
        })
        .collect::<Result<_>>()?;
    let mut per_model = BTreeMap::new();
    let mut constraint_sets = BTreeMap::new();
    for (id, k_set, seq) in computed {
        constraint_sets.insert(id.clone(), k_set);
        per_model.insert(id, seq);
    }
    let intersection = model_invariant_kernel(&per_model, facet_cap)?;
    Ok(KernelResult {
        per_model,
        intersection,
        meta: KernelMeta {
            horizon_min,
            dt_s,
            facet_cap,
            input_set: input_set.clone(),
            constraint_sets,
        },
    })
}

// --- grid oracle ------------------------------------------------------------

/// Survivor set of the grid dynamic program.
#[derive(Debug, Clone)]
pub struct GridKernel {
    pub origin: Vec<f64>,
    pub res: f64,
    pub cells_per_axis: Vec<usize>,
    pub viable: Vec<bool>,
}

impl GridKernel {
    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    fn index_of(&self, coords: &[isize]) -> Option<usize> {
        let mut idx = 0usize;
        for (d, &c) in coords.iter().enumerate() {
            if c < 0 || c as usize >= self.cells_per_axis[d] {
                return None;
            }
            idx = idx * self.cells_per_axis[d] + c as usize;
        }
        Some(idx)
    }

    pub fn cell_of(&self, x: &DVector<f64>) -> Option<usize> {
        let coords: Vec<isize> = (0..self.dim())
            .map(|d| ((x[d] - self.origin[d]) / self.res).floor() as isize)
            .collect();
        self.index_of(&coords)
    }

    pub fn cell_center(&self, mut idx: usize) -> DVector<f64> {
        let d = self.dim();
        let mut coords = vec![0usize; d];
        for k in (0..d).rev() {
            coords[k] = idx % self.cells_per_axis[k];
            idx /= self.cells_per_axis[k];
        }
        DVector::from_fn(d, |k, _| self.origin[k] + (coords[k] as f64 + 0.5) * self.res)
    }

    /// Whether the cell containing `x` survived.
    pub fn contains_point(&self, x: &DVector<f64>) -> bool {
        self.cell_of(x).is_some_and(|i| self.viable[i])
    }

    pub fn survivors(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.viable.len()).filter(move |&i| self.viable[i])
    }

    pub fn survivor_count(&self) -> usize {
        self.viable.iter().filter(|&&v| v).count()
    }
}

/// Brute-force model-invariant kernel on a state grid (dim <= 2): a cell
/// survives step k+1 when some discretized input sends every model's
/// successor into a surviving cell of step k. Successor lookups inflate by
/// the input-quantization radius so the survivor set over-approximates the
/// true kernel cellwise; the polytopic kernel must land inside it.
pub fn brute_force_kernel(
    models: &[LinearStateSpace],
    k_set: &Polytope,
    u_set: &Polytope,
    n_steps: usize,
    res: f64,
    input_levels: usize,
) -> Result<GridKernel> {
    let dim = k_set.dim();
    if dim > 2 {
        return Err(Error::ResourceLimit("grid oracle supports dim <= 2".into()));
    }
    if models.is_empty() {
        return Err(Error::Config("grid oracle needs at least one model".into()));
    }
    if !(res > 0.0) || input_levels < 2 {
        return Err(Error::Config("grid oracle needs res > 0 and >= 2 input levels".into()));
    }
    let (u_lo, u_hi) = interval_bounds(u_set)?;
    let mut origin = vec![0.0; dim];
    let mut cells = vec![0usize; dim];
    for d in 0..dim {
        let mut e = DVector::zeros(dim);
        e[d] = 1.0;
        let hi = k_set.support(&e)?;
        e[d] = -1.0;
        let lo = -k_set.support(&e)?;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Config("grid oracle needs a bounded constraint set".into()));
        }
        origin[d] = lo - res;
        cells[d] = (((hi - lo) / res).ceil() as usize) + 2;
    }
    let total: usize = cells.iter().product();
    if total > 4_000_000 {
        return Err(Error::ResourceLimit(format!("grid of {total} cells is too large")));
    }

    let mut grid = GridKernel {
        origin,
        res,
        cells_per_axis: cells,
        viable: vec![false; total],
    };
    // Cell marked iff it may intersect K (per-row interval arithmetic).
    let half = res / 2.0;
    for i in 0..total {
        let c = grid.cell_center(i);
        let mut ok = true;
        for r in 0..k_set.num_facets() {
            let row = k_set.normals().row(r);
            let mut lo_val = 0.0;
            for d in 0..dim {
                lo_val += row[d] * c[d] - row[d].abs() * half;
            }
            if lo_val > k_set.offsets()[r] + 1e-12 {
                ok = false;
                break;
            }
        }
        grid.viable[i] = ok;
    }

    let du = if input_levels > 1 {
        (u_hi - u_lo) / (input_levels - 1) as f64
    } else {
        0.0
    };
    let u_grid: Vec<f64> = (0..input_levels).map(|k| u_lo + du * k as f64).collect();
    // Inflation radius: worst input-quantization displacement across models.
    let inflate = models
        .iter()
        .map(|m| m.b.column(0).norm() * du / 2.0)
        .fold(0.0f64, f64::max)
        + 1e-9;

    let in_k = grid.viable.clone();
    for _ in 0..n_steps {
        let prev = grid.viable.clone();
        let next: Vec<bool> = (0..total)
            .into_par_iter()
            .map(|i| {
                if !in_k[i] {
                    return false;
                }
                let c = grid.cell_center(i);
                'us: for &u in &u_grid {
                    for m in models {
                        let succ = &m.a * &c + m.b.column(0) * u;
                        if !ball_hits_survivor(&grid, &prev, &succ, inflate) {
                            continue 'us;
                        }
                    }
                    return true;
                }
                false
            })
            .collect();
        if next == grid.viable {
            grid.viable = next;
            break;
        }
        grid.viable = next;
    }
    Ok(grid)
}

/// Any surviving cell intersecting the ball around `p`.
fn ball_hits_survivor(grid: &GridKernel, viable: &[bool], p: &DVector<f64>, r: f64) -> bool {
    let dim = grid.dim();
    let lo: Vec<isize> = (0..dim)
        .map(|d| ((p[d] - r - grid.origin[d]) / grid.res).floor() as isize)
        .collect();
    let hi: Vec<isize> = (0..dim)
        .map(|d| ((p[d] + r - grid.origin[d]) / grid.res).floor() as isize)
        .collect();
    let mut coords = lo.clone();
    loop {
        if let Some(idx) = grid.index_of(&coords) {
            if viable[idx] {
                return true;
            }
        }
        // advance odometer
        let mut d = 0;
        loop {
            coords[d] += 1;
            if coords[d] <= hi[d] {
                break;
            }
            coords[d] = lo[d];
            d += 1;
            if d == dim {
                return false;
            }
        }
    }
}

// --- archive ----------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveManifest {
    schema: u32,
    meta: KernelMeta,
    models: Vec<ArchiveModelEntry>,
    intersection: ArchiveSeqEntry,
    /// sha256 of every polytope file, keyed by relative path.
    hashes: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveModelEntry {
    id: String,
    #[serde(flatten)]
    seq: ArchiveSeqEntry,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveSeqEntry {
    steps: usize,
    converged_at: Option<usize>,
    emptied_at: Option<usize>,
}

fn sha256_hex(data: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(data);
    format!("{:x}", h.finalize())
}

/// Persist a kernel result as `<id>/step<k>.json` files plus a manifest.
pub fn save_archive(dir: &Path, result: &KernelResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut hashes = BTreeMap::new();
    let mut write_seq = |name: &str, seq: &KernelSequence| -> Result<ArchiveSeqEntry> {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub)?;
        for (k, p) in seq.steps.iter().enumerate() {
            let text = serde_json::to_string(p)?;
            let rel = format!("{name}/step{k}.json");
            hashes.insert(rel.clone(), sha256_hex(text.as_bytes()));
            std::fs::write(dir.join(&rel), text)?;
        }
        Ok(ArchiveSeqEntry {
            steps: seq.steps.len(),
            converged_at: seq.converged_at,
            emptied_at: seq.emptied_at,
        })
    };
    let mut models = Vec::new();
    for (id, seq) in &result.per_model {
        let entry = write_seq(id, seq)?;
        models.push(ArchiveModelEntry {
            id: id.clone(),
            seq: entry,
        });
    }
    let intersection = write_seq("intersection", &result.intersection)?;
    let manifest = ArchiveManifest {
        schema: 1,
        meta: result.meta.clone(),
        models,
        intersection,
        hashes,
    };
    let tmp = dir.join("manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
    std::fs::rename(tmp, dir.join("manifest.json"))?;
    Ok(())
}

/// Load a kernel archive, verifying the recorded hashes.
pub fn load_archive(dir: &Path) -> Result<KernelResult> {
    let manifest: ArchiveManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.schema != 1 {
        return Err(Error::Config(format!(
            "unsupported kernel archive schema {}",
            manifest.schema
        )));
    }
    let read_seq = |name: &str, entry: &ArchiveSeqEntry| -> Result<KernelSequence> {
        let mut steps = Vec::with_capacity(entry.steps);
        for k in 0..entry.steps {
            let rel = format!("{name}/step{k}.json");
            let text = std::fs::read_to_string(dir.join(&rel))?;
            if let Some(expect) = manifest.hashes.get(&rel) {
                let got = sha256_hex(text.as_bytes());
                if &got != expect {
                    return Err(Error::Config(format!("hash mismatch for {rel}")));
                }
            }
            steps.push(serde_json::from_str(&text)?);
        }
        Ok(KernelSequence {
            steps,
            converged_at: entry.converged_at,
            emptied_at: entry.emptied_at,
        })
    };
    let mut per_model = BTreeMap::new();
    for m in &manifest.models {
        per_model.insert(m.id.clone(), read_seq(&m.id, &m.seq)?);
    }
    let intersection = read_seq("intersection", &manifest.intersection)?;
    Ok(KernelResult {
        per_model,
        intersection,
        meta: manifest.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_1d(a: f64, dt_min: f64) -> LinearStateSpace {
        let sys = LinearStateSpace::new(
            DMatrix::from_row_slice(1, 1, &[a]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        discretize_zoh(&sys, dt_min).unwrap()
    }

    fn cfg_1d(k: (f64, f64), u: (f64, f64), horizon_min: f64) -> KernelConfig {
        KernelConfig {
            horizon_min,
            dt_s: 5.0,
            constraint_set: Polytope::interval(k.0, k.1).unwrap(),
            input_set: Polytope::interval(u.0, u.1).unwrap(),
            facet_cap: 64,
        }
    }

    fn bounds(p: &Polytope) -> (f64, f64) {
        let one = DVector::from_vec(vec![1.0]);
        (
            -p.support(&(-one.clone())).unwrap(),
            p.support(&one).unwrap(),
        )
    }

    #[test]
    fn integrator_kernel_is_whole_box() {
        // x' = u with enough authority: every point of K can be held.
        let sys = toy_1d(0.0, 5.0 / 60.0);
        let cfg = cfg_1d((0.0, 1.0), (-1.0, 1.0), 10.0);
        let seq = viability_kernel(&sys, &cfg).unwrap();
        assert!(seq.emptied_at.is_none());
        assert!(seq.is_converged());
        let (lo, hi) = bounds(seq.final_kernel());
        assert!((lo - 0.0).abs() < 1e-9);
        assert!((hi - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unstable_kernel_matches_scalar_recursion() {
        // x' = x + u, K = [-2, 2], U = [-1, 1]: the exact discrete recursion
        // for the half-width is c_{k+1} = (c_k + b_d) / a_d with fixed point 1.
        let dt_min = 5.0 / 60.0;
        let sys = toy_1d(1.0, dt_min);
        let cfg = cfg_1d((-2.0, 2.0), (-1.0, 1.0), 20.0);
        let seq = viability_kernel(&sys, &cfg).unwrap();
        let a_d = sys.a[(0, 0)];
        let b_d = sys.b[(0, 0)];
        let mut c = 2.0;
        for k in 1..seq.steps.len() {
            c = ((c + b_d) / a_d).min(2.0);
            let (lo, hi) = bounds(&seq.steps[k]);
            // The frozen tail may exceed the exact recursion by up to the
            // inclusion tolerance over the per-step contraction (~2.5e-6 here).
            assert!(hi >= c - 1e-9 && hi - c < 2e-5, "step {k}: {hi} vs {c}");
            assert!(-lo >= c - 1e-9 && -lo - c < 2e-5);
        }
        let (lo, hi) = bounds(seq.final_kernel());
        assert!((hi - 1.0).abs() < 1e-5);
        assert!((lo + 1.0).abs() < 1e-5);
    }

    #[test]
    fn no_authority_kernel_empties() {
        // x' = x with K = [1, 2] away from the equilibrium: x must shrink out.
        let sys = toy_1d(1.0, 5.0 / 60.0);
        let cfg = cfg_1d((1.0, 2.0), (0.0, 0.0), 10.0);
        let seq = viability_kernel(&sys, &cfg).unwrap();
        assert!(seq.emptied_at.is_some());
        assert!(seq.final_kernel().is_empty());
        // Monotone shrink until empty.
        for k in 1..seq.steps.len() {
            assert!(included_in(&seq.steps[k], &seq.steps[k - 1]).unwrap());
        }
    }

    #[test]
    fn degenerate_input_is_plain_preimage() {
        let sys = toy_1d(-0.5, 5.0 / 60.0);
        let v = Polytope::interval(0.0, 1.0).unwrap();
        let u0 = Polytope::interval(0.0, 0.0).unwrap();
        let pre = one_step_pre(&v, &sys, &u0).unwrap();
        let a_d = sys.a[(0, 0)];
        let (lo, hi) = bounds(&pre);
        assert!((hi - 1.0 / a_d).abs() < 1e-9);
        assert!(lo.abs() < 1e-9);
    }

    #[test]
    fn pre_interval_arithmetic_1d() {
        // Pure integrator at dt = 1 min: Pre([0,1]) with u in [-1,1] is [-1,2].
        let sys = toy_1d(0.0, 1.0);
        let v = Polytope::interval(0.0, 1.0).unwrap();
        let u = Polytope::interval(-1.0, 1.0).unwrap();
        let pre = one_step_pre(&v, &sys, &u).unwrap();
        let (lo, hi) = bounds(&pre);
        assert!((lo + 1.0).abs() < 1e-9);
        assert!((hi - 2.0).abs() < 1e-9);
    }

    #[test]
    fn intersection_of_single_model_is_itself() {
        let sys = toy_1d(1.0, 5.0 / 60.0);
        let cfg = cfg_1d((-2.0, 2.0), (-1.0, 1.0), 5.0);
        let seq = viability_kernel(&sys, &cfg).unwrap();
        let mut map = BTreeMap::new();
        map.insert("only".to_string(), seq.clone());
        let inter = model_invariant_kernel(&map, 64).unwrap();
        for (a, b) in seq.steps.iter().zip(inter.steps.iter()) {
            assert!(included_in(a, b).unwrap() && included_in(b, a).unwrap());
        }
    }

    #[test]
    fn intersection_idempotent_under_duplication() {
        let sys = toy_1d(1.0, 5.0 / 60.0);
        let cfg = cfg_1d((-2.0, 2.0), (-1.0, 1.0), 5.0);
        let seq = viability_kernel(&sys, &cfg).unwrap();
        let mut one = BTreeMap::new();
        one.insert("a".to_string(), seq.clone());
        let mut two = one.clone();
        two.insert("b".to_string(), seq.clone());
        let i1 = model_invariant_kernel(&one, 64).unwrap();
        let i2 = model_invariant_kernel(&two, 64).unwrap();
        for (a, b) in i1.steps.iter().zip(i2.steps.iter()) {
            assert!(included_in(a, b).unwrap() && included_in(b, a).unwrap());
        }
    }

    #[test]
    fn grid_oracle_integrator_keeps_box() {
        let sys = toy_1d(0.0, 5.0 / 60.0);
        let k = Polytope::interval(0.0, 1.0).unwrap();
        let u = Polytope::interval(-1.0, 1.0).unwrap();
        let g = brute_force_kernel(&[sys], &k, &u, 60, 0.05, 41).unwrap();
        // Every cell center inside [0,1] must survive.
        let mut x = 0.026;
        while x < 1.0 {
            assert!(g.contains_point(&DVector::from_vec(vec![x])), "x = {x}");
            x += 0.05;
        }
    }

    #[test]
    fn grid_oracle_unstable_matches_analytic() {
        // Half-minute sampling keeps the per-step contraction strong enough
        // that the cellwise over-approximation stays within a few cells.
        let dt_min = 0.5;
        let sys = toy_1d(1.0, dt_min);
        let a_d = sys.a[(0, 0)];
        let k = Polytope::interval(-2.0, 2.0).unwrap();
        let u = Polytope::interval(-1.0, 1.0).unwrap();
        let res = 0.05;
        let g = brute_force_kernel(&[sys.clone()], &k, &u, 60, res, 81).unwrap();
        let mut min_s = f64::INFINITY;
        let mut max_s = f64::NEG_INFINITY;
        for i in g.survivors() {
            let c = g.cell_center(i)[0];
            min_s = min_s.min(c);
            max_s = max_s.max(c);
        }
        // Over-approximation: survivors cover the true kernel [-1, 1] and
        // exceed it at most by the cell/quantization drift res/(a_d - 1).
        let drift = (res / 2.0 + sys.b.column(0).norm() * (2.0 / 80.0) / 2.0) / (a_d - 1.0) + res;
        assert!(g.contains_point(&DVector::from_vec(vec![0.99])));
        assert!(g.contains_point(&DVector::from_vec(vec![-0.99])));
        assert!(max_s <= 1.0 + drift, "max survivor {max_s}, drift {drift}");
        assert!(min_s >= -1.0 - drift, "min survivor {min_s}, drift {drift}");
    }

    #[test]
    fn archive_round_trip() {
        let sys = toy_1d(1.0, 5.0 / 60.0);
        let cfg = cfg_1d((-2.0, 2.0), (-1.0, 1.0), 5.0);
        let seq = viability_kernel(&sys, &cfg).unwrap();
        let mut per_model = BTreeMap::new();
        per_model.insert("m0".to_string(), seq.clone());
        let inter = model_invariant_kernel(&per_model, 64).unwrap();
        let mut constraint_sets = BTreeMap::new();
        constraint_sets.insert("m0".to_string(), cfg.constraint_set.clone());
        let result = KernelResult {
            per_model,
            intersection: inter,
            meta: KernelMeta {
                horizon_min: cfg.horizon_min,
                dt_s: cfg.dt_s,
                facet_cap: cfg.facet_cap,
                input_set: cfg.input_set.clone(),
                constraint_sets,
            },
        };
        let dir = std::env::temp_dir().join(format!("sk_archive_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        save_archive(&dir, &result).unwrap();
        let back = load_archive(&dir).unwrap();
        assert_eq!(back.per_model.len(), 1);
        assert_eq!(back.intersection.steps.len(), result.intersection.steps.len());
        let a = &back.per_model["m0"].steps;
        let b = &result.per_model["m0"].steps;
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(
                serde_json::to_string(x).unwrap(),
                serde_json::to_string(y).unwrap()
            );
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
