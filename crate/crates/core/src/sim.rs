//! Closed-loop anesthesia scenario engine: one discrete loop around the true
//! patient with a PID performance controller, a kernel-based safety layer in
//! one of three variants, seeded bounded measurement noise and deterministic
//! trace/metrics output.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::falsification::{active_kernel_at, FalsificationConfig, ModelSetState};
use crate::geometry::{Polytope, FEASIBILITY_TOL};
use crate::pid::{pid_step, PidParams, PidState};
use crate::pkpd::{
    cascade, discretize_zoh, hill_effect, Cohort, LinearStateSpace, PatientModel,
};
use crate::safety::{
    blend, default_band_width, safety_action, BlendMode, FacetGuard, SafetyBlendConfig,
};
use crate::viability::{compute_cohort_kernels, interval_bounds, KernelResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SafetyMode {
    None,
    Individualized,
    ModelInvariant,
    ModelInvariantFalsified,
}

impl SafetyMode {
    pub fn uses_kernel(self) -> bool {
        self != SafetyMode::None
    }

    pub fn uses_falsification(self) -> bool {
        self == SafetyMode::ModelInvariantFalsified
    }
}

/// Bounded measurement-noise specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Uniform bound in percent-effect units; must stay at or below the
    /// falsification gamma for the soundness guarantee.
    pub bound_pct: f64,
    pub seed: u64,
    /// Median-of-3 pre-filter standing in for clinical outlier removal.
    pub median_filter: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            bound_pct: 10.0,
            seed: 1,
            median_filter: false,
        }
    }
}

/// Kernel-construction parameters of a scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSpec {
    pub horizon_min: f64,
    pub facet_cap: usize,
    /// Therapeutic window applied to each PK state (mg/l).
    pub pk_bounds: (f64, f64),
    /// Infusion-rate limits (ml/h).
    pub input_bounds: (f64, f64),
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            horizon_min: 20.0,
            facet_cap: 512,
            pk_bounds: (0.0, 10.0),
            input_bounds: (0.0, 600.0),
        }
    }
}

/// Blend parameters; `band_width: None` sizes the band at 10% of the active
/// kernel's Chebyshev radius.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlendSpec {
    pub mode: BlendMode,
    pub band_width: Option<f64>,
    pub guard: FacetGuard,
}

impl Default for BlendSpec {
    fn default() -> Self {
        Self {
            mode: BlendMode::ConvexBlend,
            band_width: None,
            guard: FacetGuard::InputExposed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub safety_mode: SafetyMode,
    pub bp_bound_pct: f64,
    pub duration_min: f64,
    pub dt_s: f64,
    pub noise: NoiseSpec,
    pub pid: PidParams,
    pub kernel: KernelSpec,
    pub blend: BlendSpec,
    pub falsification: FalsificationConfig,
    /// Initial `(Cp, x2, x3, ce)` state; zero drug by default.
    pub initial_state: Option<[f64; 4]>,
    /// Acknowledge a noise bound exceeding gamma (falsification soundness is
    /// void in that case).
    pub allow_unsound_noise: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "default".into(),
            safety_mode: SafetyMode::ModelInvariantFalsified,
            bp_bound_pct: 50.0,
            duration_min: 20.0,
            dt_s: 5.0,
            noise: NoiseSpec::default(),
            pid: PidParams::default(),
            kernel: KernelSpec::default(),
            blend: BlendSpec::default(),
            falsification: FalsificationConfig::default(),
            initial_state: None,
            allow_unsound_noise: false,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_min >= 0.0) || !(self.dt_s > 0.0) {
            return Err(Error::Config("duration and dt must be nonnegative/positive".into()));
        }
        if self.safety_mode.uses_kernel() && self.duration_min > 0.0 {
            if self.duration_min + 1e-9 < self.kernel.horizon_min {
                return Err(Error::Config(
                    "scenario duration must be at least the kernel horizon".into(),
                ));
            }
        }
        if !(0.0 < self.bp_bound_pct && self.bp_bound_pct < 100.0) {
            return Err(Error::Config("bp_bound_pct must lie in (0, 100)".into()));
        }
        if self.noise.bound_pct > self.falsification.gamma && !self.allow_unsound_noise {
            return Err(Error::Config(
                "noise bound exceeds gamma; falsification soundness would be void \
                 (set allow_unsound_noise to override)"
                    .into(),
            ));
        }
        self.pid.validate()?;
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        (self.duration_min * 60.0 / self.dt_s).round() as usize
    }

    pub fn input_set(&self) -> Result<Polytope> {
        Polytope::interval(self.kernel.input_bounds.0, self.kernel.input_bounds.1)
    }

    /// Stable content hash of the scenario (used to name run directories).
    pub fn content_hash(&self) -> String {
        let text = serde_json::to_string(self).unwrap_or_default();
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        format!("{:x}", h.finalize())[..12].to_string()
    }
}

/// One trace sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimRow {
    pub t_s: f64,
    pub u_pr: f64,
    /// Safety action; NaN in mode `none`.
    pub u_sp: f64,
    pub u_applied: f64,
    pub zeta: f64,
    pub pk: [f64; 3],
    /// Per-model predicted effect-site concentrations, cohort order.
    pub ce: Vec<f64>,
    pub bp_true_mmhg: f64,
    /// Measured BP effect in percent (noise included).
    pub bp_meas_pct: f64,
    pub doh_true: f64,
    pub worst_model: String,
    pub unfalsified: usize,
    pub breach: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimTrace {
    pub model_ids: Vec<String>,
    pub baseline_mmhg: f64,
    pub rows: Vec<SimRow>,
    pub events: Vec<crate::falsification::FalsificationEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub patient_id: String,
    pub induction_completed: bool,
    pub induction_time_min: Option<f64>,
    pub doh_at_20min: Option<f64>,
    pub max_bp_drop_pct: f64,
    pub time_in_doh_40_60: f64,
    /// `(t_min, cumulative falsified count)` at each falsification event.
    pub falsified_count_timeline: Vec<(f64, usize)>,
    pub breach_count: usize,
    pub unfalsified_final: usize,
}

/// Everything shared across the patients of one scenario run.
pub struct SimContext<'a> {
    pub scenario: &'a Scenario,
    pub cohort: &'a Cohort,
    pub kernels: &'a KernelResult,
}

fn patient_stream_seed(seed: u64, patient_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(patient_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Discrete per-model predictor rows: `ce+ = w_pk . pk + w_ce ce + w_u u`.
struct CeRow {
    w_pk: DVector<f64>,
    w_ce: f64,
    w_u: f64,
}

fn ce_row(sys_d: &LinearStateSpace) -> CeRow {
    CeRow {
        w_pk: sys_d.a.row(3).columns(0, 3).transpose().into_owned(),
        w_ce: sys_d.a[(3, 3)],
        w_u: sys_d.b[(3, 0)],
    }
}

impl CeRow {
    fn step(&self, pk: &DVector<f64>, ce: f64, u: f64) -> f64 {
        self.w_pk.dot(pk) + self.w_ce * ce + self.w_u * u
    }
}

/// Run one closed-loop scenario for a designated true patient.
pub fn run(ctx: &SimContext, true_id: &str) -> Result<(SimTrace, Metrics)> {
    let sc = ctx.scenario;
    sc.validate()?;
    let cohort = ctx.cohort;
    let kernels = ctx.kernels;
    let true_model = cohort
        .get(true_id)
        .ok_or_else(|| Error::Config(format!("unknown patient `{true_id}`")))?;
    let dt_min = sc.dt_s / 60.0;
    let n_steps = sc.num_steps();
    let u_set = sc.input_set()?;
    let (u_lo, _) = interval_bounds(&u_set)?;

    // Discrete predictors: shared PK plus one effect-site row per model.
    let pk_d = discretize_zoh(&true_model.pk, dt_min)?;
    let mut ce_rows: BTreeMap<String, CeRow> = BTreeMap::new();
    let mut bp_d_cols: BTreeMap<String, DVector<f64>> = BTreeMap::new();
    for m in &cohort.models {
        let d = discretize_zoh(&cascade(&m.pk, &m.bp_pd), dt_min)?;
        bp_d_cols.insert(m.id.clone(), d.b.column(0).into_owned());
        ce_rows.insert(m.id.clone(), ce_row(&d));
    }
    let doh_row = ce_row(&discretize_zoh(&cascade(&true_model.pk, &true_model.doh_pd), dt_min)?);

    // Kernel bookkeeping.
    let horizon_steps = kernels.intersection.steps.len() - 1;
    if sc.safety_mode.uses_kernel() {
        if (kernels.meta.dt_s - sc.dt_s).abs() > 1e-9 {
            return Err(Error::Config("kernel archive dt differs from scenario dt".into()));
        }
        let all_converged = kernels.per_model.values().all(|s| s.is_converged());
        if n_steps > horizon_steps && !all_converged {
            return Err(Error::Config(
                "duration exceeds the kernel horizon and the recursion did not \
                 reach a fixed point; extend the horizon"
                    .into(),
            ));
        }
    }

    // State.
    let x0 = sc.initial_state.unwrap_or([0.0; 4]);
    let mut pk = DVector::from_vec(vec![x0[0], x0[1], x0[2]]);
    let mut ce: BTreeMap<String, f64> = cohort.models.iter().map(|m| (m.id.clone(), x0[3])).collect();
    let mut ce_doh = 0.0f64;
    let mut pid_state = PidState::default();
    let mut set_state = ModelSetState::new(cohort.ids());
    let mut rng = ChaCha8Rng::seed_from_u64(patient_stream_seed(sc.noise.seed, true_id));
    let mut raw_meas_window: Vec<f64> = Vec::with_capacity(3);

    // Initial state must sit inside every relevant kernel.
    if sc.safety_mode.uses_kernel() {
        let start_kernel = active_kernel_at(&set_state, kernels, horizon_steps)?;
        if start_kernel.is_empty() {
            return Err(Error::EmptyKernel {
                step: kernels.intersection.emptied_at.unwrap_or(0),
            });
        }
        let x_start = DVector::from_vec(vec![x0[0], x0[1], x0[2], x0[3]]);
        if !start_kernel.contains(&x_start, FEASIBILITY_TOL)? {
            return Err(Error::Config(
                "initial state lies outside the model-invariant kernel".into(),
            ));
        }
    }

    let mut rows: Vec<SimRow> = Vec::with_capacity(n_steps + 1);
    let bound = sc.bp_bound_pct;

    for k in 0..=n_steps {
        let t_min = k as f64 * dt_min;
        let remaining = horizon_steps.saturating_sub(k);

        // Outputs at the current sample.
        let ce_true = ce[true_id].max(0.0);
        let e_bp_true = hill_effect(ce_true, &true_model.bp_pd)?;
        let bp_true = crate::pkpd::bp_from_effect(e_bp_true, true_model.bp_baseline);
        let e_doh = hill_effect(ce_doh.max(0.0), &true_model.doh_pd)?;
        let doh_true = 100.0 - e_doh;

        // Measurement: true effect plus bounded noise, optionally median-filtered.
        let noise = if sc.noise.bound_pct > 0.0 {
            rng.gen_range(-sc.noise.bound_pct..=sc.noise.bound_pct)
        } else {
            0.0
        };
        let raw_meas = e_bp_true + noise;
        raw_meas_window.push(raw_meas);
        if raw_meas_window.len() > 3 {
            raw_meas_window.remove(0);
        }
        let bp_meas = if sc.noise.median_filter && raw_meas_window.len() == 3 {
            let mut w = raw_meas_window.clone();
            w.sort_by(|a, b| a.partial_cmp(b).unwrap());
            w[1]
        } else {
            raw_meas
        };

        // Falsification update from the current measurement.
        if sc.safety_mode.uses_falsification() {
            let mut residuals = BTreeMap::new();
            for id in set_state.unfalsified().to_vec() {
                let m = cohort.get(&id).expect("cohort id");
                let pred = hill_effect(ce[&id].max(0.0), &m.bp_pd)?;
                residuals.insert(id.clone(), crate::falsification::residual(bp_meas, pred));
            }
            set_state.update(t_min, &residuals, &sc.falsification)?;
            if set_state.unfalsified().is_empty() {
                return Err(Error::NoModelsLeft);
            }
        }

        // Performance input from the measured hypnosis depth.
        let (u_pr, next_pid) = pid_step(&sc.pid, &pid_state, doh_true, sc.dt_s);

        // Safety layer.
        let (u_applied, u_sp_log, zeta, worst_id) = if !sc.safety_mode.uses_kernel() {
            (u_pr, f64::NAN, 0.0, String::new())
        } else {
            let kernel = match sc.safety_mode {
                SafetyMode::Individualized => kernels
                    .per_model
                    .get(true_id)
                    .ok_or_else(|| Error::MissingKernel(true_id.to_string()))?
                    .at_remaining_guarded(remaining)
                    .clone(),
                _ => active_kernel_at(&set_state, kernels, remaining)?,
            };
            if kernel.is_empty() {
                return Err(Error::EmptyKernel { step: k });
            }
            // Worst-case predicted BP drop among the unfalsified models.
            let candidates: Vec<&PatientModel> = match sc.safety_mode {
                SafetyMode::Individualized => vec![true_model],
                _ => cohort
                    .models
                    .iter()
                    .filter(|m| set_state.is_unfalsified(&m.id))
                    .collect(),
            };
            let (worst_id, x_wc) =
                crate::safety::worst_case_state(candidates.iter().copied(), &ce, &pk)?;
            let b_col = &bp_d_cols[&worst_id];
            let u_sp = safety_action(&x_wc, &kernel, b_col, &u_set)?;
            let band = match sc.blend.band_width {
                Some(b) => b,
                None => default_band_width(&kernel)?,
            };
            let cfg = SafetyBlendConfig {
                mode: sc.blend.mode,
                band_width: band,
                guard: sc.blend.guard,
            };
            let decision = blend(u_pr, u_sp, &x_wc, &kernel, &cfg, &u_set, Some(b_col))?;

            // One-step feasibility gate: the applied input must keep every
            // model still in play inside its next kernel. When the blended
            // input fails, bisect down toward the low end (safe for these
            // monotone dynamics) and apply the largest passing value.
            let relevant_ids: Vec<String> = match sc.safety_mode {
                SafetyMode::Individualized => vec![true_id.to_string()],
                _ => set_state.unfalsified().to_vec(),
            };
            let rem_next = remaining.saturating_sub(1);
            let mut chosen = decision.u_applied;
            if k < n_steps {
                let pass = |u: f64| -> Result<bool> {
                    gate_passes(u, &pk, &ce, &pk_d, &ce_rows, kernels, &relevant_ids, rem_next)
                };
                if !pass(decision.u_applied)? {
                    if pass(u_lo)? {
                        let mut lo = u_lo;
                        let mut hi = decision.u_applied;
                        for _ in 0..24 {
                            let mid = 0.5 * (lo + hi);
                            if pass(mid)? {
                                lo = mid;
                            } else {
                                hi = mid;
                            }
                        }
                        chosen = lo;
                    } else {
                        // Should not happen from inside the kernels; steer
                        // back as hard as the safety action allows.
                        chosen = u_sp;
                    }
                }
            }
            (chosen, u_sp, decision.zeta, worst_id)
        };

        // Breach bookkeeping against the original clinical constraints.
        let (pk_lo, pk_hi) = sc.kernel.pk_bounds;
        let breach = sc.safety_mode.uses_kernel()
            && (e_bp_true > bound + 0.5
                || pk.iter().any(|&v| v < pk_lo - 1e-6 || v > pk_hi + 1e-6));

        rows.push(SimRow {
            t_s: k as f64 * sc.dt_s,
            u_pr,
            u_sp: u_sp_log,
            u_applied,
            zeta,
            pk: [pk[0], pk[1], pk[2]],
            ce: cohort.models.iter().map(|m| ce[&m.id]).collect(),
            bp_true_mmhg: bp_true,
            bp_meas_pct: bp_meas,
            doh_true,
            worst_model: worst_id,
            unfalsified: set_state.unfalsified().len(),
            breach,
        });

        if k == n_steps {
            break;
        }

        // Advance: shared PK then the per-model effect sites.
        pid_state = next_pid;
        let u_vec = DVector::from_vec(vec![u_applied]);
        let pk_next = pk_d.step(&pk, &u_vec);
        for m in &cohort.models {
            let row = &ce_rows[&m.id];
            let v = row.step(&pk, ce[&m.id], u_applied);
            ce.insert(m.id.clone(), v);
        }
        ce_doh = doh_row.step(&pk, ce_doh, u_applied);
        pk = pk_next;
    }

    let trace = SimTrace {
        model_ids: cohort.ids(),
        baseline_mmhg: true_model.bp_baseline,
        rows,
        events: set_state.events().to_vec(),
    };
    let metrics = compute_metrics(true_id, &trace, sc);
    Ok((trace, metrics))
}

#[allow(clippy::too_many_arguments)]
fn gate_passes(
    u: f64,
    pk: &DVector<f64>,
    ce: &BTreeMap<String, f64>,
    pk_d: &LinearStateSpace,
    ce_rows: &BTreeMap<String, CeRow>,
    kernels: &KernelResult,
    relevant_ids: &[String],
    rem_next: usize,
) -> Result<bool> {
    let u_vec = DVector::from_vec(vec![u]);
    let pk_next = pk_d.step(pk, &u_vec);
    for id in relevant_ids {
        let seq = kernels
            .per_model
            .get(id)
            .ok_or_else(|| Error::MissingKernel(id.clone()))?;
        let target = seq.at_remaining_guarded(rem_next);
        if target.is_empty() {
            return Ok(false);
        }
        let ce_next = ce_rows[id].step(pk, ce[id], u);
        let mut x = DVector::zeros(4);
        x.rows_mut(0, 3).copy_from(&pk_next);
        x[3] = ce_next;
        let scale = 1.0 + x.amax();
        if !target.contains(&x, FEASIBILITY_TOL * scale)? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn compute_metrics(true_id: &str, trace: &SimTrace, sc: &Scenario) -> Metrics {
    let dt_s = sc.dt_s;
    let window = (30.0 / dt_s).ceil() as usize;
    let below: Vec<bool> = trace.rows.iter().map(|r| r.doh_true < 60.0).collect();
    let mut induction_time = None;
    'outer: for j in 0..below.len() {
        if j + window >= below.len() {
            break;
        }
        for r in &below[j..=j + window] {
            if !r {
                continue 'outer;
            }
        }
        induction_time = Some(trace.rows[j].t_s / 60.0);
        break;
    }
    let doh_at_20 = trace
        .rows
        .iter()
        .find(|r| (r.t_s - 1200.0).abs() < dt_s / 2.0)
        .map(|r| r.doh_true);
    let max_drop = trace
        .rows
        .iter()
        .map(|r| 100.0 * (1.0 - r.bp_true_mmhg / trace.baseline_mmhg))
        .fold(0.0f64, f64::max);
    let in_band = trace
        .rows
        .iter()
        .filter(|r| r.doh_true >= 40.0 && r.doh_true <= 60.0)
        .count();
    let timeline: Vec<(f64, usize)> = {
        let mut out = Vec::new();
        let mut count = 0usize;
        for e in &trace.events {
            count += 1;
            out.push((e.t_min, count));
        }
        out
    };
    Metrics {
        patient_id: true_id.to_string(),
        induction_completed: induction_time.is_some(),
        induction_time_min: induction_time,
        doh_at_20min: doh_at_20,
        max_bp_drop_pct: max_drop,
        time_in_doh_40_60: in_band as f64 / trace.rows.len().max(1) as f64,
        falsified_count_timeline: timeline,
        breach_count: trace.rows.iter().filter(|r| r.breach).count(),
        unfalsified_final: trace.rows.last().map_or(0, |r| r.unfalsified),
    }
}

/// Cohort run output: per-patient metrics plus box-plot quartiles of the
/// hypnosis depth at 20 minutes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortSummary {
    pub per_patient: Vec<Metrics>,
    pub doh20_quartiles: Option<[f64; 5]>,
    pub induction_rate: f64,
}

/// Run every cohort member as the true patient, in parallel with independent
/// noise streams. Kernels are computed once.
pub fn run_cohort(scenario: &Scenario, cohort: &Cohort) -> Result<(KernelResult, Vec<SimTrace>, CohortSummary)> {
    scenario.validate()?;
    let kernels = compute_scenario_kernels(scenario, cohort)?;
    let ctx = SimContext {
        scenario,
        cohort,
        kernels: &kernels,
    };
    let outputs: Vec<(SimTrace, Metrics)> = cohort
        .models
        .par_iter()
        .map(|m| run(&ctx, &m.id))
        .collect::<Result<_>>()?;
    let (traces, metrics): (Vec<_>, Vec<_>) = outputs.into_iter().unzip();
    let summary = summarize(metrics);
    Ok((kernels, traces, summary))
}

/// Kernels for a scenario's bound/horizon on a cohort.
pub fn compute_scenario_kernels(scenario: &Scenario, cohort: &Cohort) -> Result<KernelResult> {
    let u_set = scenario.input_set()?;
    compute_cohort_kernels(
        cohort,
        scenario.bp_bound_pct,
        scenario.kernel.pk_bounds.0,
        scenario.kernel.pk_bounds.1,
        scenario.kernel.horizon_min,
        scenario.dt_s,
        &u_set,
        scenario.kernel.facet_cap,
    )
}

pub fn summarize(per_patient: Vec<Metrics>) -> CohortSummary {
    let mut doh: Vec<f64> = per_patient.iter().filter_map(|m| m.doh_at_20min).collect();
    doh.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quart = if doh.is_empty() {
        None
    } else {
        let q = |f: f64| -> f64 {
            let pos = f * (doh.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let w = pos - lo as f64;
            doh[lo] * (1.0 - w) + doh[hi] * w
        };
        Some([doh[0], q(0.25), q(0.5), q(0.75), doh[doh.len() - 1]])
    };
    let rate = per_patient.iter().filter(|m| m.induction_completed).count() as f64
        / per_patient.len().max(1) as f64;
    CohortSummary {
        per_patient,
        doh20_quartiles: quart,
        induction_rate: rate,
    }
}

// --- text output -------------------------------------------------------------

/// Fixed-format float: six significant digits, scientific.
fn fmt6(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.5e}")
    }
}

pub fn trace_to_csv(trace: &SimTrace) -> String {
    let mut out = String::new();
    out.push_str("t_s,u_pr_mlh,u_sp_mlh,u_applied_mlh,zeta");
    for id in &trace.model_ids {
        out.push_str(&format!(",ce_{id}_mgl"));
    }
    out.push_str(",cp_mgl,x2_mgl,x3_mgl,bp_true_mmhg,bp_meas_pct,doh_true,worst_model,unfalsified,breach\n");
    for r in &trace.rows {
        out.push_str(&fmt6(r.t_s));
        for v in [r.u_pr, r.u_sp, r.u_applied, r.zeta] {
            out.push(',');
            out.push_str(&fmt6(v));
        }
        for v in &r.ce {
            out.push(',');
            out.push_str(&fmt6(*v));
        }
        for v in [r.pk[0], r.pk[1], r.pk[2], r.bp_true_mmhg, r.bp_meas_pct, r.doh_true] {
            out.push(',');
            out.push_str(&fmt6(v));
        }
        out.push_str(&format!(",{},{},{}\n", r.worst_model, r.unfalsified, u8::from(r.breach)));
    }
    out
}

pub fn events_to_csv(trace: &SimTrace) -> String {
    let mut out = String::from("t_s,model_id,residual_pct\n");
    for e in &trace.events {
        out.push_str(&format!("{},{},{}\n", fmt6(e.t_min * 60.0), e.model_id, fmt6(e.residual)));
    }
    out
}
