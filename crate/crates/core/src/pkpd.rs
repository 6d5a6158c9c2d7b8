//! Pharmacokinetic/pharmacodynamic patient models.
//!
//! Units: rate constants are per minute, concentrations in mg/l (equal to
//! mcg/ml), infusion rates in ml/h of 10 mg/ml solution, pressures in mmHg,
//! clinical effects in percent of baseline. `discretize_zoh` takes its sample
//! period in the time unit of the `a` matrix (minutes for these models).

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Polytope;

/// Continuous- or discrete-time LTI model `x' = A x + B u`, `y = C x`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearStateSpace {
    #[serde(with = "matrix_serde")]
    pub a: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub b: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub c: DMatrix<f64>,
    /// Sample period in the time unit of `a`; `None` for continuous time.
    pub dt: Option<f64>,
}

impl LinearStateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: a.ncols().max(b.nrows()).max(c.ncols()),
            });
        }
        Ok(Self { a, b, c, dt: None })
    }

    pub fn num_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_inputs(&self) -> usize {
        self.b.ncols()
    }

    /// One discrete step `A_d x + B_d u` (requires a discretized model).
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        debug_assert!(self.dt.is_some(), "step() needs a discretized model");
        &self.a * x + &self.b * u
    }

    /// Frequency response `C (sI - A)^{-1} B` at `s = iw`.
    pub fn freq_response(&self, w: f64) -> Result<DMatrix<Complex<f64>>> {
        let n = self.num_states();
        let mut m = DMatrix::<Complex<f64>>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = Complex::new(-self.a[(i, j)], if i == j { w } else { 0.0 });
            }
        }
        let inv = m
            .try_inverse()
            .ok_or_else(|| Error::Numerical("resolvent is singular at this frequency".into()))?;
        let b = self.b.map(|v| Complex::new(v, 0.0));
        let c = self.c.map(|v| Complex::new(v, 0.0));
        Ok(c * inv * b)
    }
}

/// Exact zero-order-hold discretization by the augmented matrix exponential:
/// `exp([[A, B], [0, 0]] dt) = [[A_d, B_d], [0, I]]`.
pub fn discretize_zoh(sys: &LinearStateSpace, dt: f64) -> Result<LinearStateSpace> {
    if !(dt > 0.0) {
        return Err(Error::Domain("sample period must be positive".into()));
    }
    let n = sys.num_states();
    let m = sys.num_inputs();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&sys.a);
    aug.view_mut((0, n), (n, m)).copy_from(&sys.b);
    let e = (aug * dt).exp();
    let a_d = e.view((0, 0), (n, n)).into_owned();
    let b_d = e.view((0, n), (n, m)).into_owned();
    Ok(LinearStateSpace {
        a: a_d,
        b: b_d,
        c: sys.c.clone(),
        dt: Some(dt),
    })
}

/// First-order effect-site filter plus Hill nonlinearity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PdParams {
    /// Effect-site equilibration rate (1/min).
    pub ke0: f64,
    /// Effect-site concentration at half-maximal effect (mcg/ml).
    pub ec50: f64,
    /// Hill steepness exponent.
    pub hill_slope: f64,
    /// Positive drug-sensitivity gain multiplying the plasma input.
    pub input_gain: f64,
}

impl PdParams {
    pub fn validate(&self) -> Result<()> {
        if self.ke0 > 0.0 && self.ec50 > 0.0 && self.hill_slope > 0.0 && self.input_gain > 0.0 {
            Ok(())
        } else {
            Err(Error::Domain("PD parameters must be strictly positive".into()))
        }
    }
}

/// One candidate patient: shared-structure PK plus BP and DoH effect models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientModel {
    pub id: String,
    pub pk: LinearStateSpace,
    pub bp_pd: PdParams,
    pub doh_pd: PdParams,
    /// Baseline mean arterial pressure (mmHg).
    pub bp_baseline: f64,
}

impl PatientModel {
    pub fn validate(&self) -> Result<()> {
        if self.pk.num_states() != 3 {
            return Err(Error::Config(format!(
                "patient `{}`: PK model must have exactly 3 states",
                self.id
            )));
        }
        self.bp_pd.validate()?;
        self.doh_pd.validate()?;
        if !(self.bp_baseline > 0.0) {
            return Err(Error::Domain("baseline blood pressure must be positive".into()));
        }
        for pd in [&self.bp_pd, &self.doh_pd] {
            let casc = cascade(&self.pk, pd);
            let eigs = casc.a.complex_eigenvalues();
            if eigs.iter().any(|e| e.re > 1e-9) {
                return Err(Error::Config(format!(
                    "patient `{}`: PK/PD cascade is unstable",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn bp_cascade(&self) -> LinearStateSpace {
        cascade(&self.pk, &self.bp_pd)
    }

    pub fn doh_cascade(&self) -> LinearStateSpace {
        cascade(&self.pk, &self.doh_pd)
    }
}

/// Series connection of the PK model with a PD effect-site filter.
///
/// The 4th state obeys `ce' = ke0 (g Cp - ce)` with the sensitivity gain `g`
/// placed in the effect-site coupling. Input-output this equals scaling the
/// input column by `g`; keeping the PK coordinates gain-free lets every model
/// of a set share the same physical plasma trajectory.
pub fn cascade(pk: &LinearStateSpace, pd: &PdParams) -> LinearStateSpace {
    let n = pk.num_states();
    let m = pk.num_inputs();
    let mut a = DMatrix::zeros(n + 1, n + 1);
    a.view_mut((0, 0), (n, n)).copy_from(&pk.a);
    // Plasma concentration is state 1 of the PK block.
    a[(n, 0)] = pd.ke0 * pd.input_gain;
    a[(n, n)] = -pd.ke0;
    let mut b = DMatrix::zeros(n + 1, m);
    b.view_mut((0, 0), (n, m)).copy_from(&pk.b);
    let mut c = DMatrix::zeros(1, n + 1);
    c[(0, n)] = 1.0;
    LinearStateSpace { a, b, c, dt: None }
}

/// Hill effect in percent: `100 ce^g / (ec50^g + ce^g)`.
pub fn hill_effect(ce: f64, pd: &PdParams) -> Result<f64> {
    if ce < 0.0 {
        return Err(Error::Domain(format!("effect-site concentration {ce} < 0")));
    }
    if ce == 0.0 {
        return Ok(0.0);
    }
    let r = (pd.ec50 / ce).powf(pd.hill_slope);
    Ok(100.0 / (1.0 + r))
}

/// Largest effect-site concentration whose Hill effect stays at or below
/// `bound_pct`: `ec50 (b / (100 - b))^{1/g}`.
pub fn invert_hill_bound(bound_pct: f64, pd: &PdParams) -> Result<f64> {
    if !(0.0 < bound_pct && bound_pct < 100.0) {
        return Err(Error::Domain(format!(
            "effect bound {bound_pct} must lie strictly inside (0, 100)"
        )));
    }
    Ok(pd.ec50 * (bound_pct / (100.0 - bound_pct)).powf(1.0 / pd.hill_slope))
}

/// Blood pressure from a percent effect: `baseline (1 - e/100)`.
pub fn bp_from_effect(effect_pct: f64, baseline: f64) -> f64 {
    baseline * (1.0 - effect_pct / 100.0)
}

/// Percent effect from a blood pressure reading (inverse of the above).
pub fn effect_from_bp(bp: f64, baseline: f64) -> f64 {
    100.0 * (1.0 - bp / baseline)
}

/// State constraint set for one model at a given BP-drop bound: the PK box
/// crossed with `ce in [0, ce_max]`, where `ce_max` inverts the Hill bound.
pub fn bp_constraint_set(model: &PatientModel, bound_pct: f64, pk_lo: f64, pk_hi: f64) -> Result<Polytope> {
    let ce_max = invert_hill_bound(bound_pct, &model.bp_pd)?;
    let lo = DVector::from_vec(vec![pk_lo, pk_lo, pk_lo, 0.0]);
    let hi = DVector::from_vec(vec![pk_hi, pk_hi, pk_hi, ce_max]);
    Polytope::bounding_box(&lo, &hi)
}

/// Ordered set of candidate patient models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cohort {
    pub models: Vec<PatientModel>,
    pub provenance: String,
}

impl Cohort {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("cohort must contain at least one model".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.models {
            if !seen.insert(m.id.clone()) {
                return Err(Error::Config(format!("duplicate model id `{}`", m.id)));
            }
            m.validate()?;
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&PatientModel> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.models.iter().map(|m| m.id.clone()).collect()
    }
}

/// Versioned cohort file wrapper.
#[derive(Debug, Serialize, Deserialize)]
struct CohortFile {
    schema: u32,
    provenance: String,
    models: Vec<PatientModel>,
}

pub fn cohort_to_json(cohort: &Cohort) -> Result<String> {
    let file = CohortFile {
        schema: 1,
        provenance: cohort.provenance.clone(),
        models: cohort.models.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn cohort_from_json(text: &str) -> Result<Cohort> {
    let file: CohortFile = serde_json::from_str(text)?;
    if file.schema != 1 {
        return Err(Error::Config(format!("unsupported cohort schema {}", file.schema)));
    }
    let cohort = Cohort {
        models: file.models,
        provenance: file.provenance,
    };
    cohort.validate()?;
    Ok(cohort)
}

/// The population PK model shared by every synthetic cohort member:
/// a three-compartment mammillary model in concentration coordinates with
/// unit tissue/plasma partition ratios and round rate constants of plausible
/// adult magnitude (central volume 4.3 l, drug solution 10 mg/ml).
pub fn shared_pk() -> LinearStateSpace {
    let (k10, k12, k21, k13, k31) = (0.12, 0.11, 0.06, 0.04, 0.02);
    let v1 = 4.3;
    let a = DMatrix::from_row_slice(
        3,
        3,
        &[
            -(k10 + k12 + k13),
            k12,
            k13,
            k21,
            -k21,
            0.0,
            k31,
            0.0,
            -k31,
        ],
    );
    // ml/h of 10 mg/ml solution -> mg/l per minute in the central volume.
    let b = DMatrix::from_row_slice(3, 1, &[10.0 / (60.0 * v1), 0.0, 0.0]);
    let c = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
    LinearStateSpace { a, b, c, dt: None }
}

/// Parameter ranges for cohort synthesis. The elderly preset keeps every
/// model's BP sensitivity higher than its hypnosis sensitivity
/// (`ec50_bp < ec50_doh`) while leaving the hypnosis target reachable under
/// a 50% BP-drop cap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortSpread {
    pub preset: String,
    pub ec50_bp: (f64, f64),
    pub hill_bp: (f64, f64),
    pub ke0_bp: (f64, f64),
    /// `ec50_doh = ec50_bp * ratio`.
    pub ec50_ratio: (f64, f64),
    pub hill_doh: (f64, f64),
    pub ke0_doh: (f64, f64),
    pub bp_baseline: (f64, f64),
    /// Replace the last member with a deliberately restrictive model
    /// (low ec50, elevated gain) so conservatism experiments have teeth.
    pub force_outlier: bool,
}

impl Default for CohortSpread {
    fn default() -> Self {
        // The regular band is deliberately narrow relative to the outlier:
        // once the outlier is falsified the surviving intersection must
        // already admit every member's hypnosis target, as a probe of the
        // conservatism-reduction mechanism rather than of slow cap staircases.
        Self {
            preset: "elderly".into(),
            ec50_bp: (2.35, 2.9),
            hill_bp: (1.6, 2.6),
            ke0_bp: (0.10, 0.22),
            ec50_ratio: (1.01, 1.05),
            hill_doh: (1.1, 1.3),
            ke0_doh: (0.35, 0.70),
            bp_baseline: (85.0, 100.0),
            force_outlier: true,
        }
    }
}

fn log_uniform<R: Rng>(rng: &mut R, range: (f64, f64)) -> f64 {
    (rng.gen_range(range.0.ln()..=range.1.ln())).exp()
}

/// Deterministic synthetic cohort: same seed, same cohort.
pub fn synthesize_cohort(seed: u64, n: usize, spread: &CohortSpread) -> Result<Cohort> {
    if n < 2 {
        return Err(Error::Config("cohort synthesis needs n >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pk = shared_pk();
    let mut models = Vec::with_capacity(n);
    for i in 0..n {
        let ec50_bp = log_uniform(&mut rng, spread.ec50_bp);
        let hill_bp = rng.gen_range(spread.hill_bp.0..=spread.hill_bp.1);
        let ke0_bp = log_uniform(&mut rng, spread.ke0_bp);
        let ratio = rng.gen_range(spread.ec50_ratio.0..=spread.ec50_ratio.1);
        let hill_doh = rng.gen_range(spread.hill_doh.0..=spread.hill_doh.1);
        let ke0_doh = log_uniform(&mut rng, spread.ke0_doh);
        let baseline = rng.gen_range(spread.bp_baseline.0..=spread.bp_baseline.1);
        let outlier = spread.force_outlier && i == n - 1;
        let (bp_pd, doh_pd, baseline) = if outlier {
            (
                PdParams {
                    ke0: 0.30,
                    ec50: 0.8,
                    hill_slope: 2.2,
                    input_gain: 1.2,
                },
                PdParams {
                    ke0: 0.80,
                    ec50: 0.81,
                    hill_slope: 1.0,
                    input_gain: 1.0,
                },
                90.0,
            )
        } else {
            (
                PdParams {
                    ke0: ke0_bp,
                    ec50: ec50_bp,
                    hill_slope: hill_bp,
                    input_gain: 1.0,
                },
                PdParams {
                    ke0: ke0_doh,
                    ec50: ec50_bp * ratio,
                    hill_slope: hill_doh,
                    input_gain: 1.0,
                },
                baseline,
            )
        };
        models.push(PatientModel {
            id: format!("p{i:02}"),
            pk: pk.clone(),
            bp_pd,
            doh_pd,
            bp_baseline: baseline,
        });
    }
    let cohort = Cohort {
        models,
        provenance: format!(
            "synthetic cohort (seed {seed}, n {n}, preset {}): shared 3-compartment \
             concentration-coordinate PK; per-model BP/DoH effect-site and Hill \
             parameters drawn log-uniformly inside documented ranges; last member \
             is a forced restrictive outlier (low ec50, elevated gain)",
            spread.preset
        ),
    };
    cohort.validate()?;
    Ok(cohort)
}

mod matrix_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, ser: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        rows.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(de)?;
        let nr = rows.len();
        let nc = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != nc) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        let mut m = DMatrix::zeros(nr, nc);
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        Ok(m)
    }
}
