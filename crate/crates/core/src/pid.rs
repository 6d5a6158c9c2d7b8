//! PID performance controller for hypnosis-depth tracking with
//! back-calculation anti-windup and a filtered derivative on the measurement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gains and limits. The controller is reverse-acting: the error is
/// `measurement - setpoint`, so positive gains increase the infusion while
/// the index sits above target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PidParams {
    /// ml/h per index unit.
    pub kp: f64,
    /// ml/h per index unit per second.
    pub ki: f64,
    /// ml/h per index unit per (1/second).
    pub kd: f64,
    /// Anti-windup tracking time constant, seconds.
    pub tt_s: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Hypnosis-depth target (index units, 0-100).
    pub setpoint: f64,
}

impl Default for PidParams {
    fn default() -> Self {
        Self {
            kp: 12.0,
            ki: 0.25,
            kd: 60.0,
            tt_s: 40.0,
            u_min: 0.0,
            u_max: 600.0,
            setpoint: 50.0,
        }
    }
}

impl PidParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.u_min < self.u_max) {
            return Err(Error::Config("PID limits need u_min < u_max".into()));
        }
        if !(self.tt_s > 0.0) {
            return Err(Error::Config("anti-windup time constant must be positive".into()));
        }
        for g in [self.kp, self.ki, self.kd] {
            if !g.is_finite() {
                return Err(Error::Config("PID gains must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Controller memory carried between samples (value semantics).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    /// Low-pass filtered measurement for the derivative term.
    pub y_filt: Option<f64>,
}

/// One controller step on a measured index; returns the saturated output and
/// the updated memory.
pub fn pid_step(params: &PidParams, state: &PidState, y_meas: f64, dt_s: f64) -> (f64, PidState) {
    debug_assert!(dt_s > 0.0);
    let e = y_meas - params.setpoint;
    // Derivative on the filtered measurement (filter constant 10 dt) to avoid
    // setpoint kick and noise amplification.
    let tf = 10.0 * dt_s;
    let y_prev = state.y_filt.unwrap_or(y_meas);
    let y_filt = y_prev + (dt_s / (tf + dt_s)) * (y_meas - y_prev);
    let deriv = (y_filt - y_prev) / dt_s;

    let u_raw = params.kp * e + state.integral + params.kd * deriv;
    let u_sat = u_raw.clamp(params.u_min, params.u_max);
    // Back-calculation: bleed the integrator toward consistency with the
    // saturated output.
    let integral = state.integral + params.ki * e * dt_s + (u_sat - u_raw) * dt_s / params.tt_s;
    (
        u_sat,
        PidState {
            integral,
            y_filt: Some(y_filt),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> PidParams {
        PidParams::default()
    }

    #[test]
    fn zero_error_settles_at_integral() {
        let p = params();
        let mut st = PidState {
            integral: 37.0,
            y_filt: Some(p.setpoint),
        };
        for _ in 0..50 {
            let (u, next) = pid_step(&p, &st, p.setpoint, 5.0);
            assert!((u - 37.0).abs() < 1e-12);
            st = next;
        }
        assert!((st.integral - 37.0).abs() < 1e-12);
    }

    #[test]
    fn pure_proportional_is_clamped_gain() {
        let p = PidParams {
            ki: 0.0,
            kd: 0.0,
            kp: 10.0,
            ..params()
        };
        let st = PidState::default();
        let (u, _) = pid_step(&p, &st, 53.0, 5.0);
        assert!((u - 30.0).abs() < 1e-12);
        let (u, _) = pid_step(&p, &st, 300.0, 5.0);
        assert_eq!(u, p.u_max);
        let (u, _) = pid_step(&p, &st, 0.0, 5.0);
        assert_eq!(u, p.u_min);
    }

    #[test]
    fn anti_windup_bounds_integrator() {
        // Persistent saturating error: with back-calculation the integral
        // stays near the saturation-consistent value instead of ramping
        // without bound.
        let p = params();
        let mut st = PidState::default();
        for _ in 0..2000 {
            let (_, next) = pid_step(&p, &st, 100.0, 5.0);
            st = next;
        }
        assert!(st.integral.abs() <= p.u_max + 100.0, "integral {}", st.integral);

        let no_aw = PidParams {
            tt_s: 1e12,
            ..params()
        };
        let mut st2 = PidState::default();
        for _ in 0..2000 {
            let (_, next) = pid_step(&no_aw, &st2, 100.0, 5.0);
            st2 = next;
        }
        assert!(st2.integral > 10.0 * st.integral.abs());
    }

    #[test]
    fn anti_windup_recovers_faster_after_saturation() {
        // Drive both variants into saturation, then flip the error sign and
        // count samples until the output leaves the upper limit.
        let recover = |tt: f64| -> usize {
            let p = PidParams { tt_s: tt, ..params() };
            let mut st = PidState::default();
            for _ in 0..400 {
                let (_, n) = pid_step(&p, &st, 95.0, 5.0);
                st = n;
            }
            let mut count = 0;
            loop {
                let (u, n) = pid_step(&p, &st, 10.0, 5.0);
                st = n;
                if u < p.u_max - 1e-9 || count > 10_000 {
                    break;
                }
                count += 1;
            }
            count
        };
        let with_aw = recover(40.0);
        let without_aw = recover(1e12);
        assert!(
            with_aw < without_aw,
            "anti-windup {with_aw} steps vs {without_aw}"
        );
    }

    #[test]
    fn deterministic() {
        let p = params();
        let run = || {
            let mut st = PidState::default();
            let mut out = Vec::new();
            for k in 0..100 {
                let y = 90.0 - k as f64 * 0.3;
                let (u, n) = pid_step(&p, &st, y, 5.0);
                out.push(u.to_bits());
                st = n;
            }
            out
        };
        assert_eq!(run(), run());
    }
}
