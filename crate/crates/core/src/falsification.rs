//! Bounded-noise model falsification and the bookkeeping that feeds kernel
//! re-intersection. A candidate model is discarded permanently once its
//! predicted effect deviates from the measurement by more than the worst-case
//! noise bound; with the true model in the set and noise inside the bound it
//! can never be discarded itself.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Polytope;
use crate::viability::{intersect_many, KernelResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FalsificationConfig {
    /// Worst-case measurement noise bound in percent-effect units.
    pub gamma: f64,
    /// Falsify on strict exceedance only (a residual exactly at the bound is
    /// still consistent with the noise model).
    pub strict: bool,
}

impl Default for FalsificationConfig {
    fn default() -> Self {
        Self {
            gamma: 17.0,
            strict: true,
        }
    }
}

/// Prediction-measurement discrepancy in percent-effect units.
pub fn residual(bp_measured: f64, bp_predicted: f64) -> f64 {
    (bp_measured - bp_predicted).abs()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FalsificationEvent {
    pub t_min: f64,
    pub model_id: String,
    pub residual: f64,
}

/// Which models are still in play, plus the falsification log. Removal is
/// permanent within a session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSetState {
    unfalsified: Vec<String>,
    events: Vec<FalsificationEvent>,
}

impl ModelSetState {
    pub fn new(ids: Vec<String>) -> Self {
        Self {
            unfalsified: ids,
            events: Vec::new(),
        }
    }

    pub fn unfalsified(&self) -> &[String] {
        &self.unfalsified
    }

    pub fn is_unfalsified(&self, id: &str) -> bool {
        self.unfalsified.iter().any(|u| u == id)
    }

    pub fn events(&self) -> &[FalsificationEvent] {
        &self.events
    }

    /// Apply one sample's residuals. An empty map (missing measurement)
    /// leaves the state unchanged. Returns the ids falsified at this step.
    pub fn update(
        &mut self,
        t_min: f64,
        residuals: &BTreeMap<String, f64>,
        cfg: &FalsificationConfig,
    ) -> Result<Vec<String>> {
        if residuals.is_empty() {
            return Ok(Vec::new());
        }
        for id in residuals.keys() {
            if !self.is_unfalsified(id) {
                return Err(Error::Config(format!(
                    "residual supplied for model `{id}` which is not in the unfalsified set"
                )));
            }
        }
        let mut removed = Vec::new();
        self.unfalsified.retain(|id| {
            let Some(&r) = residuals.get(id) else {
                return true;
            };
            let out = if cfg.strict { r > cfg.gamma } else { r >= cfg.gamma };
            if out {
                removed.push(id.clone());
            }
            !out
        });
        for id in &removed {
            self.events.push(FalsificationEvent {
                t_min,
                model_id: id.clone(),
                residual: residuals[id],
            });
        }
        Ok(removed)
    }
}

/// Full-horizon model-invariant kernel over the unfalsified models only.
/// Never shrinks as models are falsified.
pub fn active_kernel(state: &ModelSetState, kernels: &KernelResult) -> Result<Polytope> {
    let last = kernels.intersection.steps.len() - 1;
    active_kernel_at(state, kernels, last)
}

/// Step-indexed variant used by the simulation loop (`step_idx` counts the
/// remaining horizon).
pub fn active_kernel_at(
    state: &ModelSetState,
    kernels: &KernelResult,
    step_idx: usize,
) -> Result<Polytope> {
    if state.unfalsified.is_empty() {
        return Err(Error::NoModelsLeft);
    }
    if state.unfalsified.len() == kernels.per_model.len() {
        return Ok(kernels.intersection.at_remaining_guarded(step_idx).clone());
    }
    let mut parts: Vec<&Polytope> = Vec::with_capacity(state.unfalsified.len());
    for id in &state.unfalsified {
        let seq = kernels
            .per_model
            .get(id)
            .ok_or_else(|| Error::MissingKernel(id.clone()))?;
        parts.push(seq.at_remaining_guarded(step_idx));
    }
    intersect_many(&parts, kernels.meta.facet_cap)
}
