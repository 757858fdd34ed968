//! Performance-driven gradient modulation of the acoustic and visual
//! encoders, with a conflict-aware penalty.
//!
//! Per optimizer step, after backward and before the update:
//!
//! 1. inverse-error scores `s_m = 1 / (MAE_m + eps)` from the unimodal heads;
//! 2. the better modality (larger score) gets `c = 1 - tanh(alpha * relu(r))`
//!    with `r` the score ratio, the other keeps `c = 1`;
//! 3. gradient norms `g_a`, `g_v` of the two encoder groups are measured;
//! 4. a modality that is better *and* has the larger gradient norm is in
//!    conflict and has its coefficient multiplied by `eta`;
//! 5. optionally the weaker modality is amplified (gradient enhancement);
//! 6. encoder gradients are scaled in place.
//!
//! Outside the epoch window `[window_start, window_end)` nothing is scaled.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{grad_norm, AutodiffError, GradNormMode};
use crate::model::{ModelParams, ParamGroup};

#[derive(Debug, Error)]
pub enum ModulationError {
    #[error("invalid modulation config: {0}")]
    InvalidConfig(String),
    #[error("gradient norm: {0}")]
    GradNorm(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioVariant {
    /// `relu(s_a / (s_v + eps))`, exactly as printed.
    #[default]
    AsWritten,
    /// `relu(s_a / (s_v + eps) - 1)`.
    RatioMinusOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulationConfig {
    pub alpha: f64,
    /// Conflict penalty factor, in `(0, 1)`.
    pub eta: f64,
    pub epsilon: f64,
    pub window_start: usize,
    /// Exclusive.
    pub window_end: usize,
    pub ratio_variant: RatioVariant,
    /// Upper bound of an enhanced coefficient.
    pub ge_cap: f64,
    pub grad_norm_mode: GradNormMode,
    /// Exponential moving average of the unimodal MAEs fed to the scores.
    /// `None` uses the raw per-batch values.
    pub mae_ema_decay: Option<f64>,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            eta: 0.5,
            epsilon: 1e-8,
            window_start: 0,
            window_end: 25,
            ratio_variant: RatioVariant::AsWritten,
            ge_cap: 1.5,
            grad_norm_mode: GradNormMode::MeanOfNorms,
            mae_ema_decay: None,
        }
    }
}

impl ModulationConfig {
    pub fn validate(&self) -> Result<(), ModulationError> {
        let bad = |m: String| Err(ModulationError::InvalidConfig(m));
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("eta = {} must lie in (0, 1)", self.eta));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return bad(format!("alpha = {} must be finite and >= 0", self.alpha));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return bad(format!("epsilon = {} must be finite and >= 0", self.epsilon));
        }
        if self.window_start > self.window_end {
            return bad(format!(
                "window_start {} exceeds window_end {}",
                self.window_start, self.window_end
            ));
        }
        if !self.ge_cap.is_finite() || self.ge_cap < 1.0 {
            return bad(format!("ge_cap = {} must be >= 1", self.ge_cap));
        }
        if let Some(d) = self.mae_ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("mae_ema_decay = {d} must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn in_window(&self, epoch: usize) -> bool {
        (self.window_start..self.window_end).contains(&epoch)
    }
}

/// Which optional stages of the step run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModulationSwitches {
    /// Gradient modulation at all.
    pub gm: bool,
    /// Conflict-aware penalty.
    pub cp: bool,
    /// Gradient enhancement of the weaker modality.
    pub ge: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub s_a: f64,
    pub s_v: f64,
    pub c_a: f64,
    pub c_v: f64,
}

/// Scores and raw coefficients from the unimodal errors.
pub fn compute_coefficients(mae_a: f64, mae_v: f64, cfg: &ModulationConfig) -> Coefficients {
    let eps = cfg.epsilon;
    let s_a = 1.0 / (mae_a + eps);
    let s_v = 1.0 / (mae_v + eps);
    let coef = |s_self: f64, s_other: f64| -> f64 {
        if s_self > s_other {
            let ratio = s_self / (s_other + eps);
            let r = match cfg.ratio_variant {
                RatioVariant::AsWritten => ratio,
                RatioVariant::RatioMinusOne => ratio - 1.0,
            };
            1.0 - (cfg.alpha * r.max(0.0)).tanh()
        } else {
            1.0
        }
    };
    Coefficients {
        s_a,
        s_v,
        c_a: coef(s_a, s_v),
        c_v: coef(s_v, s_a),
    }
}

/// A modality conflicts when it has the lower error and the larger gradient
/// norm.
pub fn detect_conflict(mae_a: f64, mae_v: f64, g_a: f64, g_v: f64) -> (bool, bool) {
    (mae_a < mae_v && g_a > g_v, mae_v < mae_a && g_v > g_a)
}

pub fn apply_conflict_penalty(c: f64, conflict: bool, eta: f64) -> f64 {
    if conflict {
        c * eta
    } else {
        c
    }
}

/// Coefficient of an enhanced (weaker) modality:
/// `min(cap, 1 + tanh(alpha * relu(s_other / (s_self + eps) - 1)))`.
pub fn enhancement_coefficient(s_self: f64, s_other: f64, cfg: &ModulationConfig) -> f64 {
    let r = s_other / (s_self + cfg.epsilon) - 1.0;
    (1.0 + (cfg.alpha * r.max(0.0)).tanh()).min(cfg.ge_cap)
}

/// `|g_a - g_v| / (g_a + g_v + eps)`; trace-only.
pub fn imbalance_degree(g_a: f64, g_v: f64, eps: f64) -> f64 {
    (g_a - g_v).abs() / (g_a + g_v + eps)
}

/// Gradient norms of the acoustic and visual encoder groups.
pub fn collect_grad_norms(params: &ModelParams, mode: GradNormMode) -> Result<(f64, f64), ModulationError> {
    let g_a = grad_norm(params.group_tensors(ParamGroup::EncA), mode)?;
    let g_v = grad_norm(params.group_tensors(ParamGroup::EncV), mode)?;
    Ok((g_a, g_v))
}

/// Multiplies every acoustic-encoder gradient by `c_a` and every
/// visual-encoder gradient by `c_v`. Other groups are not touched.
pub fn scale_gradients(params: &mut ModelParams, c_a: f64, c_v: f64) {
    for p in params.params_mut() {
        let c = match p.group {
            ParamGroup::EncA => c_a,
            ParamGroup::EncV => c_v,
            _ => continue,
        };
        if let Some(g) = p.tensor.grad_mut() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }
}

/// Per-step record of the modulation engine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModulationState {
    /// Unimodal errors fed to the scores (smoothed when EMA is on).
    pub mae_a: f64,
    pub mae_v: f64,
    /// Raw per-batch unimodal errors.
    pub batch_mae_a: f64,
    pub batch_mae_v: f64,
    pub s_a: f64,
    pub s_v: f64,
    pub c_a: f64,
    pub c_v: f64,
    pub g_a: f64,
    pub g_v: f64,
    pub conflict_a: bool,
    pub conflict_v: bool,
    pub imbalance: f64,
    pub active: bool,
}

/// Stateful driver: holds the MAE moving average across steps.
#[derive(Clone, Debug)]
pub struct Modulator {
    cfg: ModulationConfig,
    switches: ModulationSwitches,
    ema: Option<(f64, f64)>,
}

impl Modulator {
    pub fn new(cfg: ModulationConfig, switches: ModulationSwitches) -> Result<Self, ModulationError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            switches,
            ema: None,
        })
    }

    pub fn config(&self) -> &ModulationConfig {
        &self.cfg
    }

    fn smooth(&mut self, mae_a: f64, mae_v: f64) -> (f64, f64) {
        let Some(decay) = self.cfg.mae_ema_decay else {
            return (mae_a, mae_v);
        };
        let next = match self.ema {
            None => (mae_a, mae_v),
            Some((pa, pv)) => (
                decay * pa + (1.0 - decay) * mae_a,
                decay * pv + (1.0 - decay) * mae_v,
            ),
        };
        self.ema = Some(next);
        next
    }

    /// One modulation step. Must run once per optimizer step, after backward.
    /// Outside the window (or with modulation switched off) gradients are
    /// only read.
    pub fn step(
        &mut self,
        batch_mae_a: f64,
        batch_mae_v: f64,
        params: &mut ModelParams,
        epoch: usize,
    ) -> Result<ModulationState, ModulationError> {
        let (mae_a, mae_v) = self.smooth(batch_mae_a, batch_mae_v);
        let cfg = &self.cfg;
        let coef = compute_coefficients(mae_a, mae_v, cfg);
        let (g_a, g_v) = collect_grad_norms(params, cfg.grad_norm_mode)?;
        let mut state = ModulationState {
            mae_a,
            mae_v,
            batch_mae_a,
            batch_mae_v,
            s_a: coef.s_a,
            s_v: coef.s_v,
            c_a: 1.0,
            c_v: 1.0,
            g_a,
            g_v,
            conflict_a: false,
            conflict_v: false,
            imbalance: imbalance_degree(g_a, g_v, cfg.epsilon),
            active: false,
        };
        if !(self.switches.gm && cfg.in_window(epoch)) {
            return Ok(state);
        }

        let (conflict_a, conflict_v) = detect_conflict(mae_a, mae_v, g_a, g_v);
        let (mut c_a, mut c_v) = (coef.c_a, coef.c_v);
        if self.switches.cp {
            c_a = apply_conflict_penalty(c_a, conflict_a, cfg.eta);
            c_v = apply_conflict_penalty(c_v, conflict_v, cfg.eta);
        }
        if self.switches.ge {
            if coef.s_a < coef.s_v {
                c_a = enhancement_coefficient(coef.s_a, coef.s_v, cfg);
            } else if coef.s_v < coef.s_a {
                c_v = enhancement_coefficient(coef.s_v, coef.s_a, cfg);
            }
        }
        scale_gradients(params, c_a, c_v);

        state.c_a = c_a;
        state.c_v = c_v;
        state.conflict_a = conflict_a;
        state.conflict_v = conflict_v;
        state.active = true;
        Ok(state)
    }
}
