//! The five training objectives and their weighted sum.
//!
//! Every function records onto the caller's [`Tape`] so the result is
//! differentiable; [`LossBreakdown`] is the detached numeric summary written
//! to traces.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::model::VAR_EPS;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("loss over an empty batch")]
    EmptyBatch,
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_recon: f64,
    pub lambda_uni: f64,
    pub lambda_div: f64,
    pub lambda_stat: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_recon: 1.0,
            lambda_uni: 0.5,
            lambda_div: 0.1,
            lambda_stat: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_recon: 0.0,
            lambda_uni: 0.0,
            lambda_div: 0.0,
            lambda_stat: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("lambda_recon", self.lambda_recon),
            ("lambda_uni", self.lambda_uni),
            ("lambda_div", self.lambda_div),
            ("lambda_stat", self.lambda_stat),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::InvalidWeights(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLossKind {
    /// Mean absolute error.
    #[default]
    L1,
    /// Mean squared error.
    Squared,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconReduction {
    /// Per-element mean of the squared residuals.
    #[default]
    Mean,
    /// Raw squared L2 norm of the residuals.
    Sum,
}

/// Graph-attached loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub task: Var,
    pub recon: Var,
    pub uni: Var,
    pub div: Var,
    pub stat: Var,
}

/// Numeric values of the loss terms and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub recon: f64,
    pub uni: f64,
    pub div: f64,
    pub stat: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read(tape: &Tape, terms: &LossTerms, total: Var) -> Self {
        Self {
            task: tape.scalar(terms.task),
            recon: tape.scalar(terms.recon),
            uni: tape.scalar(terms.uni),
            div: tape.scalar(terms.div),
            stat: tape.scalar(terms.stat),
            total: tape.scalar(total),
        }
    }

    /// First non-finite term, by name.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("task", self.task),
            ("recon", self.recon),
            ("uni", self.uni),
            ("div", self.div),
            ("stat", self.stat),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    /// Gaussian entropy of the latents (the negated diversity loss).
    pub fn entropy(&self) -> f64 {
        -self.div
    }
}

/// Task regression loss between predictions and labels (both `B`).
pub fn task_loss(tape: &mut Tape, y_hat: Var, y: Var, kind: TaskLossKind) -> Result<Var, LossError> {
    if tape.data(y).is_empty() {
        return Err(LossError::EmptyBatch);
    }
    match kind {
        TaskLossKind::L1 => {
            let r = tape.sub(y_hat, y)?;
            let a = tape.abs(r);
            Ok(tape.mean_all(a))
        }
        TaskLossKind::Squared => Ok(tape.squared_error(y_hat, y)?),
    }
}

/// `0.5 * (err(A, A_hat) + err(V, V_hat))` where `err` is the mean or the sum
/// of squared residuals.
pub fn recon_loss(
    tape: &mut Tape,
    a: Var,
    a_hat: Var,
    v: Var,
    v_hat: Var,
    reduction: ReconReduction,
) -> Result<Var, LossError> {
    let mut err = |x: Var, x_hat: Var| -> Result<Var, LossError> {
        let m = tape.squared_error(x, x_hat)?;
        Ok(match reduction {
            ReconReduction::Mean => m,
            ReconReduction::Sum => {
                let n = tape.data(x).len() as f64;
                tape.scale(m, n)
            }
        })
    };
    let ea = err(a, a_hat)?;
    let ev = err(v, v_hat)?;
    let s = tape.add(ea, ev)?;
    Ok(tape.scale(s, 0.5))
}

/// Mean of the per-modality task losses of the three unimodal heads.
pub fn uni_loss(
    tape: &mut Tape,
    y_t: Var,
    y_a: Var,
    y_v: Var,
    y: Var,
    kind: TaskLossKind,
) -> Result<Var, LossError> {
    let lt = task_loss(tape, y_t, y, kind)?;
    let la = task_loss(tape, y_a, y, kind)?;
    let lv = task_loss(tape, y_v, y, kind)?;
    let s = tape.add(lt, la)?;
    let s = tape.add(s, lv)?;
    Ok(tape.scale(s, 1.0 / 3.0))
}

/// Negative mean Gaussian entropy of the latent variances,
/// `-(1/2) * mean(log(2*pi*e*(var + 1e-6)))`, averaged over the two
/// modalities. Minimizing it maximizes entropy.
pub fn div_loss(tape: &mut Tape, var_a: Var, var_v: Var) -> Result<Var, LossError> {
    let mut mean_log = |var: Var| -> Result<Var, LossError> {
        let shifted = tape.add_scalar(var, VAR_EPS);
        let l = tape.log(shifted)?;
        Ok(tape.mean_all(l))
    };
    let la = mean_log(var_a)?;
    let lv = mean_log(var_v)?;
    let s = tape.add(la, lv)?;
    let m = tape.scale(s, 0.5);
    let h = tape.add_scalar(m, (2.0 * PI * E).ln());
    Ok(tape.scale(h, -0.5))
}

/// Moment matching between the encoder-predicted statistics and the
/// empirical statistics of the raw inputs.
///
/// For every `(b, l)`: empirical mean and population variance of `X_m` over
/// its feature axis; predicted mean and variance as the average of `mu_m`
/// and `var_m` over the latent axis. The loss is a quarter of the sum of the
/// four mean-squared differences, each normalized by `B * L`.
pub fn stat_loss(
    tape: &mut Tape,
    a: Var,
    v: Var,
    mu_a: Var,
    var_a: Var,
    mu_v: Var,
    var_v: Var,
) -> Result<Var, LossError> {
    let mut modality = |x: Var, mu: Var, var: Var| -> Result<Var, LossError> {
        let ax = tape.last_axis(x);
        let emp_mean = tape.mean_axis(x, ax, false)?;
        let emp_var = tape.variance_axis(x, ax, false)?;
        let az = tape.last_axis(mu);
        let pred_mean = tape.mean_axis(mu, az, false)?;
        let pred_var = tape.mean_axis(var, az, false)?;
        let m = tape.squared_error(pred_mean, emp_mean)?;
        let s = tape.squared_error(pred_var, emp_var)?;
        Ok(tape.add(m, s)?)
    };
    let la = modality(a, mu_a, var_a)?;
    let lv = modality(v, mu_v, var_v)?;
    let s = tape.add(la, lv)?;
    Ok(tape.scale(s, 0.25))
}

/// `task + l_recon*recon + l_uni*uni + l_div*div + l_stat*stat`. Terms whose
/// weight is zero are left out of the graph.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, w: &LossWeights) -> Result<Var, LossError> {
    let mut total = terms.task;
    for (term, lambda) in [
        (terms.recon, w.lambda_recon),
        (terms.uni, w.lambda_uni),
        (terms.div, w.lambda_div),
        (terms.stat, w.lambda_stat),
    ] {
        if lambda != 0.0 {
            let weighted = tape.scale(term, lambda);
            total = tape.add(total, weighted)?;
        }
    }
    Ok(total)
}
