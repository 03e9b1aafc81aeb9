use serde::{Deserialize, Serialize};

use super::params::{is_bias, BoundParams};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub use crate::tensor::{bce_value, focal_value, PROB_EPS};

/// Weights of the composite training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Focal exponent γ.
    pub gamma: f32,
    /// Positive-class weight. `None` uses the per-batch negative/positive
    /// pixel ratio.
    pub pos_weight: Option<f32>,
    pub lambda_edge: f32,
    pub lambda_reg: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            pos_weight: None,
            lambda_edge: 0.1,
            lambda_reg: 0.004,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.gamma >= 0.0) {
            errs.push(format!("loss.gamma must be non-negative, got {}", self.gamma));
        }
        if let Some(w) = self.pos_weight {
            if !(w > 0.0) {
                errs.push(format!("loss.pos_weight must be positive, got {w}"));
            }
        }
        if !(self.lambda_edge >= 0.0) {
            errs.push(format!("loss.lambda_edge must be non-negative, got {}", self.lambda_edge));
        }
        if !(self.lambda_reg >= 0.0) {
            errs.push(format!("loss.lambda_reg must be non-negative, got {}", self.lambda_reg));
        }
        errs
    }

    /// Positive-class weight for a given target batch.
    pub fn resolve_pos_weight(&self, target: &Tensor) -> f32 {
        self.pos_weight.unwrap_or_else(|| auto_pos_weight(target))
    }
}

/// Negative/positive pixel ratio; 1 when either class is absent.
pub fn auto_pos_weight(target: &Tensor) -> f32 {
    let pos = target.data().iter().filter(|&&y| y >= 0.5).count();
    let neg = target.len() - pos;
    if pos == 0 || neg == 0 {
        1.0
    } else {
        (neg as f64 / pos as f64) as f32
    }
}

fn check_binary(target: &Tensor) -> Result<()> {
    if target.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::shape("loss target must contain only 0 and 1"));
    }
    Ok(())
}

pub fn bce_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    check_binary(target)?;
    tape.bce(pred, target)
}

pub fn focal_bce_loss(tape: &mut Tape, pred: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
    check_binary(target)?;
    let w = cfg.resolve_pos_weight(target);
    tape.focal_bce(pred, target, cfg.gamma, w)
}

/// `λ · Σ θ²` over every weight tensor; biases are exempt.
pub fn l2_penalty(tape: &mut Tape, params: &BoundParams, lambda: f32) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("l2 factor must be non-negative, got {lambda}")));
    }
    let mut total: Option<Var> = None;
    for (name, var) in params.iter() {
        if is_bias(name) {
            continue;
        }
        let sq = tape.sum_squares(var);
        total = Some(match total {
            Some(acc) => tape.add(acc, sq)?,
            None => sq,
        });
    }
    Ok(match total {
        Some(sum) => tape.scale(sum, lambda),
        None => tape.constant(Tensor::scalar(0.0)),
    })
}
