//! Additive grid attention gate on a skip connection.
//!
//! ```text
//! q     = relu(W_x * x + up(W_g * g + b_g))
//! alpha = sigmoid(psi * q + b_psi)          // [N,1,H,W]
//! out   = x ⊙ alpha                         // broadcast over channels
//! ```
//!
//! All three convolutions are 1×1, so each coefficient depends only on its own
//! grid cell. `up` is nearest-neighbour upsampling from the gating signal's
//! grid to the skip feature's grid.

use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::nn::{glorot_init, BoundParams, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGateParams {
    /// `[F_int, Cx, 1, 1]`
    pub w_x: Tensor,
    /// `[F_int, Cg, 1, 1]`
    pub w_g: Tensor,
    /// `[F_int]`
    pub b_g: Tensor,
    /// `[1, F_int, 1, 1]`
    pub psi: Tensor,
    /// `[1]`
    pub b_psi: Tensor,
}

/// Parameter names under a prefix, in the order they are registered.
pub const PARAM_SUFFIXES: [&str; 5] = ["w_x.weight", "w_g.weight", "w_g.bias", "psi.weight", "psi.bias"];

/// Default intermediate width: half the skip channels, at least 1.
pub fn default_f_int(skip_channels: usize) -> usize {
    (skip_channels / 2).max(1)
}

impl AttentionGateParams {
    pub fn glorot(skip_channels: usize, gate_channels: usize, f_int: usize, seed: u64) -> Result<Self> {
        Ok(AttentionGateParams {
            w_x: glorot_init(&[f_int, skip_channels, 1, 1], skip_channels, f_int, seed)?,
            w_g: glorot_init(&[f_int, gate_channels, 1, 1], gate_channels, f_int, seed.wrapping_add(1))?,
            b_g: Tensor::zeros(vec![f_int]),
            psi: glorot_init(&[1, f_int, 1, 1], f_int, 1, seed.wrapping_add(2))?,
            b_psi: Tensor::zeros(vec![1]),
        })
    }

    pub fn f_int(&self) -> usize {
        self.w_x.shape()[0]
    }

    pub fn register(self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        let tensors = [self.w_x, self.w_g, self.b_g, self.psi, self.b_psi];
        for (suffix, t) in PARAM_SUFFIXES.iter().zip(tensors) {
            store.insert(format!("{prefix}.{suffix}"), t)?;
        }
        Ok(())
    }

    /// Records the parameters on a tape as gradient-tracking leaves.
    pub fn bind(&self, tape: &mut Tape) -> AttentionGateVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone().with_requires_grad(true));
        AttentionGateVars {
            w_x: leaf(&self.w_x),
            w_g: leaf(&self.w_g),
            b_g: leaf(&self.b_g),
            psi: leaf(&self.psi),
            b_psi: leaf(&self.b_psi),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionGateVars {
    pub w_x: Var,
    pub w_g: Var,
    pub b_g: Var,
    pub psi: Var,
    pub b_psi: Var,
}

impl AttentionGateVars {
    pub fn from_bound(bound: &BoundParams, prefix: &str) -> Result<Self> {
        let get = |s: &str| bound.get(&format!("{prefix}.{s}"));
        Ok(AttentionGateVars {
            w_x: get(PARAM_SUFFIXES[0])?,
            w_g: get(PARAM_SUFFIXES[1])?,
            b_g: get(PARAM_SUFFIXES[2])?,
            psi: get(PARAM_SUFFIXES[3])?,
            b_psi: get(PARAM_SUFFIXES[4])?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub gated: Var,
    /// Attention map `[N,1,H,W]`, strictly inside (0, 1).
    pub alpha: Var,
}

/// Integer factor mapping the gating grid onto the skip grid.
pub fn gate_factor(skip: &[usize], gate: &[usize]) -> Result<usize> {
    let (&[n, _, h, w], &[ng, _, hg, wg]) = (skip, gate) else {
        return Err(Error::shape(format!("attention gate: expected 4-D inputs, got {skip:?} and {gate:?}")));
    };
    if n != ng {
        return Err(Error::shape(format!("attention gate: batch {n} vs gate batch {ng}")));
    }
    if hg > h || wg > w || h % hg != 0 || w % wg != 0 || h / hg != w / wg {
        return Err(Error::shape(format!(
            "attention gate: gating grid {hg}×{wg} does not evenly divide skip grid {h}×{w}"
        )));
    }
    Ok(h / hg)
}

pub fn ag_forward(tape: &mut Tape, x_skip: Var, g: Var, p: &AttentionGateVars) -> Result<AttentionOutput> {
    let factor = gate_factor(tape.shape(x_skip), tape.shape(g))?;
    let theta = tape.conv2d(x_skip, p.w_x, None, 1, 0)?;
    let mut phi = tape.conv2d(g, p.w_g, Some(p.b_g), 1, 0)?;
    if factor > 1 {
        phi = tape.upsample_nearest(phi, factor)?;
    }
    let pre = tape.add(theta, phi)?;
    let q = tape.relu(pre);
    let logits = tape.conv2d(q, p.psi, Some(p.b_psi), 1, 0)?;
    let alpha = tape.sigmoid(logits);
    let gated = tape.mul(x_skip, alpha)?;
    Ok(AttentionOutput { gated, alpha })
}

/// Finite-difference check of every gate parameter on the loss `⟨gated, r⟩`
/// for a random direction `r`.
pub fn ag_gradcheck(
    params: &AttentionGateParams,
    x_skip: &Tensor,
    g: &Tensor,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let inputs = [
        ("w_x", params.w_x.clone()),
        ("w_g", params.w_g.clone()),
        ("b_g", params.b_g.clone()),
        ("psi", params.psi.clone()),
        ("b_psi", params.b_psi.clone()),
    ];
    check_gradients(&inputs, opts, |tape, v| {
        let vars = AttentionGateVars {
            w_x: v[0],
            w_g: v[1],
            b_g: v[2],
            psi: v[3],
            b_psi: v[4],
        };
        let x = tape.constant(x_skip.clone());
        let gv = tape.constant(g.clone());
        Ok(ag_forward(tape, x, gv, &vars)?.gated)
    })
}
