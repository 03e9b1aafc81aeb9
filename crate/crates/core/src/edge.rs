//! Gated edge head: a 1×1 convolution on a low-level feature predicts a
//! boundary map, which is trained against the mask's morphological gradient
//! and also re-weights the tapped feature as `feat ⊙ (1 + edge_prob)`.

use crate::error::{Error, Result};
use crate::nn::{bce_loss, glorot_init, BoundParams, ParamStore};
use crate::tensor::kernels::maxpool2d_forward;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeHeadParams {
    /// `[1, C, 1, 1]`
    pub w_e: Tensor,
    /// `[1]`
    pub b_e: Tensor,
}

pub const PARAM_SUFFIXES: [&str; 2] = ["conv.weight", "conv.bias"];

impl EdgeHeadParams {
    pub fn glorot(channels: usize, seed: u64) -> Result<Self> {
        Ok(EdgeHeadParams {
            w_e: glorot_init(&[1, channels, 1, 1], channels, 1, seed)?,
            b_e: Tensor::zeros(vec![1]),
        })
    }

    pub fn zeros(channels: usize) -> Self {
        EdgeHeadParams {
            w_e: Tensor::zeros(vec![1, channels, 1, 1]),
            b_e: Tensor::zeros(vec![1]),
        }
    }

    pub fn register(self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}.{}", PARAM_SUFFIXES[0]), self.w_e)?;
        store.insert(format!("{prefix}.{}", PARAM_SUFFIXES[1]), self.b_e)
    }

    pub fn bind(&self, tape: &mut Tape) -> EdgeHeadVars {
        EdgeHeadVars {
            w_e: tape.leaf(self.w_e.clone().with_requires_grad(true)),
            b_e: tape.leaf(self.b_e.clone().with_requires_grad(true)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EdgeHeadVars {
    pub w_e: Var,
    pub b_e: Var,
}

impl EdgeHeadVars {
    pub fn from_bound(bound: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(EdgeHeadVars {
            w_e: bound.get(&format!("{prefix}.{}", PARAM_SUFFIXES[0]))?,
            b_e: bound.get(&format!("{prefix}.{}", PARAM_SUFFIXES[1]))?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EdgeOutput {
    /// `[N,1,H,W]`
    pub edge_prob: Var,
    /// `feat ⊙ (1 + edge_prob)`, same shape as the input feature.
    pub conditioned: Var,
}

pub fn ea_forward(tape: &mut Tape, feat: Var, p: &EdgeHeadVars) -> Result<EdgeOutput> {
    let logits = tape.conv2d(feat, p.w_e, Some(p.b_e), 1, 0)?;
    let edge_prob = tape.sigmoid(logits);
    let gain = tape.add_scalar(edge_prob, 1.0);
    let conditioned = tape.mul(feat, gain)?;
    Ok(EdgeOutput { edge_prob, conditioned })
}

/// Binary boundary map `[N,1,H,W]` derived from a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTarget {
    pub boundary: Tensor,
}

/// One separable 3-wide pass along rows (`horizontal`) or columns. With
/// `dilate` the result is the window maximum, otherwise the window minimum;
/// cells outside the image count as background.
fn pass3(src: &[u8], h: usize, w: usize, horizontal: bool, dilate: bool) -> Vec<u8> {
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (pos, len) = if horizontal { (x, w) } else { (y, h) };
            let at = |d: usize| if horizontal { src[y * w + d] } else { src[d * w + x] };
            let lo = pos.checked_sub(1).map(at);
            let hi = (pos + 1 < len).then(|| at(pos + 1));
            let centre = at(pos);
            out[y * w + x] = if dilate {
                centre.max(lo.unwrap_or(0)).max(hi.unwrap_or(0))
            } else {
                centre.min(lo.unwrap_or(0)).min(hi.unwrap_or(0))
            };
        }
    }
    out
}

/// 3×3 morphological gradient `dilate(mask) − erode(mask)` with a zero border.
pub fn edge_target_from_mask(mask: &Tensor) -> Result<EdgeTarget> {
    let (n, c, h, w) = mask.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("edge target: mask must have one channel, got {c}")));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::shape("edge target: mask must be binary"));
    }
    let mut out = Vec::with_capacity(mask.len());
    for plane in mask.data().chunks(h * w) {
        let bits: Vec<u8> = plane.iter().map(|&v| v as u8).collect();
        let dil = pass3(&pass3(&bits, h, w, true, true), h, w, false, true);
        let ero = pass3(&pass3(&bits, h, w, true, false), h, w, false, false);
        out.extend(dil.iter().zip(&ero).map(|(d, e)| (d - e) as f32));
    }
    Ok(EdgeTarget {
        boundary: Tensor::new(vec![n, 1, h, w], out)?,
    })
}

impl EdgeTarget {
    /// Max-pools the boundary map down to a coarser grid so thin boundaries
    /// survive.
    pub fn downsample(&self, factor: usize) -> Result<EdgeTarget> {
        if factor == 1 {
            return Ok(self.clone());
        }
        let (shape, data, _) = maxpool2d_forward(self.boundary.shape(), self.boundary.data(), factor, factor)?;
        Ok(EdgeTarget {
            boundary: Tensor::new(shape, data)?,
        })
    }
}

pub fn edge_loss(tape: &mut Tape, edge_prob: Var, target: &EdgeTarget) -> Result<Var> {
    bce_loss(tape, edge_prob, &target.boundary)
}
