//! Random geometric augmentation applied identically to an image and its mask.
//!
//! One draw composes rotation, horizontal shear, isotropic scaling and a
//! vertical shift about the image centre, followed by a random crop that is
//! resized back to the input extents. The composite is applied as a single
//! inverse map so each output pixel is sampled once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    /// Angles are drawn from `[-rotation_degrees, rotation_degrees]`.
    pub rotation_degrees: f64,
    /// Shear factor drawn from `[-shear_range, shear_range]`.
    pub shear_range: f64,
    pub scale_range: [f64; 2],
    /// Crop side as a fraction of the image; drawn from `[crop_fraction, 1]`.
    pub crop_fraction: f64,
    /// Vertical shift drawn from `±height_shift_fraction` of the height.
    pub height_shift_fraction: f64,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            rotation_degrees: 30.0,
            shear_range: 0.3,
            scale_range: [0.9, 1.1],
            crop_fraction: 0.9,
            height_shift_fraction: 0.1,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    /// Every range collapsed: each draw is the identity transform.
    pub fn identity() -> Self {
        AugmentationSpec {
            rotation_degrees: 0.0,
            shear_range: 0.0,
            scale_range: [1.0, 1.0],
            crop_fraction: 1.0,
            height_shift_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let finite = [
            self.rotation_degrees,
            self.shear_range,
            self.scale_range[0],
            self.scale_range[1],
            self.crop_fraction,
            self.height_shift_fraction,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            errs.push("augmentation: all ranges must be finite".to_string());
            return errs;
        }
        if !(0.0..=180.0).contains(&self.rotation_degrees) {
            errs.push(format!("augmentation.rotation_degrees must be in [0, 180], got {}", self.rotation_degrees));
        }
        if self.shear_range < 0.0 {
            errs.push(format!("augmentation.shear_range must be >= 0, got {}", self.shear_range));
        }
        let [lo, hi] = self.scale_range;
        if lo <= 0.0 || hi < lo {
            errs.push(format!("augmentation.scale_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            errs.push(format!("augmentation.crop_fraction must be in (0, 1], got {}", self.crop_fraction));
        }
        if !(0.0..1.0).contains(&self.height_shift_fraction) {
            errs.push(format!(
                "augmentation.height_shift_fraction must be in [0, 1), got {}",
                self.height_shift_fraction
            ));
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// Concrete transform parameters for one draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub angle_degrees: f64,
    pub shear: f64,
    pub scale: f64,
    /// Vertical shift as a fraction of the height.
    pub shift: f64,
    /// Crop side as a fraction of the image.
    pub crop: f64,
    /// Crop origin within the free margin, each in `[0, 1]`.
    pub crop_origin: [f64; 2],
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

impl AugmentParams {
    /// Draws deterministically from `(spec.seed, draw_index)`.
    pub fn draw(spec: &AugmentationSpec, draw_index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("augment/{draw_index}")));
        let r = spec.rotation_degrees;
        let s = spec.shear_range;
        let h = spec.height_shift_fraction;
        AugmentParams {
            angle_degrees: uniform(&mut rng, -r, r),
            shear: uniform(&mut rng, -s, s),
            scale: uniform(&mut rng, spec.scale_range[0], spec.scale_range[1]),
            shift: uniform(&mut rng, -h, h),
            crop: uniform(&mut rng, spec.crop_fraction, 1.0),
            crop_origin: [rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.angle_degrees == 0.0 && self.shear == 0.0 && self.scale == 1.0 && self.shift == 0.0 && self.crop == 1.0
    }

    /// Source coordinates (pixel-centre convention) sampled by output pixel
    /// `(y, x)` of an `h × w` image.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let (hf, wf) = (h as f64, w as f64);
        // Output pixel -> crop window in the transformed image.
        let ch = self.crop * hf;
        let cw = self.crop * wf;
        let ty = self.crop_origin[0] * (hf - ch) + (y as f64 + 0.5) * self.crop;
        let tx = self.crop_origin[1] * (wf - cw) + (x as f64 + 0.5) * self.crop;
        // Undo shift, scale, shear and rotation about the centre.
        let mut py = ty - hf / 2.0 - self.shift * hf;
        let mut px = tx - wf / 2.0;
        py /= self.scale;
        px /= self.scale;
        px -= self.shear * py;
        let (sin, cos) = self.angle_degrees.to_radians().sin_cos();
        let sy = -sin * px + cos * py;
        let sx = cos * px + sin * py;
        (sy + hf / 2.0 - 0.5, sx + wf / 2.0 - 0.5)
    }
}

/// Bilinear sample with zeros outside the image.
fn sample(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (dy, dx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize] as f64
        }
    };
    let top = at(y0, x0) * (1.0 - dx) + at(y0, x0 + 1.0) * dx;
    let bottom = at(y0 + 1.0, x0) * (1.0 - dx) + at(y0 + 1.0, x0 + 1.0) * dx;
    (top * (1.0 - dy) + bottom * dy) as f32
}

/// Warps every channel of a `[C,H,W]` tensor by `params`.
pub fn warp(t: &Tensor, params: &AugmentParams) -> Result<Tensor> {
    let [c, h, w] = *t.shape() else {
        return Err(Error::shape(format!("augment: expected [C,H,W], got {:?}", t.shape())));
    };
    if params.is_identity() {
        return Ok(t.clone());
    }
    let coords: Vec<(f64, f64)> = (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| params.source(y, x, h, w)).collect();
    let mut out = Vec::with_capacity(c * h * w);
    for plane in t.data().chunks(h * w) {
        out.extend(coords.iter().map(|&(sy, sx)| sample(plane, h, w, sy, sx)));
    }
    Tensor::new(vec![c, h, w], out)
}

/// Applies draw `draw_index` of `spec` to an image `[C,H,W]` and its binary
/// mask `[1,H,W]`. The mask is warped with the same sampler and re-binarized
/// at 0.5.
pub fn augment(image: &Tensor, mask: &Tensor, spec: &AugmentationSpec, draw_index: u64) -> Result<(Tensor, Tensor)> {
    if image.shape().len() != 3 || mask.shape().len() != 3 || image.shape()[1..] != mask.shape()[1..] {
        return Err(Error::shape(format!(
            "augment: image {:?} and mask {:?} must share spatial extents",
            image.shape(),
            mask.shape()
        )));
    }
    let params = AugmentParams::draw(spec, draw_index);
    let image = warp(image, &params)?;
    let mut mask = warp(mask, &params)?;
    binarize(&mut mask);
    Ok((image, mask))
}

pub fn binarize(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
}
