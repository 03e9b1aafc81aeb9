//! Deterministic toy corpus: one bright ellipse on a textured background per
//! image, with the exact ellipse as the mask.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{Manifest, SampleRecord};
use super::raster::{to_u8, write_gray};
use crate::error::{Error, Result};
use crate::nn::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub centre_y: f64,
    pub centre_x: f64,
    pub semi_y: f64,
    pub semi_x: f64,
    /// Rotation of the axes, radians.
    pub angle: f64,
}

impl Ellipse {
    /// Whether the centre of pixel `(y, x)` lies inside (boundary inclusive).
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.centre_y;
        let dx = x as f64 + 0.5 - self.centre_x;
        let (sin, cos) = self.angle.sin_cos();
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        (u / self.semi_x).powi(2) + (v / self.semi_y).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub subject_id: String,
    pub ellipse: Ellipse,
    /// `[1,size,size]`, already quantized to 8-bit levels.
    pub image: Tensor,
    /// `[1,size,size]` in {0,1}.
    pub mask: Tensor,
}

pub fn subject_count(n: usize) -> usize {
    n.div_ceil(2)
}

fn subject_name(i: usize, subjects: usize) -> String {
    let width = subjects.saturating_sub(1).to_string().len().max(2);
    format!("subj_{i:0width$}")
}

fn draw_ellipse(rng: &mut ChaCha8Rng, size: usize) -> Ellipse {
    let s = size as f64;
    let semi_y = rng.gen_range(0.12..0.3) * s;
    let semi_x = rng.gen_range(0.12..0.3) * s;
    let margin = semi_y.max(semi_x).min(s / 2.0);
    Ellipse {
        centre_y: rng.gen_range(margin..=s - margin),
        centre_x: rng.gen_range(margin..=s - margin),
        // Keep the ellipse at least a pixel wide even on tiny canvases.
        semi_y: semi_y.max(1.0),
        semi_x: semi_x.max(1.0),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
    }
}

/// Generates the samples in memory without touching the filesystem.
pub fn synth_samples(n: usize, size: usize, seed: u64) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::Config("synthetic corpus: n must be at least 1".into()));
    }
    if size < 4 {
        return Err(Error::Config(format!("synthetic corpus: size must be at least 4, got {size}")));
    }
    let subjects = subject_count(n);
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("synth/{i}")));
            let ellipse = draw_ellipse(&mut rng, size);
            let (fy, fx, phase) = (rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6), rng.gen_range(0.0..6.3));
            let fg = rng.gen_range(0.7..0.9);
            let mut image = Vec::with_capacity(size * size);
            let mut mask = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let texture = 0.08 * ((y as f64 * fy + phase).sin() * (x as f64 * fx).cos()) + rng.gen_range(-0.04..0.04);
                    let inside = ellipse.contains(y, x);
                    let base = if inside { fg } else { 0.25 };
                    image.push(to_u8((base + texture) as f32) as f32 / 255.0);
                    mask.push(if inside { 1.0 } else { 0.0 });
                }
            }
            Ok(SynthSample {
                subject_id: subject_name(i % subjects, subjects),
                ellipse,
                image: Tensor::new(vec![1, size, size], image)?,
                mask: Tensor::new(vec![1, size, size], mask)?,
            })
        })
        .collect()
}

/// Writes `n` image/mask PNG pairs plus `manifest.csv` under `dir` and
/// returns the manifest.
pub fn synth_corpus(dir: &Path, n: usize, size: usize, seed: u64) -> Result<Manifest> {
    let samples = synth_samples(n, size, seed)?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let width = (n - 1).to_string().len().max(3);
    let mut records = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let image_path = format!("images/img_{i:0width$}.png");
        let mask_path = format!("masks/mask_{i:0width$}.png");
        write_gray(&dir.join(&image_path), &s.image)?;
        write_gray(&dir.join(&mask_path), &s.mask)?;
        records.push(SampleRecord {
            subject_id: s.subject_id.clone(),
            image_path: image_path.into(),
            mask_path: mask_path.into(),
        });
    }
    let manifest = Manifest::new(dir, records);
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
