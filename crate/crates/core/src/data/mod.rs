//! Manifests, image loading, resizing, augmentation and synthetic corpora.

mod augment;
mod manifest;
mod raster;
mod synth;

use std::path::Path;

pub use augment::{augment, binarize, warp, AugmentParams, AugmentationSpec};
pub use manifest::{Manifest, SampleRecord, HEADER};
pub use raster::{read_image, read_mask, resize, resize_to, to_channels, to_u8, write_gray, Interpolation};
pub use synth::{subject_count, synth_corpus, synth_samples, Ellipse, SynthSample};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes one image/mask pair at native resolution.
pub fn load_sample(manifest: &Manifest, record: &SampleRecord) -> Result<(Tensor, Tensor)> {
    let image_path = manifest.image_path(record);
    let mask_path = manifest.mask_path(record);
    let image = read_image(&image_path)?;
    let mask = read_mask(&mask_path)?;
    if image.shape()[1..] != mask.shape()[1..] {
        return Err(Error::Data {
            path: mask_path,
            message: format!(
                "mask is {}×{} but image `{}` is {}×{}",
                mask.shape()[1],
                mask.shape()[2],
                image_path.display(),
                image.shape()[1],
                image.shape()[2]
            ),
        });
    }
    Ok((image, mask))
}

/// A sample ready for the network: `[C,S,S]` image and `[1,S,S]` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

/// Loads, channel-adapts and resizes a record to `size × size`.
pub fn prepare_sample(manifest: &Manifest, record: &SampleRecord, size: usize, channels: usize) -> Result<Sample> {
    let (image, mask) = load_sample(manifest, record)?;
    let image = to_channels(&image, channels).map_err(|e| e.context(format!("{}", manifest.image_path(record).display())))?;
    Ok(Sample {
        subject_id: record.subject_id.clone(),
        image: resize(&image, size, Interpolation::Bilinear)?,
        mask: resize(&mask, size, Interpolation::Nearest)?,
    })
}

pub fn load_dataset(manifest: &Manifest, size: usize, channels: usize) -> Result<Vec<Sample>> {
    manifest
        .records
        .iter()
        .map(|r| prepare_sample(manifest, r, size, channels))
        .collect()
}

/// Stacks samples into `[N,C,S,S]` images and `[N,1,S,S]` masks.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Loads a single image for inference, adapted to the network input.
pub fn load_input(path: &Path, size: usize, channels: usize) -> Result<Tensor> {
    let image = to_channels(&read_image(path)?, channels)?;
    resize(&image, size, Interpolation::Bilinear)
}
