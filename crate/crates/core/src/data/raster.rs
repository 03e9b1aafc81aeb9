//! 8-bit raster I/O and resampling of `[C,H,W]` tensors.

use std::path::Path;

use image::{DynamicImage, GrayImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn data_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| data_err(path, format!("cannot decode image: {e}")))
}

/// Reads an 8-bit grayscale or RGB image as `[C,H,W]` scaled to `[0,1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => Tensor::new(vec![1, h, w], g.pixels().map(|p| p.0[0] as f32 / 255.0).collect()),
        DynamicImage::ImageRgb8(rgb) => {
            let mut data = vec![0.0f32; 3 * h * w];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = p.0[c] as f32 / 255.0;
                }
            }
            Tensor::new(vec![3, h, w], data)
        }
        other => Err(data_err(
            path,
            format!("unsupported pixel format {:?}; need 8-bit grayscale or RGB", other.color()),
        )),
    }
}

/// Reads a mask as `[1,H,W]`, thresholding 8-bit intensity at 127.5.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = decode(path)?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        DynamicImage::ImageRgb8(_) => img.to_luma8(),
        other => {
            return Err(data_err(
                path,
                format!("unsupported mask format {:?}; need 8-bit grayscale or RGB", other.color()),
            ))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    Tensor::new(
        vec![1, h, w],
        gray.pixels().map(|p| if p.0[0] as f32 > 127.5 { 1.0 } else { 0.0 }).collect(),
    )
}

/// Maps `[0,1]` to `0..=255` (rounded, clamped).
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a single-channel map (`[H,W]`, `[1,H,W]` or `[1,1,H,W]`) as an
/// 8-bit grayscale PNG.
pub fn write_gray(path: &Path, map: &Tensor) -> Result<()> {
    let shape = map.shape();
    let (h, w) = match shape {
        [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
        _ => return Err(Error::shape(format!("write_gray: need a single-channel map, got {shape:?}"))),
    };
    let bytes: Vec<u8> = map.data().iter().map(|&v| to_u8(v)).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches extents");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| data_err(path, format!("cannot write image: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("expected a [C,H,W] tensor, got {:?}", t.shape()))),
    }
}

/// Resizes `[C,H,W]` to `[C,target,target]` using half-pixel centres.
pub fn resize(t: &Tensor, target: usize, interp: Interpolation) -> Result<Tensor> {
    resize_to(t, target, target, interp)
}

pub fn resize_to(t: &Tensor, out_h: usize, out_w: usize, interp: Interpolation) -> Result<Tensor> {
    let (c, h, w) = chw(t)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize: target must be at least 1"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in t.data().chunks(h * w) {
        for y in 0..out_h {
            for x in 0..out_w {
                let v = match interp {
                    Interpolation::Nearest => {
                        let iy = (((y as f64 + 0.5) * sy) as usize).min(h - 1);
                        let ix = (((x as f64 + 0.5) * sx) as usize).min(w - 1);
                        plane[iy * w + ix]
                    }
                    Interpolation::Bilinear => {
                        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
                        let p = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
                        let top = p(y0, x0) * (1.0 - dx) + p(y0, x1) * dx;
                        let bottom = p(y1, x0) * (1.0 - dx) + p(y1, x1) * dx;
                        (top * (1.0 - dy) + bottom * dy) as f32
                    }
                };
                out.push(v);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Converts between 1 and 3 channels (replicate or average); other counts
/// are rejected.
pub fn to_channels(t: &Tensor, channels: usize) -> Result<Tensor> {
    let (c, h, w) = chw(t)?;
    match (c, channels) {
        (a, b) if a == b => Ok(t.clone()),
        (1, 3) => Tensor::new(vec![3, h, w], t.data().repeat(3)),
        (3, 1) => {
            let plane = h * w;
            let d = t.data();
            Tensor::new(
                vec![1, h, w],
                (0..plane)
                    .map(|i| ((d[i] as f64 + d[plane + i] as f64 + d[2 * plane + i] as f64) / 3.0) as f32)
                    .collect(),
            )
        }
        _ => Err(Error::shape(format!("cannot convert {c} channels to {channels}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(resize(&t, 2, Interpolation::Bilinear).unwrap(), t);
    }

    #[test]
    fn constant_survives_bilinear() {
        let t = Tensor::full(vec![1, 64, 64], 0.5);
        let up = resize(&t, 128, Interpolation::Bilinear).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.5));
        let back = resize(&up, 64, Interpolation::Bilinear).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn nearest_checkerboard_blocks() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let up = resize(&t, 4, Interpolation::Nearest).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                // index-map oracle: destination (y, x) reads source (y / 2, x / 2)
                assert_eq!(up.data()[y * 4 + x], t.data()[(y / 2) * 2 + x / 2]);
            }
        }
    }

    #[test]
    fn channel_conversion() {
        let t = Tensor::new(vec![1, 1, 2], vec![0.2, 0.4]).unwrap();
        let rgb = to_channels(&t, 3).unwrap();
        assert_eq!(rgb.shape(), &[3, 1, 2]);
        let back = to_channels(&rgb, 1).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-7);
        assert!(to_channels(&t, 2).is_err());
    }

    #[test]
    fn gray_png_round_trip_and_thresholds() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let t = Tensor::new(vec![1, 1, 4], vec![0.0, 127.0 / 255.0, 128.0 / 255.0, 1.0]).unwrap();
        write_gray(&p, &t).unwrap();
        let img = read_image(&p).unwrap();
        assert!(img.max_abs_diff(&t) <= 1.0 / 255.0);
        let mask = read_mask(&p).unwrap();
        assert_eq!(mask.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn rgba_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        image::RgbaImage::new(2, 2).save(&p).unwrap();
        assert!(read_image(&p).unwrap_err().to_string().contains("unsupported"));
    }
}
