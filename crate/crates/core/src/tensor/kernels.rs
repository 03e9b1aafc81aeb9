//! Raw convolution, pooling and resampling kernels over flat `N×C×H×W` buffers.
//!
//! Convolution is cross-correlation (no kernel flip). All sums accumulate in
//! `f64`. The transposed convolution has no kernel of its own: its forward pass
//! is [`conv2d_input_grad`] and its backward pass reuses [`conv2d_forward`] and
//! [`conv2d_weight_grad`] with the channel roles swapped.

use crate::error::{Error, Result};

/// Resolved extents of one `conv2d` call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Geometry of `conv2d(input, weight)` with `input: [N,Cin,H,W]` and
    /// `weight: [Cout,Cin,kh,kw]`.
    pub fn conv(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (n, c, h, w) = dims4(input, "conv input")?;
        let (o, wc, kh, kw) = dims4(weight, "conv weight")?;
        if wc != c {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels but weight {weight:?} expects {wc}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be at least 1"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: o,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Geometry of the convolution whose input gradient is
    /// `conv_transpose2d(input, weight)`, with `input: [N,Cin,H,W]` and
    /// `weight: [Cin,Cout,kh,kw]`. The returned geometry's *input* side is the
    /// transposed convolution's output.
    pub fn transpose(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (n, c, h, w) = dims4(input, "conv_transpose input")?;
        let (wc, o, kh, kw) = dims4(weight, "conv_transpose weight")?;
        if wc != c {
            return Err(Error::shape(format!(
                "conv_transpose2d: input has {c} channels but weight {weight:?} expects {wc}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv_transpose2d: stride must be at least 1"));
        }
        let out_h = ((h - 1) * stride + kh) as isize - 2 * padding as isize;
        let out_w = ((w - 1) * stride + kw) as isize - 2 * padding as isize;
        if out_h <= 0 || out_w <= 0 {
            return Err(Error::shape(format!(
                "conv_transpose2d: non-positive output extent {out_h}×{out_w}"
            )));
        }
        Ok(ConvGeometry {
            batch: n,
            in_channels: o,
            in_h: out_h as usize,
            in_w: out_w as usize,
            out_channels: c,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: h,
            out_w: w,
        })
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_channels * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_h * self.out_w
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Output positions `[lo, hi)` along one axis whose tap `k` lands inside
    /// the unpadded input.
    fn valid(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if in_len + p > k {
            ((in_len - 1 + p - k) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::shape(format!("{what}: expected 4-D shape, got {shape:?}"))),
    }
}

pub fn conv2d_forward(g: &ConvGeometry, input: &[f32], weight: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding);
    let mut out = vec![0.0f32; g.output_len()];
    let mut acc = vec![0.0f64; oh * ow];
    let xranges: Vec<_> = (0..kw).map(|kx| g.valid(kx, iw, ow)).collect();
    let yranges: Vec<_> = (0..kh).map(|ky| g.valid(ky, ih, oh)).collect();
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            acc.fill(bias.map_or(0.0, |b| b[o] as f64));
            for c in 0..g.in_channels {
                let plane = &input[(n * g.in_channels + c) * ih * iw..][..ih * iw];
                let wbase = (o * g.in_channels + c) * kh * kw;
                for ky in 0..kh {
                    let (ylo, yhi) = yranges[ky];
                    for kx in 0..kw {
                        let wv = weight[wbase + ky * kw + kx] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let (xlo, xhi) = xranges[kx];
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - p;
                            let row = &plane[iy * iw..][..iw];
                            let arow = &mut acc[oy * ow..][..ow];
                            for ox in xlo..xhi {
                                arow[ox] += wv * row[ox * s + kx - p] as f64;
                            }
                        }
                    }
                }
            }
            let dst = &mut out[(n * g.out_channels + o) * oh * ow..][..oh * ow];
            dst.iter_mut().zip(&acc).for_each(|(d, a)| *d = *a as f32);
        }
    }
    out
}

/// Gradient of `conv2d` with respect to its input, given the output gradient.
pub fn conv2d_input_grad(g: &ConvGeometry, grad_out: &[f32], weight: &[f32]) -> Vec<f32> {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding);
    let mut gin = vec![0.0f32; g.input_len()];
    let mut acc = vec![0.0f64; ih * iw];
    let xranges: Vec<_> = (0..kw).map(|kx| g.valid(kx, iw, ow)).collect();
    let yranges: Vec<_> = (0..kh).map(|ky| g.valid(ky, ih, oh)).collect();
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            acc.fill(0.0);
            for o in 0..g.out_channels {
                let gplane = &grad_out[(n * g.out_channels + o) * oh * ow..][..oh * ow];
                let wbase = (o * g.in_channels + c) * kh * kw;
                for ky in 0..kh {
                    let (ylo, yhi) = yranges[ky];
                    for kx in 0..kw {
                        let wv = weight[wbase + ky * kw + kx] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let (xlo, xhi) = xranges[kx];
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - p;
                            let grow = &gplane[oy * ow..][..ow];
                            let arow = &mut acc[iy * iw..][..iw];
                            for ox in xlo..xhi {
                                arow[ox * s + kx - p] += wv * grow[ox] as f64;
                            }
                        }
                    }
                }
            }
            let dst = &mut gin[(n * g.in_channels + c) * ih * iw..][..ih * iw];
            dst.iter_mut().zip(&acc).for_each(|(d, a)| *d = *a as f32);
        }
    }
    gin
}

/// Gradient of `conv2d` with respect to its weight.
pub fn conv2d_weight_grad(g: &ConvGeometry, input: &[f32], grad_out: &[f32]) -> Vec<f32> {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding);
    let mut gw = vec![0.0f32; g.weight_len()];
    let xranges: Vec<_> = (0..kw).map(|kx| g.valid(kx, iw, ow)).collect();
    let yranges: Vec<_> = (0..kh).map(|ky| g.valid(ky, ih, oh)).collect();
    for o in 0..g.out_channels {
        for c in 0..g.in_channels {
            for ky in 0..kh {
                let (ylo, yhi) = yranges[ky];
                for kx in 0..kw {
                    let (xlo, xhi) = xranges[kx];
                    let mut sum = 0.0f64;
                    for n in 0..g.batch {
                        let plane = &input[(n * g.in_channels + c) * ih * iw..][..ih * iw];
                        let gplane = &grad_out[(n * g.out_channels + o) * oh * ow..][..oh * ow];
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - p;
                            let row = &plane[iy * iw..][..iw];
                            let grow = &gplane[oy * ow..][..ow];
                            for ox in xlo..xhi {
                                sum += grow[ox] as f64 * row[ox * s + kx - p] as f64;
                            }
                        }
                    }
                    gw[((o * g.in_channels + c) * kh + ky) * kw + kx] = sum as f32;
                }
            }
        }
    }
    gw
}

/// Per-channel sum of a `[N,C,H,W]` buffer.
pub fn channel_sums(data: &[f32], n: usize, c: usize, plane: usize) -> Vec<f32> {
    let mut sums = vec![0.0f64; c];
    for b in 0..n {
        for (ch, s) in sums.iter_mut().enumerate() {
            *s += data[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
    }
    sums.into_iter().map(|s| s as f32).collect()
}

/// Max pooling without padding. Returns the output and, for every output
/// element, the flat input index of the first maximum in row-major window order.
pub fn maxpool2d_forward(
    shape: &[usize],
    input: &[f32],
    window: usize,
    stride: usize,
) -> Result<(Vec<usize>, Vec<f32>, Vec<usize>)> {
    let (n, c, h, w) = dims4(shape, "maxpool input")?;
    if window == 0 || stride == 0 {
        return Err(Error::shape("maxpool2d: window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::shape(format!(
            "maxpool2d: window {window} exceeds input {h}×{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = input[best_idx];
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((vec![n, c, oh, ow], out, argmax))
}

pub fn upsample_nearest_forward(shape: &[usize], input: &[f32], factor: usize) -> Result<(Vec<usize>, Vec<f32>)> {
    let (n, c, h, w) = dims4(shape, "upsample input")?;
    if factor == 0 {
        return Err(Error::shape("upsample: factor must be at least 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &input[plane * h * w..][..h * w];
        for y in 0..oh {
            let row = &src[(y / factor) * w..][..w];
            for x in 0..ow {
                out.push(row[x / factor]);
            }
        }
    }
    Ok((vec![n, c, oh, ow], out))
}

pub fn upsample_nearest_backward(in_shape: &[usize], grad_out: &[f32], factor: usize) -> Vec<f32> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut acc = vec![0.0f64; n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out[plane * oh * ow..][..oh * ow];
        let dst = &mut acc[plane * h * w..][..h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / factor) * w + x / factor] += src[y * ow + x] as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}
