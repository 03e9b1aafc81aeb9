//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use agseg_core::attention::{ag_forward, AttentionGateVars};
use agseg_core::edge::{ea_forward, EdgeHeadVars};
use agseg_core::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use agseg_core::model::build_network;
use agseg_core::nn::LossConfig;
use agseg_core::{NetworkConfig, Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Values spaced at least `gap` apart in random order, so max pooling has a
/// unique winner that small perturbations cannot flip.
pub fn distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * gap - n as f32 * gap / 2.0).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Direct summation: `out[n,o,y,x] = b[o] + Σ_c Σ_i Σ_j in[n,c,y·s+i−p,x·s+j−p] · w[o,c,i,j]`.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = *x.shape() else { panic!() };
    let [o, _, kh, kw] = *w.shape() else { panic!() };
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0f32; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oi] as f64);
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize] as f64;
                                let wv = w.data()[((oi * c + ci) * kh + i) * kw + j] as f64;
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc as f32;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Scatter form of the transposed convolution with weight `[Cin,Cout,kh,kw]`.
pub fn conv_transpose_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, wd] = *x.shape() else { panic!() };
    let [_, cout, kh, kw] = *w.shape() else { panic!() };
    let full_h = (h - 1) * stride + kh;
    let full_w = (wd - 1) * stride + kw;
    let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
    let mut out = vec![0.0f64; n * cout * oh * ow];
    for ni in 0..n {
        for ci in 0..cin {
            for y in 0..h {
                for xx in 0..wd {
                    let xv = x.data()[((ni * cin + ci) * h + y) * wd + xx] as f64;
                    for co in 0..cout {
                        for i in 0..kh {
                            for j in 0..kw {
                                let oy = (y * stride + i) as isize - pad as isize;
                                let ox = (xx * stride + j) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                let wv = w.data()[((ci * cout + co) * kh + i) * kw + j] as f64;
                                out[((ni * cout + co) * oh + oy as usize) * ow + ox as usize] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out.into_iter().map(|v| v as f32).collect()).unwrap()
}

/// Boundary by neighbourhood scan: a pixel is on the boundary iff its 3×3
/// neighbourhood (inside the image) contains a foreground pixel and the full
/// 3×3 neighbourhood (outside counts as background) is not all foreground.
pub fn edge_oracle(mask: &[f32], h: usize, w: usize) -> Vec<f32> {
    let at = |y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && y < h as isize && x < w as isize && mask[y as usize * w + x as usize] == 1.0
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut any = false;
            let mut all = true;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let v = at(y + dy, x + dx);
                    any |= v;
                    all &= v;
                }
            }
            out[y as usize * w + x as usize] = if any && !all { 1.0 } else { 0.0 };
        }
    }
    out
}

/// Pixel counts `(tp, fp, fn, tn)` by a plain loop.
pub fn count_oracle(pred: &[f32], mask: &[f32], threshold: f32) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for i in 0..pred.len() {
        let p = pred[i] >= threshold;
        let m = mask[i] > 0.5;
        if p && m {
            tp += 1;
        } else if p {
            fp += 1;
        } else if m {
            fn_ += 1;
        } else {
            tn += 1;
        }
    }
    (tp, fp, fn_, tn)
}

/// Parameter count from the architecture description alone.
pub fn param_count_oracle(cfg: &NetworkConfig) -> usize {
    let enc = cfg.effective_encoder_filters();
    let dec = cfg.effective_decoder_filters();
    let k2 = cfg.kernel_size * cfg.kernel_size;
    let conv = |cin: usize, cout: usize, kk: usize| cin * cout * kk + cout;
    let mut total = 0;
    let mut cin = cfg.input_channels;
    for &f in &enc {
        total += conv(cin, f, k2) + conv(f, f, k2);
        cin = f;
    }
    let tap = if cfg.ea_tap_block == 0 { cfg.input_channels } else { enc[cfg.ea_tap_block - 1] };
    total += tap + 1;
    let skip = enc[cfg.ag_after_block - 1];
    let skip_block = 5 - cfg.ag_after_block;
    let gate = if skip_block == 1 { enc[3] } else { dec[skip_block - 2] };
    let fi = cfg.f_int.unwrap_or((skip / 2).max(1));
    total += skip * fi + gate * fi + fi + fi + 1;
    let mut cin = enc[3];
    for (j, &f) in dec.iter().enumerate() {
        total += match cfg.upsampling {
            agseg_core::model::Upsampling::Transpose => cin * f * 4 + f,
            agseg_core::model::Upsampling::Nearest => conv(cin, f, k2),
        };
        let conv_in = if j + 1 == skip_block { f + skip } else { f };
        total += conv(conv_in, f, k2);
        cin = f;
    }
    total + conv(dec[3], 1, 1)
}

/// Summary of one operator's finite-difference sweep.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub failures: Vec<String>,
}

impl Sweep {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn sweep(op: &'static str, instances: usize, mut one: impl FnMut(u64) -> Result<GradCheckReport>) -> Sweep {
    let mut max = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..instances {
        match one(i as u64) {
            Ok(r) => {
                max = max.max(r.rel_error);
                if !r.passed() {
                    failures.push(format!("instance {i}: {} {:?}", r.rel_error, r.entries));
                }
            }
            Err(e) => failures.push(format!("instance {i}: {e}")),
        }
    }
    Sweep {
        op,
        instances,
        max_rel_error: max,
        failures,
    }
}

pub const STEP: f32 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-3;
pub const NETWORK_TOLERANCE: f64 = 1e-2;
pub const INSTANCES: usize = 20;

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        step: STEP,
        tolerance: OP_TOLERANCE,
        seed,
        ..GradCheckOptions::default()
    }
}

/// Options for ops with relu kinks inside: coordinates whose perturbation
/// straddles a kink are excluded from the comparison.
fn kinked(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        kink_threshold: Some(0.05),
        ..opts(seed)
    }
}

pub fn sweep_conv2d() -> Sweep {
    sweep("conv2d", INSTANCES, |i| {
        let mut r = rng(100 + i);
        let (n, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let k = [1, 2, 3][r.gen_range(0..3)];
        let (h, w) = (r.gen_range(k..=6), r.gen_range(k..=6));
        let (stride, pad) = (r.gen_range(1..=2), r.gen_range(0..=k / 2));
        let x = random_tensor(&mut r, &[n, cin, h, w], -1.0, 1.0);
        let wt = random_tensor(&mut r, &[cout, cin, k, k], -1.0, 1.0);
        let b = random_tensor(&mut r, &[cout], -1.0, 1.0);
        check_gradients(&[("x", x), ("w", wt), ("b", b)], opts(i), |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad))
    })
}

pub fn sweep_conv_transpose2d() -> Sweep {
    sweep("conv_transpose2d", INSTANCES, |i| {
        let mut r = rng(200 + i);
        let (n, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let k = r.gen_range(2..=3);
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=1);
        let (h, w) = (r.gen_range(2..=5), r.gen_range(2..=5));
        let x = random_tensor(&mut r, &[n, cin, h, w], -1.0, 1.0);
        let wt = random_tensor(&mut r, &[cin, cout, k, k], -1.0, 1.0);
        let b = random_tensor(&mut r, &[cout], -1.0, 1.0);
        check_gradients(&[("x", x), ("w", wt), ("b", b)], opts(i), |t, v| {
            t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad)
        })
    })
}

pub fn sweep_maxpool2d() -> Sweep {
    sweep("maxpool2d", INSTANCES, |i| {
        let mut r = rng(300 + i);
        let (window, stride) = [(2, 2), (3, 1), (3, 2), (2, 1)][r.gen_range(0..4)];
        let (n, c) = (r.gen_range(1..=2), r.gen_range(1..=3));
        let (h, w) = (r.gen_range(window..=7), r.gen_range(window..=7));
        let x = distinct_tensor(&mut r, &[n, c, h, w], 0.01);
        check_gradients(&[("x", x)], opts(i), |t, v| t.maxpool2d(v[0], window, stride))
    })
}

pub fn sweep_upsample() -> Sweep {
    sweep("upsample_nearest", INSTANCES, |i| {
        let mut r = rng(400 + i);
        let factor = r.gen_range(1..=3);
        let shape = [r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=4)];
        let x = random_tensor(&mut r, &shape, -1.0, 1.0);
        check_gradients(&[("x", x)], opts(i), |t, v| t.upsample_nearest(v[0], factor))
    })
}

pub fn sweep_sigmoid() -> Sweep {
    sweep("sigmoid", INSTANCES, |i| {
        let mut r = rng(500 + i);
        let shape = [r.gen_range(1..=3), r.gen_range(1..=8)];
        let x = random_tensor(&mut r, &shape, -4.0, 4.0);
        check_gradients(&[("x", x)], opts(i), |t, v| Ok(t.sigmoid(v[0])))
    })
}

pub fn sweep_relu() -> Sweep {
    sweep("relu", INSTANCES, |i| {
        let mut r = rng(600 + i);
        let n = r.gen_range(2..=24);
        // Keep every input at least 0.05 from the kink.
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let m = r.gen_range(0.05f32..2.0);
                if r.gen_bool(0.5) { m } else { -m }
            })
            .collect();
        let x = Tensor::new(vec![n], data).unwrap();
        check_gradients(&[("x", x)], opts(i), |t, v| Ok(t.relu(v[0])))
    })
}

pub fn sweep_attention_gate() -> Sweep {
    sweep("attention_gate", INSTANCES, |i| {
        let mut r = rng(700 + i);
        let (n, cx, cg, fi) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=3));
        let factor = r.gen_range(1..=2);
        let (hg, wg) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let x = random_tensor(&mut r, &[n, cx, hg * factor, wg * factor], -1.0, 1.0);
        let g = random_tensor(&mut r, &[n, cg, hg, wg], -1.0, 1.0);
        let inputs = [
            ("w_x", random_tensor(&mut r, &[fi, cx, 1, 1], -1.0, 1.0)),
            ("w_g", random_tensor(&mut r, &[fi, cg, 1, 1], -1.0, 1.0)),
            ("b_g", random_tensor(&mut r, &[fi], -0.5, 0.5)),
            ("psi", random_tensor(&mut r, &[1, fi, 1, 1], -1.0, 1.0)),
            ("b_psi", random_tensor(&mut r, &[1], -0.5, 0.5)),
            ("x", x),
            ("g", g),
        ];
        check_gradients(&inputs, kinked(i), |t, v| {
            let vars = AttentionGateVars {
                w_x: v[0],
                w_g: v[1],
                b_g: v[2],
                psi: v[3],
                b_psi: v[4],
            };
            Ok(ag_forward(t, v[5], v[6], &vars)?.gated)
        })
    })
}

pub fn sweep_edge_head() -> Sweep {
    sweep("edge_head", INSTANCES, |i| {
        let mut r = rng(800 + i);
        let (n, c) = (r.gen_range(1..=2), r.gen_range(1..=4));
        let (h, w) = (r.gen_range(1..=5), r.gen_range(1..=5));
        let inputs = [
            ("w_e", random_tensor(&mut r, &[1, c, 1, 1], -1.0, 1.0)),
            ("b_e", random_tensor(&mut r, &[1], -0.5, 0.5)),
            ("feat", random_tensor(&mut r, &[n, c, h, w], -1.0, 1.0)),
        ];
        check_gradients(&inputs, opts(i), |t, v| {
            let out = ea_forward(t, v[2], &EdgeHeadVars { w_e: v[0], b_e: v[1] })?;
            // Both outputs: the conditioned feature and the boundary map.
            let s = t.sum(out.edge_prob);
            let s = t.scale(s, 0.5);
            let c = t.sum(out.conditioned);
            t.add(s, c)
        })
    })
}

pub fn sweep_bce() -> Sweep {
    sweep("bce", INSTANCES, |i| {
        let mut r = rng(900 + i);
        let shape = [r.gen_range(1..=2), 1, r.gen_range(1..=4), r.gen_range(1..=4)];
        let p = random_tensor(&mut r, &shape, 0.05, 0.95);
        let y = random_mask(&mut r, &shape, 0.4);
        check_gradients(&[("p", p)], opts(i), |t, v| t.bce(v[0], &y))
    })
}

pub fn sweep_focal() -> Sweep {
    sweep("focal_bce", INSTANCES, |i| {
        let mut r = rng(1000 + i);
        let shape = [r.gen_range(1..=2), 1, r.gen_range(1..=4), r.gen_range(1..=4)];
        let p = random_tensor(&mut r, &shape, 0.05, 0.95);
        let y = random_mask(&mut r, &shape, 0.4);
        let gamma = [0.0, 0.5, 1.0, 2.0, 3.0][r.gen_range(0..5)];
        let w = r.gen_range(0.5..3.0);
        check_gradients(&[("p", p)], opts(i), |t, v| t.focal_bce(v[0], &y, gamma, w))
    })
}

pub fn all_op_sweeps() -> Vec<Sweep> {
    vec![
        sweep_conv2d(),
        sweep_conv_transpose2d(),
        sweep_maxpool2d(),
        sweep_upsample(),
        sweep_sigmoid(),
        sweep_relu(),
        sweep_attention_gate(),
        sweep_edge_head(),
        sweep_bce(),
        sweep_focal(),
    ]
}

pub fn toy_network(filters: usize, size: usize) -> NetworkConfig {
    NetworkConfig {
        input_channels: 1,
        input_size: size,
        encoder_filters: vec![filters; 4],
        decoder_filters: vec![filters; 4],
        ..NetworkConfig::default()
    }
}

/// Sampled-parameter check of the full training loss on the [4,4,4,4],
/// 32×32 toy network. The check point uses a random image and random biases:
/// zero biases on a zero background put whole regions exactly on relu kinks.
pub fn network_gradcheck(seed: u64, cfg: NetworkConfig) -> GradCheckReport {
    let mut net = build_network(NetworkConfig { seed, ..cfg }).unwrap();
    let mut r = rng(seed ^ 0xb1a5);
    for (name, t) in net.params.iter_mut() {
        if name.ends_with(".bias") {
            *t = random_tensor(&mut r, t.shape(), -0.1, 0.1);
        }
    }
    let size = net.config.input_size;
    let samples = agseg_core::data::synth_samples(2, size, seed).unwrap();
    let x = random_tensor(&mut r, &[2, 1, size, size], 0.0, 1.0);
    let y = Tensor::stack(&samples.iter().map(|s| s.mask.clone()).collect::<Vec<_>>()).unwrap();
    let opts = GradCheckOptions {
        step: STEP,
        tolerance: NETWORK_TOLERANCE,
        max_coords: Some(8),
        kink_threshold: Some(0.05),
        seed,
    };
    net.gradcheck(&x, &y, &LossConfig::default(), opts).unwrap()
}

/// Outcome of one oracle comparison: `Ok` carries a short summary.
pub type Check = std::result::Result<String, String>;

fn tape_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize, transpose: bool) -> Tensor {
    let mut tape = agseg_core::Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let out = if transpose {
        tape.conv_transpose2d(xv, wv, bv, stride, pad).unwrap()
    } else {
        tape.conv2d(xv, wv, bv, stride, pad).unwrap()
    };
    tape.take_value(out)
}

/// conv2d against direct summation on random shapes, strides and paddings.
pub fn check_conv_oracle(combos: usize, tolerance: f32) -> Check {
    let mut r = rng(2024);
    let mut worst = 0.0f32;
    for i in 0..combos {
        let (n, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let k = r.gen_range(1..=4);
        let stride = r.gen_range(1..=3);
        let pad = r.gen_range(0..k);
        let (h, w) = (r.gen_range(k..=9), r.gen_range(k..=9));
        let x = random_tensor(&mut r, &[n, cin, h, w], -1.0, 1.0);
        let wt = random_tensor(&mut r, &[cout, cin, k, k], -1.0, 1.0);
        let b = random_tensor(&mut r, &[cout], -1.0, 1.0);
        let got = tape_conv(&x, &wt, Some(&b), stride, pad, false);
        let want = conv_oracle(&x, &wt, Some(&b), stride, pad);
        if got.shape() != want.shape() {
            return Err(format!("combo {i}: shape {:?} vs {:?}", got.shape(), want.shape()));
        }
        let d = got.max_abs_diff(&want);
        worst = worst.max(d);
        if !(d <= tolerance) {
            return Err(format!("combo {i} (k{k} s{stride} p{pad}): max abs diff {d}"));
        }
    }
    Ok(format!("{combos} combos, max abs diff {worst:.2e}"))
}

/// conv_transpose2d against the scatter oracle and the adjoint identity
/// `⟨conv(x), y⟩ = ⟨x, convT(y)⟩`.
pub fn check_conv_transpose_oracle(combos: usize, tolerance: f32) -> Check {
    let mut r = rng(77);
    let mut worst = 0.0f32;
    for i in 0..combos {
        let (n, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let k = r.gen_range(1..=4);
        let stride = r.gen_range(1..=3);
        let pad = r.gen_range(0..k);
        let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
        if (h - 1) * stride + k <= 2 * pad || (w - 1) * stride + k <= 2 * pad {
            continue;
        }
        let y = random_tensor(&mut r, &[n, cin, h, w], -1.0, 1.0);
        let wt = random_tensor(&mut r, &[cin, cout, k, k], -1.0, 1.0);
        let got = tape_conv(&y, &wt, None, stride, pad, true);
        let want = conv_transpose_oracle(&y, &wt, stride, pad);
        let d = got.max_abs_diff(&want);
        worst = worst.max(d);
        if got.shape() != want.shape() || !(d <= tolerance) {
            return Err(format!("combo {i}: shapes {:?}/{:?}, diff {d}", got.shape(), want.shape()));
        }
        // The forward conv of convT's output shape maps back onto y's shape
        // whenever the extents divide evenly.
        let x = random_tensor(&mut r, got.shape(), -1.0, 1.0);
        let fwd = tape_conv(&x, &wt, None, stride, pad, false);
        if fwd.shape() == y.shape() {
            let lhs = fwd.dot(&y).unwrap();
            let rhs = x.dot(&got).unwrap();
            if (lhs - rhs).abs() > 1e-4 * lhs.abs().max(1.0) {
                return Err(format!("combo {i}: adjoint {lhs} vs {rhs}"));
            }
        }
    }
    Ok(format!("{combos} combos, max abs diff {worst:.2e}"))
}

/// Edge targets against the neighbourhood scan on every rectangle with sides
/// 2 to 6 at every position of a 10×10 canvas, plus random masks.
pub fn check_edge_oracle(random_masks: usize) -> Check {
    let compare = |mask: Tensor, h: usize, w: usize, what: &str| -> std::result::Result<(), String> {
        let got = agseg_core::edge::edge_target_from_mask(&mask).map_err(|e| e.to_string())?;
        if got.boundary.data() != edge_oracle(mask.data(), h, w).as_slice() {
            return Err(format!("{what}: boundary differs from the scan"));
        }
        Ok(())
    };
    let size = 10;
    let mut rects = 0;
    for rh in 2..=6 {
        for rw in 2..=6 {
            for y0 in 0..=size - rh {
                for x0 in 0..=size - rw {
                    let mut m = vec![0.0; size * size];
                    for y in y0..y0 + rh {
                        for x in x0..x0 + rw {
                            m[y * size + x] = 1.0;
                        }
                    }
                    let t = Tensor::new(vec![1, 1, size, size], m).unwrap();
                    compare(t, size, size, &format!("rect {rh}x{rw} at ({y0},{x0})"))?;
                    rects += 1;
                }
            }
        }
    }
    let mut r = rng(31);
    for i in 0..random_masks {
        let (h, w) = (r.gen_range(3..=16), r.gen_range(3..=16));
        let p = r.gen_range(0.1..0.9);
        compare(random_mask(&mut r, &[1, 1, h, w], p), h, w, &format!("random mask {i}"))?;
    }
    Ok(format!("{rects} rectangles, {random_masks} random masks"))
}

/// Confusion counts and ratios against the counting oracle, plus the
/// Jaccard-Dice identity, on random 16×16 pairs.
pub fn check_metrics_oracle(pairs: usize) -> Check {
    use agseg_core::eval::{confusion, MetricsReport, DEFAULT_THRESHOLD};
    let mut r = rng(5150);
    for i in 0..pairs {
        let pred = random_tensor(&mut r, &[1, 1, 16, 16], 0.0, 1.0);
        let p = r.gen_range(0.0..1.0);
        let mask = random_mask(&mut r, &[1, 1, 16, 16], p);
        let cm = confusion(&pred, &mask, DEFAULT_THRESHOLD).map_err(|e| e.to_string())?;
        let (tp, fp, fn_, tn) = count_oracle(pred.data(), mask.data(), DEFAULT_THRESHOLD);
        if (cm.tp, cm.fp, cm.fn_, cm.tn) != (tp, fp, fn_, tn) {
            return Err(format!("pair {i}: counts {cm:?} vs {:?}", (tp, fp, fn_, tn)));
        }
        let m = MetricsReport::from_counts(&cm, 0.0);
        let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
        let ratio = |num: f64, den: f64| if den == 0.0 { None } else { Some(num / den) };
        let expected = [
            ("iou", ratio(tp, tp + fp + fn_), m.iou),
            ("accuracy", ratio(tp + tn, tp + fp + fn_ + tn), m.accuracy),
            ("precision", ratio(tp, tp + fp), m.precision),
            ("recall", ratio(tp, tp + fn_), m.recall),
            ("f1", ratio(2.0 * tp, 2.0 * tp + fp + fn_), m.f1),
        ];
        for (name, want, got) in expected {
            if let Some(want) = want {
                if (want - got).abs() > 1e-9 {
                    return Err(format!("pair {i}: {name} {got} vs {want}"));
                }
            }
        }
        if (m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() > 1e-9 || m.iou > m.f1 + 1e-12 {
            return Err(format!("pair {i}: iou {} and f1 {} break the Jaccard-Dice relation", m.iou, m.f1));
        }
    }
    Ok(format!("{pairs} pairs"))
}
