use super::kernels::{self, ConvGeometry};
use super::{sigmoid, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op maps onto the left operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `[C]` vector against `[N,C,H,W]`.
    Channel,
    /// `[N,1,H,W]` map against `[N,C,H,W]`.
    Spatial,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Add {
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    AddScalar {
        a: Var,
    },
    Scale {
        a: Var,
        factor: f32,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat {
        a: Var,
        b: Var,
    },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    Bce {
        pred: Var,
        target: Vec<f32>,
    },
    Focal {
        pred: Var,
        target: Vec<f32>,
        gamma: f32,
        pos_weight: f32,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run reverse-mode autodiff tape. Nodes are appended in
/// evaluation order, so every op's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Probability clamp shared by the cross-entropy ops.
pub const PROB_EPS: f32 = 1e-7;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are accumulated for it on `backward` iff the
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).unwrap();
        let needs = self.needs(&[a]);
        self.push(value, op, needs)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::conv(self.shape(input), self.shape(weight), stride, padding)?;
        self.check_bias(bias, geom.out_channels, "conv2d")?;
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![geom.batch, geom.out_channels, geom.out_h, geom.out_w], out)?;
        let needs = self.needs(&[input, weight]) || bias.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, needs))
    }

    /// Transposed convolution with `weight: [Cin,Cout,kh,kw]`; the adjoint of
    /// `conv2d` for the same kernel, stride and padding.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::transpose(self.shape(input), self.shape(weight), stride, padding)?;
        self.check_bias(bias, geom.in_channels, "conv_transpose2d")?;
        let mut out = kernels::conv2d_input_grad(&geom, self.value(input).data(), self.value(weight).data());
        if let Some(b) = bias {
            let plane = geom.in_h * geom.in_w;
            let bias = self.value(b).data();
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = bias[i % geom.in_channels];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(vec![geom.batch, geom.in_channels, geom.in_h, geom.in_w], out)?;
        let needs = self.needs(&[input, weight]) || bias.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(value, Op::ConvTranspose2d { input, weight, bias, geom }, needs))
    }

    fn check_bias(&self, bias: Option<Var>, channels: usize, what: &str) -> Result<()> {
        match bias {
            Some(b) if self.shape(b) != [channels] => Err(Error::shape(format!(
                "{what}: bias shape {:?} does not match {channels} output channels",
                self.shape(b)
            ))),
            _ => Ok(()),
        }
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let src = self.value(input);
        let (shape, out, argmax) = kernels::maxpool2d_forward(src.shape(), src.data(), window, stride)?;
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::MaxPool { input, argmax }, needs))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let src = self.value(input);
        let (shape, out) = kernels::upsample_nearest_forward(src.shape(), src.data(), factor)?;
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(&[input]);
        Ok(self.push(value, Op::Upsample { input, factor }, needs))
    }

    fn broadcast_kind(&self, a: Var, b: Var, what: &str) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if let [n, c, h, w] = *sa {
            if sb == [c] {
                return Ok(Broadcast::Channel);
            }
            if sb == [n, 1, h, w] {
                return Ok(Broadcast::Spatial);
            }
        }
        Err(Error::shape(format!("{what}: cannot broadcast {sb:?} onto {sa:?}")))
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let bcast = self.broadcast_kind(a, b, if mul { "mul" } else { "add" })?;
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = ta.shape().to_vec();
        let f = |x: f32, y: f32| if mul { x * y } else { x + y };
        let data: Vec<f32> = match bcast {
            Broadcast::Same => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Channel => {
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                ta.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, tb.data()[(i / plane) % c]))
                    .collect()
            }
            Broadcast::Spatial => {
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                ta.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, tb.data()[(i / (c * plane)) * plane + i % plane]))
                    .collect()
            }
        };
        let value = Tensor::new(shape, data)?;
        let needs = self.needs(&[a, b]);
        let op = if mul { Op::Mul { a, b, bcast } } else { Op::Add { a, b, bcast } };
        Ok(self.push(value, op, needs))
    }

    /// `a + b`, where `b` matches `a` or is a `[C]` / `[N,1,H,W]` broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// `a ⊙ b`, where `b` matches `a` or is a `[C]` / `[N,1,H,W]` broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, Op::AddScalar { a }, |x| x + c)
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Var {
        self.unary(a, Op::Scale { a, factor }, |x| x * factor)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Concatenates two `[N,·,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        match (&sa[..], &sb[..]) {
            ([n, ca, h, w], [nb, cb, hb, wb]) if n == nb && h == hb && w == wb => {
                let plane = h * w;
                let (da, db) = (self.value(a).data(), self.value(b).data());
                let mut data = Vec::with_capacity(da.len() + db.len());
                for i in 0..*n {
                    data.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
                    data.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
                }
                let value = Tensor::new(vec![*n, ca + cb, *h, *w], data)?;
                let needs = self.needs(&[a, b]);
                Ok(self.push(value, Op::Concat { a, b }, needs))
            }
            _ => Err(Error::shape(format!("concat_channels: {sa:?} vs {sb:?}"))),
        }
    }

    fn reduce(&mut self, a: Var, op: Op, f: impl Fn(&[f32]) -> f64) -> Var {
        let v = f(self.value(a).data()) as f32;
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(v), op, needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(a, Op::Sum(a), |d| d.iter().map(|&x| x as f64).sum())
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(a, Op::Mean(a), |d| d.iter().map(|&x| x as f64).sum::<f64>() / d.len() as f64)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        self.reduce(a, Op::SumSquares(a), |d| d.iter().map(|&x| (x as f64) * (x as f64)).sum())
    }

    fn check_target(&self, pred: Var, target: &Tensor, what: &str) -> Result<()> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape(format!(
                "{what}: prediction {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        Ok(())
    }

    /// Mean binary cross-entropy of probabilities against `{0,1}` targets,
    /// with predictions clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.check_target(pred, target, "bce")?;
        let loss = bce_value(self.value(pred).data(), target.data());
        let needs = self.needs(&[pred]);
        let op = Op::Bce {
            pred,
            target: target.data().to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss as f32), op, needs))
    }

    /// Mean class-weighted focal cross-entropy:
    /// `-[w·y·(1-p)^γ·ln p + (1-y)·p^γ·ln(1-p)]`.
    pub fn focal_bce(&mut self, pred: Var, target: &Tensor, gamma: f32, pos_weight: f32) -> Result<Var> {
        self.check_target(pred, target, "focal_bce")?;
        let loss = focal_value(self.value(pred).data(), target.data(), gamma, pos_weight);
        let needs = self.needs(&[pred]);
        let op = Op::Focal {
            pred,
            target: target.data().to_vec(),
            gamma,
            pos_weight,
        };
        Ok(self.push(Tensor::scalar(loss as f32), op, needs))
    }

    /// Propagates gradients from the scalar `loss` back through the tape and
    /// accumulates them into every reachable leaf with `requires_grad`.
    /// Repeated calls add to the existing accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (var, delta) in self.local_grads(i, &g) {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                if wants(*input) {
                    out.push((*input, kernels::conv2d_input_grad(geom, g, val(*weight))));
                }
                if wants(*weight) {
                    out.push((*weight, kernels::conv2d_weight_grad(geom, val(*input), g)));
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    let sums = kernels::channel_sums(g, geom.batch, geom.out_channels, geom.out_h * geom.out_w);
                    out.push((b, sums));
                }
            }
            Op::ConvTranspose2d { input, weight, bias, geom } => {
                // `geom` describes the conv whose input gradient this op computes,
                // so the incoming gradient plays the role of that conv's input.
                if wants(*input) {
                    out.push((*input, kernels::conv2d_forward(geom, g, val(*weight), None)));
                }
                if wants(*weight) {
                    out.push((*weight, kernels::conv2d_weight_grad(geom, g, val(*input))));
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    let sums = kernels::channel_sums(g, geom.batch, geom.in_channels, geom.in_h * geom.in_w);
                    out.push((b, sums));
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut acc = vec![0.0f32; val(*input).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    acc[idx] += gv;
                }
                out.push((*input, acc));
            }
            Op::Upsample { input, factor } => {
                let shape = self.nodes[input.0].value.shape();
                out.push((*input, kernels::upsample_nearest_backward(shape, g, *factor)));
            }
            Op::Add { a, b, bcast } => {
                out.push((*a, g.to_vec()));
                if wants(*b) {
                    out.push((*b, self.reduce_broadcast(*a, *bcast, g.to_vec())));
                }
            }
            Op::Mul { a, b, bcast } => {
                let (da, db) = (val(*a), val(*b));
                let shape = self.nodes[a.0].value.shape();
                if wants(*a) {
                    let ga = match bcast {
                        Broadcast::Same => g.iter().zip(db).map(|(g, y)| g * y).collect(),
                        Broadcast::Channel => {
                            let (c, plane) = (shape[1], shape[2] * shape[3]);
                            g.iter().enumerate().map(|(i, gv)| gv * db[(i / plane) % c]).collect()
                        }
                        Broadcast::Spatial => {
                            let (c, plane) = (shape[1], shape[2] * shape[3]);
                            g.iter()
                                .enumerate()
                                .map(|(i, gv)| gv * db[(i / (c * plane)) * plane + i % plane])
                                .collect()
                        }
                    };
                    out.push((*a, ga));
                }
                if wants(*b) {
                    let prod = g.iter().zip(da).map(|(g, x)| g * x).collect();
                    out.push((*b, self.reduce_broadcast(*a, *bcast, prod)));
                }
            }
            Op::AddScalar { a } => out.push((*a, g.to_vec())),
            Op::Scale { a, factor } => out.push((*a, g.iter().map(|v| v * factor).collect())),
            Op::Relu(a) => {
                let ga = g.iter().zip(val(*a)).map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 }).collect();
                out.push((*a, ga));
            }
            Op::Sigmoid(a) => {
                let ga = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &s)| gv * s * (1.0 - s))
                    .collect();
                out.push((*a, ga));
            }
            Op::Concat { a, b } => {
                let sa = self.nodes[a.0].value.shape();
                let cb = self.nodes[b.0].value.shape()[1];
                let (n, ca, plane) = (sa[0], sa[1], sa[2] * sa[3]);
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for item in 0..n {
                    let base = item * (ca + cb) * plane;
                    ga.extend_from_slice(&g[base..base + ca * plane]);
                    gb.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; val(*a).len()])),
            Op::Mean(a) => {
                let n = val(*a).len();
                out.push((*a, vec![(g[0] as f64 / n as f64) as f32; n]));
            }
            Op::SumSquares(a) => out.push((*a, val(*a).iter().map(|&x| 2.0 * x * g[0]).collect())),
            Op::Bce { pred, target } => {
                let p = val(*pred);
                let scale = g[0] as f64 / p.len() as f64;
                let gp = p
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                            return 0.0;
                        }
                        let (p, y) = (p as f64, y as f64);
                        ((-y / p + (1.0 - y) / (1.0 - p)) * scale) as f32
                    })
                    .collect();
                out.push((*pred, gp));
            }
            Op::Focal { pred, target, gamma, pos_weight } => {
                let p = val(*pred);
                let scale = g[0] as f64 / p.len() as f64;
                let (gamma, w) = (*gamma as f64, *pos_weight as f64);
                let gp = p
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                            return 0.0;
                        }
                        (focal_grad(p as f64, y as f64, gamma, w) * scale) as f32
                    })
                    .collect();
                out.push((*pred, gp));
            }
        }
        out
    }

    /// Sums a full-shape gradient down to the shape of a broadcast operand.
    fn reduce_broadcast(&self, a: Var, bcast: Broadcast, full: Vec<f32>) -> Vec<f32> {
        let shape = self.nodes[a.0].value.shape();
        match bcast {
            Broadcast::Same => full,
            Broadcast::Channel => kernels::channel_sums(&full, shape[0], shape[1], shape[2] * shape[3]),
            Broadcast::Spatial => {
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut acc = vec![0.0f64; n * plane];
                for (i, &v) in full.iter().enumerate() {
                    acc[(i / (c * plane)) * plane + i % plane] += v as f64;
                }
                acc.into_iter().map(|v| v as f32).collect()
            }
        }
    }
}

fn clamp_prob(p: f32) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS) as f64
}

/// Mean binary cross-entropy in `f64`, outside any tape.
pub fn bce_value(pred: &[f32], target: &[f32]) -> f64 {
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let (p, y) = (clamp_prob(p), y as f64);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    sum / pred.len() as f64
}

/// Mean weighted focal cross-entropy in `f64`, outside any tape.
pub fn focal_value(pred: &[f32], target: &[f32], gamma: f32, pos_weight: f32) -> f64 {
    let (gamma, w) = (gamma as f64, pos_weight as f64);
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let (p, y) = (clamp_prob(p), y as f64);
            -(w * y * (1.0 - p).powf(gamma) * p.ln() + (1.0 - y) * p.powf(gamma) * (1.0 - p).ln())
        })
        .sum();
    sum / pred.len() as f64
}

fn focal_grad(p: f64, y: f64, gamma: f64, w: f64) -> f64 {
    let q = 1.0 - p;
    // d/dp of q^γ and p^γ; both vanish identically when γ = 0.
    let dq = if gamma == 0.0 { 0.0 } else { -gamma * q.powf(gamma - 1.0) };
    let dp = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
    let pos = w * y * (dq * p.ln() + q.powf(gamma) / p);
    let neg = (1.0 - y) * (dp * q.ln() - p.powf(gamma) / q);
    -(pos + neg)
}
