//! The full attention-gated, edge-supervised encoder–decoder.
//!
//! Encoder: four blocks of `conv → relu → conv → relu → maxpool 2`. The edge
//! head taps the output of block `ea_tap_block` (0 taps the raw image) and its
//! conditioned feature continues down the encoder. Decoder: four blocks of
//! `upsample ×2 → conv → relu`; the block that returns to the resolution of
//! encoder block `ag_after_block` concatenates that block's pre-pool feature,
//! scaled by the attention gate whose gating signal is the previous decoder
//! output. A final 1×1 conv and sigmoid give the probability map.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{ag_forward, default_f_int, AttentionGateParams, AttentionGateVars};
use crate::edge::{ea_forward, edge_loss, edge_target_from_mask, EdgeHeadParams, EdgeHeadVars};
use crate::error::{Error, Result};
use crate::gradcheck::{check_scalar_gradients, GradCheckOptions, GradCheckReport};
use crate::nn::{
    bce_value, checkpoint, derive_seed, focal_bce_loss, focal_value, glorot_init, is_bias, l2_penalty, BoundParams, LossConfig,
    ParamStore,
};
use crate::tensor::{Tape, Tensor, Var};

pub const DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    /// 2×2 transposed convolution with stride 2.
    Transpose,
    /// Nearest-neighbour ×2 followed by a `kernel_size` convolution.
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub encoder_filters: Vec<usize>,
    pub decoder_filters: Vec<usize>,
    pub base_filter_scale: f64,
    pub ag_after_block: usize,
    pub ea_tap_block: usize,
    pub kernel_size: usize,
    pub upsampling: Upsampling,
    /// Attention gate intermediate width; `None` uses half the skip channels.
    pub f_int: Option<usize>,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_channels: 3,
            input_size: 128,
            encoder_filters: vec![512, 256, 128, 64],
            decoder_filters: vec![64, 128, 256, 512],
            base_filter_scale: 1.0,
            ag_after_block: 2,
            ea_tap_block: 1,
            kernel_size: 3,
            upsampling: Upsampling::Transpose,
            f_int: None,
            seed: 0,
        }
    }
}

fn scaled(filters: &[usize], scale: f64) -> Vec<usize> {
    filters
        .iter()
        .map(|&f| ((f as f64 * scale).round() as usize).max(1))
        .collect()
}

impl NetworkConfig {
    /// Encoder schedule `[f, f/2, f/4, f/8]` and its mirror for the decoder.
    pub fn with_filter_size(mut self, widest: usize) -> Self {
        self.encoder_filters = (0..DEPTH).map(|i| (widest >> i).max(1)).collect();
        self.decoder_filters = self.encoder_filters.iter().rev().copied().collect();
        self
    }

    pub fn effective_encoder_filters(&self) -> Vec<usize> {
        scaled(&self.encoder_filters, self.base_filter_scale)
    }

    pub fn effective_decoder_filters(&self) -> Vec<usize> {
        scaled(&self.decoder_filters, self.base_filter_scale)
    }

    /// Every violated invariant, one message each.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.input_channels == 0 {
            errs.push("network.input_channels must be positive".to_string());
        }
        if self.input_size == 0 || self.input_size % (1 << DEPTH) != 0 {
            errs.push(format!(
                "network.input_size must be a positive multiple of {} (four pooling stages), got {}",
                1 << DEPTH,
                self.input_size
            ));
        }
        for (name, f) in [("encoder_filters", &self.encoder_filters), ("decoder_filters", &self.decoder_filters)] {
            if f.len() != DEPTH {
                errs.push(format!("network.{name} must list {DEPTH} filter counts, got {}", f.len()));
            }
            if f.contains(&0) {
                errs.push(format!("network.{name} must be positive"));
            }
        }
        if !(self.base_filter_scale > 0.0 && self.base_filter_scale.is_finite()) {
            errs.push(format!("network.base_filter_scale must be positive, got {}", self.base_filter_scale));
        }
        if !(1..=DEPTH).contains(&self.ag_after_block) {
            errs.push(format!("network.ag_after_block must be in 1..={DEPTH}, got {}", self.ag_after_block));
        }
        if self.ea_tap_block > DEPTH {
            errs.push(format!("network.ea_tap_block must be in 0..={DEPTH}, got {}", self.ea_tap_block));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            errs.push(format!("network.kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.f_int == Some(0) {
            errs.push("network.f_int must be positive".to_string());
        }
        errs
    }

    fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    /// Decoder block (1-based) that receives the gated skip connection.
    pub fn skip_decoder_block(&self) -> usize {
        DEPTH + 1 - self.ag_after_block
    }

    /// Spatial size of the edge head's output.
    pub fn edge_size(&self) -> usize {
        self.input_size >> self.ea_tap_block
    }
}

/// Built network: its configuration plus every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub config: NetworkConfig,
    pub params: ParamStore,
}

/// Values produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub seg_prob: Var,
    pub edge_prob: Var,
    pub alpha: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub seg_prob: Tensor,
    pub edge_prob: Tensor,
    pub alpha: Tensor,
}

/// How the skip connection is gated during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    /// Multiply the skip by an all-ones map instead of the learned α.
    ForceOnes,
    /// Pass the skip feature through untouched.
    Bypass,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub focal: Var,
    pub edge: Var,
    pub l2: Var,
}

fn conv_layer(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, seed: u64) -> Result<()> {
    let weight = format!("{name}.weight");
    let fan_in = cin * k * k;
    let fan_out = cout * k * k;
    store.insert(&weight, glorot_init(&[cout, cin, k, k], fan_in, fan_out, derive_seed(seed, &weight))?)?;
    store.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]))
}

/// Instantiates every parameter of the network, Glorot-initialized from
/// `config.seed`. Biases start at zero.
pub fn build_network(config: NetworkConfig) -> Result<NetworkState> {
    config.check()?;
    let enc = config.effective_encoder_filters();
    let dec = config.effective_decoder_filters();
    let k = config.kernel_size;
    let seed = config.seed;
    let mut store = ParamStore::new();

    let mut cin = config.input_channels;
    for (i, &f) in enc.iter().enumerate() {
        conv_layer(&mut store, &format!("enc.block{}.conv1", i + 1), f, cin, k, seed)?;
        conv_layer(&mut store, &format!("enc.block{}.conv2", i + 1), f, f, k, seed)?;
        cin = f;
    }

    let tap_channels = if config.ea_tap_block == 0 {
        config.input_channels
    } else {
        enc[config.ea_tap_block - 1]
    };
    EdgeHeadParams::glorot(tap_channels, derive_seed(seed, "ea"))?.register(&mut store, "ea")?;

    let skip_block = config.skip_decoder_block();
    let skip_channels = enc[config.ag_after_block - 1];
    // Gating signal: the decoder feature entering the skip block.
    let gate_channels = if skip_block == 1 { enc[DEPTH - 1] } else { dec[skip_block - 2] };
    let f_int = config.f_int.unwrap_or_else(|| default_f_int(skip_channels));
    AttentionGateParams::glorot(skip_channels, gate_channels, f_int, derive_seed(seed, "ag"))?
        .register(&mut store, "ag")?;

    let mut cin = enc[DEPTH - 1];
    for (j, &f) in dec.iter().enumerate() {
        let block = j + 1;
        let up = format!("dec.block{block}.up");
        match config.upsampling {
            Upsampling::Transpose => {
                let weight = format!("{up}.weight");
                let w = glorot_init(&[cin, f, 2, 2], cin * 4, f * 4, derive_seed(seed, &weight))?;
                store.insert(weight, w)?;
                store.insert(format!("{up}.bias"), Tensor::zeros(vec![f]))?;
            }
            Upsampling::Nearest => conv_layer(&mut store, &up, f, cin, k, seed)?,
        }
        let conv_in = if block == skip_block { f + skip_channels } else { f };
        conv_layer(&mut store, &format!("dec.block{block}.conv"), f, conv_in, k, seed)?;
        cin = f;
    }
    conv_layer(&mut store, "head", 1, dec[DEPTH - 1], 1, seed)?;

    Ok(NetworkState { config, params: store })
}

impl NetworkState {
    fn conv(&self, tape: &mut Tape, bound: &BoundParams, name: &str, x: Var, padding: usize) -> Result<Var> {
        let w = bound.get(&format!("{name}.weight"))?;
        let b = bound.get(&format!("{name}.bias"))?;
        tape.conv2d(x, w, Some(b), 1, padding)
    }

    /// Records the forward pass of `image` (`[N,C,H,W]`) on `tape`.
    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundParams, image: Var, mode: GateMode) -> Result<ForwardVars> {
        let cfg = &self.config;
        let (_, c, h, w) = tape.value(image).dims4()?;
        if c != cfg.input_channels || h != cfg.input_size || w != cfg.input_size {
            return Err(Error::shape(format!(
                "network expects [N,{},{},{}] input, got {:?}",
                cfg.input_channels,
                cfg.input_size,
                cfg.input_size,
                tape.shape(image)
            )));
        }
        let pad = cfg.kernel_size / 2;
        let ea_vars = EdgeHeadVars::from_bound(bound, "ea")?;

        let mut x = image;
        let mut edge_prob = None;
        if cfg.ea_tap_block == 0 {
            let out = ea_forward(tape, x, &ea_vars)?;
            edge_prob = Some(out.edge_prob);
            x = out.conditioned;
        }
        let mut skips = Vec::with_capacity(DEPTH);
        for i in 1..=DEPTH {
            let c1 = self.conv(tape, bound, &format!("enc.block{i}.conv1"), x, pad)?;
            let c1 = tape.relu(c1);
            let c2 = self.conv(tape, bound, &format!("enc.block{i}.conv2"), c1, pad)?;
            let c2 = tape.relu(c2);
            skips.push(c2);
            x = tape.maxpool2d(c2, 2, 2)?;
            if cfg.ea_tap_block == i {
                let out = ea_forward(tape, x, &ea_vars)?;
                edge_prob = Some(out.edge_prob);
                x = out.conditioned;
            }
        }
        let edge_prob = edge_prob.expect("edge tap validated in config");

        let skip_block = cfg.skip_decoder_block();
        let mut alpha = None;
        let mut d = x;
        for j in 1..=DEPTH {
            let up_name = format!("dec.block{j}.up");
            let mut up = match cfg.upsampling {
                Upsampling::Transpose => {
                    let w = bound.get(&format!("{up_name}.weight"))?;
                    let b = bound.get(&format!("{up_name}.bias"))?;
                    tape.conv_transpose2d(d, w, Some(b), 2, 0)?
                }
                Upsampling::Nearest => {
                    let u = tape.upsample_nearest(d, 2)?;
                    self.conv(tape, bound, &up_name, u, pad)?
                }
            };
            if j == skip_block {
                let skip = skips[cfg.ag_after_block - 1];
                let gated = match mode {
                    GateMode::Learned => {
                        let out = ag_forward(tape, skip, d, &AttentionGateVars::from_bound(bound, "ag")?)?;
                        alpha = Some(out.alpha);
                        out.gated
                    }
                    GateMode::ForceOnes | GateMode::Bypass => {
                        let s = tape.shape(skip);
                        let ones = tape.constant(Tensor::ones(vec![s[0], 1, s[2], s[3]]));
                        alpha = Some(ones);
                        if mode == GateMode::ForceOnes {
                            tape.mul(skip, ones)?
                        } else {
                            skip
                        }
                    }
                };
                up = tape.concat_channels(up, gated)?;
            }
            let conv = self.conv(tape, bound, &format!("dec.block{j}.conv"), up, pad)?;
            d = tape.relu(conv);
        }
        let logits = self.conv(tape, bound, "head", d, 0)?;
        let seg_prob = tape.sigmoid(logits);
        Ok(ForwardVars {
            seg_prob,
            edge_prob,
            alpha: alpha.expect("skip block is within the decoder"),
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<Prediction> {
        self.forward_with(image, GateMode::Learned)
    }

    pub fn forward_with(&self, image: &Tensor, mode: GateMode) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.constant(image.clone());
        let out = self.forward_on(&mut tape, &bound, x, mode)?;
        Ok(Prediction {
            seg_prob: tape.value(out.seg_prob).clone(),
            edge_prob: tape.value(out.edge_prob).clone(),
            alpha: tape.value(out.alpha).clone(),
        })
    }

    /// Records the training objective for one batch and returns the handles of
    /// its terms.
    pub fn loss_on(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        images: &Tensor,
        masks: &Tensor,
        cfg: &LossConfig,
    ) -> Result<(ForwardVars, LossTerms)> {
        let x = tape.constant(images.clone());
        let out = self.forward_on(tape, bound, x, GateMode::Learned)?;
        let terms = total_loss(tape, &out, masks, cfg, bound)?;
        Ok((out, terms))
    }

    /// Forward + backward on one batch; gradients land in `self.params`.
    /// Returns the total loss.
    pub fn accumulate_gradients(&mut self, images: &Tensor, masks: &Tensor, cfg: &LossConfig) -> Result<f32> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (_, terms) = self.loss_on(&mut tape, &bound, images, masks, cfg)?;
        tape.backward(terms.total)?;
        self.params.absorb_grads(&tape, &bound);
        Ok(tape.value(terms.total).item())
    }

    /// Total loss of one batch without recording gradients.
    pub fn evaluate_loss(&self, images: &Tensor, masks: &Tensor, cfg: &LossConfig) -> Result<(f32, Prediction)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (out, terms) = self.loss_on(&mut tape, &bound, images, masks, cfg)?;
        let pred = Prediction {
            seg_prob: tape.value(out.seg_prob).clone(),
            edge_prob: tape.value(out.edge_prob).clone(),
            alpha: tape.value(out.alpha).clone(),
        };
        Ok((tape.value(terms.total).item(), pred))
    }

    /// Finite-difference check of the total training loss with respect to
    /// every parameter tensor (coordinates sampled per `opts.max_coords`).
    pub fn gradcheck(&self, images: &Tensor, masks: &Tensor, cfg: &LossConfig, opts: GradCheckOptions) -> Result<GradCheckReport> {
        let inputs: Vec<(&str, Tensor)> = self.params.iter().map(|(n, t)| (n, t.clone())).collect();
        let bind = |vars: &[Var]| -> BoundParams { inputs.iter().zip(vars).map(|((n, _), &v)| (n.to_string(), v)).collect() };
        let numeric = |values: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
            let x = tape.constant(images.clone());
            let out = self.forward_on(&mut tape, &bind(&vars), x, GateMode::Learned)?;
            let weights = inputs.iter().zip(values).map(|((n, _), t)| (*n, t));
            loss_value(tape.value(out.seg_prob), tape.value(out.edge_prob), masks, cfg, weights)
        };
        check_scalar_gradients(
            &inputs,
            opts,
            |tape, vars| Ok(self.loss_on(tape, &bind(vars), images, masks, cfg)?.1.total),
            numeric,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::to_value(&self.config)?;
        checkpoint::save(path, &self.params, Some(config))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, header) = checkpoint::load(path)?;
        let config: NetworkConfig = match header.config {
            Some(v) => serde_json::from_value(v)?,
            None => return Err(Error::Checkpoint("checkpoint carries no network config".into())),
        };
        let reference = build_network(config.clone())?;
        let expected: Vec<_> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<_> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            return Err(Error::Checkpoint("parameters do not match the stored network config".into()));
        }
        Ok(NetworkState { config, params })
    }
}

/// `focal(seg, mask) + λ_e · bce(edge, boundary) + λ_r · Σ‖W‖²`, with the
/// boundary map max-pooled to the edge head's resolution.
pub fn total_loss(
    tape: &mut Tape,
    out: &ForwardVars,
    mask: &Tensor,
    cfg: &LossConfig,
    params: &BoundParams,
) -> Result<LossTerms> {
    let focal = focal_bce_loss(tape, out.seg_prob, mask, cfg)?;
    let target_h = mask.dims4()?.2;
    let edge_h = tape.value(out.edge_prob).dims4()?.2;
    if edge_h == 0 || target_h % edge_h != 0 {
        return Err(Error::shape(format!("edge map {edge_h} does not divide mask {target_h}")));
    }
    let target = edge_target_from_mask(mask)?.downsample(target_h / edge_h)?;
    let edge_raw = edge_loss(tape, out.edge_prob, &target)?;
    let edge = tape.scale(edge_raw, cfg.lambda_edge);
    let l2 = l2_penalty(tape, params, cfg.lambda_reg)?;
    let partial = tape.add(focal, edge)?;
    let total = tape.add(partial, l2)?;
    Ok(LossTerms { total, focal, edge, l2 })
}

/// [`total_loss`] evaluated in `f64` from the network outputs and the named
/// parameter tensors.
pub fn loss_value<'a>(
    seg_prob: &Tensor,
    edge_prob: &Tensor,
    mask: &Tensor,
    cfg: &LossConfig,
    params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<f64> {
    let focal = focal_value(seg_prob.data(), mask.data(), cfg.gamma, cfg.resolve_pos_weight(mask));
    let target_h = mask.dims4()?.2;
    let edge_h = edge_prob.dims4()?.2;
    if edge_h == 0 || target_h % edge_h != 0 {
        return Err(Error::shape(format!("edge map {edge_h} does not divide mask {target_h}")));
    }
    let target = edge_target_from_mask(mask)?.downsample(target_h / edge_h)?;
    let edge = bce_value(edge_prob.data(), target.boundary.data());
    let l2: f64 = params
        .into_iter()
        .filter(|(n, _)| !is_bias(n))
        .flat_map(|(_, t)| t.data().iter().map(|&v| v as f64 * v as f64))
        .sum();
    Ok(focal + cfg.lambda_edge as f64 * edge + cfg.lambda_reg as f64 * l2)
}
