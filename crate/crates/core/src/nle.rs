//! Dual-attention non-linear estimator.
//!
//! The input vector `[Re; Im]` is laid out as an `H x W x 2` map, lifted to
//! `C` feature channels by an input convolution, refined by three
//! dual-attention residual blocks and projected back to two channels.
//!
//! Each block computes `G' = conv2(relu(conv1(F)))`, recalibrates `G'` with
//! channel attention (shared MLP over average- and max-pooled descriptors)
//! and then spatial attention (a `k_s x k_s` conv over channel mean and
//! max), and adds the result back onto `F`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::{Tape, Tensor, Var};

pub const LIPSCHITZ_TARGET: f64 = 0.99;
pub const PROBE_PAIRS: usize = 256;
pub const PROBE_SCALE: f64 = 1e-2;
/// Power-iteration steps applied to each probe direction before estimating.
pub const PROBE_POWER_STEPS: usize = 3;
/// Initial pre-sigmoid logit of both attention masks.
pub const MASK_LOGIT_INIT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    Dual,
    ChannelOnly,
    SpatialOnly,
    /// Plain convolutional residual blocks.
    NoAttention,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::Dual,
        AttentionMode::ChannelOnly,
        AttentionMode::SpatialOnly,
        AttentionMode::NoAttention,
    ];

    pub fn uses_channel(self) -> bool {
        matches!(self, AttentionMode::Dual | AttentionMode::ChannelOnly)
    }

    pub fn uses_spatial(self) -> bool {
        matches!(self, AttentionMode::Dual | AttentionMode::SpatialOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Dual => "dual",
            AttentionMode::ChannelOnly => "channel",
            AttentionMode::SpatialOnly => "spatial",
            AttentionMode::NoAttention => "none",
        }
    }

    pub fn code(self) -> u32 {
        match self {
            AttentionMode::Dual => 0,
            AttentionMode::ChannelOnly => 1,
            AttentionMode::SpatialOnly => 2,
            AttentionMode::NoAttention => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("nle.attention", format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NleConfig {
    pub feature_channels: usize,
    pub num_darbs: usize,
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
    pub conv_kernel: usize,
    pub map_height: usize,
    pub map_width: usize,
    pub attention: AttentionMode,
}

impl Default for NleConfig {
    fn default() -> Self {
        NleConfig {
            feature_channels: 16,
            num_darbs: 3,
            reduction_ratio: 8,
            spatial_kernel: 7,
            conv_kernel: 3,
            map_height: 8,
            map_width: 8,
            attention: AttentionMode::Dual,
        }
    }
}

/// Most-square `H x W = m` factorisation with `H <= W`.
pub fn map_shape_for(m: usize) -> (usize, usize) {
    let mut h = (m as f64).sqrt().floor() as usize;
    while h > 1 && !m.is_multiple_of(h) {
        h -= 1;
    }
    let h = h.max(1);
    (h, m / h)
}

impl NleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_darbs != 3 {
            return Err(Error::config("nle.num_darbs", "the estimator uses exactly three blocks"));
        }
        if self.feature_channels == 0 || self.reduction_ratio == 0 || self.feature_channels < self.reduction_ratio {
            return Err(Error::config("nle.reduction_ratio", "need 1 <= reduction_ratio <= C"));
        }
        if self.spatial_kernel.is_multiple_of(2) {
            return Err(Error::config("nle.spatial_kernel", "kernel size must be odd"));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::config("nle.conv_kernel", "kernel size must be odd"));
        }
        if self.map_height == 0 || self.map_width == 0 {
            return Err(Error::config("nle.H", "map dimensions must be positive"));
        }
        Ok(())
    }

    pub fn hidden_units(&self) -> usize {
        self.feature_channels / self.reduction_ratio
    }

    /// Expected input length `2 H W`.
    pub fn vector_len(&self) -> usize {
        2 * self.map_height * self.map_width
    }

    /// Conv and dense layers on the longest signal path.
    pub fn scaled_depth(&self) -> usize {
        2 + 2 * self.num_darbs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Shared two-layer MLP `C -> C / r -> C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttentionParams {
    pub fc1: DenseParams,
    pub fc2: DenseParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DarbParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub channel: Option<ChannelAttentionParams>,
    pub spatial: Option<ConvParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub input_conv: ConvParams,
    pub blocks: Vec<DarbParams>,
    pub output_conv: ConvParams,
}

impl ConvParams {
    pub fn zeros(k: usize, ci: usize, co: usize) -> Self {
        ConvParams {
            kernel: Tensor::zeros(vec![k, k, ci, co]),
            bias: Tensor::zeros(vec![co]),
        }
    }
}

impl DenseParams {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseParams {
            weights: Tensor::zeros(vec![outputs, inputs]),
            bias: Tensor::zeros(vec![outputs]),
        }
    }
}

fn is_weight(name: &str) -> bool {
    name.ends_with(".kernel") || name.ends_with(".weights")
}

impl ModelParameters {
    pub fn zeros(cfg: &NleConfig) -> Self {
        let (c, k) = (cfg.feature_channels, cfg.conv_kernel);
        let blocks = (0..cfg.num_darbs)
            .map(|_| DarbParams {
                conv1: ConvParams::zeros(k, c, c),
                conv2: ConvParams::zeros(k, c, c),
                channel: cfg.attention.uses_channel().then(|| ChannelAttentionParams {
                    fc1: DenseParams::zeros(c, cfg.hidden_units()),
                    fc2: DenseParams::zeros(cfg.hidden_units(), c),
                }),
                spatial: cfg
                    .attention
                    .uses_spatial()
                    .then(|| ConvParams::zeros(cfg.spatial_kernel, 2, 1)),
            })
            .collect();
        ModelParameters {
            input_conv: ConvParams::zeros(k, 2, c),
            blocks,
            output_conv: ConvParams::zeros(k, c, 2),
        }
    }

    /// Fan-balanced uniform init for weights. Biases are zero except the
    /// attention outputs, which start at [`MASK_LOGIT_INIT`] so both masks
    /// open near `sigmoid(2)`.
    pub fn init<R: Rng + ?Sized>(cfg: &NleConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        for b in &mut p.blocks {
            if let Some(ca) = &mut b.channel {
                // The shared MLP runs on two descriptors, so its bias counts twice.
                ca.fc2.bias.data_mut().fill(MASK_LOGIT_INIT / 2.0);
            }
            if let Some(sa) = &mut b.spatial {
                sa.bias.data_mut().fill(MASK_LOGIT_INIT);
            }
        }
        p.visit_mut(&mut |name, t| {
            if !is_weight(name) {
                return;
            }
            let s = t.shape().to_vec();
            let (fan_in, fan_out) = match *s.as_slice() {
                [k1, k2, ci, co] => (k1 * k2 * ci, k1 * k2 * co),
                [o, i] => (i, o),
                _ => unreachable!("weights are 2-D or 4-D"),
            };
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        });
        p
    }

    /// Visits every tensor in a fixed order with a dotted name.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        let conv = |f: &mut dyn FnMut(&str, &Tensor), pre: &str, c: &ConvParams| {
            f(&format!("{pre}.kernel"), &c.kernel);
            f(&format!("{pre}.bias"), &c.bias);
        };
        let dense = |f: &mut dyn FnMut(&str, &Tensor), pre: &str, d: &DenseParams| {
            f(&format!("{pre}.weights"), &d.weights);
            f(&format!("{pre}.bias"), &d.bias);
        };
        conv(f, "input_conv", &self.input_conv);
        for (i, b) in self.blocks.iter().enumerate() {
            conv(f, &format!("block{i}.conv1"), &b.conv1);
            conv(f, &format!("block{i}.conv2"), &b.conv2);
            if let Some(ca) = &b.channel {
                dense(f, &format!("block{i}.ca.fc1"), &ca.fc1);
                dense(f, &format!("block{i}.ca.fc2"), &ca.fc2);
            }
            if let Some(sa) = &b.spatial {
                conv(f, &format!("block{i}.sa"), sa);
            }
        }
        conv(f, "output_conv", &self.output_conv);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        fn conv(f: &mut dyn FnMut(&str, &mut Tensor), pre: &str, c: &mut ConvParams) {
            f(&format!("{pre}.kernel"), &mut c.kernel);
            f(&format!("{pre}.bias"), &mut c.bias);
        }
        fn dense(f: &mut dyn FnMut(&str, &mut Tensor), pre: &str, d: &mut DenseParams) {
            f(&format!("{pre}.weights"), &mut d.weights);
            f(&format!("{pre}.bias"), &mut d.bias);
        }
        conv(f, "input_conv", &mut self.input_conv);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            conv(f, &format!("block{i}.conv1"), &mut b.conv1);
            conv(f, &format!("block{i}.conv2"), &mut b.conv2);
            if let Some(ca) = &mut b.channel {
                dense(f, &format!("block{i}.ca.fc1"), &mut ca.fc1);
                dense(f, &format!("block{i}.ca.fc2"), &mut ca.fc2);
            }
            if let Some(sa) = &mut b.spatial {
                conv(f, &format!("block{i}.sa"), sa);
            }
        }
        conv(f, "output_conv", &mut self.output_conv);
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.data().iter().all(|v| v.is_finite()));
        ok
    }

    /// Multiplies every conv kernel and dense weight, leaving biases alone.
    pub fn scale_weights(&mut self, factor: f64) {
        self.visit_mut(&mut |name, t| {
            if is_weight(name) {
                t.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        });
    }

    /// Rebuild from named tensors; names and shapes must match `cfg` exactly.
    pub fn from_named(cfg: &NleConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut p = Self::zeros(cfg);
        let mut expected = 0;
        p.visit(&mut |_, _| expected += 1);
        if tensors.len() != expected {
            return Err(Error::format(format!(
                "checkpoint has {} tensors, configuration needs {expected}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut err = None;
        p.visit_mut(&mut |name, slot| {
            if err.is_some() {
                return;
            }
            let (n, t) = it.next().expect("length checked");
            if n != name || t.shape() != slot.shape() {
                err = Some(Error::format(format!(
                    "tensor `{n}` {:?} does not match expected `{name}` {:?}",
                    t.shape(),
                    slot.shape()
                )));
                return;
            }
            *slot = t;
        });
        match err {
            Some(e) => Err(e),
            None => Ok(p),
        }
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let mut order = Vec::new();
        let mut leaf = |t: &Tensor, order: &mut Vec<Var>| {
            let v = tape.leaf(t.clone(), requires_grad);
            order.push(v);
            v
        };
        let mut conv = |c: &ConvParams, order: &mut Vec<Var>| ConvVars {
            kernel: leaf(&c.kernel, order),
            bias: leaf(&c.bias, order),
        };
        let input = conv(&self.input_conv, &mut order);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let conv1 = conv(&b.conv1, &mut order);
            let conv2 = conv(&b.conv2, &mut order);
            let channel = b.channel.as_ref().map(|ca| {
                let fc1 = conv(
                    &ConvParams { kernel: ca.fc1.weights.clone(), bias: ca.fc1.bias.clone() },
                    &mut order,
                );
                let fc2 = conv(
                    &ConvParams { kernel: ca.fc2.weights.clone(), bias: ca.fc2.bias.clone() },
                    &mut order,
                );
                (fc1, fc2)
            });
            let spatial = b.spatial.as_ref().map(|sa| conv(sa, &mut order));
            blocks.push(BlockVars { conv1, conv2, channel, spatial });
        }
        let output = conv(&self.output_conv, &mut order);
        BoundParams { input, blocks, output, order }
    }

    /// Gradient tensors in [`ModelParameters::visit`] order.
    pub fn gradients_from(&self, bound: &BoundParams, grads: &crate::tensor::Gradients) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(bound.order.len());
        let mut i = 0;
        self.visit(&mut |_, t| {
            out.push(grads.get(bound.order[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]));
            i += 1;
        });
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub conv1: ConvVars,
    pub conv2: ConvVars,
    /// `(fc1, fc2)`; `kernel` holds the dense weights.
    pub channel: Option<(ConvVars, ConvVars)>,
    pub spatial: Option<ConvVars>,
}

/// Tape handles for a bound [`ModelParameters`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub input: ConvVars,
    pub blocks: Vec<BlockVars>,
    pub output: ConvVars,
    pub order: Vec<Var>,
}

fn map_index(cfg: &NleConfig) -> Vec<usize> {
    let hw = cfg.map_height * cfg.map_width;
    (0..hw).flat_map(|p| [p, hw + p]).collect()
}

fn flat_index(cfg: &NleConfig) -> Vec<usize> {
    let hw = cfg.map_height * cfg.map_width;
    (0..2 * hw).map(|i| if i < hw { 2 * i } else { 2 * (i - hw) + 1 }).collect()
}

/// `[Re; Im]` vector to an `H x W x 2` map, angular index row-major.
pub fn reshape_to_map(v: &[f64], cfg: &NleConfig) -> Result<Tensor> {
    if v.len() != cfg.vector_len() {
        return Err(Error::input(format!("vector length {} != 2HW = {}", v.len(), cfg.vector_len())));
    }
    let data = map_index(cfg).into_iter().map(|i| v[i]).collect();
    Tensor::new(vec![cfg.map_height, cfg.map_width, 2], data)
}

/// Inverse of [`reshape_to_map`].
pub fn flatten_map(t: &Tensor, cfg: &NleConfig) -> Result<Vec<f64>> {
    if t.shape() != [cfg.map_height, cfg.map_width, 2] {
        return Err(Error::input(format!("expected {}x{}x2 map", cfg.map_height, cfg.map_width)));
    }
    Ok(flat_index(cfg).into_iter().map(|i| t.data()[i]).collect())
}

/// Returns `(F_c, F')`.
pub fn channel_attention_tape(tape: &mut Tape, f: Var, fc1: ConvVars, fc2: ConvVars) -> Result<(Var, Var)> {
    let avg = tape.global_avg_pool(f)?;
    let max = tape.global_max_pool(f)?;
    let mlp = |tape: &mut Tape, d: Var| -> Result<Var> {
        let h = tape.dense(d, fc1.kernel, fc1.bias)?;
        let h = tape.relu(h);
        tape.dense(h, fc2.kernel, fc2.bias)
    };
    let a = mlp(tape, avg)?;
    let m = mlp(tape, max)?;
    let s = tape.add(a, m)?;
    let mask = tape.sigmoid(s);
    let out = tape.mul(f, mask)?;
    Ok((mask, out))
}

/// Returns `(F_s, F_A)`.
pub fn spatial_attention_tape(tape: &mut Tape, f: Var, conv: ConvVars) -> Result<(Var, Var)> {
    let mean = tape.channel_mean(f)?;
    let max = tape.channel_max(f)?;
    let desc = tape.concat_channels(mean, max)?;
    let logits = tape.conv2d(desc, conv.kernel, conv.bias)?;
    let mask = tape.sigmoid(logits);
    let out = tape.mul(f, mask)?;
    Ok((mask, out))
}

pub fn darb_tape(tape: &mut Tape, f: Var, block: &BlockVars) -> Result<Var> {
    let g = tape.conv2d(f, block.conv1.kernel, block.conv1.bias)?;
    let g = tape.relu(g);
    let mut g = tape.conv2d(g, block.conv2.kernel, block.conv2.bias)?;
    if let Some((fc1, fc2)) = block.channel {
        g = channel_attention_tape(tape, g, fc1, fc2)?.1;
    }
    if let Some(sa) = block.spatial {
        g = spatial_attention_tape(tape, g, sa)?.1;
    }
    tape.add(f, g)
}

/// Full estimator on a `[2 H W]` input node; returns a `[2 H W]` node.
pub fn nle_tape(tape: &mut Tape, bound: &BoundParams, input: Var, cfg: &NleConfig) -> Result<Var> {
    if tape.value(input).len() != cfg.vector_len() {
        return Err(Error::input(format!(
            "vector length {} != 2HW = {}",
            tape.value(input).len(),
            cfg.vector_len()
        )));
    }
    let map = tape.gather(input, map_index(cfg), vec![cfg.map_height, cfg.map_width, 2])?;
    let mut f = tape.conv2d(map, bound.input.kernel, bound.input.bias)?;
    for block in &bound.blocks {
        f = darb_tape(tape, f, block)?;
    }
    let out = tape.conv2d(f, bound.output.kernel, bound.output.bias)?;
    tape.gather(out, flat_index(cfg), vec![cfg.vector_len()])
}

/// Gradient-free forward pass.
pub fn nle_forward(params: &ModelParameters, v: &[f64], cfg: &NleConfig) -> Result<Vec<f64>> {
    if v.len() != cfg.vector_len() {
        return Err(Error::input(format!("vector length {} != 2HW = {}", v.len(), cfg.vector_len())));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(Tensor::from_vec(v.to_vec()));
    let y = nle_tape(&mut tape, &bound, x, cfg)?;
    Ok(tape.value(y).data().to_vec())
}

/// Channel attention on a concrete map.
pub fn channel_attention(f: &Tensor, params: &ChannelAttentionParams) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.constant(f.clone());
    let fc1 = ConvVars {
        kernel: tape.constant(params.fc1.weights.clone()),
        bias: tape.constant(params.fc1.bias.clone()),
    };
    let fc2 = ConvVars {
        kernel: tape.constant(params.fc2.weights.clone()),
        bias: tape.constant(params.fc2.bias.clone()),
    };
    let (m, o) = channel_attention_tape(&mut tape, x, fc1, fc2)?;
    Ok((tape.value(m).clone(), tape.value(o).clone()))
}

/// Spatial attention on a concrete map.
pub fn spatial_attention(f: &Tensor, params: &ConvParams) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.constant(f.clone());
    let conv = ConvVars {
        kernel: tape.constant(params.kernel.clone()),
        bias: tape.constant(params.bias.clone()),
    };
    let (m, o) = spatial_attention_tape(&mut tape, x, conv)?;
    Ok((tape.value(m).clone(), tape.value(o).clone()))
}

/// One residual block on a concrete map.
pub fn darb_forward(f: &Tensor, params: &DarbParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(f.clone());
    let mut c = |p: &ConvParams| ConvVars {
        kernel: tape.constant(p.kernel.clone()),
        bias: tape.constant(p.bias.clone()),
    };
    let block = BlockVars {
        conv1: c(&params.conv1),
        conv2: c(&params.conv2),
        channel: params.channel.as_ref().map(|ca| {
            (
                c(&ConvParams { kernel: ca.fc1.weights.clone(), bias: ca.fc1.bias.clone() }),
                c(&ConvParams { kernel: ca.fc2.weights.clone(), bias: ca.fc2.bias.clone() }),
            )
        }),
        spatial: params.spatial.as_ref().map(c),
    };
    let y = darb_tape(&mut tape, x, &block)?;
    Ok(tape.value(y).clone())
}

/// Max ratio `||f(a) - f(b)|| / ||a - b||` over the probe pairs. Coincident
/// pairs are skipped.
pub fn empirical_lipschitz<F>(f: F, probes: &[(Vec<f64>, Vec<f64>)], exec: Execution) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync + Send,
{
    let ratios = par::map(exec, probes, |(a, b)| -> Result<Option<f64>> {
        let den = dist(a, b);
        if den == 0.0 {
            return Ok(None);
        }
        Ok(Some(dist(&f(a)?, &f(b)?) / den))
    });
    let mut best: Option<f64> = None;
    for r in ratios {
        if let Some(r) = r? {
            best = Some(best.map_or(r, |b: f64| b.max(r)));
        }
    }
    best.ok_or_else(|| Error::input("all probe pairs are coincident"))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn estimate_lipschitz(
    params: &ModelParameters,
    cfg: &NleConfig,
    probes: &[(Vec<f64>, Vec<f64>)],
    exec: Execution,
) -> Result<f64> {
    empirical_lipschitz(|v| nle_forward(params, v, cfg), probes, exec)
}

/// Pairs `(c, c + scale * g)` with `g` standard normal, cycling through `centers`.
pub fn perturbation_probes<R: Rng + ?Sized>(
    centers: &[Vec<f64>],
    count: usize,
    scale: f64,
    rng: &mut R,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    (0..count)
        .map(|i| {
            let c = &centers[i % centers.len()];
            let d: Vec<f64> = c
                .iter()
                .map(|v| v + scale * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>();
            (c.clone(), d)
        })
        .collect()
}

/// Vector-Jacobian product `J(v)^T w` of the estimator.
pub fn nle_vjp(params: &ModelParameters, v: &[f64], w: &[f64], cfg: &NleConfig) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.leaf(Tensor::from_vec(v.to_vec()), true);
    let out = nle_tape(&mut tape, &bound, x, cfg)?;
    let wt = tape.constant(Tensor::from_vec(w.to_vec()));
    let prod = tape.mul(out, wt)?;
    let s = tape.sum(prod);
    let g = tape.backward(s)?;
    Ok(g.get(x).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; v.len()]))
}

/// Turns each pair `(c, d)` towards the locally most expanded direction with
/// `steps` power iterations `u <- J^T (f(c + u) - f(c))`, keeping `|d - c|`.
pub fn sharpen_probes(
    params: &ModelParameters,
    cfg: &NleConfig,
    probes: &[(Vec<f64>, Vec<f64>)],
    steps: usize,
    exec: Execution,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    par::map(exec, probes, |(c, d)| -> Result<(Vec<f64>, Vec<f64>)> {
        let radius = dist(c, d);
        let mut u: Vec<f64> = d.iter().zip(c).map(|(a, b)| a - b).collect();
        if radius == 0.0 {
            return Ok((c.clone(), d.clone()));
        }
        let fc = nle_forward(params, c, cfg)?;
        for _ in 0..steps {
            let moved: Vec<f64> = c.iter().zip(&u).map(|(a, b)| a + b).collect();
            let ju: Vec<f64> = nle_forward(params, &moved, cfg)?.iter().zip(&fc).map(|(a, b)| a - b).collect();
            let g = nle_vjp(params, c, &ju, cfg)?;
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                break;
            }
            u = g.iter().map(|v| v * radius / n).collect();
        }
        Ok((c.clone(), c.iter().zip(&u).map(|(a, b)| a + b).collect()))
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone)]
pub struct Normalization {
    pub params: ModelParameters,
    pub lipschitz_after: f64,
    pub applied: bool,
    /// Number of rescaling passes that were needed.
    pub rounds: usize,
}

/// Shrinks weights until the empirical Lipschitz estimate on `probes` is at
/// most `target`.
///
/// The first pass scales by `(target / L)^(1 / depth)`. Residual connections
/// make the response sub-multiplicative, so later passes use the exponent
/// observed on the previous pass instead.
pub fn normalize_parameters(
    params: &ModelParameters,
    cfg: &NleConfig,
    lipschitz: f64,
    target: f64,
    probes: &[(Vec<f64>, Vec<f64>)],
    exec: Execution,
) -> Result<Normalization> {
    if lipschitz <= target || lipschitz == 0.0 {
        return Ok(Normalization {
            params: params.clone(),
            lipschitz_after: lipschitz,
            applied: false,
            rounds: 0,
        });
    }
    let aim = target * (1.0 - 1e-3);
    let mut current = params.clone();
    let mut l = lipschitz;
    let mut exponent = cfg.scaled_depth() as f64;
    for round in 1..=60 {
        let factor = (aim / l).powf(1.0 / exponent);
        let mut next = current.clone();
        next.scale_weights(factor);
        let l_next = estimate_lipschitz(&next, cfg, probes, exec)?;
        if l_next <= target {
            return Ok(Normalization {
                params: next,
                lipschitz_after: l_next,
                applied: true,
                rounds: round,
            });
        }
        let observed = (l_next / l).ln() / factor.ln();
        exponent = if observed.is_finite() && observed > 0.05 {
            observed.min(cfg.scaled_depth() as f64)
        } else {
            1.0
        };
        current = next;
        l = l_next;
    }
    Err(Error::Numerical(format!(
        "could not bring Lipschitz estimate below {target} (last {l})"
    )))
}

/// Analytic floating-point operation count of one forward pass.
///
/// Multiply-accumulates count as two operations; element-wise maps, pools
/// and additions count one per element.
pub fn nle_flops(cfg: &NleConfig) -> u64 {
    let (h, w, c) = (cfg.map_height as u64, cfg.map_width as u64, cfg.feature_channels as u64);
    let hw = h * w;
    let k2 = (cfg.conv_kernel * cfg.conv_kernel) as u64;
    let ks2 = (cfg.spatial_kernel * cfg.spatial_kernel) as u64;
    let conv = |ci: u64, co: u64, kk: u64| 2 * hw * kk * ci * co + hw * co;
    let hid = cfg.hidden_units() as u64;
    let mut block = conv(c, c, k2) + hw * c + conv(c, c, k2) + hw * c;
    if cfg.attention.uses_channel() {
        block += 2 * hw * c + 2 * (2 * c * hid + hid + 2 * hid * c + c) + c + c + hw * c;
    }
    if cfg.attention.uses_spatial() {
        block += 2 * hw * c + conv(2, 1, ks2) + hw + hw * c;
    }
    conv(2, c, k2) + cfg.num_darbs as u64 * block + conv(c, 2, k2)
}
