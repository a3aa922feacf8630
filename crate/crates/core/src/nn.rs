//! Differentiable building blocks: conv blocks, local and non-local attention,
//! and an LSTM cell.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::kernels::Affine;
use crate::autograd::{ConvGeom, Graph, TokenAxis, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

const RUNNING_MEAN: &str = "running_mean";
const RUNNING_VAR: &str = "running_var";

/// Named parameter arrays. Names ending in `running_mean`/`running_var` are
/// normalization buffers, stored alongside but not trained.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

/// Rounds to the nearest `f32`, so archives stored as `f32` round-trip exactly.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_buffer(name: &str) -> bool {
        name.ends_with(RUNNING_MEAN) || name.ends_with(RUNNING_VAR)
    }

    /// Inserts a tensor, rounding every value to `f32` precision.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name:?}")));
        }
        self.map.insert(name, t.map(round_f32));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Trainable scalar count (buffers excluded).
    pub fn n_params(&self) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| !Self::is_buffer(k))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Trainable scalar count of parameters whose name starts with `prefix`.
    pub fn n_params_with_prefix(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix) && !Self::is_buffer(k))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Folds batch statistics into the running estimates with the standard
    /// exponential update.
    pub fn update_bn(&mut self, stats: &[crate::autograd::BnStats]) -> Result<()> {
        for s in stats {
            for (suffix, batch) in [(RUNNING_MEAN, &s.mean), (RUNNING_VAR, &s.var)] {
                let t = self.get_mut(&format!("{}.{suffix}", s.prefix))?;
                for (r, b) in t.data_mut().iter_mut().zip(batch.iter()) {
                    *r = round_f32((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b);
                }
            }
        }
        Ok(())
    }
}

/// Forward context: the tape, the parameter values and the train/eval mode.
pub struct Ctx<'a> {
    pub g: Graph,
    pub params: &'a ParamSet,
    pub train: bool,
}

impl<'a> Ctx<'a> {
    /// Context that records gradients (for training).
    pub fn train(params: &'a ParamSet) -> Self {
        Ctx {
            g: Graph::new(),
            params,
            train: true,
        }
    }

    /// Gradient-free context; `train` selects batch statistics in normalization.
    pub fn no_grad(params: &'a ParamSet, train: bool) -> Self {
        Ctx {
            g: Graph::inference(),
            params,
            train,
        }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let t = self.params.get(name)?;
        Ok(self.g.param(name, t))
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// How a block initializes its weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightInit {
    /// Uniform with variance `1 / fan_in`.
    Random,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeom,
    pub transposed: bool,
    pub norm: bool,
    pub activation: bool,
}

impl ConvBlock {
    /// Stride-1, same-padded 3x3 block with batch norm and ELU.
    pub fn same3(cin: usize, cout: usize) -> Self {
        ConvBlock {
            cin,
            cout,
            geom: ConvGeom {
                kh: 3,
                kw: 3,
                sh: 1,
                sw: 1,
                ph: 1,
                pw: 1,
            },
            transposed: false,
            norm: true,
            activation: true,
        }
    }

    /// Bare 1x1 convolution without normalization or activation.
    pub fn pointwise(cin: usize, cout: usize) -> Self {
        ConvBlock {
            cin,
            cout,
            geom: ConvGeom {
                kh: 1,
                kw: 1,
                sh: 1,
                sw: 1,
                ph: 0,
                pw: 0,
            },
            transposed: false,
            norm: false,
            activation: false,
        }
    }

    pub fn linear_conv(cin: usize, cout: usize, geom: ConvGeom) -> Self {
        ConvBlock {
            cin,
            cout,
            geom,
            transposed: false,
            norm: false,
            activation: false,
        }
    }

    fn weight_shape(&self) -> [usize; 4] {
        let (kh, kw) = (self.geom.kh, self.geom.kw);
        if self.transposed {
            [self.cin, self.cout, kh, kw]
        } else {
            [self.cout, self.cin, kh, kw]
        }
    }

    pub fn init(
        &self,
        prefix: &str,
        bias: bool,
        w_init: WeightInit,
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let shape = self.weight_shape();
        let fan_in = self.cin * self.geom.kh * self.geom.kw;
        let w = match w_init {
            WeightInit::Random => uniform(&shape, (3.0 / fan_in as f64).sqrt(), rng),
            WeightInit::Zero => Tensor::zeros(shape),
        };
        ps.insert(format!("{prefix}.w"), w)?;
        if bias {
            ps.insert(format!("{prefix}.b"), Tensor::zeros([self.cout]))?;
        }
        if self.norm {
            ps.insert(format!("{prefix}.bn.gamma"), Tensor::full([self.cout], 1.0))?;
            ps.insert(format!("{prefix}.bn.beta"), Tensor::zeros([self.cout]))?;
            ps.insert(format!("{prefix}.bn.{RUNNING_MEAN}"), Tensor::zeros([self.cout]))?;
            ps.insert(format!("{prefix}.bn.{RUNNING_VAR}"), Tensor::full([self.cout], 1.0))?;
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
        let [_, c, _, _] = ctx.g.value(x).dims4()?;
        if c != self.cin {
            return Err(Error::invalid(format!(
                "{prefix}: expected {} input channels, got {c}",
                self.cin
            )));
        }
        let w = ctx.p(&format!("{prefix}.w"))?;
        if ctx.g.is_inference() && !ctx.train && !self.transposed && self.norm {
            return self.forward_folded(ctx, prefix, x, w);
        }
        let bname = format!("{prefix}.b");
        let b = if ctx.params.contains(&bname) {
            Some(ctx.p(&bname)?)
        } else {
            None
        };
        let mut y = if self.transposed {
            ctx.g.conv_transpose2d(x, w, b, self.geom)?
        } else {
            ctx.g.conv2d(x, w, b, self.geom)?
        };
        if self.norm {
            let bn = format!("{prefix}.bn");
            let gamma = ctx.p(&format!("{bn}.gamma"))?;
            let beta = ctx.p(&format!("{bn}.beta"))?;
            y = if ctx.train {
                ctx.g.batch_norm(y, gamma, beta, None, BN_EPS, &bn)?
            } else {
                let rm = ctx.params.get(&format!("{bn}.{RUNNING_MEAN}"))?.data();
                let rv = ctx.params.get(&format!("{bn}.{RUNNING_VAR}"))?.data();
                ctx.g.batch_norm(y, gamma, beta, Some((rm, rv)), BN_EPS, &bn)?
            };
        }
        if self.activation {
            y = ctx.g.elu(y);
        }
        Ok(y)
    }

    /// Inference path with the running-statistics batch norm and the conv
    /// bias folded into one per-channel affine map.
    fn forward_folded(&self, ctx: &mut Ctx, prefix: &str, x: Var, w: Var) -> Result<Var> {
        let bn = format!("{prefix}.bn");
        let gamma = ctx.params.get(&format!("{bn}.gamma"))?.data();
        let beta = ctx.params.get(&format!("{bn}.beta"))?.data();
        let rm = ctx.params.get(&format!("{bn}.{RUNNING_MEAN}"))?.data();
        let rv = ctx.params.get(&format!("{bn}.{RUNNING_VAR}"))?.data();
        let bias = ctx.params.get(&format!("{prefix}.b")).ok().map(|t| t.data());
        let scale: Vec<f64> = gamma
            .iter()
            .zip(rv)
            .map(|(g, v)| g / (v + BN_EPS).sqrt())
            .collect();
        let shift: Vec<f64> = (0..self.cout)
            .map(|c| beta[c] + scale[c] * (bias.map_or(0.0, |b| b[c]) - rm[c]))
            .collect();
        let post = Affine {
            scale: &scale,
            shift: &shift,
            elu: self.activation,
        };
        ctx.g.conv2d_affine(x, w, self.geom, post)
    }

    /// Multiply-accumulate count for one application on a `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = if self.transposed {
            // every input pixel scatters a full kernel
            (h, w)
        } else {
            self.geom.conv_out(h, w).unwrap_or((0, 0))
        };
        (self.cin * self.cout * self.geom.kh * self.geom.kw * ho * wo) as u64
    }
}

/// Two-branch channel-attention block with a residual sigmoid gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalAttention {
    pub channels: usize,
}

impl LocalAttention {
    fn block(&self) -> ConvBlock {
        ConvBlock::same3(self.channels, self.channels)
    }

    fn gate(&self) -> ConvBlock {
        let mut g = ConvBlock::same3(self.channels, self.channels);
        g.norm = false;
        g.activation = false;
        g
    }

    pub fn init(&self, prefix: &str, zero_gate: bool, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        let c = self.channels;
        for i in 0..2 {
            self.block().init(&format!("{prefix}.f2.{i}"), true, WeightInit::Random, ps, rng)?;
        }
        for i in 0..4 {
            self.block().init(&format!("{prefix}.f4.{i}"), true, WeightInit::Random, ps, rng)?;
        }
        let bound = (3.0 / c as f64).sqrt();
        for fc in ["fc2", "fc4"] {
            ps.insert(format!("{prefix}.{fc}.w"), uniform(&[c, c], bound, rng))?;
            ps.insert(format!("{prefix}.{fc}.b"), Tensor::zeros([c]))?;
        }
        let init = if zero_gate {
            WeightInit::Zero
        } else {
            WeightInit::Random
        };
        self.gate().init(&format!("{prefix}.gate"), true, init, ps, rng)
    }

    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
        let [b, c, _, _] = ctx.g.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::invalid(format!(
                "{prefix}: expected {} channels, got {c}",
                self.channels
            )));
        }
        let mut c2 = x;
        for i in 0..2 {
            c2 = self.block().forward(ctx, &format!("{prefix}.f2.{i}"), c2)?;
        }
        let mut c4 = x;
        for i in 0..4 {
            c4 = self.block().forward(ctx, &format!("{prefix}.f4.{i}"), c4)?;
        }
        let sum = ctx.g.add(c2, c4)?;
        let pooled = ctx.g.mean_axis(sum, 3)?;
        let pooled = ctx.g.mean_axis(pooled, 2)?;
        let v = ctx.g.reshape(pooled, &[b, c])?;
        let mut weights = Vec::with_capacity(2);
        for fc in ["fc2", "fc4"] {
            let w = ctx.p(&format!("{prefix}.{fc}.w"))?;
            let bias = ctx.p(&format!("{prefix}.{fc}.b"))?;
            let h = ctx.g.linear(v, w, Some(bias))?;
            let h = ctx.g.sigmoid(h);
            weights.push(ctx.g.reshape(h, &[b, c, 1, 1])?);
        }
        let s2 = ctx.g.mul(c2, weights[0])?;
        let s4 = ctx.g.mul(c4, weights[1])?;
        let s = ctx.g.add(s2, s4)?;
        let logits = self.gate().forward(ctx, &format!("{prefix}.gate"), s)?;
        let gate = ctx.g.sigmoid(logits);
        let gated = ctx.g.mul(gate, x)?;
        ctx.g.add(gated, x)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let c = self.channels as u64;
        7 * self.block().macs(h, w) + 2 * c * c
    }
}

/// Dot-product self-attention over time frames (or frequency bins) with a
/// residual output projection. The projections carry no bias, so an all-zero
/// input maps to an all-zero output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NonLocalAttention {
    pub channels: usize,
    pub axis: TokenAxis,
}

/// Intermediate values of a non-local attention forward pass.
pub struct NonLocalOutput {
    pub out: Var,
    /// Row-stochastic attention matrix `[B, N, N]`.
    pub attention: Var,
}

impl NonLocalAttention {
    pub fn init(&self, prefix: &str, zero_out: bool, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        let pw = ConvBlock::pointwise(self.channels, self.channels);
        for name in ["theta", "phi", "g"] {
            pw.init(&format!("{prefix}.{name}"), false, WeightInit::Random, ps, rng)?;
        }
        let init = if zero_out {
            WeightInit::Zero
        } else {
            WeightInit::Random
        };
        pw.init(&format!("{prefix}.o"), false, init, ps, rng)
    }

    pub fn forward_full(&self, ctx: &mut Ctx, prefix: &str, x: Var) -> Result<NonLocalOutput> {
        let shape = ctx.g.value(x).dims4()?;
        if shape[1] != self.channels {
            return Err(Error::invalid(format!(
                "{prefix}: expected {} channels, got {}",
                self.channels, shape[1]
            )));
        }
        let pw = ConvBlock::pointwise(self.channels, self.channels);
        let q = pw.forward(ctx, &format!("{prefix}.theta"), x)?;
        let k = pw.forward(ctx, &format!("{prefix}.phi"), x)?;
        let v = pw.forward(ctx, &format!("{prefix}.g"), x)?;
        let q = ctx.g.to_tokens(q, self.axis)?;
        let k = ctx.g.to_tokens(k, self.axis)?;
        let v = ctx.g.to_tokens(v, self.axis)?;
        let scores = ctx.g.batch_matmul(q, k, false, true)?;
        let attention = ctx.g.softmax(scores);
        let w = ctx.g.batch_matmul(attention, v, false, false)?;
        let w = ctx.g.from_tokens(w, self.axis, shape)?;
        let o = pw.forward(ctx, &format!("{prefix}.o"), w)?;
        let out = ctx.g.add(o, x)?;
        Ok(NonLocalOutput { out, attention })
    }

    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, x: Var) -> Result<Var> {
        Ok(self.forward_full(ctx, prefix, x)?.out)
    }

    pub fn macs(&self, t: usize, f: usize) -> u64 {
        let c = self.channels as u64;
        let (n, d) = match self.axis {
            TokenAxis::Time => (t as u64, c * f as u64),
            TokenAxis::Frequency => (f as u64, c * t as u64),
        };
        4 * c * c * (t * f) as u64 + 2 * n * n * d
    }
}

/// LSTM cell with gate order input, forget, cell, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmCell {
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn init(&self, prefix: &str, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        ps.insert(format!("{prefix}.w_ih"), uniform(&[4 * self.hidden, self.input], bound, rng))?;
        ps.insert(format!("{prefix}.w_hh"), uniform(&[4 * self.hidden, self.hidden], bound, rng))?;
        ps.insert(format!("{prefix}.b"), Tensor::zeros([4 * self.hidden]))?;
        Ok(())
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> LstmState {
        LstmState {
            h: g.constant(Tensor::zeros([batch, self.hidden])),
            c: g.constant(Tensor::zeros([batch, self.hidden])),
        }
    }

    /// One step; returns the new state whose `h` is also the output.
    pub fn step(&self, ctx: &mut Ctx, prefix: &str, x: Var, st: LstmState) -> Result<LstmState> {
        let xs = ctx.g.value(x).shape();
        if xs.len() != 2 || xs[1] != self.input {
            return Err(Error::invalid(format!(
                "{prefix}: expected [B, {}] input, got {xs:?}",
                self.input
            )));
        }
        let w_ih = ctx.p(&format!("{prefix}.w_ih"))?;
        let w_hh = ctx.p(&format!("{prefix}.w_hh"))?;
        let b = ctx.p(&format!("{prefix}.b"))?;
        let a = ctx.g.linear(x, w_ih, Some(b))?;
        let r = ctx.g.linear(st.h, w_hh, None)?;
        let z = ctx.g.add(a, r)?;
        let hd = self.hidden;
        let i = ctx.g.narrow(z, 1, 0, hd)?;
        let f = ctx.g.narrow(z, 1, hd, hd)?;
        let gg = ctx.g.narrow(z, 1, 2 * hd, hd)?;
        let o = ctx.g.narrow(z, 1, 3 * hd, hd)?;
        let i = ctx.g.sigmoid(i);
        let f = ctx.g.sigmoid(f);
        let gg = ctx.g.tanh(gg);
        let o = ctx.g.sigmoid(o);
        let keep = ctx.g.mul(f, st.c)?;
        let write = ctx.g.mul(i, gg)?;
        let c = ctx.g.add(keep, write)?;
        let tc = ctx.g.tanh(c);
        let h = ctx.g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    pub fn macs(&self) -> u64 {
        (4 * self.hidden * (self.input + self.hidden)) as u64
    }
}
