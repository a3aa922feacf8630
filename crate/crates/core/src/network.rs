//! The enhancement backbone: a frequency-striding conv encoder, a stack of
//! dynamic blocks that route T-F regions between a local and a non-local
//! attention path, and a mirrored transposed-conv decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, TokenAxis, Var};
use crate::dsp::{RealSpec, StftConfig};
use crate::error::{Error, Result};
use crate::filter::{
    self, action_log_prob, select_action, upsample_nearest, Action, ActionMode, FeatureFilter,
    PolicyMap, RoutingRule,
};
use crate::nn::{ConvBlock, Ctx, LocalAttention, NonLocalAttention, ParamSet, WeightInit};
use crate::synth::derive_seed;
use crate::tensor::Tensor;

/// How the two attention paths of a dynamic block are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Per-region routing by binary masks.
    FeatureFilter,
    /// Both paths on every region, merged by a 1x1 conv over their concatenation.
    Concat,
    /// Both paths on every region, merged by learned channel-wise soft selection.
    Selective,
    /// At most one path, applied everywhere.
    None,
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::FeatureFilter => "feature_filter",
            Fusion::Concat => "concat",
            Fusion::Selective => "selective",
            Fusion::None => "none",
        })
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature_filter" => Ok(Fusion::FeatureFilter),
            "concat" => Ok(Fusion::Concat),
            "selective" => Ok(Fusion::Selective),
            "none" => Ok(Fusion::None),
            _ => Err(Error::invalid(format!("unknown fusion '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Random weights; the output layer and the intermediate head start at
    /// zero, so an untrained residual network passes its input through.
    #[default]
    Standard,
    /// As `Standard`, and additionally the local-attention gates and the
    /// non-local output projections start at zero.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub frame_len: usize,
    pub hop: usize,
    /// Encoder stage widths; the decoder mirrors them.
    pub channels: [usize; 3],
    pub n_dynamic_blocks: usize,
    pub mask_downsample: usize,
    pub filter_width: usize,
    pub local: bool,
    pub nonlocal: bool,
    pub fusion: Fusion,
    pub attention_axis: TokenAxis,
    pub routing_rule: RoutingRule,
    /// Predict the clean spectrogram as the noisy input plus a correction.
    pub residual_output: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            frame_len: 512,
            hop: 256,
            channels: [16, 16, 16],
            n_dynamic_blocks: 4,
            mask_downsample: 4,
            filter_width: 8,
            local: true,
            nonlocal: true,
            fusion: Fusion::FeatureFilter,
            attention_axis: TokenAxis::Time,
            routing_rule: RoutingRule::Categorical,
            residual_output: true,
        }
    }
}

/// How the dynamic blocks choose their masks.
#[derive(Clone, Debug, PartialEq)]
pub enum Routing {
    /// One full-resolution `[B, 2, T, F']` binary mask per block.
    Given(Vec<Tensor>),
    /// Uniformly random low-resolution decisions.
    Random { seed: u64 },
    /// Decisions drawn from the feature filter.
    Policy { mode: ActionMode, seed: u64 },
    /// Fixed low-resolution `[B, 2, T', F']` decisions scored under the
    /// feature filter, one per block.
    Replay(Vec<Tensor>),
    AllLocal,
    AllNonLocal,
}

/// Fraction of T-F units each path processes in one block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchUsage {
    pub local: f64,
    pub nonlocal: f64,
}

impl BranchUsage {
    pub const LOCAL: BranchUsage = BranchUsage {
        local: 1.0,
        nonlocal: 0.0,
    };
    pub const NONLOCAL: BranchUsage = BranchUsage {
        local: 0.0,
        nonlocal: 1.0,
    };
    pub const BOTH: BranchUsage = BranchUsage {
        local: 1.0,
        nonlocal: 1.0,
    };
    pub const NEITHER: BranchUsage = BranchUsage {
        local: 0.0,
        nonlocal: 0.0,
    };

    /// Batch-mean usage of a `[B, 2, T, F]` mask.
    pub fn from_mask(mask: &Tensor) -> Result<Self> {
        let [b, c, t, f] = mask.dims4()?;
        if c != 2 {
            return Err(Error::invalid("routing mask needs 2 channels"));
        }
        let plane = t * f;
        let (mut l, mut n) = (0.0, 0.0);
        for bi in 0..b {
            l += mask.data()[bi * 2 * plane..][..plane].iter().sum::<f64>();
            n += mask.data()[(bi * 2 + 1) * plane..][..plane].iter().sum::<f64>();
        }
        let total = (b * plane) as f64;
        Ok(BranchUsage {
            local: l / total,
            nonlocal: n / total,
        })
    }
}

/// Routing record of one dynamic block.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    /// Full-resolution `[B, 2, T, F']` mask; absent for non-routed fusions.
    pub mask: Option<Tensor>,
    /// Low-resolution decision, when drawn from a policy or at random.
    pub action: Option<Action>,
    pub policy: Option<PolicyMap>,
    /// `[B, 1, 1, 1]` log-probability of `action` under the policy.
    pub log_prob: Option<Var>,
    /// Per-sample fraction of units sent to the non-local path.
    pub nonlocal_fraction: Vec<f64>,
    pub usage: BranchUsage,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `z_0 ..= z_N`.
    pub z: Vec<Var>,
    pub s_pred: Var,
    /// One spectrogram-shaped prediction per dynamic block.
    pub intermediates: Vec<Var>,
    pub blocks: Vec<BlockTrace>,
    /// Multiply-accumulates per utterance of the executed paths.
    pub flops: u64,
}

fn freq_stride_geom() -> ConvGeom {
    ConvGeom {
        kh: 3,
        kw: 3,
        sh: 1,
        sw: 2,
        ph: 1,
        pw: 1,
    }
}

impl NetworkConfig {
    pub fn stft(&self) -> StftConfig {
        StftConfig {
            frame_len: self.frame_len,
            hop: self.hop,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Frequency size after each encoder stage.
    pub fn stage_bins(&self) -> [usize; 4] {
        let f0 = self.n_bins();
        let f1 = (f0 - 1) / 2 + 1;
        let f2 = (f1 - 1) / 2 + 1;
        [f0, f1, f2, (f2 - 1) / 2 + 1]
    }

    pub fn feature_bins(&self) -> usize {
        self.stage_bins()[3]
    }

    pub fn feature_channels(&self) -> usize {
        self.channels[2]
    }

    /// Checks everything except the block count, so cost models can be
    /// evaluated for a bare encoder-decoder.
    pub fn validate_geometry(&self) -> Result<()> {
        self.stft().validate()?;
        if (self.n_bins() - 1) % 8 != 0 {
            return Err(Error::invalid(format!(
                "frame_len {} gives {} bins; (bins - 1) must be a multiple of 8",
                self.frame_len,
                self.n_bins()
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::invalid("channel widths must be >= 1"));
        }
        self.filter().validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_geometry()?;
        if self.n_dynamic_blocks == 0 {
            return Err(Error::invalid("n_dynamic_blocks must be >= 1"));
        }
        match self.fusion {
            Fusion::FeatureFilter | Fusion::Concat | Fusion::Selective
                if !(self.local && self.nonlocal) =>
            {
                Err(Error::invalid(format!(
                    "{} fusion needs both attention paths",
                    self.fusion
                )))
            }
            Fusion::None if self.local && self.nonlocal => Err(Error::invalid(
                "fusion 'none' allows at most one attention path",
            )),
            _ => Ok(()),
        }
    }

    pub fn filter(&self) -> FeatureFilter {
        FeatureFilter {
            cin: self.channels[2],
            width: self.filter_width,
            downsample: self.mask_downsample,
        }
    }

    fn encoder_blocks(&self) -> [ConvBlock; 3] {
        let [c0, c1, c2] = self.channels;
        [(2, c0), (c0, c1), (c1, c2)].map(|(cin, cout)| ConvBlock {
            geom: freq_stride_geom(),
            ..ConvBlock::same3(cin, cout)
        })
    }

    fn decoder_blocks(&self) -> [ConvBlock; 3] {
        let [c0, c1, c2] = self.channels;
        let mut blocks = [(2 * c2, c1), (2 * c1, c0), (2 * c0, 2)].map(|(cin, cout)| ConvBlock {
            geom: freq_stride_geom(),
            transposed: true,
            ..ConvBlock::same3(cin, cout)
        });
        blocks[2].norm = false;
        blocks[2].activation = false;
        blocks
    }

    fn local_attention(&self) -> LocalAttention {
        LocalAttention {
            channels: self.channels[2],
        }
    }

    fn nonlocal_attention(&self) -> NonLocalAttention {
        NonLocalAttention {
            channels: self.channels[2],
            axis: self.attention_axis,
        }
    }

    fn selective_hidden(&self) -> usize {
        (self.channels[2] / 2).max(4)
    }

    fn uses_filter(&self) -> bool {
        self.fusion == Fusion::FeatureFilter
    }

    /// Fresh parameters for this architecture.
    pub fn init_params(&self, scheme: InitScheme, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut ps = ParamSet::new();
        let c = self.channels[2];
        let identity = scheme == InitScheme::Identity;
        for (k, b) in self.encoder_blocks().iter().enumerate() {
            b.init(&format!("enc.{k}"), true, WeightInit::Random, &mut ps, rng)?;
        }
        let same = ConvBlock::same3(c, c);
        for i in 0..self.n_dynamic_blocks {
            let p = format!("db.{i}");
            same.init(&format!("{p}.fs.0"), true, WeightInit::Random, &mut ps, rng)?;
            same.init(&format!("{p}.fs.1"), true, WeightInit::Random, &mut ps, rng)?;
            if self.local {
                self.local_attention().init(&format!("{p}.la"), identity, &mut ps, rng)?;
            }
            if self.nonlocal {
                self.nonlocal_attention().init(&format!("{p}.na"), identity, &mut ps, rng)?;
            }
            match self.fusion {
                Fusion::Concat => ConvBlock::pointwise(2 * c, c).init(
                    &format!("{p}.cat"),
                    true,
                    WeightInit::Random,
                    &mut ps,
                    rng,
                )?,
                Fusion::Selective => {
                    let d = self.selective_hidden();
                    let lin = |o: usize, i: usize, rng: &mut ChaCha8Rng| {
                        let bound = (3.0 / i as f64).sqrt();
                        uniform(&[o, i], bound, rng)
                    };
                    ps.insert(format!("{p}.sel.fc.w"), lin(d, c, rng))?;
                    ps.insert(format!("{p}.sel.fc.b"), Tensor::zeros([d]))?;
                    ps.insert(format!("{p}.sel.a.w"), lin(c, d, rng))?;
                    ps.insert(format!("{p}.sel.b.w"), lin(c, d, rng))?;
                }
                Fusion::FeatureFilter | Fusion::None => {}
            }
            same.init(&format!("{p}.fr"), true, WeightInit::Random, &mut ps, rng)?;
        }
        for (k, b) in self.decoder_blocks().iter().enumerate() {
            let w = if k == 2 {
                WeightInit::Zero
            } else {
                WeightInit::Random
            };
            b.init(&format!("dec.{k}"), true, w, &mut ps, rng)?;
        }
        ConvBlock::pointwise(c, 2).init("head", true, WeightInit::Zero, &mut ps, rng)?;
        if self.uses_filter() {
            self.filter().init(&mut ps, rng)?;
        }
        Ok(ps)
    }

    /// Returns `z_0` and the three encoder outputs used as skips.
    pub fn encoder(&self, ctx: &mut Ctx, y_in: Var) -> Result<(Var, [Var; 3])> {
        let [_, c, _, f] = ctx.g.value(y_in).dims4()?;
        if c != 2 || f != self.n_bins() {
            return Err(Error::invalid(format!(
                "encoder expects [B, 2, T, {}], got {:?}",
                self.n_bins(),
                ctx.g.value(y_in).shape()
            )));
        }
        let mut x = y_in;
        let mut skips = [y_in; 3];
        for (k, b) in self.encoder_blocks().iter().enumerate() {
            x = b.forward(ctx, &format!("enc.{k}"), x)?;
            skips[k] = x;
        }
        Ok((x, skips))
    }

    /// One dynamic block. `mask` is the `[B, 2, T, F']` routing mask, which
    /// only the feature-filter fusion takes.
    pub fn dynamic_block(&self, ctx: &mut Ctx, i: usize, z: Var, mask: Option<&Tensor>) -> Result<Var> {
        let p = format!("db.{i}");
        let same = ConvBlock::same3(self.channels[2], self.channels[2]);
        let s = same.forward(ctx, &format!("{p}.fs.0"), z)?;
        let s = same.forward(ctx, &format!("{p}.fs.1"), s)?;
        let la = self.local_attention();
        let na = self.nonlocal_attention();
        let u = match (self.fusion, mask) {
            (Fusion::FeatureFilter, Some(mask)) => {
                let [b, _, t, f] = ctx.g.value(s).dims4()?;
                let [mb, mc, mt, mf] = mask.dims4()?;
                if mc != 2 || mt != t || mf != f || (mb != b && mb != 1) {
                    return Err(Error::invalid(format!(
                        "mask {:?} does not fit features {:?}",
                        mask.shape(),
                        ctx.g.value(s).shape()
                    )));
                }
                let mut u = s;
                for (ch, branch) in [(0, "la"), (1, "na")] {
                    let m = channel(mask, ch)?;
                    if m.data().iter().all(|&v| v == 0.0) {
                        // both paths map zero to zero
                        continue;
                    }
                    let input = if m.data().iter().all(|&v| v == 1.0) {
                        s
                    } else {
                        let mv = ctx.g.constant(m);
                        ctx.g.mul(s, mv)?
                    };
                    let name = format!("{p}.{branch}");
                    let out = if ch == 0 {
                        la.forward(ctx, &name, input)?
                    } else {
                        na.forward(ctx, &name, input)?
                    };
                    u = ctx.g.add(u, out)?;
                }
                u
            }
            (Fusion::FeatureFilter, None) => {
                return Err(Error::invalid("feature-filter fusion needs a routing mask"))
            }
            (_, Some(_)) => {
                return Err(Error::invalid(format!(
                    "{} fusion does not take a routing mask",
                    self.fusion
                )))
            }
            (Fusion::None, None) => {
                if self.local {
                    let a = la.forward(ctx, &format!("{p}.la"), s)?;
                    ctx.g.add(s, a)?
                } else if self.nonlocal {
                    let a = na.forward(ctx, &format!("{p}.na"), s)?;
                    ctx.g.add(s, a)?
                } else {
                    s
                }
            }
            (Fusion::Concat, None) => {
                let a = la.forward(ctx, &format!("{p}.la"), s)?;
                let b = na.forward(ctx, &format!("{p}.na"), s)?;
                let cat = ctx.g.concat(&[a, b], 1)?;
                let c = self.channels[2];
                let merged = ConvBlock::pointwise(2 * c, c).forward(ctx, &format!("{p}.cat"), cat)?;
                ctx.g.add(s, merged)?
            }
            (Fusion::Selective, None) => {
                let a = la.forward(ctx, &format!("{p}.la"), s)?;
                let b = na.forward(ctx, &format!("{p}.na"), s)?;
                let [bs, c, _, _] = ctx.g.value(s).dims4()?;
                let sum = ctx.g.add(a, b)?;
                let v = ctx.g.mean_axis(sum, 3)?;
                let v = ctx.g.mean_axis(v, 2)?;
                let v = ctx.g.reshape(v, &[bs, c])?;
                let w = ctx.p(&format!("{p}.sel.fc.w"))?;
                let bias = ctx.p(&format!("{p}.sel.fc.b"))?;
                let h = ctx.g.linear(v, w, Some(bias))?;
                let h = ctx.g.elu(h);
                let wa = ctx.p(&format!("{p}.sel.a.w"))?;
                let wb = ctx.p(&format!("{p}.sel.b.w"))?;
                let la_logit = ctx.g.linear(h, wa, None)?;
                let lb_logit = ctx.g.linear(h, wb, None)?;
                // two-way softmax over the paths, per channel
                let diff = ctx.g.sub(la_logit, lb_logit)?;
                let alpha = ctx.g.sigmoid(diff);
                let alpha = ctx.g.reshape(alpha, &[bs, c, 1, 1])?;
                let ab = ctx.g.sub(a, b)?;
                let sel = ctx.g.mul(alpha, ab)?;
                let mix = ctx.g.add(b, sel)?;
                ctx.g.add(s, mix)?
            }
        };
        same.forward(ctx, &format!("{p}.fr"), u)
    }

    /// Maps `z_N` back to a `[B, 2, T, F]` output through the mirrored skips.
    pub fn decoder(&self, ctx: &mut Ctx, z: Var, skips: &[Var; 3]) -> Result<Var> {
        let mut x = z;
        for (k, b) in self.decoder_blocks().iter().enumerate() {
            let skip = skips[2 - k];
            if ctx.g.value(skip).shape() != ctx.g.value(x).shape() {
                return Err(Error::invalid(format!(
                    "decoder stage {k}: skip {:?} does not match {:?}",
                    ctx.g.value(skip).shape(),
                    ctx.g.value(x).shape()
                )));
            }
            let cat = ctx.g.concat(&[x, skip], 1)?;
            x = b.forward(ctx, &format!("dec.{k}"), cat)?;
        }
        Ok(x)
    }

    fn head(&self, ctx: &mut Ctx, z: Var, y_in: Var) -> Result<Var> {
        let h = ConvBlock::pointwise(self.channels[2], 2).forward(ctx, "head", z)?;
        let h = ctx.g.resize_last(h, self.n_bins())?;
        if self.residual_output {
            ctx.g.add(h, y_in)
        } else {
            Ok(h)
        }
    }

    fn fixed_mask(&self, b: usize, t: usize, local: bool) -> Result<Tensor> {
        let f = self.feature_bins();
        let plane = t * f;
        let mut d = vec![0.0; b * 2 * plane];
        let ch = if local { 0 } else { 1 };
        for bi in 0..b {
            d[(bi * 2 + ch) * plane..][..plane].fill(1.0);
        }
        Tensor::new([b, 2, t, f], d)
    }

    /// Full forward pass. `y_in` is `[B, 2, T, F]`.
    pub fn forward(&self, ctx: &mut Ctx, y_in: Var, routing: &Routing) -> Result<ForwardTrace> {
        self.validate()?;
        let [b, _, t, _] = ctx.g.value(y_in).dims4()?;
        let fbins = self.feature_bins();
        let (z0, skips) = self.encoder(ctx, y_in)?;
        let mut z = vec![z0];
        let mut blocks = Vec::with_capacity(self.n_dynamic_blocks);
        let mut intermediates = Vec::with_capacity(self.n_dynamic_blocks);
        let ff = self.filter();
        let mut state = ff.zero_state(&mut ctx.g, b);
        if let Routing::Given(masks) | Routing::Replay(masks) = routing {
            if masks.len() != self.n_dynamic_blocks {
                return Err(Error::invalid(format!(
                    "{} masks given for {} blocks",
                    masks.len(),
                    self.n_dynamic_blocks
                )));
            }
        }
        let (tl, fl) = filter::low_res(t, fbins, self.mask_downsample);
        for i in 0..self.n_dynamic_blocks {
            let zi = *z.last().expect("z_0 present");
            let mut trace = BlockTrace {
                mask: None,
                action: None,
                policy: None,
                log_prob: None,
                nonlocal_fraction: vec![0.0; b],
                usage: BranchUsage::NEITHER,
            };
            if self.uses_filter() {
                let mask = match routing {
                    Routing::Given(masks) => {
                        let m = &masks[i];
                        if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                            return Err(Error::invalid(format!("mask {i} is not binary")));
                        }
                        m.clone()
                    }
                    Routing::AllLocal => self.fixed_mask(b, t, true)?,
                    Routing::AllNonLocal => self.fixed_mask(b, t, false)?,
                    Routing::Random { seed } => {
                        let p = Tensor::full([b, 2, tl, fl], 0.5);
                        let a = select_action(
                            &p,
                            ActionMode::Sample,
                            self.routing_rule,
                            derive_seed(*seed, i as u64),
                        )?;
                        let m = upsample_nearest(&a.mask, self.mask_downsample, t, fbins)?;
                        trace.action = Some(a);
                        m
                    }
                    Routing::Policy { .. } | Routing::Replay(_) => {
                        let zd = ctx.g.detach(zi);
                        let pm = ff.forward(ctx, zd, &mut state)?;
                        let a = match routing {
                            Routing::Policy { mode, seed } => select_action(
                                ctx.g.value(pm.p_low),
                                *mode,
                                self.routing_rule,
                                derive_seed(*seed, i as u64),
                            )?,
                            Routing::Replay(actions) => {
                                if actions[i].data().iter().any(|&v| v != 0.0 && v != 1.0) {
                                    return Err(Error::invalid(format!("action {i} is not binary")));
                                }
                                Action {
                                    mask: actions[i].clone(),
                                    log_prob: Vec::new(),
                                }
                            }
                            _ => unreachable!("matched above"),
                        };
                        let lp = action_log_prob(&mut ctx.g, pm.p_low, &a, self.routing_rule)?;
                        let a = Action {
                            log_prob: ctx.g.value(lp).data().to_vec(),
                            ..a
                        };
                        trace.log_prob = Some(lp);
                        let m = upsample_nearest(&a.mask, self.mask_downsample, t, fbins)?;
                        trace.policy = Some(pm);
                        trace.action = Some(a);
                        m
                    }
                };
                trace.usage = BranchUsage::from_mask(&mask)?;
                trace.nonlocal_fraction = per_sample_fraction(&mask, 1)?;
                let next = self.dynamic_block(ctx, i, zi, Some(&mask))?;
                trace.mask = Some(mask);
                z.push(next);
            } else {
                trace.usage = self.static_usage();
                trace.nonlocal_fraction = vec![trace.usage.nonlocal; b];
                z.push(self.dynamic_block(ctx, i, zi, None)?);
            }
            let zn = *z.last().expect("just pushed");
            intermediates.push(self.head(ctx, zn, y_in)?);
            blocks.push(trace);
        }
        let zn = *z.last().expect("z present");
        let out = self.decoder(ctx, zn, &skips)?;
        let s_pred = if self.residual_output {
            ctx.g.add(out, y_in)?
        } else {
            out
        };
        let usage: Vec<BranchUsage> = blocks.iter().map(|b| b.usage).collect();
        let with_filter = matches!(routing, Routing::Policy { .. } | Routing::Replay(_));
        let flops = count_flops(self, t, &usage, with_filter)?;
        Ok(ForwardTrace {
            z,
            s_pred,
            intermediates,
            blocks,
            flops,
        })
    }

    /// Usage of the fixed, unrouted fusions.
    fn static_usage(&self) -> BranchUsage {
        BranchUsage {
            local: if self.local { 1.0 } else { 0.0 },
            nonlocal: if self.nonlocal { 1.0 } else { 0.0 },
        }
    }
}

fn channel(mask: &Tensor, ch: usize) -> Result<Tensor> {
    let [b, _, t, f] = mask.dims4()?;
    let plane = t * f;
    let mut d = Vec::with_capacity(b * plane);
    for bi in 0..b {
        d.extend_from_slice(&mask.data()[(bi * 2 + ch) * plane..][..plane]);
    }
    Tensor::new([b, 1, t, f], d)
}

fn per_sample_fraction(mask: &Tensor, ch: usize) -> Result<Vec<f64>> {
    let [b, _, t, f] = mask.dims4()?;
    let plane = t * f;
    Ok((0..b)
        .map(|bi| mask.data()[(bi * 2 + ch) * plane..][..plane].iter().sum::<f64>() / plane as f64)
        .collect())
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let n = shape.iter().product();
    let d = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), d).expect("shape matches")
}

/// Analytic multiply-accumulate count of one utterance of `n_frames` frames.
///
/// Convolutions and attention matmuls are counted; normalization,
/// activations and the training-only intermediate head are not. Routed
/// attention costs are attributed in proportion to the units each path
/// receives, modelling sparse execution. `with_filter` adds the policy
/// network.
pub fn count_flops(cfg: &NetworkConfig, n_frames: usize, usage: &[BranchUsage], with_filter: bool) -> Result<u64> {
    cfg.validate_geometry()?;
    if usage.len() != cfg.n_dynamic_blocks {
        return Err(Error::invalid(format!(
            "usage given for {} blocks, config has {}",
            usage.len(),
            cfg.n_dynamic_blocks
        )));
    }
    let t = n_frames;
    let bins = cfg.stage_bins();
    let mut total = 0u64;
    for (k, b) in cfg.encoder_blocks().iter().enumerate() {
        total += b.macs(t, bins[k]);
    }
    for (k, b) in cfg.decoder_blocks().iter().enumerate() {
        total += b.macs(t, bins[3 - k]);
    }
    let f = bins[3];
    let c = cfg.channels[2];
    let same = ConvBlock::same3(c, c).macs(t, f);
    let la = cfg.local_attention().macs(t, f) as f64;
    let na = cfg.nonlocal_attention().macs(t, f) as f64;
    for u in usage {
        if !(0.0..=1.0).contains(&u.local) || !(0.0..=1.0).contains(&u.nonlocal) {
            return Err(Error::invalid("branch usage must lie in [0, 1]"));
        }
        total += 3 * same;
        let mut attn = 0.0;
        if cfg.local {
            attn += u.local * la;
        }
        if cfg.nonlocal {
            attn += u.nonlocal * na;
        }
        total += attn.round() as u64;
        total += match cfg.fusion {
            Fusion::Concat => ConvBlock::pointwise(2 * c, c).macs(t, f),
            Fusion::Selective => (3 * c * cfg.selective_hidden()) as u64,
            Fusion::FeatureFilter | Fusion::None => 0,
        };
        if with_filter && cfg.uses_filter() {
            total += cfg.filter().conv_macs(t, f);
        }
    }
    Ok(total)
}

/// A network configuration together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: NetworkConfig, scheme: InitScheme, seed: u64) -> Result<Self> {
        let params = config.init_params(scheme, seed)?;
        Ok(Model { config, params })
    }

    /// Trainable parameter count, excluding normalization buffers.
    pub fn n_params(&self) -> usize {
        self.params.n_params()
    }

    pub fn n_filter_params(&self) -> usize {
        self.params.n_params_with_prefix(filter::PREFIX)
    }

    /// Inference on one network-domain spectrogram with running BN
    /// statistics. Returns the prediction and the trace's FLOP count.
    pub fn infer(&self, y: &RealSpec, routing: &Routing) -> Result<(RealSpec, ForwardTrace)> {
        let mut ctx = Ctx::no_grad(&self.params, false);
        let x = ctx.g.constant(y.to_tensor(1.0));
        let trace = self.config.forward(&mut ctx, x, routing)?;
        let out = RealSpec::from_tensor(ctx.g.value(trace.s_pred), 1.0)?;
        Ok((out, trace))
    }
}
