//! The routing policy: a small conv + LSTM network emitting a rank-1,
//! two-channel probability map per dynamic block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvBlock, Ctx, LstmCell, LstmState, ParamSet, WeightInit};
use crate::tensor::Tensor;

pub const PREFIX: &str = "ff";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureFilter {
    pub cin: usize,
    pub width: usize,
    /// Spatial reduction of the probability map; a power of two up to 8.
    pub downsample: usize,
}

/// Recurrent state threaded through the blocks of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FilterState {
    pub l1: LstmState,
    pub l2: LstmState,
}

/// Per-block policy output.
#[derive(Clone, Copy, Debug)]
pub struct PolicyMap {
    /// `[B, 2, T', F']`, channel 0 local, channel 1 non-local.
    pub p_low: Var,
    /// `[B, 2, T', 1]`.
    pub t_factor: Var,
    /// `[B, 2, 1, F']`.
    pub f_factor: Var,
}

/// Low-resolution grid size for a `t x f` feature map.
pub fn low_res(t: usize, f: usize, downsample: usize) -> (usize, usize) {
    (t.div_ceil(downsample), f.div_ceil(downsample))
}

impl FeatureFilter {
    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4, 8].contains(&self.downsample) {
            return Err(Error::invalid(format!(
                "mask_downsample must be 1, 2, 4 or 8, got {}",
                self.downsample
            )));
        }
        if self.width == 0 {
            return Err(Error::invalid("filter width must be >= 1"));
        }
        Ok(())
    }

    fn blocks(&self) -> [ConvBlock; 3] {
        let n_strided = self.downsample.trailing_zeros() as usize;
        std::array::from_fn(|i| {
            let s = if i < n_strided { 2 } else { 1 };
            let cin = if i == 0 { self.cin } else { self.width };
            ConvBlock {
                geom: ConvGeom {
                    kh: 3,
                    kw: 3,
                    sh: s,
                    sw: s,
                    ph: 1,
                    pw: 1,
                },
                ..ConvBlock::same3(cin, self.width)
            }
        })
    }

    fn lstm(&self) -> LstmCell {
        LstmCell {
            input: self.width,
            hidden: self.width,
        }
    }

    fn time_head(&self) -> ConvBlock {
        ConvBlock::linear_conv(
            self.width,
            2,
            ConvGeom {
                kh: 3,
                kw: 1,
                sh: 1,
                sw: 1,
                ph: 1,
                pw: 0,
            },
        )
    }

    fn freq_head(&self) -> ConvBlock {
        ConvBlock::linear_conv(
            self.width,
            2,
            ConvGeom {
                kh: 1,
                kw: 3,
                sh: 1,
                sw: 1,
                ph: 0,
                pw: 1,
            },
        )
    }

    /// Heads start at zero, so the initial policy is uniform (`p ≡ 0.25`).
    pub fn init(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        self.validate()?;
        for (i, b) in self.blocks().iter().enumerate() {
            b.init(&format!("{PREFIX}.conv.{i}"), true, WeightInit::Random, ps, rng)?;
        }
        self.lstm().init(&format!("{PREFIX}.lstm.0"), ps, rng)?;
        self.lstm().init(&format!("{PREFIX}.lstm.1"), ps, rng)?;
        self.time_head()
            .init(&format!("{PREFIX}.time"), true, WeightInit::Zero, ps, rng)?;
        self.freq_head()
            .init(&format!("{PREFIX}.freq"), true, WeightInit::Zero, ps, rng)
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> FilterState {
        FilterState {
            l1: self.lstm().zero_state(g, batch),
            l2: self.lstm().zero_state(g, batch),
        }
    }

    /// Policy for one block. `z` should already be detached from the backbone.
    pub fn forward(&self, ctx: &mut Ctx, z: Var, state: &mut FilterState) -> Result<PolicyMap> {
        let [b, c, _, _] = ctx.g.value(z).dims4()?;
        if c != self.cin {
            return Err(Error::invalid(format!(
                "feature filter expects {} channels, got {c}",
                self.cin
            )));
        }
        let mut h = z;
        for (i, blk) in self.blocks().iter().enumerate() {
            h = blk.forward(ctx, &format!("{PREFIX}.conv.{i}"), h)?;
        }
        let pooled = ctx.g.mean_axis(h, 3)?;
        let pooled = ctx.g.mean_axis(pooled, 2)?;
        let v = ctx.g.reshape(pooled, &[b, self.width])?;
        state.l1 = self.lstm().step(ctx, &format!("{PREFIX}.lstm.0"), v, state.l1)?;
        state.l2 = self.lstm().step(ctx, &format!("{PREFIX}.lstm.1"), state.l1.h, state.l2)?;
        let cond = ctx.g.reshape(state.l2.h, &[b, self.width, 1, 1])?;
        let h = ctx.g.add(h, cond)?;
        let over_f = ctx.g.mean_axis(h, 3)?;
        let t_logits = self.time_head().forward(ctx, &format!("{PREFIX}.time"), over_f)?;
        let t_factor = ctx.g.sigmoid(t_logits);
        let over_t = ctx.g.mean_axis(h, 2)?;
        let f_logits = self.freq_head().forward(ctx, &format!("{PREFIX}.freq"), over_t)?;
        let f_factor = ctx.g.sigmoid(f_logits);
        let p_low = ctx.g.mul(t_factor, f_factor)?;
        Ok(PolicyMap {
            p_low,
            t_factor,
            f_factor,
        })
    }

    pub fn conv_macs(&self, t: usize, f: usize) -> u64 {
        let (mut h, mut w) = (t, f);
        let mut total = 0;
        for b in self.blocks() {
            total += b.macs(h, w);
            (h, w) = b.geom.conv_out(h, w).unwrap_or((0, 0));
        }
        total + 2 * self.lstm().macs() + self.time_head().macs(h, 1) + self.freq_head().macs(1, w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Sample,
    Argmax,
}

/// How the two probability channels become binary masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingRule {
    /// One path per unit, chosen from the renormalized pair.
    #[default]
    Categorical,
    /// Each channel switched on independently; units may take both or
    /// neither path.
    Bernoulli,
}

/// A binary routing decision on the low-resolution grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Action {
    /// `[B, 2, T', F']` with values in {0, 1}; channel 0 local, 1 non-local.
    pub mask: Tensor,
    /// Per-sample log-probability of the whole mask.
    pub log_prob: Vec<f64>,
}

impl Action {
    /// Per-sample fraction of units routed to the non-local path.
    pub fn nonlocal_fraction(&self) -> Vec<f64> {
        let [b, _, t, f] = self.mask.dims4().expect("rank 4");
        let plane = t * f;
        (0..b)
            .map(|i| {
                let off = (i * 2 + 1) * plane;
                self.mask.data()[off..off + plane].iter().sum::<f64>() / plane as f64
            })
            .collect()
    }
}

/// Chooses a routing mask from `p_low` (`[B, 2, T', F']`).
///
/// Categorical rule: per unit, `q = (p_L, p_N) / (p_L + p_N)`; argmax breaks
/// ties toward the local path.
pub fn select_action(p_low: &Tensor, mode: ActionMode, rule: RoutingRule, seed: u64) -> Result<Action> {
    let [b, c, t, f] = p_low.dims4()?;
    if c != 2 {
        return Err(Error::invalid(format!("policy map needs 2 channels, got {c}")));
    }
    let plane = t * f;
    let p = p_low.data();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![0.0; p.len()];
    let mut log_prob = vec![0.0; b];
    for bi in 0..b {
        let l_off = bi * 2 * plane;
        let n_off = l_off + plane;
        for u in 0..plane {
            let (pl, pn) = (p[l_off + u], p[n_off + u]);
            match rule {
                RoutingRule::Categorical => {
                    let s = pl + pn;
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::DegeneratePolicy(format!(
                            "p_L + p_N = {s} at sample {bi}, unit {u}"
                        )));
                    }
                    let qn = pn / s;
                    let nonlocal = match mode {
                        ActionMode::Argmax => pn > pl,
                        ActionMode::Sample => rng.gen::<f64>() < qn,
                    };
                    let q = if nonlocal { qn } else { pl / s };
                    mask[if nonlocal { n_off } else { l_off } + u] = 1.0;
                    log_prob[bi] += q.ln();
                }
                RoutingRule::Bernoulli => {
                    for (off, pv) in [(l_off, pl), (n_off, pn)] {
                        let on = match mode {
                            ActionMode::Argmax => pv > 0.5,
                            ActionMode::Sample => rng.gen::<f64>() < pv,
                        };
                        mask[off + u] = if on { 1.0 } else { 0.0 };
                        log_prob[bi] += if on { pv.ln() } else { (1.0 - pv).ln() };
                    }
                }
            }
        }
    }
    Ok(Action {
        mask: Tensor::new([b, 2, t, f], mask)?,
        log_prob,
    })
}

/// Differentiable per-sample log-probability `[B, 1, 1, 1]` of `action`
/// under `p_low`.
pub fn action_log_prob(g: &mut Graph, p_low: Var, action: &Action, rule: RoutingRule) -> Result<Var> {
    if g.value(p_low).shape() != action.mask.shape() {
        return Err(Error::invalid("action mask does not match policy map"));
    }
    let mask = g.constant(action.mask.clone());
    let per_unit = match rule {
        RoutingRule::Categorical => {
            let pl = g.narrow(p_low, 1, 0, 1)?;
            let pn = g.narrow(p_low, 1, 1, 1)?;
            let s = g.add(pl, pn)?;
            let ls = g.ln(s);
            let lp = g.ln(p_low);
            let lq = g.sub(lp, ls)?;
            g.mul(lq, mask)?
        }
        RoutingRule::Bernoulli => {
            let lp = g.ln(p_low);
            let on = g.mul(lp, mask)?;
            let neg = g.scale(p_low, -1.0);
            let one_minus = g.add_scalar(neg, 1.0);
            let l1m = g.ln(one_minus);
            let negm = g.scale(mask, -1.0);
            let off_mask = g.add_scalar(negm, 1.0);
            let off = g.mul(l1m, off_mask)?;
            g.add(on, off)?
        }
    };
    let s = g.sum_axis(per_unit, 3)?;
    let s = g.sum_axis(s, 2)?;
    g.sum_axis(s, 1)
}

/// Nearest-neighbour upsampling of `[B, C, T', F']` by `factor` to
/// `[B, C, t, f]`; trailing cells are clamped to the last low-res cell.
pub fn upsample_nearest(low: &Tensor, factor: usize, t: usize, f: usize) -> Result<Tensor> {
    let [b, c, tl, fl] = low.dims4()?;
    if t < tl || f < fl || factor == 0 {
        return Err(Error::invalid(format!(
            "cannot upsample {tl}x{fl} to smaller target {t}x{f}"
        )));
    }
    let mut out = Vec::with_capacity(b * c * t * f);
    for plane in low.data().chunks(tl * fl) {
        for ti in 0..t {
            let row = &plane[(ti / factor).min(tl - 1) * fl..][..fl];
            out.extend((0..f).map(|fi| row[(fi / factor).min(fl - 1)]));
        }
    }
    Tensor::new([b, c, t, f], out)
}
