//! Two-stage training: the backbone under random routing, then backbone and
//! routing policy together with a REINFORCE update.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dsp::{RealSpec, StftConfig};
use crate::error::{Error, Result};
use crate::filter::{self, ActionMode};
use crate::network::{ForwardTrace, InitScheme, Model, NetworkConfig, Routing};
use crate::nn::{round_f32, Ctx, ParamSet};
use crate::synth::{derive_seed, Dataset, Split};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.bin";
pub const META_FILE: &str = "meta.json";
const MAGIC: &[u8; 4] = b"SEKP";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Penalty per unit of non-local routing.
    pub gamma: f64,
    /// Loss above which an input counts as fully difficult.
    pub l_t: f64,
    /// Weight of the intermediate-prediction loss in stage 1.
    pub beta: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            gamma: 8e-2,
            l_t: 6e-2,
            beta: 0.5,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.l_t > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::invalid(format!(
                "need gamma > 0, l_t > 0, beta >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `L_d / L_t` below the threshold, 1 at or above it.
pub fn difficulty(l_d: f64, l_t: f64) -> Result<f64> {
    if !(l_d >= 0.0) {
        return Err(Error::invalid(format!("loss must be >= 0, got {l_d}")));
    }
    if !(l_t > 0.0) {
        return Err(Error::invalid(format!("threshold must be > 0, got {l_t}")));
    }
    Ok(if l_d < l_t { l_d / l_t } else { 1.0 })
}

/// Reward of block `i` (1-based) out of `n`. `cost` is the fraction of units
/// routed to the non-local path; `delta_l2` is the policy's loss minus the
/// random-routing loss, so improvements are negative.
pub fn step_reward(cost: f64, i: usize, n: usize, d: f64, delta_l2: f64, gamma: f64) -> Result<f64> {
    if i == 0 || i > n {
        return Err(Error::invalid(format!("block index {i} outside 1..={n}")));
    }
    let r = -gamma * cost;
    Ok(if i == n { r + d * -delta_l2 } else { r })
}

/// Suffix sums `R_i = Σ_{j >= i} r_j`.
pub fn returns_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

/// Surrogate `-(1/K) Σ_k Σ_i log π(a_{k,i}) R_{k,i}`, whose gradient is the
/// negated REINFORCE estimate. `log_probs[i]` is `[K, 1, 1, 1]` and
/// `returns[i][k]` the matching return.
pub fn reinforce_surrogate(g: &mut Graph, log_probs: &[Var], returns: &[Vec<f64>]) -> Result<Var> {
    if log_probs.is_empty() || log_probs.len() != returns.len() {
        return Err(Error::invalid(format!(
            "need matching non-empty trajectories, got {} log-prob blocks and {} return blocks",
            log_probs.len(),
            returns.len()
        )));
    }
    let k = returns[0].len();
    if k == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let mut total = None;
    for (lp, r) in log_probs.iter().zip(returns) {
        if g.value(*lp).len() != k || r.len() != k {
            return Err(Error::invalid("trajectory batch sizes differ"));
        }
        let rv = g.constant(Tensor::new([k, 1, 1, 1], r.clone())?);
        let weighted = g.mul(*lp, rv)?;
        let s = g.sum(weighted);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(g.scale(total.expect("non-empty"), -1.0 / k as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub reward: RewardConfig,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_filter: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub seed: u64,
    /// Subtract a moving average of the returns in stage 2.
    pub reward_baseline: bool,
    pub baseline_momentum: f64,
    pub init: InitScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::default(),
            reward: RewardConfig::default(),
            batch_size: 16,
            lr_backbone: 1e-3,
            lr_filter: 1e-4,
            stage1_epochs: 50,
            stage2_epochs: 50,
            seed: 0,
            reward_baseline: false,
            baseline_momentum: 0.9,
            init: InitScheme::Standard,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.reward.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.lr_backbone > 0.0) || !(self.lr_filter > 0.0) {
            return Err(Error::invalid("learning rates must be > 0"));
        }
        if !(0.0..1.0).contains(&self.baseline_momentum) {
            return Err(Error::invalid("baseline_momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam moments and per-parameter step counts. Everything is kept at `f32`
/// precision so checkpoints round-trip exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub steps: BTreeMap<String, u64>,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    /// One update of every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamSet, grads: &[(String, Tensor)], lr: impl Fn(&str) -> f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::invalid(format!("gradient shape mismatch for {name}")));
            }
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let bc1 = 1.0 - BETA1.powi(*t as i32);
            let bc2 = 1.0 - BETA2.powi(*t as i32);
            let step = lr(name);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = round_f32(BETA1 * *mv + (1.0 - BETA1) * gv);
                *vv = round_f32(BETA2 * *vv + (1.0 - BETA2) * gv * gv);
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = round_f32(*pv - step * mhat / (vhat.sqrt() + ADAM_EPS));
            }
        }
        Ok(())
    }
}

/// Utterances as network-domain `[1, 2, T, F]` tensors.
#[derive(Clone, Debug, Default)]
pub struct TrainSet {
    pub items: Vec<(Tensor, Tensor)>,
}

impl TrainSet {
    /// Scales `(noisy, clean)` spectra into the network domain.
    pub fn from_pairs(pairs: &[(RealSpec, RealSpec)], stft: StftConfig) -> Self {
        let s = 1.0 / stft.window_gain();
        TrainSet {
            items: pairs
                .iter()
                .map(|(n, c)| (n.to_tensor(s), c.to_tensor(s)))
                .collect(),
        }
    }

    pub fn from_dataset(ds: &Dataset, split: Split, stft: StftConfig) -> Result<Self> {
        let pairs = ds
            .manifest
            .split(split)
            .map(|e| ds.load_pair(e, stft))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_pairs(&pairs, stft))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Shuffled minibatches for one epoch.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<Vec<(Tensor, Tensor)>> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
            .chunks(batch_size.max(1))
            .map(|idx| {
                let noisy: Vec<Tensor> = idx.iter().map(|&i| self.items[i].0.clone()).collect();
                let clean: Vec<Tensor> = idx.iter().map(|&i| self.items[i].1.clone()).collect();
                Ok((Tensor::stack_batch(&noisy)?, Tensor::stack_batch(&clean)?))
            })
            .collect()
    }
}

/// Per-sample mean squared error of two `[B, ...]` tensors.
pub fn per_sample_mse(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if a.shape() != b.shape() || a.rank() == 0 {
        return Err(Error::invalid("per-sample MSE needs equal batched shapes"));
    }
    let n = a.shape()[0];
    let per = a.len() / n;
    Ok(a.data()
        .chunks(per)
        .zip(b.data().chunks(per))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / per as f64)
        .collect())
}

/// `MSE(S_pred, S) + β · mean_i MSE(intermediate_i, S)`; returns the total,
/// the final-output term and the intermediate mean.
pub fn stage1_loss(g: &mut Graph, trace: &ForwardTrace, clean: Var, beta: f64) -> Result<(Var, Var, Option<Var>)> {
    let main = g.mse(trace.s_pred, clean)?;
    if trace.intermediates.is_empty() || beta == 0.0 {
        return Ok((main, main, None));
    }
    let mut acc = None;
    for &p in &trace.intermediates {
        let l = g.mse(p, clean)?;
        acc = Some(match acc {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    let inter = g.scale(acc.expect("non-empty"), 1.0 / trace.intermediates.len() as f64);
    let weighted = g.scale(inter, beta);
    Ok((g.add(main, weighted)?, main, Some(inter)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub loss: f64,
    pub mse: f64,
    pub nonlocal_fraction: f64,
    pub reward: f64,
    pub difficulty: f64,
    pub delta_l2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub stage: u8,
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    pub mse: f64,
    pub nonlocal_fraction: f64,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub stage: u8,
    pub step: u64,
    pub epoch: u64,
    pub params: ParamSet,
    pub optimizer: AdamState,
    pub baseline: Option<f64>,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model {
            config: self.config.network.clone(),
            params: self.params.clone(),
        }
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamState,
    pub stage: u8,
    pub step: u64,
    pub epoch: u64,
    pub baseline: Option<f64>,
}

fn collect_grads(g: &Graph, loss: Var) -> Result<Vec<(String, Tensor)>> {
    let grads = g.backward(loss)?;
    Ok(g.params()
        .iter()
        .filter(|(n, _)| !ParamSet::is_buffer(n))
        .filter_map(|(n, v)| grads.get(*v).map(|t| (n.clone(), t.clone())))
        .collect())
}

fn finite_or_diverged(step: u64, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence {
            step,
            msg: format!("{what} is {v}"),
        })
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.network.clone(), config.init, config.seed)?;
        Ok(Trainer {
            config,
            model,
            optimizer: AdamState::default(),
            stage: 1,
            step: 0,
            epoch: 0,
            baseline: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let model = ckpt.model();
        Ok(Trainer {
            config: ckpt.config,
            model,
            optimizer: ckpt.optimizer,
            stage: ckpt.stage,
            step: ckpt.step,
            epoch: ckpt.epoch,
            baseline: ckpt.baseline,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            stage: self.stage,
            step: self.step,
            epoch: self.epoch,
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
            baseline: self.baseline,
        }
    }

    fn learning_rate(&self) -> impl Fn(&str) -> f64 {
        let (lb, lf) = (self.config.lr_backbone, self.config.lr_filter);
        move |name: &str| {
            if name.starts_with(filter::PREFIX) && name[filter::PREFIX.len()..].starts_with('.') {
                lf
            } else {
                lb
            }
        }
    }

    fn apply(&mut self, g: &mut Graph, loss: Var) -> Result<()> {
        let grads = collect_grads(g, loss)?;
        let stats = g.take_bn_stats();
        let lr = self.learning_rate();
        self.optimizer.update(&mut self.model.params, &grads, lr)?;
        self.model.params.update_bn(&stats)?;
        self.step += 1;
        Ok(())
    }

    /// Supervised step under uniformly random routing.
    pub fn stage1_step(&mut self, noisy: &Tensor, clean: &Tensor) -> Result<StepStats> {
        let routing = Routing::Random {
            seed: derive_seed(self.config.seed, self.step),
        };
        let beta = self.config.reward.beta;
        let params = self.model.params.clone();
        let mut ctx = Ctx::train(&params);
        let x = ctx.g.constant(noisy.clone());
        let y = ctx.g.constant(clean.clone());
        let trace = self.model.config.forward(&mut ctx, x, &routing)?;
        let (loss, mse, _) = stage1_loss(&mut ctx.g, &trace, y, beta)?;
        let lv = finite_or_diverged(self.step, "stage-1 loss", ctx.g.value(loss).data()[0])?;
        let mv = ctx.g.value(mse).data()[0];
        let nl = mean_nonlocal(&trace);
        self.apply(&mut ctx.g, loss)?;
        Ok(StepStats {
            loss: lv,
            mse: mv,
            nonlocal_fraction: nl,
            ..StepStats::default()
        })
    }

    /// Joint step: supervised MSE for the backbone and REINFORCE for the
    /// policy, on the same minibatch. Unrouted fusions take a plain
    /// supervised step.
    pub fn stage2_step(&mut self, noisy: &Tensor, clean: &Tensor) -> Result<StepStats> {
        let net = self.model.config.clone();
        let params = self.model.params.clone();
        let mut ctx = Ctx::train(&params);
        let x = ctx.g.constant(noisy.clone());
        let y = ctx.g.constant(clean.clone());
        let routed = net.fusion == crate::network::Fusion::FeatureFilter;
        let routing = if routed {
            Routing::Policy {
                mode: ActionMode::Sample,
                seed: derive_seed(self.config.seed ^ 0x5eed_0002, self.step),
            }
        } else {
            Routing::AllLocal
        };
        let trace = net.forward(&mut ctx, x, &routing)?;
        let mse = ctx.g.mse(trace.s_pred, y)?;
        let mv = finite_or_diverged(self.step, "stage-2 loss", ctx.g.value(mse).data()[0])?;
        let nl = mean_nonlocal(&trace);
        if !routed {
            self.apply(&mut ctx.g, mse)?;
            return Ok(StepStats {
                loss: mv,
                mse: mv,
                nonlocal_fraction: nl,
                ..StepStats::default()
            });
        }

        let l_d = per_sample_mse(ctx.g.value(trace.s_pred), clean)?;
        let l_rand = {
            let mut rc = Ctx::no_grad(&params, true);
            let rx = rc.g.constant(noisy.clone());
            let rt = net.forward(
                &mut rc,
                rx,
                &Routing::Random {
                    seed: derive_seed(self.config.seed ^ 0x5eed_0003, self.step),
                },
            )?;
            per_sample_mse(rc.g.value(rt.s_pred), clean)?
        };
        let rw = self.config.reward;
        let n = trace.blocks.len();
        let k = l_d.len();
        let mut returns = vec![vec![0.0; k]; n];
        let (mut mean_r, mut mean_d, mut mean_delta) = (0.0, 0.0, 0.0);
        for s in 0..k {
            let delta = l_d[s] - l_rand[s];
            let d = difficulty(l_d[s], rw.l_t)?;
            let rewards = (0..n)
                .map(|i| step_reward(trace.blocks[i].nonlocal_fraction[s], i + 1, n, d, delta, rw.gamma))
                .collect::<Result<Vec<_>>>()?;
            for (i, r) in returns_to_go(&rewards).into_iter().enumerate() {
                returns[i][s] = r;
            }
            mean_r += returns[0][s] / k as f64;
            mean_d += d / k as f64;
            mean_delta += delta / k as f64;
        }
        if self.config.reward_baseline {
            let b = self.baseline.unwrap_or(mean_r);
            for r in returns.iter_mut().flatten() {
                *r -= b;
            }
            let m = self.config.baseline_momentum;
            self.baseline = Some(m * b + (1.0 - m) * mean_r);
        }
        let log_probs: Vec<Var> = trace
            .blocks
            .iter()
            .map(|b| b.log_prob.ok_or_else(|| Error::invalid("policy routing without log-probabilities")))
            .collect::<Result<_>>()?;
        let surrogate = reinforce_surrogate(&mut ctx.g, &log_probs, &returns)?;
        let total = ctx.g.add(mse, surrogate)?;
        let tv = ctx.g.value(total).data()[0];
        finite_or_diverged(self.step, "stage-2 objective", tv)?;
        self.apply(&mut ctx.g, total)?;
        Ok(StepStats {
            loss: mv,
            mse: mv,
            nonlocal_fraction: nl,
            reward: mean_r,
            difficulty: mean_d,
            delta_l2: mean_delta,
        })
    }

    /// One pass over `set` in shuffled minibatches.
    pub fn run_epoch(&mut self, stage: u8, set: &TrainSet) -> Result<EpochStats> {
        if set.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        if stage != self.stage {
            self.stage = stage;
        }
        let batches = set.batches(self.config.batch_size, derive_seed(self.config.seed ^ 0xba7c, self.epoch))?;
        let mut acc = EpochStats {
            stage,
            epoch: self.epoch,
            step: self.step,
            loss: 0.0,
            mse: 0.0,
            nonlocal_fraction: 0.0,
            reward: 0.0,
        };
        let nb = batches.len() as f64;
        for (noisy, clean) in &batches {
            let s = match stage {
                1 => self.stage1_step(noisy, clean)?,
                2 => self.stage2_step(noisy, clean)?,
                _ => return Err(Error::invalid(format!("unknown stage {stage}"))),
            };
            acc.loss += s.loss / nb;
            acc.mse += s.mse / nb;
            acc.nonlocal_fraction += s.nonlocal_fraction / nb;
            acc.reward += s.reward / nb;
        }
        self.epoch += 1;
        acc.step = self.step;
        Ok(acc)
    }

    /// Runs `epochs` epochs of `stage`, reporting each to `on_epoch`.
    pub fn fit(
        &mut self,
        stage: u8,
        set: &TrainSet,
        epochs: usize,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<Vec<EpochStats>> {
        let mut out = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let s = self.run_epoch(stage, set)?;
            on_epoch(&s);
            out.push(s);
        }
        Ok(out)
    }

    /// Mean MSE over `set` under `routing`, with running statistics.
    pub fn evaluate_mse(&self, set: &TrainSet, routing: &Routing) -> Result<f64> {
        mean_mse(&self.model, set, routing)
    }
}

/// Mean MSE of `model` over `set` under `routing`, in eval mode.
pub fn mean_mse(model: &Model, set: &TrainSet, routing: &Routing) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("empty set"));
    }
    let mut total = 0.0;
    for (noisy, clean) in &set.items {
        let mut ctx = Ctx::no_grad(&model.params, false);
        let x = ctx.g.constant(noisy.clone());
        let tr = model.config.forward(&mut ctx, x, routing)?;
        total += per_sample_mse(ctx.g.value(tr.s_pred), clean)?[0];
    }
    Ok(total / set.len() as f64)
}

fn mean_nonlocal(trace: &ForwardTrace) -> f64 {
    if trace.blocks.is_empty() {
        return 0.0;
    }
    trace.blocks.iter().map(|b| b.usage.nonlocal).sum::<f64>() / trace.blocks.len() as f64
}

pub fn stage1_train(config: TrainConfig, set: &TrainSet, on_epoch: impl FnMut(&EpochStats)) -> Result<Checkpoint> {
    let mut t = Trainer::new(config)?;
    let epochs = t.config.stage1_epochs;
    t.fit(1, set, epochs, on_epoch)?;
    Ok(t.checkpoint())
}

pub fn stage2_train(ckpt: Checkpoint, set: &TrainSet, on_epoch: impl FnMut(&EpochStats)) -> Result<Checkpoint> {
    let mut t = Trainer::from_checkpoint(ckpt)?;
    let epochs = t.config.stage2_epochs;
    t.fit(2, set, epochs, on_epoch)?;
    Ok(t.checkpoint())
}

#[derive(Serialize, Deserialize)]
struct Meta {
    schema_version: u32,
    stage: u8,
    step: u64,
    epoch: u64,
    baseline: Option<f64>,
    adam_steps: BTreeMap<String, u64>,
    config: TrainConfig,
}

const PARAM_NS: &str = "param/";
const M_NS: &str = "adam.m/";
const V_NS: &str = "adam.v/";

fn write_array(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Writes `params.bin` and `meta.json` into `dir`, creating it if needed.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let n = ckpt.params.len() + ckpt.optimizer.m.len() + ckpt.optimizer.v.len();
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    for (k, t) in ckpt.params.iter() {
        write_array(&mut buf, &format!("{PARAM_NS}{k}"), t);
    }
    for (ns, map) in [(M_NS, &ckpt.optimizer.m), (V_NS, &ckpt.optimizer.v)] {
        for (k, t) in map {
            write_array(&mut buf, &format!("{ns}{k}"), t);
        }
    }
    let bin = dir.join(PARAMS_FILE);
    fs::write(&bin, buf).map_err(|e| Error::io(&bin, e))?;
    let meta = Meta {
        schema_version: CHECKPOINT_VERSION,
        stage: ckpt.stage,
        step: ckpt.step,
        epoch: ckpt.epoch,
        baseline: ckpt.baseline,
        adam_steps: ckpt.optimizer.steps.clone(),
        config: ckpt.config.clone(),
    };
    let mp = dir.join(META_FILE);
    fs::write(&mp, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&mp, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn corrupt(&self, msg: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mp = dir.join(META_FILE);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let version: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::CorruptCheckpoint {
        path: mp.clone(),
        msg: e.to_string(),
    })?;
    let found = version
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptCheckpoint {
            path: mp.clone(),
            msg: "missing schema_version".into(),
        })? as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta: Meta = serde_json::from_value(version).map_err(|e| Error::CorruptCheckpoint {
        path: mp.clone(),
        msg: e.to_string(),
    })?;

    let bin = dir.join(PARAMS_FILE);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
        path: &bin,
    };
    if r.take(4)? != MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let found = r.u32()?;
    if found != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let n = r.u32()?;
    let mut params = ParamSet::new();
    let mut opt = AdamState {
        steps: meta.adam_steps,
        ..AdamState::default()
    };
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.corrupt("array name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(r.corrupt(format!("implausible rank {rank} for {name}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count
            .filter(|&c| c.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| r.corrupt(format!("implausible shape {shape:?} for {name}")))?;
        let raw = r.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(shape, data)?;
        if let Some(k) = name.strip_prefix(PARAM_NS) {
            params
                .insert(k, t)
                .map_err(|_| r.corrupt(format!("duplicate array {name}")))?;
        } else if let Some(k) = name.strip_prefix(M_NS) {
            opt.m.insert(k.to_string(), t);
        } else if let Some(k) = name.strip_prefix(V_NS) {
            opt.v.insert(k.to_string(), t);
        } else {
            return Err(r.corrupt(format!("unknown array {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt("trailing bytes"));
    }
    let expected = meta.config.network.init_params(meta.config.init, 0)?;
    for (k, t) in expected.iter() {
        let got = params
            .get(k)
            .map_err(|_| r.corrupt(format!("missing parameter {k}")))?;
        if got.shape() != t.shape() {
            return Err(r.corrupt(format!("parameter {k} has shape {:?}, expected {:?}", got.shape(), t.shape())));
        }
    }
    if params.len() != expected.len() {
        return Err(r.corrupt("unexpected extra parameters"));
    }
    Ok(Checkpoint {
        config: meta.config,
        stage: meta.stage,
        step: meta.step,
        epoch: meta.epoch,
        params,
        optimizer: opt,
        baseline: meta.baseline,
    })
}

/// Where a stage writes its checkpoint under `out`.
pub fn stage_dir(out: &Path, stage: u8) -> PathBuf {
    out.join(format!("stage{stage}"))
}

#[cfg(test)]
mod tests;
