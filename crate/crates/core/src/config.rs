//! `key = value` configuration files shared by every subcommand.
//!
//! Lines are trimmed; blank lines and lines starting with `#` are skipped,
//! and a `#` after a value starts a comment. Every key may appear once and
//! unknown keys are errors.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autograd::TokenAxis;
use crate::error::{Error, Result};
use crate::filter::RoutingRule;
use crate::network::{Fusion, InitScheme};
use crate::synth::{DatasetConfig, NoiseKind};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub data: DatasetConfig,
    /// Dataset directory (or manifest path) used for training.
    pub data_dir: Option<PathBuf>,
    pub train: TrainConfig,
    /// Where reports and checkpoints go.
    pub out_dir: Option<PathBuf>,
    /// Timed runs per real-time-factor measurement.
    pub rtf_runs: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            data: DatasetConfig::default(),
            data_dir: None,
            train: TrainConfig::default(),
            out_dir: None,
            rtf_runs: 5,
        }
    }
}

/// Every recognised key, in documentation order.
pub const KEYS: &[&str] = &[
    "data_dir",
    "n_train",
    "n_val",
    "n_test",
    "segment_s",
    "f0_min",
    "f0_max",
    "n_harmonics",
    "am_rate",
    "snr_levels",
    "test_snr_levels",
    "fixed_mix",
    "fixed_coeff",
    "noise_kinds",
    "kinds_per_entry",
    "data_seed",
    "frame_len",
    "hop",
    "channels",
    "n_dynamic_blocks",
    "mask_downsample",
    "filter_width",
    "local",
    "nonlocal",
    "fusion",
    "attention_axis",
    "routing_rule",
    "residual_output",
    "init",
    "batch_size",
    "lr_backbone",
    "lr_filter",
    "stage1_epochs",
    "stage2_epochs",
    "seed",
    "gamma",
    "l_t",
    "beta",
    "reward_baseline",
    "baseline_momentum",
    "out_dir",
    "rtf_runs",
];

fn bad(line: usize, key: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {key}: {msg}"))
}

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| bad(line, key, format!("{e} ({v:?})")))
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(bad(line, key, format!("expected a boolean, got {v:?}"))),
    }
}

fn list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| num(line, key, p.trim())).collect()
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {line}: unknown key {key:?}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key {key:?}")));
            }
            s.set(line, key, value)?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        let n = &mut t.network;
        match key {
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "n_train" => d.n_train = num(line, key, v)?,
            "n_val" => d.n_val = num(line, key, v)?,
            "n_test" => d.n_test = num(line, key, v)?,
            "segment_s" => d.speech.segment_s = num(line, key, v)?,
            "f0_min" => d.speech.f0_min = num(line, key, v)?,
            "f0_max" => d.speech.f0_max = num(line, key, v)?,
            "n_harmonics" => d.speech.n_harmonics = num(line, key, v)?,
            "am_rate" => d.speech.am_rate = num(line, key, v)?,
            "snr_levels" => d.snr_levels = list(line, key, v)?,
            "test_snr_levels" => d.test_snr_levels = list(line, key, v)?,
            "fixed_mix" => d.fixed_mix = boolean(line, key, v)?,
            "fixed_coeff" => d.fixed_coeff = num(line, key, v)?,
            "noise_kinds" => d.noise_kinds = list::<NoiseKind>(line, key, v)?,
            "kinds_per_entry" => d.kinds_per_entry = num(line, key, v)?,
            "data_seed" => d.seed = num(line, key, v)?,
            "frame_len" => n.frame_len = num(line, key, v)?,
            "hop" => n.hop = num(line, key, v)?,
            "channels" => {
                let c: Vec<usize> = list(line, key, v)?;
                n.channels = match c.as_slice() {
                    [w] => [*w; 3],
                    [a, b, c] => [*a, *b, *c],
                    _ => return Err(bad(line, key, "expected one or three widths")),
                };
            }
            "n_dynamic_blocks" => n.n_dynamic_blocks = num(line, key, v)?,
            "mask_downsample" => n.mask_downsample = num(line, key, v)?,
            "filter_width" => n.filter_width = num(line, key, v)?,
            "local" => n.local = boolean(line, key, v)?,
            "nonlocal" => n.nonlocal = boolean(line, key, v)?,
            "fusion" => n.fusion = num::<Fusion>(line, key, v)?,
            "attention_axis" => {
                n.attention_axis = match v {
                    "time" => TokenAxis::Time,
                    "frequency" => TokenAxis::Frequency,
                    _ => return Err(bad(line, key, "expected time or frequency")),
                }
            }
            "routing_rule" => {
                n.routing_rule = match v {
                    "categorical" => RoutingRule::Categorical,
                    "bernoulli" => RoutingRule::Bernoulli,
                    _ => return Err(bad(line, key, "expected categorical or bernoulli")),
                }
            }
            "residual_output" => n.residual_output = boolean(line, key, v)?,
            "init" => {
                t.init = match v {
                    "standard" => InitScheme::Standard,
                    "identity" => InitScheme::Identity,
                    _ => return Err(bad(line, key, "expected standard or identity")),
                }
            }
            "batch_size" => t.batch_size = num(line, key, v)?,
            "lr_backbone" => t.lr_backbone = num(line, key, v)?,
            "lr_filter" => t.lr_filter = num(line, key, v)?,
            "stage1_epochs" => t.stage1_epochs = num(line, key, v)?,
            "stage2_epochs" => t.stage2_epochs = num(line, key, v)?,
            "seed" => t.seed = num(line, key, v)?,
            "gamma" => t.reward.gamma = num(line, key, v)?,
            "l_t" => t.reward.l_t = num(line, key, v)?,
            "beta" => t.reward.beta = num(line, key, v)?,
            "reward_baseline" => t.reward_baseline = boolean(line, key, v)?,
            "baseline_momentum" => t.baseline_momentum = num(line, key, v)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            "rtf_runs" => self.rtf_runs = num(line, key, v)?,
            _ => unreachable!("key list checked above"),
        }
        Ok(())
    }
}
