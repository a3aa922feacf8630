//! The ten-case component ablation at desk scale.

use std::panic::{self, AssertUnwindSafe};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{Fusion, Model, NetworkConfig};
use crate::synth::{Dataset, Split};
use crate::train::{EpochStats, TrainConfig, TrainSet, Trainer};

use super::{argmax_routing, evaluate, EvalOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AblationCase {
    pub case_id: u8,
    pub local: bool,
    pub nonlocal: bool,
    pub fusion: Fusion,
    pub n_blocks: usize,
}

pub const N_CASES: u8 = 10;

impl AblationCase {
    pub fn get(case_id: u8) -> Result<Self> {
        let (local, nonlocal, fusion, n_blocks) = match case_id {
            0 => (true, true, Fusion::FeatureFilter, 4),
            1 => (true, false, Fusion::None, 4),
            2 => (false, true, Fusion::None, 4),
            3 => (true, true, Fusion::Concat, 4),
            4 => (true, true, Fusion::Selective, 4),
            5 => (false, false, Fusion::None, 4),
            6 => (true, true, Fusion::FeatureFilter, 3),
            7 => (true, true, Fusion::FeatureFilter, 2),
            8 => (true, true, Fusion::FeatureFilter, 1),
            9 => (true, true, Fusion::FeatureFilter, 5),
            _ => return Err(Error::invalid(format!("ablation cases are 0..=9, got {case_id}"))),
        };
        Ok(AblationCase {
            case_id,
            local,
            nonlocal,
            fusion,
            n_blocks,
        })
    }

    pub fn all() -> Vec<Self> {
        (0..N_CASES).map(|i| Self::get(i).expect("in range")).collect()
    }

    /// `base` with this case's attention flags, fusion and block count.
    pub fn network(&self, base: &NetworkConfig) -> NetworkConfig {
        NetworkConfig {
            local: self.local,
            nonlocal: self.nonlocal,
            fusion: self.fusion,
            n_dynamic_blocks: self.n_blocks,
            ..base.clone()
        }
    }
}

/// Parses `"0..9"` (inclusive), `"0..=9"`, `"0,3,5"` or a mix such as
/// `"0,6..9"` into case ids, keeping order and dropping repeats.
pub fn parse_cases(s: &str) -> Result<Vec<u8>> {
    let num = |t: &str| {
        t.trim()
            .parse::<u8>()
            .map_err(|_| Error::invalid(format!("bad case id {t:?}")))
    };
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let ids: Vec<u8> = match part.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
                if a > b {
                    return Err(Error::invalid(format!("empty case range {part:?}")));
                }
                (a..=b).collect()
            }
            None => vec![num(part)?],
        };
        for id in ids {
            AblationCase::get(id)?;
            if !out.contains(&id) {
                out.push(id);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("no ablation cases given"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    #[serde(flatten)]
    pub case: AblationCase,
    pub n_params: usize,
    pub n_filter_params: usize,
    /// Mean multiply-accumulates per test utterance.
    pub flops: f64,
    pub stoi: f64,
    pub si_sdr: f64,
    pub stoi_noisy: f64,
    pub train_mse: f64,
    pub nonlocal_fraction: f64,
    pub n_utterances: usize,
    /// Set when the case failed; the metrics are then NaN.
    pub error: Option<String>,
}

impl AblationRow {
    pub(crate) fn failed(case: AblationCase, error: String) -> Self {
        AblationRow {
            case,
            n_params: 0,
            n_filter_params: 0,
            flops: f64::NAN,
            stoi: f64::NAN,
            si_sdr: f64::NAN,
            stoi_noisy: f64::NAN,
            train_mse: f64::NAN,
            nonlocal_fraction: f64::NAN,
            n_utterances: 0,
            error: Some(error),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, case_id: u8) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.case.case_id == case_id)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "case_id",
            "local",
            "nonlocal",
            "fusion",
            "n_blocks",
            "n_params",
            "n_filter_params",
            "flops",
            "stoi",
            "si_sdr",
            "stoi_noisy",
            "train_mse",
            "nonlocal_fraction",
            "n_utterances",
            "error",
        ])?;
        for r in &self.rows {
            let c = &r.case;
            w.write_record([
                c.case_id.to_string(),
                c.local.to_string(),
                c.nonlocal.to_string(),
                c.fusion.to_string(),
                c.n_blocks.to_string(),
                r.n_params.to_string(),
                r.n_filter_params.to_string(),
                r.flops.to_string(),
                r.stoi.to_string(),
                r.si_sdr.to_string(),
                r.stoi_noisy.to_string(),
                r.train_mse.to_string(),
                r.nonlocal_fraction.to_string(),
                r.n_utterances.to_string(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Trains `case` from scratch on `train` with the budget and seed of `base`
/// (stage 1, then stage 2), and scores it on the test split of `ds`.
pub fn run_case(
    case: AblationCase,
    base: &TrainConfig,
    train: &TrainSet,
    ds: &Dataset,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<AblationRow> {
    let config = TrainConfig {
        network: case.network(&base.network),
        ..base.clone()
    };
    let mut t = Trainer::new(config)?;
    t.fit(1, train, base.stage1_epochs, &mut on_epoch)?;
    t.fit(2, train, base.stage2_epochs, &mut on_epoch)?;
    let model: &Model = &t.model;
    let report = evaluate(model, ds, Split::Test, &EvalOptions::default())?;
    if report.rows.is_empty() {
        let why = report.failures.first().map_or("no rows".to_string(), |f| f.error.clone());
        return Err(Error::invalid(format!("case {}: evaluation failed: {why}", case.case_id)));
    }
    let agg = report.aggregate();
    let train_mse = crate::train::mean_mse(model, train, &argmax_routing())?;
    Ok(AblationRow {
        case,
        n_params: model.n_params(),
        n_filter_params: model.n_filter_params(),
        flops: agg.flops,
        stoi: agg.stoi,
        si_sdr: agg.si_sdr,
        stoi_noisy: agg.stoi_noisy,
        train_mse,
        nonlocal_fraction: agg.nonlocal_fraction,
        n_utterances: agg.count,
        error: None,
    })
}

/// Runs every case under identical seeds and budget. A failing case
/// becomes a row with `error` set; the others still run.
pub fn run_ablation(
    cases: &[AblationCase],
    base: &TrainConfig,
    ds: &Dataset,
    mut on_epoch: impl FnMut(u8, &EpochStats),
) -> Result<AblationTable> {
    let train = TrainSet::from_dataset(ds, Split::Train, base.network.stft())?;
    Ok(isolated(cases, |case| {
        run_case(case, base, &train, ds, |s| on_epoch(case.case_id, s))
    }))
}

pub(crate) fn isolated(cases: &[AblationCase], mut run: impl FnMut(AblationCase) -> Result<AblationRow>) -> AblationTable {
    let mut table = AblationTable::default();
    for &case in cases {
        let r = panic::catch_unwind(AssertUnwindSafe(|| run(case)));
        table.rows.push(match r {
            Ok(Ok(row)) => row,
            Ok(Err(e)) => AblationRow::failed(case, e.to_string()),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".to_string());
                AblationRow::failed(case, format!("panicked: {msg}"))
            }
        });
    }
    table
}
