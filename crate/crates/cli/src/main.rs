use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use sekit_core::config::Settings;
use sekit_core::dsp;
use sekit_core::eval::{self, AblationCase, EvalOptions};
use sekit_core::filter::ActionMode;
use sekit_core::network::Routing;
use sekit_core::synth::{build_dataset, Dataset, Split};
use sekit_core::train::{load_checkpoint, save_checkpoint, stage_dir, EpochStats, TrainSet, Trainer};

#[derive(Parser)]
#[command(name = "sekit", version, about = "Policy-routed dual-attention speech enhancement")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus and its manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone (stage 1) or the feature filter (stage 2).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to continue from. Stage 2 defaults to `<out_dir>/stage1`.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split of a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Manifest file or corpus directory.
        #[arg(long)]
        manifest: PathBuf,
        /// External PESQ program, run as `<exe> <clean.wav> <enhanced.wav>`.
        #[arg(long)]
        pesq_cmd: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = RoutingArg::Policy)]
        routing: RoutingArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Report directory (default `<ckpt>/eval`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also keep the enhanced WAVs here.
        #[arg(long)]
        enhanced_dir: Option<PathBuf>,
    },
    /// Enhance one WAV file.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Clean reference; prints STOI and SI-SDR when given.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Real-time factor of a checkpoint on one WAV file.
    Rtf {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
    /// Train and score ablation cases under one budget and seed.
    Ablate {
        /// Case ids: `0..9`, `0,3,5`, `0,6..9`. Ranges are inclusive.
        #[arg(long, default_value = "0..9")]
        cases: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RoutingArg {
    /// Argmax of the feature filter.
    Policy,
    /// Sampled from the feature filter.
    Sample,
    Random,
    Local,
    Nonlocal,
}

impl RoutingArg {
    fn routing(self) -> Routing {
        match self {
            RoutingArg::Policy => eval::argmax_routing(),
            RoutingArg::Sample => Routing::Policy {
                mode: ActionMode::Sample,
                seed: 0,
            },
            RoutingArg::Random => Routing::Random { seed: 0 },
            RoutingArg::Local => Routing::AllLocal,
            RoutingArg::Nonlocal => Routing::AllNonLocal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn load_settings(path: &Path) -> Result<Settings> {
    Settings::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn log_epoch(s: &EpochStats) {
    if s.stage == 1 {
        eprintln!("stage 1 epoch {:>4}  loss {:.5}  mse {:.5}", s.epoch, s.loss, s.mse);
    } else {
        eprintln!(
            "stage 2 epoch {:>4}  mse {:.5}  non-local {:.3}  reward {:+.4}",
            s.epoch, s.mse, s.nonlocal_fraction, s.reward
        );
    }
}

fn synth(config: &Path, out: &Path) -> Result<()> {
    let s = load_settings(config)?;
    let m = build_dataset(&s.data, out).with_context(|| format!("building corpus in {}", out.display()))?;
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split}: {} entries", m.split(split).count());
    }
    println!("manifest written to {}", out.join("manifest.json").display());
    Ok(())
}

fn train(stage: u8, config: &Path, resume: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let s = load_settings(config)?;
    let data = s.data_dir.as_deref().context("config has no data_dir")?;
    let out = out
        .map(Path::to_path_buf)
        .or(s.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let mut cfg = s.train.clone();
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let resume = match (stage, resume) {
        (_, Some(p)) => Some(p.to_path_buf()),
        (2, None) => Some(stage_dir(&out, 1)),
        _ => None,
    };
    let mut t = match &resume {
        Some(p) => {
            let mut ckpt = load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            if ckpt.config.network != cfg.network {
                bail!("network settings in {} differ from the checkpoint's", config.display());
            }
            ckpt.config = cfg;
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::new(cfg)?,
    };
    let ds = Dataset::open(data).with_context(|| format!("opening corpus {}", data.display()))?;
    let set = TrainSet::from_dataset(&ds, Split::Train, t.config.network.stft())?;
    let epochs = if stage == 1 {
        t.config.stage1_epochs
    } else {
        t.config.stage2_epochs
    };
    let start = Instant::now();
    t.fit(stage, &set, epochs, log_epoch)?;
    let dir = stage_dir(&out, stage);
    save_checkpoint(&t.checkpoint(), &dir)?;
    println!(
        "stage {stage}: {epochs} epochs on {} pairs in {:.1} s, checkpoint {}",
        set.len(),
        start.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    ckpt: &Path,
    manifest: &Path,
    pesq_cmd: Option<PathBuf>,
    routing: RoutingArg,
    split: SplitArg,
    out: Option<PathBuf>,
    enhanced_dir: Option<PathBuf>,
) -> Result<()> {
    let model = load_checkpoint(ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?
        .model();
    let ds = Dataset::open(manifest).with_context(|| format!("opening {}", manifest.display()))?;
    let opts = EvalOptions {
        routing: routing.routing(),
        pesq_cmd,
        enhanced_dir,
    };
    let report = eval::evaluate(&model, &ds, split.into(), &opts)?;
    let out = out.unwrap_or_else(|| ckpt.join("eval"));
    let files = report.write(&out)?;
    let a = report.aggregate();
    println!(
        "{} utterances: STOI {:.4} (noisy {:.4})  SI-SDR {:.2} dB (noisy {:.2})  non-local {:.3}",
        a.count, a.stoi, a.stoi_noisy, a.si_sdr, a.si_sdr_noisy, a.nonlocal_fraction
    );
    if let Some(p) = a.pesq {
        println!("PESQ {p:.3} over {} utterances", a.pesq_count);
    }
    for f in &report.failures {
        eprintln!("failed {}: {}", f.id, f.error);
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn enhance(ckpt: &Path, input: &Path, out: &Path, reference: Option<&Path>) -> Result<()> {
    let row = eval::enhance_file(ckpt, input, out, reference)?;
    println!("wrote {} (rtf {:.4}, non-local {:.3})", out.display(), row.rtf, row.nonlocal_fraction);
    if reference.is_some() {
        println!(
            "STOI {:.4} (input {:.4})  SI-SDR {:.2} dB (input {:.2})",
            row.stoi, row.stoi_noisy, row.si_sdr, row.si_sdr_noisy
        );
    }
    Ok(())
}

fn rtf(ckpt: &Path, input: &Path, runs: usize) -> Result<()> {
    let wav = dsp::read_wav(input).with_context(|| format!("reading {}", input.display()))?;
    let r = eval::measure_rtf_checkpoint(ckpt, &wav, runs)?;
    println!("rtf {r:.4} ({:.2} s of audio, median of {runs} runs)", wav.duration_s());
    Ok(())
}

fn ablate(cases: &str, config: &Path, out: Option<PathBuf>) -> Result<()> {
    let s = load_settings(config)?;
    let data = s.data_dir.as_deref().context("config has no data_dir")?;
    let ds = Dataset::open(data).with_context(|| format!("opening corpus {}", data.display()))?;
    let cases = eval::parse_cases(cases)?
        .into_iter()
        .map(AblationCase::get)
        .collect::<sekit_core::Result<Vec<_>>>()?;
    let table = eval::run_ablation(&cases, &s.train, &ds, |id, e| {
        if e.epoch % 10 == 0 {
            eprint!("case {id}: ");
            log_epoch(e);
        }
    })?;
    let out = out
        .or(s.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
        .join("ablation");
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("ablation.csv"), table.to_csv()?)?;
    std::fs::write(out.join("ablation.json"), table.to_json()?)?;
    println!("case  fusion          N  params   MACs/utt     STOI    SI-SDR  non-local");
    for r in &table.rows {
        match &r.error {
            Some(e) => println!("{:>4}  failed: {e}", r.case.case_id),
            None => println!(
                "{:>4}  {:<14} {:>2} {:>7} {:>10.3e} {:>8.4} {:>9.2} {:>10.3}",
                r.case.case_id, r.case.fusion, r.case.n_blocks, r.n_params, r.flops, r.stoi, r.si_sdr, r.nonlocal_fraction
            ),
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth { config, out } => synth(&config, &out),
        Cmd::Train {
            stage,
            config,
            resume,
            seed,
            out,
        } => train(stage, &config, resume.as_deref(), seed, out.as_deref()),
        Cmd::Eval {
            ckpt,
            manifest,
            pesq_cmd,
            routing,
            split,
            out,
            enhanced_dir,
        } => evaluate(&ckpt, &manifest, pesq_cmd, routing, split, out, enhanced_dir),
        Cmd::Enhance {
            ckpt,
            input,
            out,
            reference,
        } => enhance(&ckpt, &input, &out, reference.as_deref()),
        Cmd::Rtf { ckpt, input, runs } => rtf(&ckpt, &input, runs),
        Cmd::Ablate { cases, config, out } => ablate(&cases, &config, out),
    }
}
