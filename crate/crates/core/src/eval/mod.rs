//! Enhancement of waveforms, timing, corpus evaluation and ablations.

pub mod ablation;
pub mod metrics;
pub mod report;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use crate::dsp::{self, RealSpec, Waveform};
use crate::error::{Error, Result};
use crate::filter::ActionMode;
use crate::network::{Model, Routing};
use crate::synth::{Dataset, ManifestEntry, MixRule, Split};
use crate::train::load_checkpoint;

pub use ablation::{parse_cases, run_ablation, AblationCase, AblationRow, AblationTable};
pub use metrics::{si_sdr, stoi};
pub use report::{Aggregate, Failure, MetricReport, UtteranceMetrics};

/// Argmax routing from the feature filter. Unrouted fusions ignore it.
pub fn argmax_routing() -> Routing {
    Routing::Policy {
        mode: ActionMode::Argmax,
        seed: 0,
    }
}

#[derive(Clone, Debug)]
pub struct Enhanced {
    pub waveform: Waveform,
    /// Multiply-accumulates of the executed paths.
    pub flops: u64,
    /// Mean over blocks of the fraction of units routed non-locally.
    pub nonlocal_fraction: f64,
    /// Wall-clock seconds from waveform in to waveform out.
    pub seconds: f64,
}

/// STFT, network, inverse STFT. The output has the input's length.
pub fn enhance(model: &Model, noisy: &Waveform, routing: &Routing) -> Result<Enhanced> {
    if noisy.is_empty() {
        return Err(Error::invalid("cannot enhance an empty waveform"));
    }
    let cfg = model.config.stft();
    let start = Instant::now();
    let y = dsp::spec_to_channels(&dsp::stft(noisy, cfg)?);
    let gain = cfg.window_gain();
    let y = RealSpec::new(y.n_frames(), y.n_bins(), y.data().iter().map(|v| v / gain).collect())?;
    let (s, trace) = model.infer(&y, routing)?;
    let s = RealSpec::new(s.n_frames(), s.n_bins(), s.data().iter().map(|v| v * gain).collect())?;
    let waveform = dsp::istft(&dsp::channels_to_spec(&s, cfg)?, cfg.hop, noisy.len())?;
    let seconds = start.elapsed().as_secs_f64();
    let nonlocal_fraction = if trace.blocks.is_empty() {
        0.0
    } else {
        trace.blocks.iter().map(|b| b.usage.nonlocal).sum::<f64>() / trace.blocks.len() as f64
    };
    Ok(Enhanced {
        waveform,
        flops: trace.flops,
        nonlocal_fraction,
        seconds,
    })
}

/// Enhances one file with argmax routing and writes 16-bit PCM. With a
/// clean reference, the returned row carries quality metrics; without
/// one they are NaN.
pub fn enhance_file(ckpt_dir: &Path, input: &Path, output: &Path, reference: Option<&Path>) -> Result<UtteranceMetrics> {
    let model = load_checkpoint(ckpt_dir)?.model();
    let noisy = dsp::read_wav(input)?;
    let e = enhance(&model, &noisy, &argmax_routing())?;
    dsp::write_wav(output, &e.waveform)?;
    let id = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut row = UtteranceMetrics {
        id,
        noise_kind: String::new(),
        snr_db: None,
        stoi: f64::NAN,
        si_sdr: f64::NAN,
        stoi_noisy: f64::NAN,
        si_sdr_noisy: f64::NAN,
        pesq: None,
        flops: e.flops,
        rtf: e.seconds / noisy.duration_s(),
        nonlocal_fraction: e.nonlocal_fraction,
    };
    if let Some(r) = reference {
        let clean = dsp::read_wav(r)?;
        let written = dsp::read_wav(output)?;
        row.stoi = stoi(&clean, &written)?;
        row.si_sdr = si_sdr(&clean, &written)?;
        row.stoi_noisy = stoi(&clean, &noisy)?;
        row.si_sdr_noisy = si_sdr(&clean, &noisy)?;
    }
    Ok(row)
}

/// Enhancement time over audio duration: the median of `runs` timed runs
/// after one warm-up run.
pub fn measure_rtf(model: &Model, wav: &Waveform, routing: &Routing, runs: usize) -> Result<f64> {
    if runs == 0 {
        return Err(Error::invalid("rtf needs at least one timed run"));
    }
    enhance(model, wav, routing)?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        enhance(model, wav, routing)?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&mut times) / wav.duration_s())
}

/// As [`measure_rtf`] for a saved checkpoint under argmax routing.
pub fn measure_rtf_checkpoint(ckpt_dir: &Path, wav: &Waveform, runs: usize) -> Result<f64> {
    let model = load_checkpoint(ckpt_dir)?.model();
    measure_rtf(&model, wav, &argmax_routing(), runs)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub routing: Routing,
    /// External PESQ binary, called as `<cmd> <clean.wav> <enhanced.wav>`;
    /// the last number it prints is taken as the score.
    pub pesq_cmd: Option<PathBuf>,
    /// Where enhanced WAVs are written, if anywhere.
    pub enhanced_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            routing: argmax_routing(),
            pesq_cmd: None,
            enhanced_dir: None,
        }
    }
}

fn run_pesq(cmd: &Path, clean: &Path, enhanced: &Path) -> Result<f64> {
    let out = Command::new(cmd)
        .arg(clean)
        .arg(enhanced)
        .output()
        .map_err(|e| Error::io(cmd, e))?;
    if !out.status.success() {
        return Err(Error::invalid(format!("pesq command exited with {}", out.status)));
    }
    String::from_utf8_lossy(&out.stdout)
        .split(|c: char| c.is_whitespace() || c == ',' || c == ';' || c == '=')
        .filter_map(|t| t.parse::<f64>().ok())
        .rfind(|v| v.is_finite())
        .ok_or_else(|| Error::invalid("pesq command printed no score"))
}

struct Pending {
    entry: ManifestEntry,
    clean: Waveform,
    noisy: Waveform,
    enhanced: Enhanced,
}

fn snr_of(e: &ManifestEntry) -> Option<f64> {
    match e.mix_rule {
        MixRule::Snr { snr_db } => Some(snr_db),
        MixRule::Fixed { .. } => None,
    }
}

fn noise_label(e: &ManifestEntry) -> String {
    e.noise_kinds
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("+")
}

fn score(p: &Pending) -> Result<UtteranceMetrics> {
    let id = &p.entry.id;
    let wrap = |r: Result<f64>| r.map_err(|e| e.for_entry(id));
    Ok(UtteranceMetrics {
        id: id.clone(),
        noise_kind: noise_label(&p.entry),
        snr_db: snr_of(&p.entry),
        stoi: wrap(stoi(&p.clean, &p.enhanced.waveform))?,
        si_sdr: wrap(si_sdr(&p.clean, &p.enhanced.waveform))?,
        stoi_noisy: wrap(stoi(&p.clean, &p.noisy))?,
        si_sdr_noisy: wrap(si_sdr(&p.clean, &p.noisy))?,
        pesq: None,
        flops: p.enhanced.flops,
        rtf: p.enhanced.seconds / p.noisy.duration_s(),
        nonlocal_fraction: p.enhanced.nonlocal_fraction,
    })
}

/// Applies `f` to every item on all available cores, keeping order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("metric worker panicked"))
            .collect()
    })
}

/// Enhances and scores every entry of `split`. Entries that fail are
/// recorded in the report and do not stop the run.
pub fn evaluate(model: &Model, ds: &Dataset, split: Split, opts: &EvalOptions) -> Result<MetricReport> {
    let entries: Vec<&ManifestEntry> = ds.manifest.split(split).collect();
    if entries.is_empty() {
        return Err(Error::invalid(format!("manifest has no {split} entries")));
    }
    let mut report = MetricReport::default();
    let mut pending = Vec::with_capacity(entries.len());
    for entry in entries {
        let r = ds.load_waveforms(entry).and_then(|(noisy, clean)| {
            let enhanced = enhance(model, &noisy, &opts.routing).map_err(|e| e.for_entry(&entry.id))?;
            Ok(Pending {
                entry: entry.clone(),
                clean,
                noisy,
                enhanced,
            })
        });
        match r {
            Ok(p) => pending.push(p),
            Err(e) => report.failures.push(Failure::new(&entry.id, &e)),
        }
    }
    let pesq_dir = match (&opts.pesq_cmd, &opts.enhanced_dir) {
        (_, Some(d)) => Some(d.clone()),
        (Some(_), None) => Some(std::env::temp_dir().join(format!("sekit-eval-{}", std::process::id()))),
        (None, None) => None,
    };
    if let Some(d) = &pesq_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let scored = par_map(&pending, score);
    for (p, r) in pending.iter().zip(scored) {
        let mut row = match r {
            Ok(row) => row,
            Err(e) => {
                report.failures.push(Failure::new(&p.entry.id, &e));
                continue;
            }
        };
        if let Some(d) = &pesq_dir {
            let out = d.join(format!("{}.wav", p.entry.id));
            let written = dsp::write_wav(&out, &p.enhanced.waveform);
            if let (Some(cmd), Ok(())) = (&opts.pesq_cmd, &written) {
                let clean = ds.root.join(&p.entry.clean_path);
                match run_pesq(cmd, &clean, &out) {
                    Ok(v) => row.pesq = Some(v),
                    Err(e) => report.failures.push(Failure::new(&p.entry.id, &e)),
                }
            }
            if let Err(e) = written {
                report.failures.push(Failure::new(&p.entry.id, &e));
            }
        }
        report.rows.push(row);
    }
    if opts.enhanced_dir.is_none() {
        if let Some(d) = pesq_dir {
            let _ = std::fs::remove_dir_all(d);
        }
    }
    Ok(report)
}
