//! Seeded pseudo-speech and noise generators plus on-disk dataset manifests.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, RealSpec, StftConfig, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoSpeechParams {
    pub f0_min: f64,
    pub f0_max: f64,
    pub n_harmonics: usize,
    pub am_rate: f64,
    pub segment_s: f64,
}

impl Default for PseudoSpeechParams {
    fn default() -> Self {
        PseudoSpeechParams {
            f0_min: 90.0,
            f0_max: 300.0,
            n_harmonics: 12,
            am_rate: 4.0,
            segment_s: 4.0,
        }
    }
}

impl PseudoSpeechParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.f0_min > 50.0 && self.f0_max < 500.0 && self.f0_min <= self.f0_max) {
            return Err(Error::invalid(format!(
                "f0 range [{}, {}] must lie within (50, 500)",
                self.f0_min, self.f0_max
            )));
        }
        if self.n_harmonics == 0 {
            return Err(Error::invalid("n_harmonics must be >= 1"));
        }
        if !(self.am_rate > 0.0) || !(self.segment_s > 0.0) {
            return Err(Error::invalid("am_rate and segment_s must be positive"));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.segment_s * SAMPLE_RATE as f64).round() as usize
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent stream seed from a base seed and a salt.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    splitmix(base ^ splitmix(salt))
}

/// Voiced/silent segmentation of `n` samples: short raised-cosine ramps around
/// voiced spans of 0.25-0.9 s separated by 0.12-0.3 s gaps.
fn word_gate(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let ramp = (0.01 * sr) as usize;
    let mut gate = vec![0.0; n];
    let mut pos = (rng.gen_range(0.0..0.15) * sr) as usize;
    while pos < n {
        let voiced = (rng.gen_range(0.25..0.9) * sr) as usize;
        let end = (pos + voiced).min(n);
        for (i, g) in gate[pos..end].iter_mut().enumerate() {
            let from_start = i;
            let to_end = end - pos - 1 - i;
            let edge = from_start.min(to_end);
            *g = if edge >= ramp {
                1.0
            } else {
                0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
            };
        }
        pos = end + (rng.gen_range(0.12..0.3) * sr) as usize;
    }
    gate
}

/// Harmonic pseudo-speech: drifting f0, decaying harmonics, syllabic
/// amplitude modulation and silent gaps; peak-normalized to 0.9.
pub fn gen_pseudo_speech(params: &PseudoSpeechParams, seed: u64) -> Result<Waveform> {
    params.validate()?;
    let n = params.n_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SAMPLE_RATE as f64;
    let (lo, hi) = (params.f0_min, params.f0_max);
    let center = rng.gen_range(lo..=hi);
    let depth = 0.15 * center;
    let drift_rate = rng.gen_range(0.3..1.5);
    let drift_phase = rng.gen_range(0.0..2.0 * PI);
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let tilt = rng.gen_range(0.9..1.4);
    let amps: Vec<f64> = (1..=params.n_harmonics)
        .map(|k| rng.gen_range(0.7..1.0) / (k as f64).powf(tilt))
        .collect();
    let phases: Vec<f64> = (0..params.n_harmonics)
        .map(|_| rng.gen_range(0.0..2.0 * PI))
        .collect();
    let gate = word_gate(n, &mut rng);
    let mut phase = 0.0;
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let f0 = (center + depth * (2.0 * PI * drift_rate * t + drift_phase).sin()).clamp(lo, hi);
        phase += 2.0 * PI * f0 / sr;
        let mut s = 0.0;
        for (k, (&a, &p)) in amps.iter().zip(&phases).enumerate() {
            let fk = f0 * (k + 1) as f64;
            if fk >= 0.45 * sr {
                break;
            }
            s += a * ((k + 1) as f64 * phase + p).sin();
        }
        let am = 0.6 - 0.4 * (2.0 * PI * params.am_rate * t + am_phase).cos();
        *o = s * am * gate[i];
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.9 / peak);
    }
    Waveform::new(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    /// Resonant band-limited noise with periodic impulsive bursts ("factory").
    FilteredBurst,
    /// Sum of `talkers` independent pseudo-speech streams.
    Babble { talkers: usize },
}

pub const DEFAULT_BABBLE_TALKERS: usize = 6;
/// Cafeteria noise is emulated as babble with fewer talkers.
pub const CAFETERIA_TALKERS: usize = 3;

impl NoiseKind {
    pub fn babble() -> Self {
        NoiseKind::Babble {
            talkers: DEFAULT_BABBLE_TALKERS,
        }
    }

    pub fn cafeteria() -> Self {
        NoiseKind::Babble {
            talkers: CAFETERIA_TALKERS,
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseKind::White => write!(f, "white"),
            NoiseKind::FilteredBurst => write!(f, "filtered_burst"),
            NoiseKind::Babble { talkers } => write!(f, "babble:{talkers}"),
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "white" => return Ok(NoiseKind::White),
            "filtered_burst" | "factory" => return Ok(NoiseKind::FilteredBurst),
            "babble" => return Ok(NoiseKind::babble()),
            "cafeteria" => return Ok(NoiseKind::cafeteria()),
            _ => {}
        }
        if let Some(k) = s.strip_prefix("babble:") {
            let talkers: usize = k
                .parse()
                .map_err(|_| Error::invalid(format!("bad babble talker count in {s:?}")))?;
            if talkers == 0 {
                return Err(Error::invalid("babble needs at least one talker"));
            }
            return Ok(NoiseKind::Babble { talkers });
        }
        Err(Error::invalid(format!("unknown noise kind {s:?}")))
    }
}

fn normalize_rms(mut x: Vec<f64>) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

fn biquad_bandpass(x: &[f64], center: f64, q: f64) -> Vec<f64> {
    let w0 = 2.0 * PI * center / SAMPLE_RATE as f64;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = b0 * v + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = v;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

/// Unit-RMS noise of the given kind, deterministic per seed.
pub fn gen_noise(kind: NoiseKind, duration_s: f64, seed: u64) -> Result<Waveform> {
    if !(duration_s > 0.0) {
        return Err(Error::invalid(format!("noise duration {duration_s} must be > 0")));
    }
    let n = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = match kind {
        NoiseKind::White => (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        NoiseKind::FilteredBurst => {
            let white: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let center = rng.gen_range(500.0..3000.0);
            let band = normalize_rms(biquad_bandpass(&white, center, 2.0));
            let period = (SAMPLE_RATE as f64 / rng.gen_range(3.0..8.0)) as usize;
            let decay = (-1.0 / (0.02 * SAMPLE_RATE as f64)).exp();
            let hum_f = rng.gen_range(50.0..120.0);
            let mut env = 0.0;
            (0..n)
                .map(|i| {
                    if i % period == 0 {
                        env = 3.0;
                    }
                    env *= decay;
                    let hum = 0.3 * (2.0 * PI * hum_f * i as f64 / SAMPLE_RATE as f64).sin();
                    band[i] * (0.4 + env) + hum
                })
                .collect()
        }
        NoiseKind::Babble { talkers } => {
            if talkers == 0 {
                return Err(Error::invalid("babble needs at least one talker"));
            }
            let params = PseudoSpeechParams {
                segment_s: duration_s,
                ..PseudoSpeechParams::default()
            };
            let mut acc = vec![0.0; n];
            for k in 0..talkers {
                let s = gen_pseudo_speech(&params, derive_seed(seed, k as u64 + 1))?;
                let s = normalize_rms(s.into_samples());
                acc.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            }
            acc
        }
    };
    Waveform::new(normalize_rms(samples))
}

/// Unit-RMS sum of one or more noise kinds, each drawn from its own stream.
pub fn gen_noise_mix(kinds: &[NoiseKind], duration_s: f64, seed: u64) -> Result<Waveform> {
    match kinds {
        [] => Err(Error::invalid("at least one noise kind is required")),
        [k] => gen_noise(*k, duration_s, seed),
        _ => {
            let mut acc: Option<Vec<f64>> = None;
            for (i, k) in kinds.iter().enumerate() {
                let w = gen_noise(*k, duration_s, derive_seed(seed, 1000 + i as u64))?;
                match &mut acc {
                    Some(a) => a.iter_mut().zip(w.samples()).for_each(|(a, b)| *a += b),
                    None => acc = Some(w.into_samples()),
                }
            }
            Waveform::new(normalize_rms(acc.unwrap_or_default()))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum MixRule {
    Snr { snr_db: f64 },
    Fixed { coeff: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub clean_seed: u64,
    pub noise_kinds: Vec<NoiseKind>,
    pub noise_seed: u64,
    pub mix_rule: MixRule,
    /// Common gain applied to clean, noise and mixture to keep the mixture
    /// within 16-bit range.
    pub gain: f64,
    pub clean_path: String,
    pub noise_path: String,
    pub mix_path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub sample_rate: u32,
    pub speech: PseudoSpeechParams,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                found: m.schema_version,
                expected: MANIFEST_SCHEMA_VERSION,
            });
        }
        let mut seen = HashSet::new();
        for e in &m.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::invalid(format!("duplicate manifest id {:?}", e.id)));
            }
        }
        Ok(m)
    }
}

/// Corpus layout and mixing protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub speech: PseudoSpeechParams,
    /// SNR levels cycled over entries; ignored by the fixed rule.
    pub snr_levels: Vec<f64>,
    /// SNR levels for the test split; empty means `snr_levels`.
    #[serde(default)]
    pub test_snr_levels: Vec<f64>,
    /// Use `mix = speech + fixed_coeff * noise` instead of SNR targeting.
    pub fixed_mix: bool,
    pub fixed_coeff: f64,
    /// Noise kinds cycled over entries.
    pub noise_kinds: Vec<NoiseKind>,
    /// Number of kinds summed per entry (1 to 3).
    pub kinds_per_entry: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_train: 200,
            n_val: 20,
            n_test: 20,
            speech: PseudoSpeechParams::default(),
            snr_levels: vec![-5.0, -4.0, -3.0, -2.0, -1.0, 0.0, 5.0],
            test_snr_levels: Vec::new(),
            fixed_mix: false,
            fixed_coeff: dsp::DEFAULT_MIX_COEFF,
            noise_kinds: vec![NoiseKind::White, NoiseKind::FilteredBurst, NoiseKind::babble()],
            kinds_per_entry: 1,
            seed: 0,
        }
    }
}

/// A generated (clean, noise, mixture) triplet with `mix = clean + noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub clean: Waveform,
    pub noise: Waveform,
    pub mix: Waveform,
    pub gain: f64,
}

/// Builds the manifest entries for `cfg` without generating audio.
pub fn plan_entries(cfg: &DatasetConfig) -> Result<Vec<ManifestEntry>> {
    cfg.speech.validate()?;
    let total = cfg.n_train + cfg.n_val + cfg.n_test;
    if total > 0 {
        if cfg.noise_kinds.is_empty() {
            return Err(Error::invalid("noise_kinds must not be empty"));
        }
        if !cfg.fixed_mix && cfg.snr_levels.is_empty() {
            return Err(Error::invalid("snr_levels must not be empty"));
        }
        if !(1..=3).contains(&cfg.kinds_per_entry) {
            return Err(Error::invalid("kinds_per_entry must be 1, 2 or 3"));
        }
    }
    let splits = [
        (Split::Train, cfg.n_train),
        (Split::Val, cfg.n_val),
        (Split::Test, cfg.n_test),
    ];
    let mut entries = Vec::with_capacity(total);
    let mut global = 0usize;
    for (split, count) in splits {
        for i in 0..count {
            let id = format!("{split}-{i:04}");
            let k = cfg.noise_kinds.len();
            let noise_kinds = (0..cfg.kinds_per_entry.min(k))
                .map(|j| cfg.noise_kinds[(global + j) % k])
                .collect();
            let mix_rule = if cfg.fixed_mix {
                MixRule::Fixed {
                    coeff: cfg.fixed_coeff,
                }
            } else {
                let levels = if split == Split::Test && !cfg.test_snr_levels.is_empty() {
                    &cfg.test_snr_levels
                } else {
                    &cfg.snr_levels
                };
                MixRule::Snr {
                    snr_db: levels[i % levels.len()],
                }
            };
            entries.push(ManifestEntry {
                clean_seed: derive_seed(cfg.seed, 2 * global as u64),
                noise_seed: derive_seed(cfg.seed, 2 * global as u64 + 1),
                clean_path: format!("clean/{id}.wav"),
                noise_path: format!("noise/{id}.wav"),
                mix_path: format!("mix/{id}.wav"),
                id,
                split,
                noise_kinds,
                mix_rule,
                gain: 1.0,
            });
            global += 1;
        }
    }
    Ok(entries)
}

/// Synthesizes the audio for one entry. `noise` is returned already scaled so
/// that `mix = clean + noise`.
pub fn generate_entry(entry: &ManifestEntry, speech: &PseudoSpeechParams) -> Result<Triplet> {
    let clean = gen_pseudo_speech(speech, entry.clean_seed)?;
    let raw = gen_noise_mix(&entry.noise_kinds, speech.segment_s, entry.noise_seed)?;
    let raw = if raw.len() == clean.len() {
        raw
    } else {
        let mut s = raw.into_samples();
        s.resize(clean.len(), 0.0);
        Waveform::new(s)?
    };
    let (mix, scale) = match entry.mix_rule {
        MixRule::Snr { snr_db } => dsp::mix_at_snr(&clean, &raw, snr_db)?,
        MixRule::Fixed { coeff } => (dsp::mix_fixed(&clean, &raw, coeff)?, coeff),
    };
    let noise = raw.scaled(scale);
    let peak = mix.peak();
    let gain = if peak > 0.99 { 0.99 / peak } else { 1.0 };
    Ok(Triplet {
        clean: clean.scaled(gain),
        noise: noise.scaled(gain),
        mix: mix.scaled(gain),
        gain,
    })
}

/// Generates every entry of `cfg` under `out_dir` and writes the manifest.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let mut entries = plan_entries(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if !entries.is_empty() {
        for sub in ["clean", "noise", "mix"] {
            let d = out_dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    for entry in &mut entries {
        let id = entry.id.clone();
        let trip = generate_entry(entry, &cfg.speech).map_err(|e| e.for_entry(&id))?;
        entry.gain = trip.gain;
        for (rel, w) in [
            (&entry.clean_path, &trip.clean),
            (&entry.noise_path, &trip.noise),
            (&entry.mix_path, &trip.mix),
        ] {
            dsp::write_wav(&out_dir.join(rel), w).map_err(|e| e.for_entry(&id))?;
        }
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        sample_rate: SAMPLE_RATE,
        speech: cfg.speech.clone(),
        entries,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// A manifest together with the directory its relative paths resolve against.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Opens a manifest file, or `manifest.json` inside a directory.
    pub fn open(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let manifest = DatasetManifest::load(&file)?;
        let root = file
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Dataset { root, manifest })
    }

    /// `(noisy, clean)` waveforms of one entry.
    pub fn load_waveforms(&self, entry: &ManifestEntry) -> Result<(Waveform, Waveform)> {
        let noisy = dsp::read_wav(&self.root.join(&entry.mix_path)).map_err(|e| e.for_entry(&entry.id))?;
        let clean =
            dsp::read_wav(&self.root.join(&entry.clean_path)).map_err(|e| e.for_entry(&entry.id))?;
        if noisy.len() != clean.len() {
            return Err(Error::invalid("noisy/clean length mismatch").for_entry(&entry.id));
        }
        Ok((noisy, clean))
    }

    /// `(noisy, clean)` spectra of one entry.
    pub fn load_pair(&self, entry: &ManifestEntry, stft: StftConfig) -> Result<(RealSpec, RealSpec)> {
        let (noisy, clean) = self.load_waveforms(entry)?;
        let ns = dsp::stft(&noisy, stft).map_err(|e| e.for_entry(&entry.id))?;
        let cs = dsp::stft(&clean, stft).map_err(|e| e.for_entry(&entry.id))?;
        Ok((dsp::spec_to_channels(&ns), dsp::spec_to_channels(&cs)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft;

    fn short() -> PseudoSpeechParams {
        PseudoSpeechParams {
            segment_s: 1.0,
            ..PseudoSpeechParams::default()
        }
    }

    fn band_energy(x: &Waveform, lo: f64, hi: f64) -> f64 {
        let s = stft(x, StftConfig::default()).unwrap();
        let bin_hz = SAMPLE_RATE as f64 / 512.0;
        s.values()
            .chunks(s.n_bins())
            .flat_map(|row| row.iter().enumerate())
            .filter(|(k, _)| {
                let f = *k as f64 * bin_hz;
                f >= lo && f < hi
            })
            .map(|(_, v)| v.norm_sqr())
            .sum()
    }

    #[test]
    fn pseudo_speech_is_deterministic_and_peak_normalized() {
        let p = PseudoSpeechParams::default();
        let a = gen_pseudo_speech(&p, 5).unwrap();
        assert_eq!(a, gen_pseudo_speech(&p, 5).unwrap());
        assert_ne!(a, gen_pseudo_speech(&p, 6).unwrap());
        assert!((a.peak() - 0.9).abs() < 1e-12);
        assert_eq!(a.len(), 64_000);
    }

    #[test]
    fn pseudo_speech_is_low_band() {
        let x = gen_pseudo_speech(&PseudoSpeechParams::default(), 11).unwrap();
        let hi = band_energy(&x, 4000.0, 8001.0);
        let all = band_energy(&x, 0.0, 8001.0);
        assert!(hi < 0.1 * all, "high-band fraction {}", hi / all);
    }

    #[test]
    fn pseudo_speech_has_silent_gaps() {
        for seed in 0..5 {
            let x = gen_pseudo_speech(&PseudoSpeechParams::default(), seed).unwrap();
            let frame = 320;
            let energies: Vec<f64> = x
                .samples()
                .chunks(frame)
                .map(|c| c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64)
                .collect();
            let max = energies.iter().cloned().fold(0.0, f64::max);
            let gaps = energies
                .iter()
                .filter(|&&e| e <= max * 1e-3)
                .count();
            assert!(gaps >= 1, "seed {seed}");
        }
    }

    #[test]
    fn params_are_validated() {
        let mut p = PseudoSpeechParams::default();
        p.f0_max = 600.0;
        assert!(gen_pseudo_speech(&p, 0).is_err());
        p = PseudoSpeechParams::default();
        p.n_harmonics = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn noise_is_unit_rms_and_deterministic() {
        for kind in [NoiseKind::White, NoiseKind::FilteredBurst, NoiseKind::babble()] {
            let a = gen_noise(kind, 0.5, 3).unwrap();
            assert!((a.rms() - 1.0).abs() < 1e-12, "{kind}");
            assert_eq!(a, gen_noise(kind, 0.5, 3).unwrap());
        }
        assert!(gen_noise(NoiseKind::White, 0.0, 1).is_err());
    }

    #[test]
    fn white_noise_octaves_are_flat() {
        let x = gen_noise(NoiseKind::White, 4.0, 9).unwrap();
        let bands = [(250.0, 500.0), (500.0, 1000.0), (1000.0, 2000.0), (2000.0, 4000.0), (4000.0, 7900.0)];
        let dens: Vec<f64> = bands
            .iter()
            .map(|&(lo, hi)| 10.0 * (band_energy(&x, lo, hi) / (hi - lo)).log10())
            .collect();
        let mean = dens.iter().sum::<f64>() / dens.len() as f64;
        for d in dens {
            assert!((d - mean).abs() < 3.0);
        }
    }

    fn flatness(x: &Waveform) -> f64 {
        let s = stft(x, StftConfig::default()).unwrap();
        let f = s.n_bins();
        let mut psd = vec![1e-20; f];
        for row in s.values().chunks(f) {
            for (p, v) in psd.iter_mut().zip(row) {
                *p += v.norm_sqr();
            }
        }
        let geo = (psd.iter().map(|p| p.ln()).sum::<f64>() / f as f64).exp();
        geo / (psd.iter().sum::<f64>() / f as f64)
    }

    #[test]
    fn babble_is_less_flat_than_white() {
        let w = gen_noise(NoiseKind::White, 2.0, 1).unwrap();
        let b = gen_noise(NoiseKind::babble(), 2.0, 1).unwrap();
        assert!(flatness(&b) < flatness(&w));
    }

    #[test]
    fn noise_kind_parsing() {
        assert_eq!("white".parse::<NoiseKind>().unwrap(), NoiseKind::White);
        assert_eq!("factory".parse::<NoiseKind>().unwrap(), NoiseKind::FilteredBurst);
        assert_eq!(
            "babble:4".parse::<NoiseKind>().unwrap(),
            NoiseKind::Babble { talkers: 4 }
        );
        assert_eq!("cafeteria".parse::<NoiseKind>().unwrap(), NoiseKind::cafeteria());
        assert!("pink".parse::<NoiseKind>().is_err());
        let k = NoiseKind::babble();
        assert_eq!(k.to_string().parse::<NoiseKind>().unwrap(), k);
    }

    #[test]
    fn built_dataset_honours_snr_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_train: 10,
            n_val: 0,
            n_test: 0,
            speech: short(),
            snr_levels: vec![-5.0, 0.0, 5.0],
            ..DatasetConfig::default()
        };
        let m = build_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 10);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        for e in &m.entries {
            let trip = generate_entry(e, &cfg.speech).unwrap();
            let MixRule::Snr { snr_db } = e.mix_rule else { panic!() };
            let snr = dsp::measure_snr(&trip.clean, &trip.noise).unwrap();
            assert!((snr.db - snr_db).abs() <= 0.01);
            let (noisy, clean) = ds.load_waveforms(e).unwrap();
            assert_eq!(noisy, dsp::quantize_pcm16(&trip.mix));
            assert_eq!(clean, dsp::quantize_pcm16(&trip.clean));
        }
    }

    #[test]
    fn fixed_rule_recovers_coefficient() {
        let cfg = DatasetConfig {
            n_train: 2,
            n_val: 1,
            n_test: 1,
            speech: short(),
            fixed_mix: true,
            ..DatasetConfig::default()
        };
        let entries = plan_entries(&cfg).unwrap();
        let splits: HashSet<_> = entries.iter().map(|e| e.split).collect();
        assert_eq!(splits.len(), 3);
        for e in &entries {
            let clean = gen_pseudo_speech(&cfg.speech, e.clean_seed).unwrap();
            let raw = gen_noise_mix(&e.noise_kinds, 1.0, e.noise_seed).unwrap();
            let trip = generate_entry(e, &cfg.speech).unwrap();
            // least squares of (mix - gain*speech) onto gain*raw noise
            let g = trip.gain;
            let num: f64 = trip
                .mix
                .samples()
                .iter()
                .zip(clean.samples())
                .zip(raw.samples())
                .map(|((m, s), n)| (m - g * s) * g * n)
                .sum();
            let den: f64 = raw.samples().iter().map(|n| (g * n) * (g * n)).sum();
            assert!((num / den - 0.3).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_config_builds_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_train: 0,
            n_val: 0,
            n_test: 0,
            ..DatasetConfig::default()
        };
        let m = build_dataset(&cfg, dir.path()).unwrap();
        assert!(m.entries.is_empty());
        assert!(!dir.path().join("clean").exists());
    }

    #[test]
    fn load_pair_shapes_and_identity_rule() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_train: 1,
            n_val: 0,
            n_test: 0,
            speech: PseudoSpeechParams::default(),
            fixed_mix: true,
            fixed_coeff: 0.0,
            ..DatasetConfig::default()
        };
        build_dataset(&cfg, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let (n, c) = ds.load_pair(&ds.manifest.entries[0], StftConfig::default()).unwrap();
        assert_eq!((n.n_frames(), n.n_bins()), (251, 257));
        assert_eq!(n, c);
    }

    #[test]
    fn corrupt_wav_error_names_entry() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_train: 1,
            n_val: 0,
            n_test: 0,
            speech: short(),
            ..DatasetConfig::default()
        };
        build_dataset(&cfg, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let e = &ds.manifest.entries[0];
        fs::write(dir.path().join(&e.mix_path), b"RIFFjunk").unwrap();
        let err = ds.load_pair(e, StftConfig::default()).unwrap_err();
        assert!(err.to_string().contains(&e.id), "{err}");
        fs::remove_file(dir.path().join(&e.clean_path)).unwrap();
        fs::write(dir.path().join(&e.mix_path), b"").unwrap();
        assert!(ds.load_waveforms(e).is_err());
    }
}
