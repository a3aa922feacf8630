//! STFT analysis/synthesis, SNR-controlled mixing and WAV I/O.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio at [`SAMPLE_RATE`].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform { samples })
    }

    pub fn zeros(len: usize) -> Self {
        Waveform {
            samples: vec![0.0; len],
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.energy() / self.samples.len() as f64).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|v| v * s).collect(),
        }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid(format!("window length {n} < 2")));
    }
    let step = 2.0 * std::f64::consts::PI / n as f64;
    Ok((0..n).map(|i| 0.5 - 0.5 * (step * i as f64).cos()).collect())
}

/// Frame length and hop of the analysis filter bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            frame_len: 512,
            hop: 256,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || self.frame_len % 2 != 0 {
            return Err(Error::invalid(format!(
                "frame_len must be even and >= 2, got {}",
                self.frame_len
            )));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::invalid(format!(
                "hop must be in 1..={}, got {}",
                self.frame_len, self.hop
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Leading zero padding so the first samples are covered by several frames.
    pub fn pad_front(&self) -> usize {
        self.frame_len - self.hop
    }

    /// Frame count for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        (len + self.pad_front()).div_ceil(self.hop)
    }

    /// Root energy of the window; dividing spectra by it puts the network
    /// domain on the same scale as per-sample waveform power.
    pub fn window_gain(&self) -> f64 {
        hann_window(self.frame_len)
            .map(|w| w.iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    values: Vec<Complex64>,
    n_frames: usize,
    config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn new(values: Vec<Complex64>, n_frames: usize, config: StftConfig) -> Result<Self> {
        config.validate()?;
        if n_frames == 0 || values.len() != n_frames * config.n_bins() {
            return Err(Error::invalid(format!(
                "spectrogram needs {} x {} values, got {}",
                n_frames,
                config.n_bins(),
                values.len()
            )));
        }
        Ok(ComplexSpectrogram {
            values,
            n_frames,
            config,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.config.n_bins()
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn frame_len(&self) -> usize {
        self.config.frame_len
    }

    pub fn hop(&self) -> usize {
        self.config.hop
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn get(&self, t: usize, f: usize) -> Complex64 {
        self.values[t * self.n_bins() + f]
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

/// Short-time Fourier transform with a periodic Hann window.
///
/// The signal is zero padded by `frame_len - hop` samples in front and to a
/// whole number of frames at the back; [`istft`] trims the same amount.
pub fn stft(x: &Waveform, config: StftConfig) -> Result<ComplexSpectrogram> {
    config.validate()?;
    if x.is_empty() {
        return Err(Error::invalid("stft of an empty signal"));
    }
    let StftConfig { frame_len, hop } = config;
    let n_frames = config.n_frames(x.len());
    let n_bins = config.n_bins();
    let total = (n_frames - 1) * hop + frame_len;
    let pad = config.pad_front();
    let mut padded = vec![0.0; total];
    padded[pad..pad + x.len()].copy_from_slice(x.samples());
    let window = hann_window(frame_len)?;
    let fft = plans(frame_len).forward;
    let mut buf = vec![Complex64::new(0.0, 0.0); frame_len];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut values = Vec::with_capacity(n_frames * n_bins);
    for t in 0..n_frames {
        let frame = &padded[t * hop..t * hop + frame_len];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex64::new(s * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        values.extend_from_slice(&buf[..n_bins]);
    }
    ComplexSpectrogram::new(values, n_frames, config)
}

/// Inverse STFT by windowed overlap-add with window-square normalization.
pub fn istft(spec: &ComplexSpectrogram, hop: usize, out_len: usize) -> Result<Waveform> {
    if hop != spec.hop() {
        return Err(Error::invalid(format!(
            "istft hop {hop} does not match analysis hop {}",
            spec.hop()
        )));
    }
    let frame_len = spec.frame_len();
    let n_bins = spec.n_bins();
    let n_frames = spec.n_frames();
    let total = (n_frames - 1) * hop + frame_len;
    let window = hann_window(frame_len)?;
    let ifft = plans(frame_len).inverse;
    let mut out = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); frame_len];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let inv_n = 1.0 / frame_len as f64;
    for t in 0..n_frames {
        let row = &spec.values()[t * n_bins..(t + 1) * n_bins];
        buf[..n_bins].copy_from_slice(row);
        // Hermitian completion; DC and Nyquist imaginary parts are dropped.
        buf[0].im = 0.0;
        buf[n_bins - 1].im = 0.0;
        for k in 1..n_bins - 1 {
            buf[frame_len - k] = row[k].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let off = t * hop;
        for (i, &w) in window.iter().enumerate() {
            out[off + i] += buf[i].re * inv_n * w;
            norm[off + i] += w * w;
        }
    }
    let pad = frame_len - hop;
    let samples = (0..out_len)
        .map(|i| {
            let j = i + pad;
            if j < total {
                out[j] / norm[j].max(1e-10)
            } else {
                0.0
            }
        })
        .collect();
    Waveform::new(samples)
}

/// Real/imaginary channel form of a spectrogram, stored channel-major
/// (`[2][T][F]`) to match the network's `[B, 2, T, F]` input layout.
#[derive(Clone, Debug, PartialEq)]
pub struct RealSpec {
    n_frames: usize,
    n_bins: usize,
    data: Vec<f64>,
}

impl RealSpec {
    pub fn new(n_frames: usize, n_bins: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * n_frames * n_bins {
            return Err(Error::invalid(format!(
                "RealSpec needs 2 x {n_frames} x {n_bins} values, got {}",
                data.len()
            )));
        }
        Ok(RealSpec {
            n_frames,
            n_bins,
            data,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, t: usize, f: usize, ch: usize) -> f64 {
        self.data[(ch * self.n_frames + t) * self.n_bins + f]
    }

    /// `[1, 2, T, F]` tensor with every value multiplied by `scale`.
    pub fn to_tensor(&self, scale: f64) -> Tensor {
        let data = self.data.iter().map(|v| v * scale).collect();
        Tensor::new([1, 2, self.n_frames, self.n_bins], data).expect("consistent shape")
    }

    /// Inverse of [`RealSpec::to_tensor`]; the tensor must be `[1, 2, T, F]`.
    pub fn from_tensor(t: &Tensor, scale: f64) -> Result<Self> {
        let [b, c, n_frames, n_bins] = t.dims4()?;
        if b != 1 || c != 2 {
            return Err(Error::invalid(format!(
                "expected [1, 2, T, F] spectrum tensor, got {:?}",
                t.shape()
            )));
        }
        let data = t.data().iter().map(|v| v / scale).collect();
        RealSpec::new(n_frames, n_bins, data)
    }

    pub fn mse(&self, other: &RealSpec) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(Error::invalid("RealSpec shape mismatch"));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(s / self.data.len() as f64)
    }
}

pub fn spec_to_channels(s: &ComplexSpectrogram) -> RealSpec {
    let (t, f) = (s.n_frames(), s.n_bins());
    let mut data = vec![0.0; 2 * t * f];
    let (re, im) = data.split_at_mut(t * f);
    for (i, v) in s.values().iter().enumerate() {
        re[i] = v.re;
        im[i] = v.im;
    }
    RealSpec {
        n_frames: t,
        n_bins: f,
        data,
    }
}

pub fn channels_to_spec(r: &RealSpec, config: StftConfig) -> Result<ComplexSpectrogram> {
    if r.n_bins != config.n_bins() {
        return Err(Error::invalid(format!(
            "RealSpec has {} bins but frame length {} implies {}",
            r.n_bins,
            config.frame_len,
            config.n_bins()
        )));
    }
    let tf = r.n_frames * r.n_bins;
    let values = (0..tf)
        .map(|i| Complex64::new(r.data[i], r.data[tf + i]))
        .collect();
    ComplexSpectrogram::new(values, r.n_frames, config)
}

/// Mixes `noise` into `clean` so the result has the requested SNR. Returns the
/// mixture and the gain applied to the noise.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, f64)> {
    if clean.len() != noise.len() {
        return Err(Error::invalid(format!(
            "length mismatch: clean {} vs noise {}",
            clean.len(),
            noise.len()
        )));
    }
    let (ec, en) = (clean.energy(), noise.energy());
    if ec <= 0.0 || en <= 0.0 {
        return Err(Error::DegenerateInput(
            "mix_at_snr needs nonzero clean and noise energy".into(),
        ));
    }
    let scale = (ec / (en * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = clean
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(s, n)| s + scale * n)
        .collect();
    Ok((Waveform::new(samples)?, scale))
}

pub const DEFAULT_MIX_COEFF: f64 = 0.3;

/// `speech + coeff * noise`.
pub fn mix_fixed(speech: &Waveform, noise: &Waveform, coeff: f64) -> Result<Waveform> {
    if speech.len() != noise.len() {
        return Err(Error::invalid(format!(
            "length mismatch: speech {} vs noise {}",
            speech.len(),
            noise.len()
        )));
    }
    let samples = speech
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(s, n)| s + coeff * n)
        .collect();
    Waveform::new(samples)
}

/// Result of [`measure_snr`]. A residual with zero energy yields
/// `db = +inf` and `infinite = true`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Snr {
    pub db: f64,
    pub infinite: bool,
}

pub fn measure_snr(clean: &Waveform, residual: &Waveform) -> Result<Snr> {
    if clean.len() != residual.len() {
        return Err(Error::invalid("measure_snr: length mismatch"));
    }
    let ec = clean.energy();
    if ec <= 0.0 {
        return Err(Error::DegenerateInput("clean signal has zero energy".into()));
    }
    let er = residual.energy();
    if er <= 0.0 {
        return Ok(Snr {
            db: f64::INFINITY,
            infinite: true,
        });
    }
    Ok(Snr {
        db: 10.0 * (ec / er).log10(),
        infinite: false,
    })
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |msg: String| Error::Wav {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => wav_err(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(wav_err(format!(
            "expected 16-bit PCM mono at {SAMPLE_RATE} Hz, got {} ch, {} Hz, {} bit",
            spec.channels, spec.sample_rate, spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(e.to_string()))?;
    Waveform::new(samples)
}

/// Writes 16-bit PCM; values outside [-1, 1) are clipped.
pub fn write_wav(path: &Path, x: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            msg: other.to_string(),
        },
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in x.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Rounds every sample to the nearest 16-bit PCM level, as a WAV round trip would.
pub fn quantize_pcm16(x: &Waveform) -> Waveform {
    Waveform {
        samples: x
            .samples()
            .iter()
            .map(|s| (s * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0)
            .collect(),
    }
}
