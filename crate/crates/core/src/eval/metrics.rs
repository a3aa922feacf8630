//! Objective quality metrics: STOI and SI-SDR.

use std::sync::OnceLock;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Internal sample rate of the intelligibility measure.
pub const STOI_RATE: u32 = 10_000;
const FRAME: usize = 256;
const NFFT: usize = 512;
const N_BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
/// Frames per intermediate intelligibility segment (384 ms).
const SEGMENT: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

/// Upper bound reported by [`si_sdr`] for a perfect reconstruction.
pub const SI_SDR_CAP_DB: f64 = 60.0;

fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut term, mut sum) = (1.0, 1.0);
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Kaiser-windowed sinc low-pass for rational resampling by `up / down`,
/// with 60 dB stop-band rejection, normalized to unit DC gain.
fn resample_filter(up: usize, down: usize) -> Vec<f64> {
    let stop = 1.0 / (2 * up.max(down)) as f64;
    let roll_off = stop / 10.0;
    let rejection_db = 60.0;
    let half = ((rejection_db - 8.0) / (28.714 * roll_off)).ceil() as i64;
    let beta = 0.1102 * (rejection_db - 8.7);
    let m = (2 * half) as f64;
    let norm = bessel_i0(beta);
    let h: Vec<f64> = (-half..=half)
        .map(|t| {
            let r = 2.0 * (t + half) as f64 / m - 1.0;
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / norm;
            w * 2.0 * up as f64 * stop * sinc(2.0 * stop * t as f64)
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.into_iter().map(|v| v / s).collect()
}

/// Polyphase resampling by the rational factor `up / down` with a
/// zero-phase FIR, so output sample `m` sits at input time `m * down / up`.
pub fn resample(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    let g = gcd(up, down);
    let (up, down) = (up / g, down / g);
    if up == down {
        return x.to_vec();
    }
    let h = resample_filter(up, down);
    let half = (h.len() - 1) / 2;
    let n_out = (x.len() * up).div_ceil(down);
    let gain = up as f64;
    (0..n_out)
        .map(|m| {
            // y[m] = up * sum_n x[n] h[m*down - n*up + half]
            let t = m * down + half;
            let n_hi = (t / up).min(x.len().saturating_sub(1));
            let n_lo = t.saturating_sub(2 * half).div_ceil(up);
            let mut acc = 0.0;
            for n in n_lo..=n_hi {
                acc += x[n] * h[t - n * up];
            }
            gain * acc
        })
        .collect()
}

/// Symmetric Hann window without zero endpoints.
fn hann_inner(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i + 1) as f64 / (n + 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize, frame: usize, hop: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(frame)).step_by(hop)
}

/// Drops frames whose clean-signal energy is more than `DYN_RANGE_DB` below
/// the loudest frame, and re-synthesizes both signals by overlap-add.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hop = FRAME / 2;
    let w = hann_inner(FRAME);
    let windowed = |s: &[f64], i: usize| -> Vec<f64> {
        s[i..i + FRAME].iter().zip(&w).map(|(a, b)| a * b).collect()
    };
    let starts: Vec<usize> = frame_starts(x.len(), FRAME, hop).collect();
    let energies: Vec<f64> = starts
        .iter()
        .map(|&i| {
            let n = windowed(x, i).iter().map(|v| v * v).sum::<f64>().sqrt();
            20.0 * (n + EPS).log10()
        })
        .collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| max - DYN_RANGE_DB - e < 0.0)
        .map(|(&i, _)| i)
        .collect();
    if keep.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let len = (keep.len() - 1) * hop + FRAME;
    let mut xo = vec![0.0; len];
    let mut yo = vec![0.0; len];
    for (k, &i) in keep.iter().enumerate() {
        let (fx, fy) = (windowed(x, i), windowed(y, i));
        for j in 0..FRAME {
            xo[k * hop + j] += fx[j];
            yo[k * hop + j] += fy[j];
        }
    }
    (xo, yo)
}

/// Band index ranges `[lo, hi)` of the one-third octave filterbank over the
/// `NFFT / 2 + 1` bins.
fn third_octave_bands() -> &'static [(usize, usize)] {
    static BANDS: OnceLock<Vec<(usize, usize)>> = OnceLock::new();
    BANDS.get_or_init(|| {
        let n_bins = NFFT / 2 + 1;
        let freqs: Vec<f64> = (0..n_bins)
            .map(|k| k as f64 * STOI_RATE as f64 / NFFT as f64)
            .collect();
        let nearest = |target: f64| {
            let mut best = 0;
            for (k, f) in freqs.iter().enumerate() {
                if (f - target).powi(2) < (freqs[best] - target).powi(2) {
                    best = k;
                }
            }
            best
        };
        (0..N_BANDS)
            .map(|k| {
                let k = k as f64;
                let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
                let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
                (nearest(lo), nearest(hi))
            })
            .collect()
    })
}

/// One-third octave band envelopes, `[band][frame]`.
fn band_envelopes(x: &[f64]) -> Vec<Vec<f64>> {
    let w = hann_inner(FRAME);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(NFFT);
    let bands = third_octave_bands();
    let starts: Vec<usize> = frame_starts(x.len(), FRAME, FRAME / 2).collect();
    let mut env: Vec<Vec<f64>> = (0..N_BANDS).map(|_| Vec::with_capacity(starts.len())).collect();
    let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
    for i in starts {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for j in 0..FRAME {
            buf[j] = Complex64::new(x[i + j] * w[j], 0.0);
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            let p: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            env[b].push(p.sqrt());
        }
    }
    env
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Short-time objective intelligibility of `processed` against `clean`,
/// both 16 kHz. The result is clamped to `[0, 1]`.
pub fn stoi(clean: &Waveform, processed: &Waveform) -> Result<f64> {
    if clean.len() != processed.len() {
        return Err(Error::invalid(format!(
            "stoi: length mismatch ({} vs {})",
            clean.len(),
            processed.len()
        )));
    }
    if clean.sample_rate() != SAMPLE_RATE || processed.sample_rate() != SAMPLE_RATE {
        return Err(Error::invalid("stoi: inputs must be 16 kHz"));
    }
    if clean.len() < SAMPLE_RATE as usize / 2 {
        return Err(Error::invalid("stoi: inputs shorter than 0.5 s"));
    }
    let up = STOI_RATE as usize;
    let down = SAMPLE_RATE as usize;
    let x = resample(clean.samples(), up, down);
    let y = resample(processed.samples(), up, down);
    let (x, y) = remove_silent_frames(&x, &y);
    let xe = band_envelopes(&x);
    let ye = band_envelopes(&y);
    let n_frames = xe[0].len();
    if n_frames < SEGMENT {
        return Err(Error::invalid(format!(
            "stoi: only {n_frames} active frames after silence removal, need {SEGMENT}"
        )));
    }
    let clip = 10f64.powf(-BETA_DB / 20.0);
    let n_seg = n_frames - SEGMENT + 1;
    let mut total = 0.0;
    for m in SEGMENT..=n_frames {
        for b in 0..N_BANDS {
            let xs = &xe[b][m - SEGMENT..m];
            let ys = &ye[b][m - SEGMENT..m];
            let alpha = norm(xs) / (norm(ys) + EPS);
            let yp: Vec<f64> = ys
                .iter()
                .zip(xs)
                .map(|(yv, xv)| (alpha * yv).min(xv * (1.0 + clip)))
                .collect();
            let my = yp.iter().sum::<f64>() / SEGMENT as f64;
            let mx = xs.iter().sum::<f64>() / SEGMENT as f64;
            let yc: Vec<f64> = yp.iter().map(|v| v - my).collect();
            let xc: Vec<f64> = xs.iter().map(|v| v - mx).collect();
            let (ny, nx) = (norm(&yc) + EPS, norm(&xc) + EPS);
            total += yc.iter().zip(&xc).map(|(a, b)| (a / ny) * (b / nx)).sum::<f64>();
        }
    }
    Ok((total / (n_seg * N_BANDS) as f64).clamp(0.0, 1.0))
}

/// Scale-invariant signal-to-distortion ratio in dB, clamped to
/// `±`[`SI_SDR_CAP_DB`].
pub fn si_sdr(clean: &Waveform, processed: &Waveform) -> Result<f64> {
    if clean.len() != processed.len() {
        return Err(Error::invalid(format!(
            "si_sdr: length mismatch ({} vs {})",
            clean.len(),
            processed.len()
        )));
    }
    let (s, y) = (clean.samples(), processed.samples());
    let energy: f64 = s.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::invalid("si_sdr: clean signal is all zeros"));
    }
    let dot: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
    let a = dot / energy;
    let target: f64 = a * a * energy;
    let residual: f64 = s.iter().zip(y).map(|(sv, yv)| (yv - a * sv).powi(2)).sum();
    if residual <= 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / residual).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}
