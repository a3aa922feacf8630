//! Shared fixtures for the criterion benches.

use sekit_core::dsp::Waveform;
use sekit_core::network::{InitScheme, Model, NetworkConfig};
use sekit_core::synth::{gen_noise, gen_pseudo_speech, NoiseKind, PseudoSpeechParams};

/// The desk-scale network: default STFT and block count, narrow channels.
pub fn desk_config() -> NetworkConfig {
    NetworkConfig {
        channels: [8, 8, 4],
        ..NetworkConfig::default()
    }
}

pub fn desk_model() -> Model {
    Model::new(desk_config(), InitScheme::Standard, 1).expect("valid desk config")
}

pub fn speech(seconds: f64, seed: u64) -> Waveform {
    let p = PseudoSpeechParams {
        segment_s: seconds,
        ..PseudoSpeechParams::default()
    };
    gen_pseudo_speech(&p, seed).expect("valid speech params")
}

/// Speech plus white noise at 0 dB.
pub fn noisy_speech(seconds: f64, seed: u64) -> (Waveform, Waveform) {
    let clean = speech(seconds, seed);
    let noise = gen_noise(NoiseKind::White, seconds, seed + 1).expect("valid noise");
    let (mix, _) = sekit_core::dsp::mix_at_snr(&clean, &noise, 0.0).expect("mixable");
    (clean, mix)
}
