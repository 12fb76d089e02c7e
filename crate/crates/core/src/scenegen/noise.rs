//! Additive sensor noise: white, pink, and spherically diffuse.

use rustfft::num_complex::Complex;

use super::render::SPEED_OF_SOUND;
use super::signal::{bin_hz, fft, ifft_real};
use super::{LabeledClip, NoiseKind};
use crate::error::{invalid, Error};
use crate::numerics::Rng;

/// Spherically diffuse coherence between two omni microphones `spacing`
/// metres apart at `freq` Hz: `sin(kd) / kd`.
pub fn coherence(freq: f64, spacing: f64) -> f64 {
    let kd = 2.0 * std::f64::consts::PI * freq * spacing / SPEED_OF_SOUND;
    if kd.abs() < 1e-12 {
        1.0
    } else {
        kd.sin() / kd
    }
}

fn pink(rng: &mut Rng, n: usize, fs: f64) -> Vec<f64> {
    let mut spec = fft(&rng.normal_vec(n, 1.0));
    let len = spec.len();
    for (k, c) in spec.iter_mut().enumerate() {
        let f = bin_hz(k, len, fs);
        *c = if f > 0.0 { *c / f.sqrt() } else { Complex::new(0.0, 0.0) };
    }
    ifft_real(spec)
}

/// Two channels of unscaled noise of the given kind.
pub fn noise_pair(kind: NoiseKind, samples: usize, sample_rate: u32, spacing: f64, rng: &mut Rng) -> [Vec<f64>; 2] {
    let fs = sample_rate as f64;
    match kind {
        NoiseKind::White => [rng.normal_vec(samples, 1.0), rng.normal_vec(samples, 1.0)],
        NoiseKind::Pink => [pink(rng, samples, fs), pink(rng, samples, fs)],
        NoiseKind::Diffuse => {
            let a = fft(&rng.normal_vec(samples, 1.0));
            let b = fft(&rng.normal_vec(samples, 1.0));
            let n = a.len();
            let mixed: Vec<Complex<f64>> = (0..n)
                .map(|k| {
                    let g = coherence(bin_hz(k, n, fs), spacing);
                    a[k] * g + b[k] * (1.0 - g * g).max(0.0).sqrt()
                })
                .collect();
            [ifft_real(a), ifft_real(mixed)]
        }
    }
}

fn power(channels: &[Vec<f64>]) -> f64 {
    channels.iter().flatten().map(|v| v * v).sum()
}

/// Returns `clip` with noise added so that the ratio of total signal energy
/// to total noise energy across both channels is exactly `snr_db`.
pub fn add_noise(clip: &LabeledClip, snr_db: f64, kind: NoiseKind, spacing: f64, rng: &mut Rng) -> Result<LabeledClip, Error> {
    let n = clip.waveform[0].len();
    let signal_power = power(&clip.waveform);
    if signal_power <= 0.0 {
        return Err(invalid("clip", "cannot set an SNR against a silent signal"));
    }
    let noise = noise_pair(kind, n, clip.sample_rate, spacing, rng);
    let noise_power = power(&noise);
    let gain = (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut out = clip.clone();
    for (ch, nz) in out.waveform.iter_mut().zip(&noise) {
        ch.iter_mut().zip(nz).for_each(|(x, e)| *x += gain * e);
    }
    Ok(out)
}
