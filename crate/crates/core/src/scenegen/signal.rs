//! Synthetic source signals standing in for speech.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::numerics::Rng;

pub(crate) fn fft(x: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::<f64>::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

/// Real part of the inverse DFT, normalized by `1/n`.
pub(crate) fn ifft_real(mut spec: Vec<Complex<f64>>) -> Vec<f64> {
    let n = spec.len();
    FftPlanner::<f64>::new().plan_fft_inverse(n).process(&mut spec);
    spec.into_iter().map(|c| c.re / n as f64).collect()
}

/// Absolute frequency in Hz of DFT bin `k` for a length-`n` transform.
pub(crate) fn bin_hz(k: usize, n: usize, fs: f64) -> f64 {
    let k = if k <= n / 2 { k } else { n - k };
    k as f64 * fs / n as f64
}

pub(crate) fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Syllable lengths and pauses, seconds.
const SYLLABLE: (f64, f64) = (0.12, 0.30);
const PAUSE: (f64, f64) = (0.03, 0.15);
const VOICED_PROB: f64 = 0.8;
/// Fundamental frequency range of voiced syllables, Hz.
const F0: (f64, f64) = (90.0, 250.0);
const HARMONIC_LIMIT_HZ: f64 = 4000.0;
const RAMP_S: f64 = 0.02;
/// Level of the continuous noise bed relative to unit-RMS syllables.
const NOISE_BED: f64 = 0.05;

/// Noise with a spectrum falling as `1/sqrt(f)` between 100 Hz and 4 kHz,
/// raised-cosine band edges, unit RMS.
fn speech_band_noise(rng: &mut Rng, samples: usize, fs: f64) -> Vec<f64> {
    let white = rng.normal_vec(samples, 1.0);
    let mut spec = fft(&white);
    let n = spec.len();
    for (k, c) in spec.iter_mut().enumerate() {
        let f = bin_hz(k, n, fs);
        let edge = |f: f64, lo: f64, hi: f64| 0.5 - 0.5 * (std::f64::consts::PI * ((f - lo) / (hi - lo)).clamp(0.0, 1.0)).cos();
        let gain = if f < 60.0 || f > 5000.0 {
            0.0
        } else {
            edge(f, 60.0, 100.0) * (1.0 - edge(f, 4000.0, 5000.0)) / f.sqrt()
        };
        *c *= gain;
    }
    let mut x = ifft_real(spec);
    let r = rms(&x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v /= r);
    }
    x
}

/// Harmonic series on a linear `f0` glide, amplitudes `~1/sqrt(k)`.
fn voiced(rng: &mut Rng, len: usize, fs: f64) -> Vec<f64> {
    let f0a = rng.uniform_range(F0.0, F0.1);
    let f0b = f0a * rng.uniform_range(0.8, 1.25);
    let harmonics = (HARMONIC_LIMIT_HZ / f0a.max(f0b)).floor().max(1.0) as usize;
    let amps: Vec<f64> = (1..=harmonics).map(|k| rng.uniform_range(0.3, 1.0) / (k as f64).sqrt()).collect();
    let mut phases: Vec<f64> = (0..harmonics).map(|_| rng.uniform_range(0.0, 2.0 * std::f64::consts::PI)).collect();
    (0..len)
        .map(|i| {
            let f0 = f0a + (f0b - f0a) * i as f64 / len as f64;
            let step = 2.0 * std::f64::consts::PI * f0 / fs;
            let mut v = 0.0;
            for (k, (p, a)) in phases.iter_mut().zip(&amps).enumerate() {
                *p += step * (k + 1) as f64;
                v += a * p.sin();
            }
            v
        })
        .collect()
}

/// Speech-like source: syllables separated by pauses, most of them voiced
/// (harmonic with a gliding pitch), the rest noise bursts, over a faint
/// noise bed. Like speech, two such sources rarely overlap in a given
/// time-frequency bin. Unit RMS; fully determined by `seed`.
pub fn synth_source(seed: u64, samples: usize, sample_rate: u32) -> Vec<f64> {
    let mut rng = Rng::labeled(seed, "source-signal");
    let fs = sample_rate as f64;
    let noise = speech_band_noise(&mut rng, samples, fs);
    let mut x: Vec<f64> = noise.iter().map(|v| NOISE_BED * v).collect();
    let mut t = rng.uniform_range(0.0, PAUSE.1);
    while ((t * fs) as usize) < samples {
        let dur = rng.uniform_range(SYLLABLE.0, SYLLABLE.1);
        let start = (t * fs) as usize;
        let end = (((t + dur) * fs) as usize).min(samples);
        let len = end - start;
        let mut seg = if rng.uniform() < VOICED_PROB { voiced(&mut rng, len, fs) } else { noise[start..end].to_vec() };
        let level = rng.uniform_range(0.5, 1.0) / rms(&seg).max(1e-12);
        let ramp = (RAMP_S * fs).max(1.0);
        for (i, v) in seg.iter_mut().enumerate() {
            let edge = (i.min(len - 1 - i) as f64 / ramp).min(1.0);
            *v *= level * 0.5 * (1.0 - (std::f64::consts::PI * edge).cos());
        }
        x[start..end].iter_mut().zip(&seg).for_each(|(o, v)| *o += v);
        t += dur + rng.uniform_range(PAUSE.0, PAUSE.1);
    }
    let r = rms(&x);
    if r > 0.0 {
        x.iter_mut().for_each(|v| *v /= r);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_unit_rms() {
        let a = synth_source(5, 8000, 16000);
        assert_eq!(a, synth_source(5, 8000, 16000));
        assert_ne!(a, synth_source(6, 8000, 16000));
        assert!((rms(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn band_limited() {
        let x = synth_source(1, 16000, 16000);
        let spec = fft(&x);
        let n = spec.len();
        let energy = |lo: f64, hi: f64| -> f64 {
            spec.iter().enumerate().filter(|(k, _)| (lo..hi).contains(&bin_hz(*k, n, 16000.0))).map(|(_, c)| c.norm_sqr()).sum()
        };
        assert!(energy(6000.0, 8001.0) < 1e-3 * energy(100.0, 4000.0));
    }

    #[test]
    fn syllables_and_pauses() {
        let fs = 16000;
        let x = synth_source(3, 4 * fs, fs as u32);
        // 10 ms frame energies: pauses sit near the noise bed, syllables well above it
        let frames: Vec<f64> = x.chunks(160).map(rms).collect();
        let quiet = frames.iter().filter(|&&e| e < 4.0 * NOISE_BED).count();
        let loud = frames.iter().filter(|&&e| e > 0.5).count();
        assert!(quiet > frames.len() / 10, "{quiet}");
        assert!(loud > frames.len() / 3, "{loud}");
    }
}
