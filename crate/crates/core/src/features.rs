//! STFT frontend: Hann-windowed framewise DFT of each microphone channel,
//! turned into per-microphone log-magnitude and phase planes.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, Error};
use crate::numerics::Tensor;

/// Guard inside the log of the magnitude.
pub const LOG_EPS: f64 = 1e-8;
/// Added to the per-bin variance before dividing.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub dft_size: usize,
}

impl Default for StftConfig {
    /// 32 ms Hann window, 16 ms hop, 512-point DFT at 16 kHz.
    fn default() -> Self {
        StftConfig { sample_rate: 16_000, window_len: 512, hop: 256, dft_size: 512 }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.hop == 0 || self.hop > self.window_len {
            return Err(invalid("STFT config", format!("hop {} must be in 1..={}", self.hop, self.window_len)));
        }
        if self.dft_size < self.window_len || self.dft_size < 2 {
            return Err(invalid("STFT config", format!("dft size {} shorter than window {}", self.dft_size, self.window_len)));
        }
        Ok(())
    }

    /// Retained bins: 1..=dft_size/2 (DC dropped, Nyquist kept).
    pub fn bins(&self) -> usize {
        self.dft_size / 2
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.window_len {
            0
        } else {
            (samples - self.window_len) / self.hop + 1
        }
    }

    /// Time in seconds of the center of frame `t`.
    pub fn frame_center(&self, t: usize) -> f64 {
        (t * self.hop) as f64 / self.sample_rate as f64 + self.window_len as f64 / (2.0 * self.sample_rate as f64)
    }

    /// Centre frequency in Hz of retained bin index `i` (DFT bin `i + 1`).
    pub fn bin_frequency(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.sample_rate as f64 / self.dft_size as f64
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

/// Complex STFT laid out `[channel][bin][frame]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    pub channels: usize,
    pub bins: usize,
    pub frames: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSpectrogram {
    fn index(&self, c: usize, f: usize, t: usize) -> usize {
        (c * self.bins + f) * self.frames + t
    }

    pub fn get(&self, c: usize, f: usize, t: usize) -> Complex<f64> {
        let i = self.index(c, f, t);
        Complex::new(self.re[i], self.im[i])
    }

    pub fn power(&self, c: usize, f: usize, t: usize) -> f64 {
        self.get(c, f, t).norm_sqr()
    }
}

pub fn stft(waveform: &[Vec<f64>], cfg: &StftConfig) -> Result<ComplexSpectrogram, Error> {
    cfg.validate()?;
    let channels = waveform.len();
    if channels == 0 {
        return Err(invalid("waveform", "no channels"));
    }
    let n = waveform[0].len();
    if waveform.iter().any(|c| c.len() != n) {
        return Err(invalid("waveform", "channels differ in length"));
    }
    if n < cfg.window_len {
        return Err(invalid("waveform", format!("{n} samples is shorter than one {}-sample window", cfg.window_len)));
    }
    let frames = cfg.frame_count(n);
    let bins = cfg.bins();
    let window = hann(cfg.window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.dft_size);
    let mut spec = ComplexSpectrogram {
        channels,
        bins,
        frames,
        re: vec![0.0; channels * bins * frames],
        im: vec![0.0; channels * bins * frames],
    };
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.dft_size];
    for (c, signal) in waveform.iter().enumerate() {
        for t in 0..frames {
            let start = t * cfg.hop;
            buf.fill(Complex::new(0.0, 0.0));
            for (j, (s, w)) in signal[start..start + cfg.window_len].iter().zip(&window).enumerate() {
                buf[j] = Complex::new(s * w, 0.0);
            }
            fft.process(&mut buf);
            for f in 0..bins {
                let i = spec.index(c, f, t);
                spec.re[i] = buf[f + 1].re;
                spec.im[i] = buf[f + 1].im;
            }
        }
    }
    Ok(spec)
}

/// Network input: `2C` planes (per microphone: standardized log-magnitude,
/// then raw phase), each `bins × frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    pub planes: usize,
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<f64>,
}

impl FeatureTensor {
    pub fn plane(&self, p: usize) -> &[f64] {
        let n = self.bins * self.frames;
        &self.data[p * n..(p + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.planes, self.bins, self.frames], self.data.clone()).expect("consistent feature shape")
    }
}

pub fn spectral_features(spec: &ComplexSpectrogram) -> FeatureTensor {
    let (bins, frames) = (spec.bins, spec.frames);
    let planes = 2 * spec.channels;
    let mut data = vec![0.0; planes * bins * frames];
    for c in 0..spec.channels {
        let (mag_plane, phase_plane) = (2 * c, 2 * c + 1);
        for f in 0..bins {
            let row: Vec<f64> = (0..frames).map(|t| (spec.get(c, f, t).norm() + LOG_EPS).ln()).collect();
            let mean = row.iter().sum::<f64>() / frames as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / frames as f64;
            let scale = 1.0 / (var + VARIANCE_FLOOR).sqrt();
            for t in 0..frames {
                data[(mag_plane * bins + f) * frames + t] = (row[t] - mean) * scale;
                data[(phase_plane * bins + f) * frames + t] = spec.get(c, f, t).arg();
            }
        }
    }
    FeatureTensor { planes, bins, frames, data }
}

/// Waveform to network features in one call.
pub fn extract(waveform: &[Vec<f64>], cfg: &StftConfig) -> Result<FeatureTensor, Error> {
    Ok(spectral_features(&stft(waveform, cfg)?))
}
