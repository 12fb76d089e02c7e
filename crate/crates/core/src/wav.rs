//! RIFF/WAVE reading and writing for 16-bit PCM and 32/64-bit float audio.

use std::path::Path;

use crate::error::{io_err, Error};

/// Multichannel audio with samples scaled to `[-1, 1]` for PCM input.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    pub channels: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
    Float64,
}

impl Waveform {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::Format { what: "WAV file".into(), reason: reason.into() }
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

pub fn decode(bytes: &[u8]) -> Result<Waveform, Error> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(malformed("missing RIFF/WAVE header"));
    }
    let mut pos = 12;
    let mut fmt: Option<(SampleFormat, u16, u32)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = bytes.get(pos + 8..pos + 8 + size).ok_or_else(|| malformed("chunk exceeds file"))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(malformed("short fmt chunk"));
                }
                let mut tag = u16_at(body, 0);
                let channels = u16_at(body, 2);
                let rate = u32_at(body, 4);
                let bits = u16_at(body, 14);
                if tag == 0xFFFE && size >= 26 {
                    tag = u16_at(body, 24);
                }
                let format = match (tag, bits) {
                    (1, 16) => SampleFormat::Pcm16,
                    (3, 32) => SampleFormat::Float32,
                    (3, 64) => SampleFormat::Float64,
                    _ => return Err(malformed(format!("unsupported encoding tag {tag} with {bits} bits"))),
                };
                if channels == 0 {
                    return Err(malformed("zero channels"));
                }
                fmt = Some((format, channels, rate));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos += 8 + size + (size & 1);
    }
    let (format, nch, rate) = fmt.ok_or_else(|| malformed("missing fmt chunk"))?;
    let data = data.ok_or_else(|| malformed("missing data chunk"))?;
    let width = match format {
        SampleFormat::Pcm16 => 2,
        SampleFormat::Float32 => 4,
        SampleFormat::Float64 => 8,
    };
    let frame = width * nch as usize;
    let frames = data.len() / frame;
    let mut channels = vec![Vec::with_capacity(frames); nch as usize];
    for f in 0..frames {
        for (c, ch) in channels.iter_mut().enumerate() {
            let i = f * frame + c * width;
            let v = match format {
                SampleFormat::Pcm16 => i16::from_le_bytes([data[i], data[i + 1]]) as f64 / 32768.0,
                SampleFormat::Float32 => f32::from_le_bytes(data[i..i + 4].try_into().unwrap()) as f64,
                SampleFormat::Float64 => f64::from_le_bytes(data[i..i + 8].try_into().unwrap()),
            };
            ch.push(v);
        }
    }
    Ok(Waveform { sample_rate: rate, channels })
}

pub fn encode(wave: &Waveform, format: SampleFormat) -> Result<Vec<u8>, Error> {
    let nch = wave.channels.len();
    let n = wave.len();
    if nch == 0 || wave.channels.iter().any(|c| c.len() != n) {
        return Err(Error::Invalid { what: "waveform".into(), reason: "channels must be non-empty and equal length".into() });
    }
    let (tag, width): (u16, usize) = match format {
        SampleFormat::Pcm16 => (1, 2),
        SampleFormat::Float32 => (3, 4),
        SampleFormat::Float64 => (3, 8),
    };
    let data_len = n * nch * width;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(nch as u16).to_le_bytes());
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * (nch * width) as u32).to_le_bytes());
    out.extend_from_slice(&((nch * width) as u16).to_le_bytes());
    out.extend_from_slice(&((width * 8) as u16).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..n {
        for ch in &wave.channels {
            let v = ch[i];
            match format {
                SampleFormat::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                SampleFormat::Float32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                SampleFormat::Float64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, Error> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode(&bytes)
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform, format: SampleFormat) -> Result<(), Error> {
    let path = path.as_ref();
    std::fs::write(path, encode(wave, format)?).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone() -> Waveform {
        let a: Vec<f64> = (0..100).map(|i| (i as f64 * 0.3).sin() * 0.5).collect();
        let b: Vec<f64> = a.iter().map(|v| -v).collect();
        Waveform { sample_rate: 16000, channels: vec![a, b] }
    }

    #[test]
    fn float64_is_lossless() {
        let w = tone();
        assert_eq!(decode(&encode(&w, SampleFormat::Float64).unwrap()).unwrap(), w);
    }

    #[test]
    fn pcm16_quantizes_within_half_lsb() {
        let w = tone();
        let r = decode(&encode(&w, SampleFormat::Pcm16).unwrap()).unwrap();
        assert_eq!(r.sample_rate, 16000);
        for (x, y) in w.channels[1].iter().zip(&r.channels[1]) {
            assert!((x - y).abs() <= 0.5 / 32768.0 + 1e-12);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(decode(b"RIFX0000WAVE"), Err(Error::Format { .. })));
        let mut bytes = encode(&tone(), SampleFormat::Pcm16).unwrap();
        bytes[34] = 8; // 8-bit PCM is not supported
        assert!(decode(&bytes).is_err());
    }
}
