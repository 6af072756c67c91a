//! Minimal RIFF/WAVE reader and writer for mono PCM audio.
//!
//! Reads 16-bit integer and 32-bit IEEE float mono files at any sample rate.
//! Writes 16-bit integer PCM only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::Waveform;

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Largest sample value representable after 16-bit export.
pub const PCM16_MAX: f64 = 1.0 - 1.0 / 32768.0;

#[derive(Debug, Clone, Copy)]
enum Encoding {
    Int16,
    Float32,
}

fn fmt_err(chunk: &'static str, detail: impl Into<String>) -> Error {
    Error::WavFormat {
        chunk,
        detail: detail.into(),
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 {
        return Err(fmt_err("RIFF", "file shorter than the 12-byte RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(fmt_err("RIFF", "missing 'RIFF' magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(fmt_err("RIFF", "form type is not 'WAVE'"));
    }

    let mut pos = 12;
    let mut format: Option<(Encoding, u32)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start.checked_add(size).filter(|&e| e <= bytes.len());
        match id {
            b"fmt " => {
                let end = body_end.ok_or_else(|| fmt_err("fmt ", "chunk runs past end of file"))?;
                format = Some(parse_fmt(&bytes[body_start..end])?);
            }
            b"data" => {
                // Some writers leave the data size unset; take what is there.
                let end = body_end.unwrap_or(bytes.len());
                data = Some(&bytes[body_start..end]);
            }
            _ => {}
        }
        pos = body_start.saturating_add(size).saturating_add(size & 1);
    }

    let (encoding, sample_rate) = format.ok_or_else(|| fmt_err("fmt ", "no fmt chunk found"))?;
    let data = data.ok_or_else(|| fmt_err("data", "no data chunk found"))?;
    let samples: Vec<f64> = match encoding {
        Encoding::Int16 => data
            .chunks_exact(2)
            .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
            .collect(),
        Encoding::Float32 => data
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
    };
    if samples.is_empty() {
        return Err(Error::EmptySignal("data chunk holds no samples".into()));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(fmt_err("data", "non-finite float sample"));
    }
    Waveform::new(samples, sample_rate)
}

fn parse_fmt(body: &[u8]) -> Result<(Encoding, u32)> {
    if body.len() < 16 {
        return Err(fmt_err("fmt ", format!("chunk is {} bytes, need 16", body.len())));
    }
    let mut tag = u16_at(body, 0);
    let channels = u16_at(body, 2);
    let sample_rate = u32_at(body, 4);
    let bits = u16_at(body, 14);
    if tag == FORMAT_EXTENSIBLE {
        if body.len() < 26 {
            return Err(fmt_err("fmt ", "extensible format without sub-format GUID"));
        }
        tag = u16_at(body, 24);
    }
    if channels != 1 {
        return Err(Error::ChannelCount(channels));
    }
    if sample_rate == 0 {
        return Err(fmt_err("fmt ", "sample rate is zero"));
    }
    match (tag, bits) {
        (FORMAT_PCM, 16) => Ok((Encoding::Int16, sample_rate)),
        (FORMAT_IEEE_FLOAT, 32) => Ok((Encoding::Float32, sample_rate)),
        (FORMAT_PCM, b) => Err(fmt_err("fmt ", format!("integer PCM with {b} bits per sample"))),
        (FORMAT_IEEE_FLOAT, b) => Err(fmt_err("fmt ", format!("float PCM with {b} bits per sample"))),
        (t, _) => Err(fmt_err("fmt ", format!("audio format tag {t:#06x}"))),
    }
}

/// Quantizes one sample to a 16-bit code, clamping to `[-1, PCM16_MAX]`.
pub fn quantize_pcm16(s: f64) -> i16 {
    (s.clamp(-1.0, PCM16_MAX) * 32768.0).round() as i16
}

pub fn encode_wav(x: &Waveform) -> Vec<u8> {
    let data_len = (x.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&x.sample_rate_hz().to_le_bytes());
    out.extend_from_slice(&(x.sample_rate_hz() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in x.samples() {
        out.extend_from_slice(&quantize_pcm16(s).to_le_bytes());
    }
    out
}

pub fn save_wav(x: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(x)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(tag: u16, channels: u16, rate: u32, bits: u16, data: &[u8]) -> Vec<u8> {
        let block = channels * bits / 8;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * u32::from(block)).to_le_bytes());
        out.extend_from_slice(&block.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn int16_peak_scaling() {
        let data: Vec<u8> = [0i16, 32767, -100].iter().flat_map(|v| v.to_le_bytes()).collect();
        let w = decode_wav(&header(1, 1, 16_000, 16, &data)).unwrap();
        assert_eq!(w.peak(), 32767.0 / 32768.0);
        assert_eq!(w.sample_rate_hz(), 16_000);
    }

    #[test]
    fn one_second_length() {
        let data = vec![0u8; 32_000];
        assert_eq!(decode_wav(&header(1, 1, 16_000, 16, &data)).unwrap().len(), 16_000);
    }

    #[test]
    fn float32_is_read_verbatim() {
        let data: Vec<u8> = [0.25f32, -0.5].iter().flat_map(|v| v.to_le_bytes()).collect();
        let w = decode_wav(&header(3, 1, 8000, 32, &data)).unwrap();
        assert_eq!(w.samples(), &[0.25, -0.5]);
    }

    #[test]
    fn rejects_stereo_and_bad_encodings() {
        let data = vec![0u8; 8];
        assert!(matches!(
            decode_wav(&header(1, 2, 8000, 16, &data)),
            Err(Error::ChannelCount(2))
        ));
        assert!(matches!(
            decode_wav(&header(1, 1, 8000, 24, &data[..6])),
            Err(Error::WavFormat { chunk: "fmt ", .. })
        ));
        assert!(matches!(
            decode_wav(&header(6, 1, 8000, 8, &data)),
            Err(Error::WavFormat { chunk: "fmt ", .. })
        ));
        assert!(matches!(
            decode_wav(b"RIFX0000WAVE"),
            Err(Error::WavFormat { chunk: "RIFF", .. })
        ));
        assert!(matches!(
            decode_wav(&header(1, 1, 8000, 16, &[])),
            Err(Error::EmptySignal(_))
        ));
    }

    #[test]
    fn export_clamps_overshoot() {
        assert_eq!(quantize_pcm16(1.02), i16::MAX);
        assert_eq!(quantize_pcm16(-3.0), i16::MIN);
        assert!(Waveform::new(vec![], 8000).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_one_step(xs in prop::collection::vec(-1.2f64..1.2, 1..256)) {
            let w = Waveform::new(xs.clone(), 22_050).unwrap();
            let back = decode_wav(&encode_wav(&w)).unwrap();
            prop_assert_eq!(back.sample_rate_hz(), 22_050);
            for (a, b) in xs.iter().zip(back.samples()) {
                prop_assert!((a.clamp(-1.0, PCM16_MAX) - b).abs() <= 1.0 / 32768.0);
            }
        }
    }
}
