//! Mono audio clips and WAV file I/O.
//!
//! The reader accepts 16-bit integer PCM and 32-bit IEEE float WAV files,
//! walking RIFF chunks and skipping unknown ones. Multi-channel input is
//! rejected rather than downmixed: the codec is defined on mono signals and a
//! silent downmix would hide caller bugs.

use std::fs;
use std::path::Path;

use crate::error::{CodecError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(CodecError::Audio("empty clip".into()));
        }
        if sample_rate == 0 {
            return Err(CodecError::Audio("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(CodecError::Audio(format!("non-finite sample at index {i}")));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn rd_u16(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| CodecError::Wav("truncated file".into()))
}

fn rd_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| CodecError::Wav("truncated file".into()))
}

/// Read a mono WAV file (PCM-16 or float-32).
pub fn load_audio(path: impl AsRef<Path>) -> Result<AudioClip> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(CodecError::Wav("not a RIFF/WAVE file".into()));
    }

    let mut format: Option<(u16, u16, u32, u16)> = None; // (code, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut pos = 12usize;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = rd_u32(&bytes, pos + 4)? as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(CodecError::Wav(format!(
                "chunk {} overruns file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(CodecError::Wav("fmt chunk too short".into()));
                }
                format = Some((
                    rd_u16(&bytes, body_start)?,
                    rd_u16(&bytes, body_start + 2)?,
                    rd_u32(&bytes, body_start + 4)?,
                    rd_u16(&bytes, body_start + 14)?,
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_start + size]),
            _ => {}
        }
        pos = body_start + size + (size & 1); // chunks are word-aligned
    }

    let (code, channels, rate, bits) =
        format.ok_or_else(|| CodecError::Wav("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| CodecError::Wav("missing data chunk".into()))?;
    if channels != 1 {
        return Err(CodecError::Wav(format!(
            "multi-channel input ({channels} channels); only mono is supported"
        )));
    }

    let samples: Vec<f64> = match (code, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => {
            return Err(CodecError::Wav(format!(
                "unsupported format: code {code}, {bits} bits per sample"
            )))
        }
    };
    AudioClip::new(samples, rate)
}

fn write_wav(path: &Path, format_code: u16, bits: u16, sample_rate: u32, body: &[u8]) -> Result<()> {
    let block_align = bits / 8;
    let byte_rate = sample_rate * block_align as u32;
    let mut out = Vec::with_capacity(44 + body.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + body.len() as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format_code.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(body);
    fs::write(path, out)?;
    Ok(())
}

/// Write a 32-bit float WAV; survives a read round trip bit-exactly at f32.
pub fn save_wav_f32(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let mut body = Vec::with_capacity(clip.samples.len() * 4);
    for &s in &clip.samples {
        body.extend_from_slice(&(s as f32).to_le_bytes());
    }
    write_wav(path.as_ref(), 3, 32, clip.sample_rate, &body)
}

/// Write 16-bit PCM; samples are clamped to [-1, 1] and scaled by 32767.
pub fn save_wav_pcm16(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let mut body = Vec::with_capacity(clip.samples.len() * 2);
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        body.extend_from_slice(&v.to_le_bytes());
    }
    write_wav(path.as_ref(), 1, 16, clip.sample_rate, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(n: usize, sr: u32) -> AudioClip {
        let samples: Vec<f64> = (0..n)
            .map(|i| 0.5 * (std::f64::consts::TAU * 440.0 * i as f64 / sr as f64).sin())
            .collect();
        AudioClip::new(samples, sr).unwrap()
    }

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let clip = tone(1000, 8000);
        save_wav_f32(&path, &clip).unwrap();
        let back = load_audio(&path).unwrap();
        assert_eq!(back.sample_rate, 8000);
        assert_eq!(back.len(), 1000);
        for (a, b) in clip.samples.iter().zip(&back.samples) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn pcm16_round_trip_within_quantization_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let clip = tone(777, 24000);
        save_wav_pcm16(&path, &clip).unwrap();
        let back = load_audio(&path).unwrap();
        assert_eq!(back.len(), 777);
        let max_err = clip
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1.0 / 32767.0 + 1e-9, "max_err {max_err}");
    }

    #[test]
    fn rejects_multichannel() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        // Hand-build a 2-channel PCM16 file.
        let mut body = Vec::new();
        for _ in 0..10 {
            body.extend_from_slice(&1000i16.to_le_bytes());
            body.extend_from_slice(&(-1000i16).to_le_bytes());
        }
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + body.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes());
        out.extend_from_slice(&8000u32.to_le_bytes());
        out.extend_from_slice(&32000u32.to_le_bytes());
        out.extend_from_slice(&4u16.to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        fs::write(&path, out).unwrap();
        let err = load_audio(&path).unwrap_err();
        assert!(err.to_string().contains("multi-channel"), "{err}");
    }

    #[test]
    fn rejects_garbage_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        fs::write(&path, b"not a wav at all").unwrap();
        assert!(load_audio(&path).is_err());
        assert!(load_audio(dir.path().join("absent.wav")).is_err());
    }

    #[test]
    fn clip_rejects_empty_and_non_finite() {
        assert!(AudioClip::new(vec![], 8000).is_err());
        assert!(AudioClip::new(vec![0.0, f64::NAN], 8000).is_err());
        assert!(AudioClip::new(vec![0.0, 1.0], 0).is_err());
    }
}
