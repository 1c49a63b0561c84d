//! Transmitted code-stream file: the bytes one encoded clip puts on the
//! wire.
//!
//! Layout, little-endian throughout:
//!
//! | offset | size | field                 |
//! |--------|------|-----------------------|
//! | 0      | 4    | magic `"ALMC"`        |
//! | 4      | 2    | format version (1)    |
//! | 6      | 4    | sample_rate           |
//! | 10     | 2    | patch_size            |
//! | 12     | 1    | window                |
//! | 13     | 1    | layers                |
//! | 14     | 4    | codebook_size         |
//! | 18     | 4    | tq (query positions)  |
//! | 22     | 8    | original_sample_count |
//! | 30     | 2·tq·layers | codes, u16, position-major then layer |
//!
//! Codes occupy full u16 words for simplicity rather than packed
//! `log2(C)`-bit fields, so the file size overstates the information
//! bitrate whenever `C < 65536`; rate reporting always uses `log2(C)`.

use std::fs;
use std::path::Path;

use crate::error::{CodecError, Result};
use crate::quantizer::CodeGrid;

pub const MAGIC: &[u8; 4] = b"ALMC";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 30;

const KIND: &str = "code stream";

/// One encoded clip: header metadata plus the `(tq, layers)` code grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeStreamFile {
    pub sample_rate: u32,
    pub patch_size: u16,
    pub window: u8,
    pub layers: u8,
    pub codebook_size: u32,
    pub original_sample_count: u64,
    pub codes: CodeGrid,
}

impl CodeStreamFile {
    /// Validate invariants that must hold before the file can exist:
    /// a non-empty grid whose width matches `layers` and whose every code
    /// is below `codebook_size`.
    pub fn validate(&self) -> Result<()> {
        if self.codes.nrows() == 0 {
            return Err(CodecError::format(KIND, "tq", "no code positions"));
        }
        if self.codes.ncols() != self.layers as usize {
            return Err(CodecError::format(
                KIND,
                "layers",
                format!(
                    "header says {} but grid has {} columns",
                    self.layers,
                    self.codes.ncols()
                ),
            ));
        }
        for (i, &c) in self.codes.iter().enumerate() {
            if (c as u32) >= self.codebook_size {
                return Err(CodecError::format(
                    KIND,
                    "codes",
                    format!(
                        "code {} at flat index {} out of range for codebook size {}",
                        c, i, self.codebook_size
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let tq = self.codes.nrows();
        let mut out = Vec::with_capacity(HEADER_LEN + 2 * tq * self.layers as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&self.patch_size.to_le_bytes());
        out.push(self.window);
        out.push(self.layers);
        out.extend_from_slice(&self.codebook_size.to_le_bytes());
        out.extend_from_slice(&(tq as u32).to_le_bytes());
        out.extend_from_slice(&self.original_sample_count.to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_LEN);
        for t in 0..tq {
            for l in 0..self.layers as usize {
                out.extend_from_slice(&self.codes[[t, l]].to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CodeStreamFile> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::format(
                KIND,
                "length",
                format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len()),
            ));
        }
        if &bytes[0..4] != MAGIC {
            return Err(CodecError::format(
                KIND,
                "magic",
                format!("expected {:?}, got {:?}", MAGIC, &bytes[0..4]),
            ));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(CodecError::format(
                KIND,
                "version",
                format!("unsupported version {version} (expected {VERSION})"),
            ));
        }
        let sample_rate = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        let patch_size = u16::from_le_bytes(bytes[10..12].try_into().unwrap());
        let window = bytes[12];
        let layers = bytes[13];
        let codebook_size = u32::from_le_bytes(bytes[14..18].try_into().unwrap());
        let tq = u32::from_le_bytes(bytes[18..22].try_into().unwrap()) as usize;
        let original_sample_count = u64::from_le_bytes(bytes[22..30].try_into().unwrap());

        if window == 0 {
            return Err(CodecError::format(KIND, "window", "window must be positive"));
        }
        if layers == 0 {
            return Err(CodecError::format(KIND, "layers", "layer count must be positive"));
        }
        let want = HEADER_LEN + 2 * tq * layers as usize;
        if bytes.len() != want {
            return Err(CodecError::format(
                KIND,
                "payload",
                format!(
                    "expected {want} bytes for tq {tq} x {layers} layers, file has {}",
                    bytes.len()
                ),
            ));
        }
        let mut codes = CodeGrid::zeros((tq, layers as usize));
        let mut off = HEADER_LEN;
        for t in 0..tq {
            for l in 0..layers as usize {
                codes[[t, l]] = u16::from_le_bytes([bytes[off], bytes[off + 1]]);
                off += 2;
            }
        }
        let file = CodeStreamFile {
            sample_rate,
            patch_size,
            window,
            layers,
            codebook_size,
            original_sample_count,
            codes,
        };
        file.validate()?;
        Ok(file)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<CodeStreamFile> {
        CodeStreamFile::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CodeStreamFile {
        CodeStreamFile {
            sample_rate: 24_000,
            patch_size: 320,
            window: 6,
            layers: 3,
            codebook_size: 2048,
            original_sample_count: 24_000,
            codes: CodeGrid::from_shape_vec(
                (4, 3),
                vec![0, 7, 2047, 19, 1, 2, 3, 4, 5, 600, 700, 800],
            )
            .unwrap(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 2 * 4 * 3);
        let g = CodeStreamFile::from_bytes(&bytes).unwrap();
        assert_eq!(f, g);
        assert_eq!(g.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.almc");
        let f = sample();
        f.write(&path).unwrap();
        assert_eq!(CodeStreamFile::read(&path).unwrap(), f);
    }

    #[test]
    fn payload_codes_are_position_major() {
        let f = sample();
        let bytes = f.to_bytes().unwrap();
        // Position 1, layer 0 is the fourth code word.
        let off = HEADER_LEN + 2 * 3;
        let c = u16::from_le_bytes([bytes[off], bytes[off + 1]]);
        assert_eq!(c, f.codes[[1, 0]]);
    }

    #[test]
    fn corrupted_fields_name_themselves() {
        let f = sample();
        let good = f.to_bytes().unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        let e = CodeStreamFile::from_bytes(&bad).unwrap_err().to_string();
        assert!(e.contains("magic"), "{e}");

        let mut bad = good.clone();
        bad[4] = 9;
        let e = CodeStreamFile::from_bytes(&bad).unwrap_err().to_string();
        assert!(e.contains("version"), "{e}");

        let mut bad = good.clone();
        bad.truncate(good.len() - 1);
        let e = CodeStreamFile::from_bytes(&bad).unwrap_err().to_string();
        assert!(e.contains("payload"), "{e}");

        let e = CodeStreamFile::from_bytes(&good[..10]).unwrap_err().to_string();
        assert!(e.contains("length"), "{e}");
    }

    #[test]
    fn out_of_range_code_is_rejected() {
        let mut f = sample();
        f.codes[[0, 0]] = 2048;
        let e = f.to_bytes().unwrap_err().to_string();
        assert!(e.contains("codes") && e.contains("2048"), "{e}");

        // Same check on the read side: raise a stored code beyond C.
        let good = sample().to_bytes().unwrap();
        let mut bad = good.clone();
        let off = HEADER_LEN;
        bad[off..off + 2].copy_from_slice(&4000u16.to_le_bytes());
        let e = CodeStreamFile::from_bytes(&bad).unwrap_err().to_string();
        assert!(e.contains("codes"), "{e}");
    }
}
