//! Checkpoint files: every tensor the trainer needs to stop and resume
//! bit-exactly — parameters, optimizer moments, frozen codebooks, the data
//! sampler's generator position — plus a config snapshot and an integrity
//! digest.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ALMK" | version u16 | manifest_len u32 | manifest JSON
//! | payload (f64 LE, tensors back to back) | sha256 of everything above
//! ```
//!
//! The manifest carries name/shape/offset for each tensor (offsets count
//! f64 elements into the payload), so files remain readable even if the
//! tensor set evolves.

use std::fs;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Arr;
use crate::config::CodecConfig;
use crate::error::{CodecError, Result};

const MAGIC: &[u8; 4] = b"ALMK";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    stage: u8,
    step: u64,
    config: CodecConfig,
    rng_seed: u64,
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
    g_opt_t: u64,
    d_opt_t: u64,
    books_provenance: Vec<String>,
    books_seed: u64,
    tensors: Vec<TensorEntry>,
}

/// In-memory image of a checkpoint file.
#[derive(Debug)]
pub struct Snapshot {
    pub stage: u8,
    pub step: u64,
    pub config: CodecConfig,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub g_opt_t: u64,
    pub d_opt_t: u64,
    pub books_provenance: Vec<String>,
    pub books_seed: u64,
    pub tensors: Vec<(String, Arr)>,
}

impl Snapshot {
    pub fn tensor(&self, name: &str) -> Option<&Arr> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require(&self, name: &str) -> Result<&Arr> {
        self.tensor(name).ok_or_else(|| {
            CodecError::format("checkpoint", "tensors", format!("missing tensor `{name}`"))
        })
    }
}

pub fn save(path: impl AsRef<Path>, snap: &Snapshot) -> Result<()> {
    let mut entries = Vec::with_capacity(snap.tensors.len());
    let mut payload = Vec::<u8>::new();
    let mut offset = 0u64;
    for (name, arr) in &snap.tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            offset,
        });
        for &v in arr.as_standard_layout().iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += arr.len() as u64;
    }
    let manifest = Manifest {
        stage: snap.stage,
        step: snap.step,
        config: snap.config.clone(),
        rng_seed: snap.rng_seed,
        rng_word_pos_hi: (snap.rng_word_pos >> 64) as u64,
        rng_word_pos_lo: snap.rng_word_pos as u64,
        g_opt_t: snap.g_opt_t,
        d_opt_t: snap.d_opt_t,
        books_provenance: snap.books_provenance.clone(),
        books_seed: snap.books_seed,
        tensors: entries,
    };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| CodecError::format("checkpoint", "manifest", e.to_string()))?;

    let mut bytes = Vec::with_capacity(4 + 2 + 4 + manifest_json.len() + payload.len() + 32);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&manifest_json);
    bytes.extend_from_slice(&payload);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    fs::write(path.as_ref(), bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Snapshot> {
    const KIND: &str = "checkpoint";
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < 4 + 2 + 4 + 32 {
        return Err(CodecError::format(KIND, "length", "file too short for header"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let expect = Sha256::digest(body);
    if digest != expect.as_slice() {
        return Err(CodecError::format(KIND, "sha256", "integrity digest mismatch"));
    }
    if &body[0..4] != MAGIC {
        return Err(CodecError::format(KIND, "magic", format!("{:?}", &body[0..4])));
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != VERSION {
        return Err(CodecError::format(KIND, "version", format!("{version}")));
    }
    let mlen = u32::from_le_bytes([body[6], body[7], body[8], body[9]]) as usize;
    let mstart = 10;
    if body.len() < mstart + mlen {
        return Err(CodecError::format(KIND, "manifest", "truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[mstart..mstart + mlen])
        .map_err(|e| CodecError::format(KIND, "manifest", e.to_string()))?;
    let payload = &body[mstart + mlen..];
    if payload.len() % 8 != 0 {
        return Err(CodecError::format(KIND, "payload", "length not a multiple of 8"));
    }
    let total = payload.len() / 8;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        if start + n > total {
            return Err(CodecError::format(
                KIND,
                "payload",
                format!("tensor `{}` extends past payload end", e.name),
            ));
        }
        let data: Vec<f64> = (0..n)
            .map(|i| {
                let b = &payload[(start + i) * 8..(start + i + 1) * 8];
                f64::from_le_bytes(b.try_into().unwrap())
            })
            .collect();
        let arr = Arr::from_shape_vec(IxDyn(&e.shape), data)
            .map_err(|err| CodecError::format(KIND, "tensors", format!("{}: {err}", e.name)))?;
        tensors.push((e.name.clone(), arr));
    }

    Ok(Snapshot {
        stage: manifest.stage,
        step: manifest.step,
        config: manifest.config,
        rng_seed: manifest.rng_seed,
        rng_word_pos: ((manifest.rng_word_pos_hi as u128) << 64)
            | manifest.rng_word_pos_lo as u128,
        g_opt_t: manifest.g_opt_t,
        d_opt_t: manifest.d_opt_t,
        books_provenance: manifest.books_provenance,
        books_seed: manifest.books_seed,
        tensors,
    })
}
