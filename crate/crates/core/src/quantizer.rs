//! Residual vector quantization over frozen semantic-prior codebooks.
//!
//! Codebooks are built offline by clustering self-supervised speech and
//! general-sound features, then frozen: training never updates them, only the
//! projection feeding the quantizer. Each layer quantizes the residual left
//! by the previous layers; gradients cross the argmin via a per-layer
//! straight-through surrogate, so the sum of quantized layers behaves as an
//! identity around the projected input.
//!
//! Codebook file layout (little-endian):
//! ```text
//! magic  b"ALMB"
//! version u16 = 1
//! manifest_len u32, then manifest_len bytes of JSON
//! payload: layers * codebook_size * dim raw f32 values,
//!          layer-major, row-major within a layer
//! ```
//! Centroids are snapped to f32 when a codebook set is constructed, so the
//! in-memory values and the file payload are bit-identical.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{CodecError, Result};

/// Per-position code indices, `(Tq, layers)`.
pub type CodeGrid = Array2<u16>;

#[derive(Debug, Clone)]
pub struct CodebookSet {
    books: Vec<Array2<f64>>,
    pub frozen: bool,
    pub provenance: Vec<String>,
    pub seed: u64,
}

impl CodebookSet {
    pub fn new(books: Vec<Array2<f64>>, frozen: bool, provenance: Vec<String>, seed: u64) -> Result<Self> {
        if books.is_empty() {
            return Err(CodecError::Quantizer("no codebook layers".into()));
        }
        let (c, d) = (books[0].nrows(), books[0].ncols());
        if c == 0 || d == 0 {
            return Err(CodecError::Quantizer("empty codebook layer".into()));
        }
        if c > 65536 {
            return Err(CodecError::Quantizer(format!(
                "codebook size {c} exceeds the 16-bit code range"
            )));
        }
        for (l, b) in books.iter().enumerate() {
            if b.nrows() != c || b.ncols() != d {
                return Err(CodecError::Quantizer(format!(
                    "layer {l} shape ({}, {}) differs from layer 0 ({c}, {d})",
                    b.nrows(),
                    b.ncols()
                )));
            }
        }
        let mut set = CodebookSet { books, frozen, provenance, seed };
        set.snap_f32();
        Ok(set)
    }

    /// Clone this set with one layer's entries replaced verbatim — no f32
    /// snapping, since a replaceable layer is one that is allowed to train.
    pub fn with_layer_replaced(&self, layer: usize, entries: Array2<f64>) -> Result<CodebookSet> {
        if layer >= self.layers() {
            return Err(CodecError::Quantizer(format!(
                "layer {layer} out of range for {} layers",
                self.layers()
            )));
        }
        if entries.nrows() != self.size() || entries.ncols() != self.dim() {
            return Err(CodecError::Quantizer(format!(
                "replacement shape ({}, {}) differs from ({}, {})",
                entries.nrows(),
                entries.ncols(),
                self.size(),
                self.dim()
            )));
        }
        let mut out = self.clone();
        out.books[layer] = entries;
        Ok(out)
    }

    /// Random normal codebooks, std `1/sqrt(dim)`: the no-prior ablation.
    pub fn random(layers: usize, size: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (dim as f64).sqrt();
        let books = (0..layers)
            .map(|_| {
                crate::nn::init_normal(&mut rng, &[size, dim], std)
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
            })
            .collect();
        CodebookSet::new(books, true, vec!["random".into(); layers], seed)
    }

    fn snap_f32(&mut self) {
        for b in &mut self.books {
            b.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn layers(&self) -> usize {
        self.books.len()
    }

    pub fn size(&self) -> usize {
        self.books[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.books[0].ncols()
    }

    pub fn layer(&self, l: usize) -> &Array2<f64> {
        &self.books[l]
    }

    /// Bytes of the f32 payload in file order; doubles as a freeze checksum.
    pub fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.layers() * self.size() * self.dim() * 4);
        for b in &self.books {
            for &v in b.iter() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }
}

/// Lloyd's algorithm with k-means++ seeding. Ties in assignment go to the
/// lowest centroid index; an emptied cluster is reseeded to the point
/// farthest from its assigned centroid. Deterministic for a given seed.
pub fn kmeans(
    data: &Array2<f64>,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let (n, d) = (data.nrows(), data.ncols());
    if k == 0 {
        return Err(CodecError::Quantizer("kmeans: k must be positive".into()));
    }
    if n < k {
        return Err(CodecError::Quantizer(format!(
            "kmeans: {n} samples but {k} clusters requested"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(CodecError::Quantizer("kmeans: non-finite feature value".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids = Array2::<f64>::zeros((k, d));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(&data.row(i), &centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for i in 0..n {
            let nd = sq_dist(&data.row(i), &centroids.row(c));
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(&data.row(i), &centroids.row(c));
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros((k, d));
        for i in 0..n {
            counts[assign[i]] += 1;
            let mut row = sums.row_mut(assign[i]);
            row += &data.row(i);
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed to the point farthest from its current centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&data.row(a), &centroids.row(assign[a]));
                        let db = sq_dist(&data.row(b), &centroids.row(assign[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids.row_mut(c).assign(&data.row(far));
                changed = true;
            } else {
                let mut row = centroids.row_mut(c);
                row.assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
        if !changed {
            break;
        }
    }
    Ok((centroids, assign))
}

fn sq_dist(a: &ndarray::ArrayView1<f64>, b: &ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Build one prior codebook layer: the first `c/2` rows cluster speech
/// features, the last `c/2` rows cluster general-sound features.
pub fn build_prior_codebook(
    speech_feats: &Array2<f64>,
    sound_feats: &Array2<f64>,
    c: usize,
    kmeans_iters: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if c % 2 != 0 {
        return Err(CodecError::Quantizer(format!(
            "codebook size {c} must be even to split between speech and sound priors"
        )));
    }
    if speech_feats.ncols() != sound_feats.ncols() {
        return Err(CodecError::Quantizer(format!(
            "feature dims differ: speech {} vs sound {}",
            speech_feats.ncols(),
            sound_feats.ncols()
        )));
    }
    let half = c / 2;
    let (speech_c, _) = kmeans(speech_feats, half, kmeans_iters, seed)?;
    let (sound_c, _) = kmeans(sound_feats, half, kmeans_iters, seed.wrapping_add(1))?;
    let mut book = Array2::<f64>::zeros((c, speech_feats.ncols()));
    book.slice_mut(ndarray::s![..half, ..]).assign(&speech_c);
    book.slice_mut(ndarray::s![half.., ..]).assign(&sound_c);
    Ok(book)
}

/// Subtract each row's nearest codeword, in place: one greedy quantization
/// pass, leaving the residual the next layer will be clustered on.
fn subtract_nearest(data: &mut Array2<f64>, book: &Array2<f64>) {
    for mut row in data.rows_mut() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, code) in book.rows().into_iter().enumerate() {
            let d: f64 = row
                .iter()
                .zip(code.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        let code = book.row(best);
        for (r, c) in row.iter_mut().zip(code.iter()) {
            *r -= c;
        }
    }
}

/// Frozen multi-layer priors: layer `l` is clustered on the residuals left
/// by a one-pass greedy quantization of the features through layers `< l`,
/// keeping separate speech and sound halves at every depth.
pub fn build_prior_codebooks(
    speech_feats: &Array2<f64>,
    sound_feats: &Array2<f64>,
    c: usize,
    layers: usize,
    kmeans_iters: usize,
    seed: u64,
) -> Result<CodebookSet> {
    if layers == 0 {
        return Err(CodecError::Quantizer(
            "prior construction needs at least one layer".into(),
        ));
    }
    let mut speech = speech_feats.clone();
    let mut sound = sound_feats.clone();
    let mut books = Vec::with_capacity(layers);
    let mut provenance = Vec::with_capacity(layers);
    for l in 0..layers {
        let book = build_prior_codebook(
            &speech,
            &sound,
            c,
            kmeans_iters,
            seed.wrapping_add(100 * l as u64),
        )?;
        subtract_nearest(&mut speech, &book);
        subtract_nearest(&mut sound, &book);
        provenance.push(format!("kmeans-prior layer {l} (speech+sound halves)"));
        books.push(book);
    }
    CodebookSet::new(books, true, provenance, seed)
}

/// Output of [`rvq_encode`].
pub struct RvqResult {
    /// `(Tq, layers)` code indices.
    pub codes: CodeGrid,
    /// Straight-through quantized output per layer, each `(Tq, dim)`.
    pub per_layer_quantized: Vec<Tensor>,
    /// Sum over layers; behaves as an identity around the input in backward.
    pub quantized_sum: Tensor,
    /// Value-level final residual `input - quantized_sum`.
    pub residual: Array2<f64>,
}

/// Quantize `(Tq, dim)` projected query tokens against `layers` codebook
/// layers. Ties in the nearest-code search resolve to the lowest index.
pub fn rvq_encode(x: &Tensor, books: &CodebookSet, layers: usize) -> Result<RvqResult> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != books.dim() {
        return Err(CodecError::shape(
            "rvq input",
            format!("(Tq, {})", books.dim()),
            format!("{shape:?}"),
        ));
    }
    if layers == 0 || layers > books.layers() {
        return Err(CodecError::Quantizer(format!(
            "requested {layers} layers but codebook set has {}",
            books.layers()
        )));
    }
    let t_q = shape[0];
    let dim = books.dim();
    let c = books.size();

    let mut codes = CodeGrid::zeros((t_q, layers));
    let mut per_layer: Vec<Tensor> = Vec::with_capacity(layers);
    let mut residual = x.clone();
    for l in 0..layers {
        let book = books.layer(l);
        let r_val = residual.to_array();
        let r2 = r_val.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut q_val = Array2::<f64>::zeros((t_q, dim));
        for i in 0..t_q {
            let row = r2.row(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for cand in 0..c {
                let dist = sq_dist(&row, &book.row(cand));
                if dist < best_d {
                    best_d = dist;
                    best = cand;
                }
            }
            codes[[i, l]] = best as u16;
            q_val.row_mut(i).assign(&book.row(best));
        }
        let q = Tensor::straight_through(&residual, q_val.into_dyn());
        residual = residual.sub(&q);
        per_layer.push(q);
    }
    let mut quantized_sum = per_layer[0].clone();
    for q in &per_layer[1..] {
        quantized_sum = quantized_sum.add(q);
    }
    let residual_val = residual
        .to_array()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    Ok(RvqResult {
        codes,
        per_layer_quantized: per_layer,
        quantized_sum,
        residual: residual_val,
    })
}

/// Sum the codebook rows addressed by a code grid: `(Tq, layers) -> (Tq, dim)`.
pub fn rvq_decode(codes: &CodeGrid, books: &CodebookSet) -> Result<Array2<f64>> {
    let layers = codes.ncols();
    if layers == 0 || layers > books.layers() {
        return Err(CodecError::Quantizer(format!(
            "code grid has {layers} layers but codebook set has {}",
            books.layers()
        )));
    }
    let c = books.size();
    let mut out = Array2::<f64>::zeros((codes.nrows(), books.dim()));
    for i in 0..codes.nrows() {
        for l in 0..layers {
            let code = codes[[i, l]] as usize;
            if code >= c {
                return Err(CodecError::Quantizer(format!(
                    "code {code} at position {i} layer {l} out of range (codebook size {c})"
                )));
            }
            let mut row = out.row_mut(i);
            row += &books.layer(l).row(code);
        }
    }
    Ok(out)
}

/// Identity-gradient surrogate across a non-differentiable value replacement.
pub fn straight_through(pre: &Tensor, quantized: ndarray::ArrayD<f64>) -> Tensor {
    Tensor::straight_through(pre, quantized)
}

/// Exact rate arithmetic for the token stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitrate {
    pub frames_per_second: Ratio<u64>,
    pub tokens_per_second: Ratio<u64>,
    /// Exact only when the codebook size is a power of two.
    pub bits_per_second: Option<Ratio<u64>>,
    pub codebook_size: u64,
}

impl Bitrate {
    pub fn bps_f64(&self) -> f64 {
        match &self.bits_per_second {
            Some(r) => ratio_f64(r),
            None => {
                ratio_f64(&self.tokens_per_second) * (self.codebook_size as f64).log2()
            }
        }
    }
}

pub fn ratio_f64(r: &Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `fps = sample_rate / (patch_size * w)`, `tps = fps * layers`,
/// `bps = tps * log2(codebook_size)`.
pub fn bitrate(
    sample_rate: u32,
    patch_size: usize,
    w: usize,
    layers: usize,
    codebook_size: u64,
) -> Result<Bitrate> {
    if sample_rate == 0 || patch_size == 0 || w == 0 || layers == 0 || codebook_size < 2 {
        return Err(CodecError::Config(format!(
            "bitrate: all parameters must be positive (codebook >= 2): \
             sr {sample_rate}, patch {patch_size}, w {w}, layers {layers}, c {codebook_size}"
        )));
    }
    let fps = Ratio::new(sample_rate as u64, (patch_size * w) as u64);
    let tps = fps * Ratio::from_integer(layers as u64);
    let bits = if codebook_size.is_power_of_two() {
        Some(tps * Ratio::from_integer(codebook_size.trailing_zeros() as u64))
    } else {
        None
    };
    Ok(Bitrate {
        frames_per_second: fps,
        tokens_per_second: tps,
        bits_per_second: bits,
        codebook_size,
    })
}

/// Render a ratio as an exact decimal when the denominator is 2^a * 5^b,
/// otherwise round to six places.
pub fn ratio_decimal(r: &Ratio<u64>) -> String {
    let mut den = *r.denom();
    let mut shift = 0u32;
    while den % 2 == 0 {
        den /= 2;
        shift += 1;
    }
    let mut fives = 0u32;
    while den % 5 == 0 {
        den /= 5;
        fives += 1;
    }
    if den == 1 {
        let digits = shift.max(fives);
        let scaled = r * Ratio::from_integer(10u64.pow(digits));
        let whole = scaled.to_integer();
        let s = format!("{whole}");
        if digits == 0 {
            return s;
        }
        let s = format!("{:0>width$}", s, width = digits as usize + 1);
        let (int_part, frac) = s.split_at(s.len() - digits as usize);
        let frac = frac.trim_end_matches('0');
        if frac.is_empty() {
            int_part.to_string()
        } else {
            format!("{int_part}.{frac}")
        }
    } else {
        format!("{:.6}", ratio_f64(r))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerStats {
    pub used_codes: usize,
    pub utilization: f64,
    pub entropy_bits: f64,
}

/// Usage statistics per layer over a collection of code grids.
pub fn codebook_stats(grids: &[CodeGrid], codebook_size: usize) -> Result<Vec<LayerStats>> {
    let Some(first) = grids.first() else {
        return Err(CodecError::Quantizer("codebook_stats: no code grids".into()));
    };
    let layers = first.ncols();
    if grids.iter().any(|g| g.ncols() != layers) {
        return Err(CodecError::Quantizer("codebook_stats: inconsistent layer counts".into()));
    }
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut counts = vec![0u64; codebook_size];
        let mut total = 0u64;
        for g in grids {
            for i in 0..g.nrows() {
                let code = g[[i, l]] as usize;
                if code >= codebook_size {
                    return Err(CodecError::Quantizer(format!(
                        "codebook_stats: code {code} out of range {codebook_size}"
                    )));
                }
                counts[code] += 1;
                total += 1;
            }
        }
        let used = counts.iter().filter(|&&c| c > 0).count();
        let entropy = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.log2()
            })
            .sum();
        out.push(LayerStats {
            used_codes: used,
            utilization: used as f64 / codebook_size as f64,
            entropy_bits: entropy,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CodebookManifest {
    layers: usize,
    codebook_size: usize,
    dim: usize,
    frozen: bool,
    seed: u64,
    provenance: Vec<String>,
}

pub fn save_codebooks(path: impl AsRef<Path>, set: &CodebookSet) -> Result<()> {
    let manifest = CodebookManifest {
        layers: set.layers(),
        codebook_size: set.size(),
        dim: set.dim(),
        frozen: set.frozen,
        seed: set.seed,
        provenance: set.provenance.clone(),
    };
    let mjson = serde_json::to_vec(&manifest)
        .map_err(|e| CodecError::format("codebook", "manifest", e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(b"ALMB");
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&mjson);
    out.extend_from_slice(&set.payload_bytes());
    fs::write(path.as_ref(), out)?;
    Ok(())
}

pub fn load_codebooks(path: impl AsRef<Path>) -> Result<CodebookSet> {
    const KIND: &str = "codebook";
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < 10 {
        return Err(CodecError::format(KIND, "magic", "file shorter than header"));
    }
    if &bytes[0..4] != b"ALMB" {
        return Err(CodecError::format(
            KIND,
            "magic",
            format!("expected ALMB, got {:?}", &bytes[0..4]),
        ));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != 1 {
        return Err(CodecError::format(KIND, "version", format!("unsupported version {version}")));
    }
    let mlen = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let mstart = 10;
    if mstart + mlen > bytes.len() {
        return Err(CodecError::format(KIND, "manifest", "manifest overruns file"));
    }
    let manifest: CodebookManifest = serde_json::from_slice(&bytes[mstart..mstart + mlen])
        .map_err(|e| CodecError::format(KIND, "manifest", e.to_string()))?;
    let expected = manifest.layers * manifest.codebook_size * manifest.dim * 4;
    let payload = &bytes[mstart + mlen..];
    if payload.len() != expected {
        return Err(CodecError::format(
            KIND,
            "payload",
            format!("expected {expected} bytes, got {}", payload.len()),
        ));
    }
    let mut books = Vec::with_capacity(manifest.layers);
    let per_layer = manifest.codebook_size * manifest.dim * 4;
    for l in 0..manifest.layers {
        let chunk = &payload[l * per_layer..(l + 1) * per_layer];
        let vals: Vec<f64> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        books.push(
            Array2::from_shape_vec((manifest.codebook_size, manifest.dim), vals)
                .map_err(|e| CodecError::format(KIND, "payload", e.to_string()))?,
        );
    }
    CodebookSet::new(books, manifest.frozen, manifest.provenance, manifest.seed)
}

/// Synthetic stand-ins for self-supervised speech and sound features so the
/// full prior-building pipeline runs without external model dumps. Speech
/// features cluster around smooth formant-like archetypes, sound features
/// around broadband ones; both live in `dim` dimensions.
pub fn synth_prior_features(
    dim: usize,
    n_per_kind: usize,
    seed: u64,
) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let archetypes = 8usize;
    let mut make = |spread: f64, phase: f64| {
        let mut centers = Array2::<f64>::zeros((archetypes, dim));
        for a in 0..archetypes {
            for j in 0..dim {
                centers[[a, j]] =
                    (phase + a as f64 * 0.7 + j as f64 * 0.13).sin() * (1.0 + a as f64 * 0.2);
            }
        }
        let mut data = Array2::<f64>::zeros((n_per_kind, dim));
        for i in 0..n_per_kind {
            let a = rng.gen_range(0..archetypes);
            for j in 0..dim {
                data[[i, j]] = centers[[a, j]] + spread * (rng.gen::<f64>() - 0.5);
            }
        }
        data
    };
    let speech = make(0.15, 0.0);
    let sound = make(0.45, 2.5);
    (speech, sound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let mut data = Vec::new();
        for i in 0..30 {
            let jitter = (i % 7) as f64 * 0.01;
            let base = match i % 3 {
                0 => [0.0, 0.0],
                1 => [10.0, 0.0],
                _ => [0.0, 10.0],
            };
            data.push([base[0] + jitter, base[1] - jitter]);
        }
        let arr = Array2::from_shape_vec((30, 2), data.concat()).unwrap();
        let (centroids, assign) = kmeans(&arr, 3, 50, 7).unwrap();
        assert_eq!(centroids.nrows(), 3);
        // Points sharing a ground-truth cluster share an assignment.
        for i in 0..30 {
            for j in 0..30 {
                if i % 3 == j % 3 {
                    assert_eq!(assign[i], assign[j]);
                }
            }
        }
        // Determinism.
        let (c2, a2) = kmeans(&arr, 3, 50, 7).unwrap();
        assert_eq!(centroids, c2);
        assert_eq!(assign, a2);
    }

    #[test]
    fn kmeans_rejects_underfilled() {
        let arr = Array2::<f64>::zeros((2, 3));
        assert!(kmeans(&arr, 5, 10, 0).is_err());
        assert!(kmeans(&arr, 0, 10, 0).is_err());
    }

    #[test]
    fn prior_codebook_halves_ordered() {
        // Speech features near +5, sound features near -5: the first half of
        // the book must sit in the speech region.
        let speech = Array2::from_shape_fn((40, 3), |(i, j)| 5.0 + ((i * 3 + j) as f64 * 0.37).sin() * 0.3);
        let sound = Array2::from_shape_fn((40, 3), |(i, j)| -5.0 + ((i * 3 + j) as f64 * 0.53).cos() * 0.3);
        let book = build_prior_codebook(&speech, &sound, 8, 25, 3).unwrap();
        assert_eq!(book.nrows(), 8);
        for r in 0..4 {
            assert!(book.row(r).mean().unwrap() > 2.0, "row {r} not a speech centroid");
        }
        for r in 4..8 {
            assert!(book.row(r).mean().unwrap() < -2.0, "row {r} not a sound centroid");
        }
        assert!(build_prior_codebook(&speech, &sound, 7, 10, 3).is_err());
    }

    #[test]
    fn layered_priors_shrink_residual_energy() {
        let (speech, sound) = synth_prior_features(6, 120, 21);
        let set = build_prior_codebooks(&speech, &sound, 8, 3, 25, 21).unwrap();
        assert_eq!(set.layers(), 3);
        assert_eq!(set.size(), 8);
        assert_eq!(set.dim(), 6);
        assert!(set.frozen);

        // Greedily quantizing the speech features through the layers must
        // leave monotonically non-increasing residual energy overall.
        let mut resid = speech.clone();
        let mut prev = resid.iter().map(|v| v * v).sum::<f64>();
        for l in 0..set.layers() {
            super::subtract_nearest(&mut resid, set.layer(l));
            let e = resid.iter().map(|v| v * v).sum::<f64>();
            assert!(e <= prev + 1e-9, "layer {l} grew energy {prev} -> {e}");
            prev = e;
        }

        // Deterministic per seed.
        let again = build_prior_codebooks(&speech, &sound, 8, 3, 25, 21).unwrap();
        assert_eq!(set.payload_bytes(), again.payload_bytes());
    }

    #[test]
    fn rvq_telescoping_and_code_ranges() {
        let books = CodebookSet::random(3, 16, 4, 11).unwrap();
        let x = Tensor::constant(crate::nn::init_normal(
            &mut ChaCha8Rng::seed_from_u64(5),
            &[10, 4],
            0.5,
        ));
        let res = rvq_encode(&x, &books, 3).unwrap();
        // quantized_sum + residual == input, exactly as stated.
        let sum = res.quantized_sum.to_array();
        let xv = x.to_array();
        for (i, ((s, r), xi)) in sum.iter().zip(res.residual.iter()).zip(xv.iter()).enumerate() {
            assert!((s + r - xi).abs() < 1e-9, "element {i}");
        }
        // Sum of per-layer values equals quantized_sum.
        let mut acc = ndarray::ArrayD::<f64>::zeros(sum.raw_dim());
        for q in &res.per_layer_quantized {
            acc += &q.to_array();
        }
        assert_eq!(acc, sum);
        for v in res.codes.iter() {
            assert!((*v as usize) < 16);
        }
        // Decode reproduces the quantized sum bit-exactly.
        let dec = rvq_decode(&res.codes, &books).unwrap();
        let sum2 = sum.into_dimensionality::<ndarray::Ix2>().unwrap();
        assert_eq!(dec, sum2);
    }

    #[test]
    fn rvq_tie_breaks_to_lowest_index() {
        // Two identical codes: the argmin must pick index 0. A third code
        // exactly opposite the query at equal distance checks the general
        // equidistant case too.
        let book = arr2(&[[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]]);
        let books = CodebookSet::new(vec![book], true, vec!["test".into()], 0).unwrap();
        let x = Tensor::constant(arr2(&[[0.0, 0.0]]).into_dyn());
        let res = rvq_encode(&x, &books, 1).unwrap();
        assert_eq!(res.codes[[0, 0]], 0);
    }

    #[test]
    fn rvq_gradient_is_identity_on_sum() {
        let books = CodebookSet::random(2, 8, 3, 2).unwrap();
        let x = Tensor::leaf(crate::nn::init_normal(
            &mut ChaCha8Rng::seed_from_u64(9),
            &[4, 3],
            0.7,
        ));
        let res = rvq_encode(&x, &books, 2).unwrap();
        res.quantized_sum.sum_all().backward();
        let g = x.grad().unwrap();
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn rvq_decode_rejects_out_of_range() {
        let books = CodebookSet::random(1, 4, 2, 0).unwrap();
        let mut codes = CodeGrid::zeros((2, 1));
        codes[[1, 0]] = 9;
        let err = rvq_decode(&codes, &books).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn bitrate_reference_points() {
        let b6 = bitrate(24000, 320, 6, 3, 2048).unwrap();
        assert_eq!(b6.frames_per_second, Ratio::new(25, 2));
        assert_eq!(b6.tokens_per_second, Ratio::new(75, 2));
        assert_eq!(b6.bits_per_second, Some(Ratio::new(825, 2)));
        assert_eq!(ratio_decimal(&b6.bits_per_second.unwrap()), "412.5");

        let b2 = bitrate(24000, 320, 2, 3, 2048).unwrap();
        assert_eq!(b2.bits_per_second, Some(Ratio::new(2475, 2)));
        assert_eq!(ratio_decimal(&b2.bits_per_second.unwrap()), "1237.5");

        // Non-power-of-two codebook: no exact rational, f64 fallback.
        let b = bitrate(24000, 320, 6, 3, 1000).unwrap();
        assert!(b.bits_per_second.is_none());
        let expected = 37.5 * 1000f64.log2();
        assert!((b.bps_f64() - expected).abs() < 1e-9);

        assert!(bitrate(0, 320, 6, 3, 2048).is_err());
        assert!(bitrate(24000, 320, 6, 3, 1).is_err());
    }

    #[test]
    fn stats_hand_computed() {
        // Codes layer 0: [0, 0, 1, 2] over c=4: util 3/4, entropy 1.5 bits.
        let g = CodeGrid::from_shape_vec((4, 1), vec![0, 0, 1, 2]).unwrap();
        let stats = codebook_stats(&[g], 4).unwrap();
        assert_eq!(stats[0].used_codes, 3);
        assert!((stats[0].utilization - 0.75).abs() < 1e-12);
        assert!((stats[0].entropy_bits - 1.5).abs() < 1e-12);
    }

    #[test]
    fn codebook_file_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("books.almb");
        let set = CodebookSet::random(3, 8, 5, 77).unwrap();
        save_codebooks(&path, &set).unwrap();
        let back = load_codebooks(&path).unwrap();
        assert_eq!(back.layers(), 3);
        assert_eq!(back.size(), 8);
        assert_eq!(back.dim(), 5);
        assert_eq!(back.seed, 77);
        assert_eq!(back.payload_bytes(), set.payload_bytes());
        // Second write is byte-identical.
        let path2 = dir.path().join("books2.almb");
        save_codebooks(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn codebook_file_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("books.almb");
        let set = CodebookSet::random(1, 4, 2, 0).unwrap();
        save_codebooks(&path, &set).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        let err = load_codebooks(&path).unwrap_err();
        assert!(matches!(err, CodecError::Format { ref field, .. } if field == "magic"), "{err}");

        let truncated = &good[..good.len() - 3];
        fs::write(&path, truncated).unwrap();
        let err = load_codebooks(&path).unwrap_err();
        assert!(matches!(err, CodecError::Format { ref field, .. } if field == "payload"), "{err}");
    }
}
