//! Short-time Fourier analysis and mel filterbanks.
//!
//! Frames are non-centered: frame `i` covers samples `[i*hop, i*hop + fft)`
//! and trailing samples that do not fill a frame are dropped. The transform
//! is a direct windowed DFT, which keeps the same code path usable both for
//! plain analysis and inside the differentiable loss graph.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{CodecError, Result};

/// Floor added under the squared magnitude in the differentiable path so the
/// square root has a bounded gradient at silent bins.
pub const MAG_FLOOR: f64 = 1e-12;

/// Offset inside `ln(mel + LOG_MEL_EPS)`.
pub const LOG_MEL_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowKind {
    Hann,
    Rect,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpectrogramConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub mel_bins: usize,
    pub fmin: f64,
    /// Upper band edge in Hz; `None` means the Nyquist frequency.
    pub fmax: Option<f64>,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            fft_size: 1024,
            hop: 256,
            window: WindowKind::Hann,
            mel_bins: 64,
            fmin: 0.0,
            fmax: None,
        }
    }
}

impl SpectrogramConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || self.fft_size % 2 != 0 {
            return Err(CodecError::Config(format!(
                "fft_size must be even and >= 2, got {}",
                self.fft_size
            )));
        }
        if self.hop == 0 {
            return Err(CodecError::Config("hop must be positive".into()));
        }
        if self.mel_bins == 0 {
            return Err(CodecError::Config("mel_bins must be positive".into()));
        }
        Ok(())
    }
}

/// Window taper of length `n` (periodic form for Hann).
pub fn window(kind: WindowKind, n: usize) -> Array1<f64> {
    match kind {
        WindowKind::Hann => Array1::from_shape_fn(n, |i| {
            0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / n as f64).cos())
        }),
        WindowKind::Rect => Array1::ones(n),
    }
}

pub fn frame_count(len: usize, cfg: &SpectrogramConfig) -> Result<usize> {
    if len < cfg.fft_size {
        return Err(CodecError::Audio(format!(
            "signal of {len} samples is shorter than fft_size {}",
            cfg.fft_size
        )));
    }
    Ok((len - cfg.fft_size) / cfg.hop + 1)
}

/// Complex STFT, `(frames, fft/2 + 1)`, one-sided, with the 1/N forward
/// normalization so magnitudes live on the same scale as the waveform
/// (a full-scale on-bin sinusoid peaks near half its amplitude).
pub fn stft(x: &[f64], cfg: &SpectrogramConfig) -> Result<Array2<Complex64>> {
    cfg.validate()?;
    let n_frames = frame_count(x.len(), cfg)?;
    let fft = cfg.fft_size;
    let bins = cfg.bins();
    let taper = window(cfg.window, fft);
    let mut out = Array2::<Complex64>::zeros((n_frames, bins));
    for f in 0..n_frames {
        let start = f * cfg.hop;
        for k in 0..bins {
            let mut acc = Complex64::new(0.0, 0.0);
            for n in 0..fft {
                let phase = -std::f64::consts::TAU * (k * n) as f64 / fft as f64;
                acc += taper[n] * x[start + n] * Complex64::new(phase.cos(), phase.sin());
            }
            out[[f, k]] = acc / fft as f64;
        }
    }
    Ok(out)
}

pub fn magnitude(spec: &Array2<Complex64>) -> Array2<f64> {
    spec.mapv(|c| c.norm())
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `(mel_bins, fft/2 + 1)`. Filters whose support
/// collapses below the FFT resolution are widened to their nearest bin so
/// every row keeps positive mass.
pub fn mel_filterbank(sample_rate: u32, cfg: &SpectrogramConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let nyquist = sample_rate as f64 / 2.0;
    let fmax = cfg.fmax.unwrap_or(nyquist);
    if !(cfg.fmin >= 0.0 && cfg.fmin < fmax && fmax <= nyquist) {
        return Err(CodecError::Config(format!(
            "mel band edges out of range: fmin {} fmax {fmax} nyquist {nyquist}",
            cfg.fmin
        )));
    }
    let bins = cfg.bins();
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(fmax);
    let edges: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / cfg.fft_size as f64;
    let mut fb = Array2::<f64>::zeros((cfg.mel_bins, bins));
    for m in 0..cfg.mel_bins {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let w = if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            if w > 0.0 {
                fb[[m, k]] = w;
            }
        }
        if fb.row(m).sum() <= 0.0 {
            let nearest = ((center / bin_hz).round() as usize).min(bins - 1);
            fb[[m, nearest]] = 1.0;
        }
    }
    Ok(fb)
}

/// Mel magnitude spectrogram, `(frames, mel_bins)`.
pub fn mel_spectrogram(x: &[f64], sample_rate: u32, cfg: &SpectrogramConfig) -> Result<Array2<f64>> {
    let mag = magnitude(&stft(x, cfg)?);
    let fb = mel_filterbank(sample_rate, cfg)?;
    Ok(mag.dot(&fb.t()))
}

/// Differentiable magnitude STFT of a rank-1 tensor, `(frames, bins)`,
/// using the same 1/N forward normalization as [`stft`].
/// Magnitudes carry a tiny floor (`MAG_FLOOR` under the sqrt), so values at
/// silent bins differ from the exact transform by at most 1e-6.
pub fn stft_mag_graph(x: &Tensor, cfg: &SpectrogramConfig) -> Result<Tensor> {
    cfg.validate()?;
    let len = x.len();
    assert_eq!(x.ndim(), 1, "stft_mag_graph: rank 1 input");
    let n_frames = frame_count(len, cfg)?;
    let fft = cfg.fft_size;
    let bins = cfg.bins();

    let mut idx = ndarray::Array2::<usize>::zeros((n_frames, fft));
    for f in 0..n_frames {
        for n in 0..fft {
            idx[[f, n]] = f * cfg.hop + n;
        }
    }
    let frames = x.gather_flat(&idx.into_dyn());

    let taper = window(cfg.window, fft);
    let mut taper_tile = Array2::<f64>::zeros((n_frames, fft));
    for mut row in taper_tile.rows_mut() {
        row.assign(&taper);
    }
    let windowed = frames.mul(&Tensor::constant(taper_tile.into_dyn()));

    let norm = 1.0 / fft as f64;
    let mut cos_m = Array2::<f64>::zeros((fft, bins));
    let mut sin_m = Array2::<f64>::zeros((fft, bins));
    for n in 0..fft {
        for k in 0..bins {
            let phase = std::f64::consts::TAU * (k * n) as f64 / fft as f64;
            cos_m[[n, k]] = norm * phase.cos();
            sin_m[[n, k]] = -norm * phase.sin();
        }
    }
    let re = windowed.matmul(&Tensor::constant(cos_m.into_dyn()));
    let im = windowed.matmul(&Tensor::constant(sin_m.into_dyn()));
    Ok(re.sqr().add(&im.sqr()).add_scalar(MAG_FLOOR).sqrt_())
}

/// Differentiable `(frames, 2*mel_bins)` feature: mel magnitudes concatenated
/// with their log, the input consumed by each discriminator.
pub fn mel_and_log_mel_graph(x: &Tensor, sample_rate: u32, cfg: &SpectrogramConfig) -> Result<Tensor> {
    let mag = stft_mag_graph(x, cfg)?;
    let fb = mel_filterbank(sample_rate, cfg)?;
    let mel = mag.matmul(&Tensor::constant(fb.t().as_standard_layout().to_owned().into_dyn()));
    let log_mel = mel.add_scalar(LOG_MEL_EPS).ln();
    Ok(Tensor::concat(1, &[mel, log_mel]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(fft: usize, hop: usize) -> SpectrogramConfig {
        SpectrogramConfig {
            fft_size: fft,
            hop,
            window: WindowKind::Hann,
            mel_bins: 16,
            fmin: 0.0,
            fmax: None,
        }
    }

    #[test]
    fn matches_naive_dft_per_frame() {
        // Independent oracle: plain scalar-loop DFT over explicitly windowed
        // samples, written without shared helpers, scaled by the library's
        // documented 1/N forward normalization.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..300).map(|_| rng.gen::<f64>() - 0.5).collect();
        let c = cfg(64, 16);
        let spec = stft(&x, &c).unwrap();
        let n_frames = (300 - 64) / 16 + 1;
        assert_eq!(spec.shape(), &[n_frames, 33]);
        for f in [0usize, 3, n_frames - 1] {
            for k in [0usize, 1, 17, 32] {
                let mut re = 0.0;
                let mut im = 0.0;
                for n in 0..64 {
                    let w = 0.5 * (1.0 - (std::f64::consts::TAU * n as f64 / 64.0).cos());
                    let s = w * x[f * 16 + n];
                    let ang = std::f64::consts::TAU * k as f64 * n as f64 / 64.0;
                    re += s * ang.cos();
                    im -= s * ang.sin();
                }
                re /= 64.0;
                im /= 64.0;
                let got = spec[[f, k]];
                assert!((got.re - re).abs() < 1e-9 && (got.im - im).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn parseval_energy_identity() {
        // With the 1/N forward normalization, for each frame
        // N * (|X_0|^2 + |X_{N/2}|^2 + 2*sum_mid |X_k|^2) equals the
        // windowed frame energy.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..500).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let c = cfg(128, 32);
        let spec = stft(&x, &c).unwrap();
        let taper = window(WindowKind::Hann, 128);
        for f in 0..spec.nrows() {
            let mut spectral = spec[[f, 0]].norm_sqr() + spec[[f, 64]].norm_sqr();
            for k in 1..64 {
                spectral += 2.0 * spec[[f, k]].norm_sqr();
            }
            spectral *= 128.0;
            let time: f64 = (0..128)
                .map(|n| {
                    let s = taper[n] * x[f * 32 + n];
                    s * s
                })
                .sum();
            let rel = (spectral - time).abs() / time.max(1e-12);
            assert!(rel < 1e-6, "frame {f}: rel err {rel}");
        }
    }

    #[test]
    fn pure_tone_concentrates_at_bin() {
        // Hann sidelobes sit below -31 dB; bins 3+ away from a bin-centered
        // tone must be at least that far down.
        let fft = 256;
        let c = SpectrogramConfig { hop: fft, ..cfg(fft, fft) };
        let bin = 20usize;
        let x: Vec<f64> = (0..fft)
            .map(|n| (std::f64::consts::TAU * bin as f64 * n as f64 / fft as f64).sin())
            .collect();
        let mag = magnitude(&stft(&x, &c).unwrap());
        let peak = mag[[0, bin]];
        let bound = peak * 10f64.powf(-31.0 / 20.0);
        for k in 0..c.bins() {
            if (k as isize - bin as isize).unsigned_abs() >= 3 {
                assert!(mag[[0, k]] < bound, "bin {k}: {} vs bound {bound}", mag[[0, k]]);
            }
        }
    }

    #[test]
    fn stft_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..200).map(|_| rng.gen::<f64>() - 0.5).collect();
        let scaled: Vec<f64> = x.iter().map(|v| v * 3.5).collect();
        let c = cfg(64, 32);
        let a = stft(&x, &c).unwrap();
        let b = stft(&scaled, &c).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u * 3.5 - v).norm() < 1e-9);
        }
    }

    #[test]
    fn rejects_short_signal() {
        let c = cfg(64, 16);
        let err = stft(&[0.0; 63], &c).unwrap_err();
        assert!(err.to_string().contains("shorter than fft_size"), "{err}");
    }

    #[test]
    fn mel_rows_have_positive_mass() {
        for (sr, fft, bins) in [(24000u32, 1024usize, 64usize), (8000, 128, 40), (8000, 64, 16)] {
            let c = SpectrogramConfig {
                fft_size: fft,
                hop: fft / 4,
                window: WindowKind::Hann,
                mel_bins: bins,
                fmin: 0.0,
                fmax: None,
            };
            let fb = mel_filterbank(sr, &c).unwrap();
            for m in 0..bins {
                assert!(fb.row(m).sum() > 0.0, "sr {sr} fft {fft}: empty mel row {m}");
            }
        }
    }

    #[test]
    fn mel_band_edges_validated() {
        let c = SpectrogramConfig { fmin: 5000.0, fmax: Some(3000.0), ..cfg(64, 16) };
        assert!(mel_filterbank(8000, &c).is_err());
        let c2 = SpectrogramConfig { fmax: Some(9000.0), ..cfg(64, 16) };
        assert!(mel_filterbank(8000, &c2).is_err());
    }

    #[test]
    fn graph_stft_matches_plain_and_is_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..160).map(|_| rng.gen::<f64>() - 0.5).collect();
        let c = cfg(64, 32);
        let exact = magnitude(&stft(&x, &c).unwrap());
        let t = Tensor::leaf(ndarray::Array1::from_vec(x).into_dyn());
        let mag = stft_mag_graph(&t, &c).unwrap();
        let got = mag.to_array();
        assert_eq!(got.shape(), exact.shape());
        for (a, b) in exact.iter().zip(got.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        crate::autodiff::gradcheck::check(
            &[t],
            |ts| stft_mag_graph(&ts[0], &c).unwrap().sum_all(),
            1e-5,
            1e-5,
            1e-8,
        )
        .unwrap();
    }

    #[test]
    fn mel_log_mel_graph_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..256).map(|_| rng.gen::<f64>() - 0.5).collect();
        let c = cfg(64, 32);
        let t = Tensor::constant(ndarray::Array1::from_vec(x).into_dyn());
        let feats = mel_and_log_mel_graph(&t, 8000, &c).unwrap();
        assert_eq!(feats.shape(), vec![(256 - 64) / 32 + 1, 32]);
    }
}
