//! Deterministic synthetic audio for tests, smoke training, and demos.
//!
//! Clips are organ-like harmonic stacks: every partial completes a whole
//! number of cycles per 64-sample span, so a clip is strictly periodic at
//! that span (plus a slow, shallow amplitude modulation). Quasi-stationary
//! tonal material keeps toy-scale training runs on measurable ground while
//! still exercising the full analysis bandwidth.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{save_wav_f32, AudioClip};
use crate::error::Result;

/// Common cycle length, in samples, shared by every partial.
const CYCLE: usize = 64;

/// One synthetic clip: a 2–4-partial harmonic stack with slow shallow
/// amplitude modulation and a gentle onset/offset ramp. Peak is normalized
/// to 0.5. Partial frequencies are `m / 64` cycles per sample (tonal for
/// any sample rate, and never above 0.32 × Nyquist × 2).
pub fn synth_clip(rng: &mut ChaCha8Rng, len: usize, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let base = rng.gen_range(1..=4) as f64;
    let n_partials = rng.gen_range(2..=4);
    let mut partials = Vec::with_capacity(n_partials);
    for _ in 0..n_partials {
        let harmonic = rng.gen_range(1..=5) as f64;
        // Cycles per sample; base ≤ 4 and harmonic ≤ 5 keep this ≤ 20/64.
        let freq = base * harmonic / CYCLE as f64;
        let amp = 0.3 + 0.7 * rng.gen::<f64>();
        let phase = rng.gen::<f64>() * std::f64::consts::TAU;
        let am_rate = 0.3 + 0.9 * rng.gen::<f64>();
        let am_depth = 0.25 * rng.gen::<f64>();
        partials.push((freq, amp, phase, am_rate, am_depth));
    }

    let mut out = vec![0.0; len];
    for (freq, amp, phase, am_rate, am_depth) in partials {
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let am = 1.0 - am_depth * 0.5 * (1.0 - (std::f64::consts::TAU * am_rate * t).cos());
            *o += amp * am * (std::f64::consts::TAU * freq * i as f64 + phase).sin();
        }
    }

    // Short raised-cosine ramps avoid clicks at the edges.
    let ramp = (sr * 0.01) as usize;
    let ramp = ramp.min(len / 2).max(1);
    for i in 0..ramp {
        let g = 0.5 * (1.0 - (std::f64::consts::PI * i as f64 / ramp as f64).cos());
        out[i] *= g;
        out[len - 1 - i] *= g;
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = 0.5 / peak;
        for v in &mut out {
            *v *= g;
        }
    }
    out
}

/// In-memory corpus: `n` clips of `len` samples, reproducible per seed.
pub fn synth_clips(n: usize, len: usize, sample_rate: u32, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synth_clip(&mut rng, len, sample_rate)).collect()
}

/// Write `n` synthetic wav files (`clip_00.wav` …) under `dir`, creating
/// it if needed. Returns the paths in filename order — the same order the
/// training corpus loader will see them.
pub fn synth_corpus(
    dir: impl AsRef<Path>,
    n: usize,
    seconds: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let len = (seconds * sample_rate as f64).round() as usize;
    let clips = synth_clips(n, len, sample_rate, seed);
    let mut paths = Vec::with_capacity(n);
    for (i, samples) in clips.into_iter().enumerate() {
        let path = dir.join(format!("clip_{i:02}.wav"));
        save_wav_f32(&path, &AudioClip::new(samples, sample_rate)?)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::load_audio;
    use crate::training::load_corpus;

    #[test]
    fn clips_are_deterministic_per_seed() {
        let a = synth_clips(3, 800, 8000, 5);
        let b = synth_clips(3, 800, 8000, 5);
        let c = synth_clips(3, 800, 8000, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn clips_are_normalized_and_nontrivial() {
        for clip in synth_clips(10, 8000, 8000, 42) {
            let peak = clip.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((peak - 0.5).abs() < 1e-9, "peak {peak}");
            let energy: f64 = clip.iter().map(|v| v * v).sum();
            assert!(energy > 1.0, "energy {energy}");
        }
    }

    #[test]
    fn corpus_round_trips_through_wav_loader() {
        let dir = tempfile::tempdir().unwrap();
        let paths = synth_corpus(dir.path(), 4, 0.1, 8000, 9).unwrap();
        assert_eq!(paths.len(), 4);
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.len(), 4);
        for (path, clip) in paths.iter().zip(&loaded) {
            let direct = load_audio(path).unwrap();
            assert_eq!(direct.samples, clip.samples);
            assert_eq!(clip.sample_rate, 8000);
            assert_eq!(clip.len(), 800);
        }
    }
}
