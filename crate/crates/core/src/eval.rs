//! Objective evaluation a repo checkout can compute on its own:
//! spectral reconstruction losses, the exact bitrate table, codebook usage
//! statistics, depth-head prediction accuracy, and a length sweep that
//! watches for quality decay on long inputs.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::config::CodecConfig;
use crate::error::{CodecError, Result};
use crate::model::CodecModel;
use crate::quantizer::{bitrate, codebook_stats, ratio_decimal, CodeGrid, LayerStats};
use crate::spectral::{magnitude, mel_spectrogram, stft, SpectrogramConfig};

/// L1 distances between the spectral images of a reference and a
/// reconstruction of equal length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub mel_loss: f64,
    pub stft_loss: f64,
}

/// Mean absolute difference of mel magnitudes and of linear STFT
/// magnitudes. Identical inputs score exactly `(0, 0)`.
pub fn reconstruction_metrics(
    reference: &[f64],
    hypothesis: &[f64],
    sample_rate: u32,
    sc: &SpectrogramConfig,
) -> Result<ReconMetrics> {
    if reference.len() != hypothesis.len() {
        return Err(CodecError::shape(
            "hypothesis",
            format!("[{}]", reference.len()),
            format!("[{}]", hypothesis.len()),
        ));
    }
    let mel_r = mel_spectrogram(reference, sample_rate, sc)?;
    let mel_h = mel_spectrogram(hypothesis, sample_rate, sc)?;
    let mag_r = magnitude(&stft(reference, sc)?);
    let mag_h = magnitude(&stft(hypothesis, sc)?);
    Ok(ReconMetrics {
        mel_loss: mean_abs_diff(&mel_r, &mel_h),
        stft_loss: mean_abs_diff(&mag_r, &mag_h),
    })
}

fn mean_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n
}

/// Index of the codebook row closest to `v` in squared distance; ties go
/// to the lowest index, matching the quantizer's assignment rule.
pub fn nearest_code(v: &Array1<f64>, book: &Array2<f64>) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, row) in book.rows().into_iter().enumerate() {
        let d: f64 = row
            .iter()
            .zip(v.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Fraction of depth-head predictions whose nearest codebook entry is the
/// transmitted code, reported per predicted layer. The first layer is the
/// head's conditioning, never its output, so the vector has `L-1` entries
/// covering layers `2..=L`.
pub fn ar_prediction_accuracy(
    model: &CodecModel,
    clips: &[Vec<f64>],
    w: usize,
) -> Result<Vec<f64>> {
    let layers = model.cfg.quantizer.layers;
    if layers < 2 {
        return Err(CodecError::Config(
            "prediction accuracy needs at least two quantizer layers".into(),
        ));
    }
    if clips.is_empty() {
        return Err(CodecError::Config(
            "prediction accuracy needs at least one clip".into(),
        ));
    }
    let books = model.current_books()?;
    let mut hits = vec![0u64; layers - 1];
    let mut totals = vec![0u64; layers - 1];
    for clip in clips {
        let (codes, pred) = model.depth_predictions(clip, w)?;
        let (tq, depth, _) = pred.dim();
        for t in 0..tq {
            for p in 0..depth {
                let layer = p + 1;
                let v = pred.slice(s![t, p, ..]).to_owned();
                if nearest_code(&v, books.layer(layer)) == codes[[t, layer]] as usize {
                    hits[p] += 1;
                }
                totals[p] += 1;
            }
        }
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(h, n)| *h as f64 / *n as f64)
        .collect())
}

/// One window size's exact rate arithmetic, rendered for the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitrateRow {
    pub window: usize,
    pub frames_per_second: String,
    pub tokens_per_second: String,
    pub bits_per_second: String,
    pub bps: f64,
}

/// The rate table across every configured window size.
pub fn bitrate_table(cfg: &CodecConfig) -> Result<Vec<BitrateRow>> {
    cfg.window_sizes
        .iter()
        .map(|&w| bitrate_row(cfg, w))
        .collect()
}

/// Exact decimal rate arithmetic for one window size.
pub fn bitrate_row(cfg: &CodecConfig, w: usize) -> Result<BitrateRow> {
    let b = bitrate(
        cfg.sample_rate,
        cfg.patch_size,
        w,
        cfg.quantizer.layers,
        cfg.quantizer.codebook_size as u64,
    )?;
    let bps = match &b.bits_per_second {
        Some(r) => ratio_decimal(r),
        None => format!("{:.6}", b.bps_f64()),
    };
    Ok(BitrateRow {
        window: w,
        frames_per_second: ratio_decimal(&b.frames_per_second),
        tokens_per_second: ratio_decimal(&b.tokens_per_second),
        bits_per_second: bps,
        bps: b.bps_f64(),
    })
}

/// Aggregate metrics over one evaluation run. Perceptual scores that need
/// external pretrained systems are reserved as optional slots so merged
/// reports keep a stable schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub window: usize,
    pub clips: usize,
    pub mel_loss: f64,
    pub stft_loss: f64,
    pub time_l1: f64,
    pub bitrates: Vec<BitrateRow>,
    pub layer_stats: Vec<LayerStats>,
    /// Accuracy for layers `2..=L`; the first layer is never predicted.
    pub ar_accuracy: Vec<f64>,
    pub utmos: Option<f64>,
    pub dnsmos: Option<f64>,
    pub pesq: Option<f64>,
    pub stoi: Option<f64>,
    pub visqol: Option<f64>,
}

/// Run the full objective suite for one window size: round-trip every
/// clip, average the spectral losses, gather code-usage statistics, and
/// score the depth head.
pub fn evaluate(model: &CodecModel, clips: &[Vec<f64>], w: usize) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(CodecError::Config("evaluate needs at least one clip".into()));
    }
    let cfg = &model.cfg;
    let mut mel = 0.0;
    let mut stft_l = 0.0;
    let mut time = 0.0;
    let mut grids: Vec<CodeGrid> = Vec::with_capacity(clips.len());
    for clip in clips {
        let enc = model.encode_clip(clip, w)?;
        let rec = model.decode_codes(&enc.codes, w, enc.original_len)?;
        let m = reconstruction_metrics(clip, &rec, cfg.sample_rate, &cfg.spectrogram)?;
        mel += m.mel_loss;
        stft_l += m.stft_loss;
        time += clip
            .iter()
            .zip(&rec)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / clip.len() as f64;
        grids.push(enc.codes);
    }
    let n = clips.len() as f64;
    Ok(EvalReport {
        window: w,
        clips: clips.len(),
        mel_loss: mel / n,
        stft_loss: stft_l / n,
        time_l1: time / n,
        bitrates: bitrate_table(cfg)?,
        layer_stats: codebook_stats(&grids, cfg.quantizer.codebook_size)?,
        ar_accuracy: ar_prediction_accuracy(model, clips, w)?,
        utmos: None,
        dnsmos: None,
        pesq: None,
        stoi: None,
        visqol: None,
    })
}

/// One duration group's averaged metrics in a length sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seconds: f64,
    pub clips: usize,
    pub mel_loss: f64,
    pub stft_loss: f64,
    /// True when this group's stft loss exceeds the shortest group's by
    /// more than 20% — a regression bound on length generalization.
    pub flagged: bool,
}

/// Round-trip every clip in each duration group and flag groups whose
/// spectral loss decays relative to the shortest duration.
pub fn length_sweep(
    model: &CodecModel,
    groups: &[(f64, Vec<Vec<f64>>)],
    w: usize,
) -> Result<Vec<SweepRow>> {
    if groups.is_empty() {
        return Err(CodecError::Config(
            "length sweep needs at least one duration group".into(),
        ));
    }
    let cfg = &model.cfg;
    let mut rows = Vec::with_capacity(groups.len());
    for (seconds, clips) in groups {
        if clips.is_empty() {
            return Err(CodecError::Config(format!(
                "length sweep group at {seconds} s has no clips"
            )));
        }
        let mut mel = 0.0;
        let mut stft_l = 0.0;
        for clip in clips {
            let enc = model.encode_clip(clip, w)?;
            let rec = model.decode_codes(&enc.codes, w, enc.original_len)?;
            let m = reconstruction_metrics(clip, &rec, cfg.sample_rate, &cfg.spectrogram)?;
            mel += m.mel_loss;
            stft_l += m.stft_loss;
        }
        let n = clips.len() as f64;
        rows.push(SweepRow {
            seconds: *seconds,
            clips: clips.len(),
            mel_loss: mel / n,
            stft_loss: stft_l / n,
            flagged: false,
        });
    }
    let shortest = rows
        .iter()
        .min_by(|a, b| a.seconds.partial_cmp(&b.seconds).unwrap())
        .map(|r| r.stft_loss)
        .unwrap();
    for r in &mut rows {
        r.flagged = r.stft_loss > shortest * 1.2;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CodecConfig;
    use crate::quantizer::CodebookSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sc() -> SpectrogramConfig {
        CodecConfig::toy().spectrogram
    }

    fn tone(len: usize, freq: f64, sr: f64) -> Vec<f64> {
        (0..len)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin() * 0.5)
            .collect()
    }

    #[test]
    fn identical_signals_score_zero() {
        let x = tone(4000, 220.0, 8000.0);
        let m = reconstruction_metrics(&x, &x, 8000, &sc()).unwrap();
        assert_eq!(m.mel_loss, 0.0);
        assert_eq!(m.stft_loss, 0.0);
    }

    #[test]
    fn silence_against_signal_equals_mean_magnitude() {
        let x = tone(4000, 220.0, 8000.0);
        let zeros = vec![0.0; x.len()];
        let m = reconstruction_metrics(&x, &zeros, 8000, &sc()).unwrap();
        let mel = mel_spectrogram(&x, 8000, &sc()).unwrap();
        let mag = magnitude(&stft(&x, &sc()).unwrap());
        let mel_mean = mel.iter().map(|v| v.abs()).sum::<f64>() / mel.len() as f64;
        let mag_mean = mag.iter().map(|v| v.abs()).sum::<f64>() / mag.len() as f64;
        assert!((m.mel_loss - mel_mean).abs() < 1e-12);
        assert!((m.stft_loss - mag_mean).abs() < 1e-12);
    }

    #[test]
    fn random_pair_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..2048).map(|_| rng.gen::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..2048).map(|_| rng.gen::<f64>() - 0.5).collect();
        let m = reconstruction_metrics(&a, &b, 8000, &sc()).unwrap();

        let mel_a = mel_spectrogram(&a, 8000, &sc()).unwrap();
        let mel_b = mel_spectrogram(&b, 8000, &sc()).unwrap();
        let mut acc = 0.0;
        for (x, y) in mel_a.iter().zip(mel_b.iter()) {
            acc += (x - y).abs();
        }
        assert!((m.mel_loss - acc / mel_a.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let x = tone(1000, 220.0, 8000.0);
        let y = tone(999, 220.0, 8000.0);
        assert!(reconstruction_metrics(&x, &y, 8000, &sc()).is_err());
    }

    #[test]
    fn nearest_code_breaks_ties_low() {
        let book =
            Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 1.0, 0.0, 5.0, 5.0]).unwrap();
        let v = Array1::from_vec(vec![1.0, 0.0]);
        assert_eq!(nearest_code(&v, &book), 0);
    }

    #[test]
    fn random_predictions_hit_chance_level() {
        // Simulated snapping with random targets: accuracy concentrates
        // near 1/C.
        let c = 64usize;
        let dim = 8usize;
        let book = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            Array2::from_shape_fn((c, dim), |_| rng.gen::<f64>() - 0.5)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = 20_000usize;
        let mut hits = 0usize;
        for _ in 0..trials {
            let v = Array1::from_shape_fn(dim, |_| rng.gen::<f64>() - 0.5);
            let truth = rng.gen_range(0..c);
            if nearest_code(&v, &book) == truth {
                hits += 1;
            }
        }
        let acc = hits as f64 / trials as f64;
        let chance = 1.0 / c as f64;
        assert!(
            (acc - chance).abs() < 4.0 * (chance / trials as f64).sqrt() + 2e-3,
            "accuracy {acc} too far from chance {chance}"
        );
    }

    #[test]
    fn model_accuracy_bounds_and_report() {
        let cfg = CodecConfig::toy();
        let books = CodebookSet::random(
            cfg.quantizer.layers,
            cfg.quantizer.codebook_size,
            cfg.quantizer.dim,
            9,
        )
        .unwrap();
        let model = CodecModel::new(&cfg, books, 7).unwrap();
        let clips: Vec<Vec<f64>> = vec![
            tone(640, 200.0, 8000.0),
            tone(640, 350.0, 8000.0),
        ];
        let w = cfg.window_sizes[0];
        let acc = ar_prediction_accuracy(&model, &clips, w).unwrap();
        assert_eq!(acc.len(), cfg.quantizer.layers - 1);
        for a in &acc {
            assert!((0.0..=1.0).contains(a), "accuracy {a} out of bounds");
        }
        let report = evaluate(&model, &clips, w).unwrap();
        assert_eq!(report.ar_accuracy, acc);
        assert!(report.mel_loss.is_finite() && report.stft_loss.is_finite());
        assert_eq!(report.bitrates.len(), cfg.window_sizes.len());
        assert!(report.utmos.is_none());
    }

    #[test]
    fn paper_scale_bitrate_table_values() {
        let mut cfg = CodecConfig::default();
        cfg.window_sizes = (2..=10).collect();
        let rows = bitrate_table(&cfg).unwrap();
        let expect = [
            "1237.5",
            "825",
            "618.75",
            "495",
            "412.5",
            "353.571429",
            "309.375",
            "275",
            "247.5",
        ];
        for (row, want) in rows.iter().zip(expect.iter()) {
            assert_eq!(row.bits_per_second, *want, "w={}", row.window);
        }
    }

    #[test]
    fn sweep_flags_only_decayed_groups() {
        let cfg = CodecConfig::toy();
        let books = CodebookSet::random(
            cfg.quantizer.layers,
            cfg.quantizer.codebook_size,
            cfg.quantizer.dim,
            9,
        )
        .unwrap();
        let model = CodecModel::new(&cfg, books, 7).unwrap();
        let w = cfg.window_sizes[0];
        let groups = vec![
            (0.1, vec![tone(800, 200.0, 8000.0)]),
            (0.2, vec![tone(1600, 200.0, 8000.0)]),
        ];
        let rows = length_sweep(&model, &groups, w).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(!rows[0].flagged, "shortest group can never be flagged");
        for r in &rows {
            assert!(r.mel_loss.is_finite() && r.stft_loss.is_finite());
        }
        assert!(length_sweep(&model, &[], w).is_err());
    }
}
