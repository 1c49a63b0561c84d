//! Two-stage training.
//!
//! Stage 1 pretrains the waveform frontends: a plain Patchify/UnPatchify
//! autoencoder objective plus a masked-frame objective running through
//! separate encoder/decoder stacks. Only the frontends survive the stage
//! boundary — the stage-1 attention stacks are scaffolding and are not
//! written to the checkpoint.
//!
//! Stage 2 builds the full codec, loads the stage-1 frontends, freezes
//! Patchify (gradient-stopped and excluded from the optimizer), and trains
//! everything else adversarially with a 1:1 generator/discriminator
//! alternation. Stage-2 checkpoints capture parameters, optimizer moments,
//! and the data sampler position, so training resumes bit-exactly.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{load_audio, AudioClip};
use crate::autodiff::{Arr, Tensor};
use crate::checkpoint::{self, Snapshot};
use crate::config::CodecConfig;
use crate::error::{CodecError, Result};
use crate::frontend::{trim_samples, Patchify, UnPatchify};
use crate::losses::{
    ar_loss, disc_loss, feature_match_loss, gen_adv_loss, mae_loss, recon_freq_loss,
    recon_time_loss, total_generator_loss, weighted_total, DiscriminatorEnsemble, GenLossParts,
    LossReport,
};
use crate::model::{samples_tensor, CodecModel};
use crate::nn::{AdamW, Linear, ParamSet};
use crate::quantizer::CodebookSet;
use crate::transformer::AttentionStack;

/// Load every `.wav` under `dir`, sorted by file name for determinism.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<AudioClip>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "wav").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CodecError::Audio(format!(
            "no .wav files under {}",
            dir.as_ref().display()
        )));
    }
    paths.into_iter().map(load_audio).collect()
}

/// Uniform crop of `crop` samples; shorter clips are zero-padded on the
/// right without consuming randomness.
pub fn sample_crop(rng: &mut ChaCha8Rng, clip: &AudioClip, crop: usize) -> Vec<f64> {
    let n = clip.samples.len();
    if n <= crop {
        let mut out = clip.samples.clone();
        out.resize(crop, 0.0);
        return out;
    }
    let start = rng.gen_range(0..=n - crop);
    clip.samples[start..start + crop].to_vec()
}

/// Draw a masking rate in `[lo, hi]`, then mark `ceil(rate * t)` distinct
/// frames via a partial shuffle.
pub fn sample_mask(rng: &mut ChaCha8Rng, t: usize, lo: f64, hi: f64) -> Vec<bool> {
    let rate = lo + rng.gen::<f64>() * (hi - lo);
    let k = ((rate * t as f64).ceil() as usize).min(t);
    let mut idx: Vec<usize> = (0..t).collect();
    for i in 0..k {
        let j = rng.gen_range(i..t);
        idx.swap(i, j);
    }
    let mut mask = vec![false; t];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    mask
}

/// Uniform draw from the configured window sizes.
pub fn sample_window(rng: &mut ChaCha8Rng, sizes: &[usize]) -> usize {
    sizes[rng.gen_range(0..sizes.len())]
}

fn non_finite(step: u64, what: &str, v: f64) -> CodecError {
    CodecError::Diverged {
        step: step as usize,
        msg: format!("{what} became non-finite ({v})"),
    }
}

// ---------------------------------------------------------------------------
// Stage 1
// ---------------------------------------------------------------------------

pub struct Stage1Trainer {
    pub cfg: CodecConfig,
    pub params: ParamSet,
    pub patchify: Patchify,
    pub unpatchify: UnPatchify,
    mae_enc: AttentionStack,
    mae_dec: AttentionStack,
    mae_head: Linear,
    pub opt: AdamW,
    pub data_rng: ChaCha8Rng,
    pub step: u64,
}

impl Stage1Trainer {
    pub fn new(cfg: &CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
        let patchify = Patchify::new(&mut ps, "patchify", &mut rng, cfg);
        let unpatchify = UnPatchify::new(&mut ps, "unpatchify", &mut rng, cfg);
        let mae_enc = AttentionStack::new(&mut ps, "s1mae_enc", &mut rng, &cfg.mae);
        let mae_dec = AttentionStack::new(&mut ps, "s1mae_dec", &mut rng, &cfg.mae);
        let mae_head = Linear::new(
            &mut ps,
            "s1mae_head",
            &mut rng,
            cfg.encoder.dim,
            cfg.encoder.dim,
            true,
        );
        let opt = AdamW::new(ps.tensors(), cfg.training.lr, cfg.training.weight_decay);
        let data_rng = ChaCha8Rng::seed_from_u64(cfg.training.seed.wrapping_add(2));
        Ok(Stage1Trainer {
            cfg: cfg.clone(),
            params: ps,
            patchify,
            unpatchify,
            mae_enc,
            mae_dec,
            mae_head,
            opt,
            data_rng,
            step: 0,
        })
    }

    pub fn train_step(&mut self, corpus: &[AudioClip]) -> Result<LossReport> {
        assert!(!corpus.is_empty(), "training corpus is empty");
        let crop_len = self.cfg.crop_samples();
        let clip = &corpus[self.data_rng.gen_range(0..corpus.len())];
        let x = sample_crop(&mut self.data_rng, clip, crop_len);

        let p = self.patchify.forward(&x);
        let t = p.frames.shape()[0];
        let mask = sample_mask(
            &mut self.data_rng,
            t,
            self.cfg.training.mask_rate_min,
            self.cfg.training.mask_rate_max,
        );

        // Autoencoder reconstruction from unmasked frames.
        let wave = self.unpatchify.forward(&p.frames);
        let x_hat = trim_samples(&wave, x.len())?;
        let x_const = samples_tensor(&x);
        let l_rec_t = recon_time_loss(&x_hat, &x_const);
        let l_rec_f = recon_freq_loss(&x_hat, &x_const, &self.cfg.spectrogram, self.cfg.losses.subbands)?;
        let l_rec = l_rec_t.add(&l_rec_f);

        // Masked-frame branch through the throwaway stacks.
        let l_mae = if self.cfg.losses.enable_mae {
            let d = self.cfg.encoder.dim;
            let mut gate = Array2::<f64>::ones((t, d));
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    gate.row_mut(i).fill(0.0);
                }
            }
            let masked = p.frames.mul(&Tensor::constant(gate.into_dyn()));
            let h = self.mae_enc.forward(&masked);
            let pred = self.mae_head.forward(&self.mae_dec.forward(&h));
            mae_loss(
                &pred,
                &p.frames.stop_grad(),
                &mask,
                self.cfg.losses.mae_mse_masked,
            )
        } else {
            Tensor::scalar_const(0.0)
        };

        let zero = Tensor::scalar_const(0.0);
        let lambda_mae = self.cfg.losses.lambda_mae;
        let total = weighted_total(&zero, &zero, &l_rec, &l_mae, &zero, &zero, lambda_mae, 0.0);

        let parts = GenLossParts {
            l_rec: l_rec.scalar(),
            l_mae: l_mae.scalar(),
            ..Default::default()
        };
        let total_v = total_generator_loss(&parts, lambda_mae, 0.0)
            .map_err(|_| non_finite(self.step, "stage-1 loss", f64::NAN))?;

        self.opt.zero_grad();
        total.backward();
        self.opt.step(Some(self.cfg.training.grad_clip));
        self.step += 1;

        Ok(LossReport {
            step: self.step as usize,
            stage: 1,
            parts,
            l_disc: 0.0,
            total: total_v,
        })
    }

    /// The stage-1 artifact: frontend weights only. The masked-frame stacks
    /// are scaffolding and are left out on purpose.
    pub fn save_frontend(&self, path: impl AsRef<Path>) -> Result<()> {
        let tensors: Vec<(String, Arr)> = self
            .params
            .entries()
            .iter()
            .filter(|(n, _)| n.starts_with("patchify.") || n.starts_with("unpatchify."))
            .map(|(n, t)| (n.clone(), t.to_array()))
            .collect();
        let snap = Snapshot {
            stage: 1,
            step: self.step,
            config: self.cfg.clone(),
            rng_seed: self.cfg.training.seed.wrapping_add(2),
            rng_word_pos: self.data_rng.get_word_pos(),
            g_opt_t: 0,
            d_opt_t: 0,
            books_provenance: Vec::new(),
            books_seed: 0,
            tensors,
        };
        checkpoint::save(path, &snap)
    }
}

// ---------------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------------

pub struct Stage2Trainer {
    pub cfg: CodecConfig,
    pub model: CodecModel,
    pub disc_params: ParamSet,
    pub discs: DiscriminatorEnsemble,
    pub g_opt: AdamW,
    g_names: Vec<String>,
    pub d_opt: AdamW,
    d_names: Vec<String>,
    pub data_rng: ChaCha8Rng,
    pub step: u64,
    pub freeze_patchify: bool,
}

impl Stage2Trainer {
    /// Build the stage-2 trainer. `stage1` is the stage-1 frontend snapshot;
    /// `None` trains from scratch (the single-stage ablation also skips the
    /// Patchify freeze).
    pub fn new(cfg: &CodecConfig, books: CodebookSet, stage1: Option<&Snapshot>) -> Result<Self> {
        cfg.validate()?;
        let model = CodecModel::new(cfg, books, cfg.training.seed)?;

        if let Some(snap) = stage1 {
            if snap.stage != 1 {
                return Err(CodecError::Config(format!(
                    "expected a stage-1 checkpoint, found stage {}",
                    snap.stage
                )));
            }
            let mut loaded = 0usize;
            for (name, arr) in &snap.tensors {
                if !(name.starts_with("patchify.") || name.starts_with("unpatchify.")) {
                    continue;
                }
                let t = model.params.get(name).ok_or_else(|| {
                    CodecError::Config(format!("stage-1 tensor `{name}` has no counterpart"))
                })?;
                t.set_value(arr.clone());
                loaded += 1;
            }
            if loaded == 0 {
                return Err(CodecError::Config(
                    "stage-1 checkpoint contains no frontend tensors".into(),
                ));
            }
        }

        let freeze_patchify = !cfg.training.single_stage;
        let excluded: &[&str] = if freeze_patchify { &["patchify."] } else { &[] };
        let g_params = model.trainable_excluding(excluded);
        let g_names: Vec<String> = model
            .params
            .entries()
            .iter()
            .filter(|(n, _)| !excluded.iter().any(|p| n.starts_with(p)))
            .map(|(n, _)| n.clone())
            .collect();

        let mut disc_params = ParamSet::new();
        let mut disc_rng = ChaCha8Rng::seed_from_u64(cfg.training.seed.wrapping_add(1));
        let discs = DiscriminatorEnsemble::new(
            &mut disc_params,
            "disc",
            &mut disc_rng,
            &cfg.discriminators,
            cfg.sample_rate,
        );
        let d_names: Vec<String> = disc_params.entries().iter().map(|(n, _)| n.clone()).collect();

        let g_opt = AdamW::new(g_params, cfg.training.lr, cfg.training.weight_decay);
        let d_opt = AdamW::new(disc_params.tensors(), cfg.training.lr, cfg.training.weight_decay);
        let data_rng = ChaCha8Rng::seed_from_u64(cfg.training.seed.wrapping_add(3));

        Ok(Stage2Trainer {
            cfg: cfg.clone(),
            model,
            disc_params,
            discs,
            g_opt,
            g_names,
            d_opt,
            d_names,
            data_rng,
            step: 0,
        freeze_patchify,
        })
    }

    pub fn train_step(&mut self, corpus: &[AudioClip]) -> Result<LossReport> {
        assert!(!corpus.is_empty(), "training corpus is empty");
        let crop_len = self.cfg.crop_samples();
        let clip = &corpus[self.data_rng.gen_range(0..corpus.len())];
        let x = sample_crop(&mut self.data_rng, clip, crop_len);
        let w = sample_window(&mut self.data_rng, &self.cfg.window_sizes);
        let t = x.len().div_ceil(self.cfg.patch_size);
        let mask = sample_mask(
            &mut self.data_rng,
            t,
            self.cfg.training.mask_rate_min,
            self.cfg.training.mask_rate_max,
        );

        let tf = self.model.train_forward(&x, w, &mask, self.freeze_patchify)?;
        let x_const = samples_tensor(&x);

        // Discriminator update on the detached reconstruction.
        let fake_detached = tf.x_hat.stop_grad();
        let real_d = self.discs.forward_all(&x_const)?;
        let fake_d = self.discs.forward_all(&fake_detached)?;
        let real_logits: Vec<Tensor> = real_d.iter().map(|(l, _)| l.clone()).collect();
        let fake_logits: Vec<Tensor> = fake_d.iter().map(|(l, _)| l.clone()).collect();
        let l_disc = disc_loss(&real_logits, &fake_logits);
        let l_disc_v = l_disc.scalar();
        if !l_disc_v.is_finite() {
            return Err(non_finite(self.step, "discriminator loss", l_disc_v));
        }
        self.d_opt.zero_grad();
        l_disc.backward();
        self.d_opt.step(Some(self.cfg.training.grad_clip));

        // Generator update against the just-updated discriminators.
        let real_g = self.discs.forward_all(&x_const)?;
        let fake_g = self.discs.forward_all(&tf.x_hat)?;
        let fake_logits_g: Vec<Tensor> = fake_g.iter().map(|(l, _)| l.clone()).collect();
        let real_feats: Vec<Vec<Tensor>> = real_g.into_iter().map(|(_, f)| f).collect();
        let fake_feats: Vec<Vec<Tensor>> = fake_g.into_iter().map(|(_, f)| f).collect();

        let l_adv = gen_adv_loss(&fake_logits_g);
        let l_feat = feature_match_loss(&real_feats, &fake_feats);
        let l_rec_t = recon_time_loss(&tf.x_hat, &x_const);
        let l_rec_f =
            recon_freq_loss(&tf.x_hat, &x_const, &self.cfg.spectrogram, self.cfg.losses.subbands)?;
        let l_rec = l_rec_t.add(&l_rec_f);
        let l_mae = if self.cfg.losses.enable_mae {
            mae_loss(
                &tf.mae_pred,
                &tf.mae_target,
                &tf.padded_mask,
                self.cfg.losses.mae_mse_masked,
            )
        } else {
            Tensor::scalar_const(0.0)
        };
        let l_ar = if self.cfg.losses.enable_ar {
            ar_loss(&tf.ar_pred, &tf.ar_target)
        } else {
            Tensor::scalar_const(0.0)
        };

        let lambda_mae = self.cfg.losses.lambda_mae;
        let lambda_ar = self.cfg.losses.lambda_ar;
        let total = weighted_total(
            &l_adv,
            &l_feat,
            &l_rec,
            &l_mae,
            &l_ar,
            &tf.commit_loss,
            lambda_mae,
            lambda_ar,
        );

        let parts = GenLossParts {
            l_adv: l_adv.scalar(),
            l_feat: l_feat.scalar(),
            l_rec: l_rec.scalar(),
            l_mae: l_mae.scalar(),
            l_ar: l_ar.scalar(),
            l_commit: tf.commit_loss.scalar(),
        };
        let total_v = total_generator_loss(&parts, lambda_mae, lambda_ar).map_err(|e| {
            CodecError::Diverged {
                step: self.step as usize,
                msg: e.to_string(),
            }
        })?;

        self.g_opt.zero_grad();
        total.backward();
        self.g_opt.step(Some(self.cfg.training.grad_clip));
        self.step += 1;

        Ok(LossReport {
            step: self.step as usize,
            stage: 2,
            parts,
            l_disc: l_disc_v,
            total: total_v,
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors: Vec<(String, Arr)> = Vec::new();
        for (n, t) in self.model.params.entries() {
            tensors.push((n.clone(), t.to_array()));
        }
        for (n, t) in self.disc_params.entries() {
            tensors.push((n.clone(), t.to_array()));
        }
        let books = self.model.construction_books();
        for l in 0..books.layers() {
            tensors.push((format!("frozen_books.layer{l}"), books.layer(l).clone().into_dyn()));
        }
        let (g_t, g_m, g_v) = self.g_opt.state();
        for (name, (m, v)) in self.g_names.iter().zip(g_m.iter().zip(g_v.iter())) {
            tensors.push((format!("opt.g.m.{name}"), m.clone()));
            tensors.push((format!("opt.g.v.{name}"), v.clone()));
        }
        let (d_t, d_m, d_v) = self.d_opt.state();
        for (name, (m, v)) in self.d_names.iter().zip(d_m.iter().zip(d_v.iter())) {
            tensors.push((format!("opt.d.m.{name}"), m.clone()));
            tensors.push((format!("opt.d.v.{name}"), v.clone()));
        }
        let snap = Snapshot {
            stage: 2,
            step: self.step,
            config: self.cfg.clone(),
            rng_seed: self.cfg.training.seed.wrapping_add(3),
            rng_word_pos: self.data_rng.get_word_pos(),
            g_opt_t: g_t,
            d_opt_t: d_t,
            books_provenance: books.provenance.clone(),
            books_seed: books.seed,
            tensors,
        };
        checkpoint::save(path, &snap)
    }

    /// Rebuild a trainer from a stage-2 checkpoint; training continues
    /// bit-exactly from where it stopped.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let snap = checkpoint::load(path)?;
        if snap.stage != 2 {
            return Err(CodecError::Config(format!(
                "expected a stage-2 checkpoint, found stage {}",
                snap.stage
            )));
        }
        let cfg = snap.config.clone();
        let layers = cfg.quantizer.layers;
        let mut books = Vec::with_capacity(layers);
        for l in 0..layers {
            let arr = snap.require(&format!("frozen_books.layer{l}"))?;
            books.push(
                arr.clone()
                    .into_dimensionality::<ndarray::Ix2>()
                    .map_err(|e| CodecError::format("checkpoint", "tensors", e.to_string()))?,
            );
        }
        let books = CodebookSet::new(books, true, snap.books_provenance.clone(), snap.books_seed)?;

        let mut trainer = Stage2Trainer::new(&cfg, books, None)?;
        for (n, t) in trainer.model.params.entries() {
            t.set_value(snap.require(n)?.clone());
        }
        for (n, t) in trainer.disc_params.entries() {
            t.set_value(snap.require(n)?.clone());
        }
        let mut g_m = Vec::new();
        let mut g_v = Vec::new();
        for name in &trainer.g_names {
            g_m.push(snap.require(&format!("opt.g.m.{name}"))?.clone());
            g_v.push(snap.require(&format!("opt.g.v.{name}"))?.clone());
        }
        trainer.g_opt.restore_state(snap.g_opt_t, g_m, g_v);
        let mut d_m = Vec::new();
        let mut d_v = Vec::new();
        for name in &trainer.d_names {
            d_m.push(snap.require(&format!("opt.d.m.{name}"))?.clone());
            d_v.push(snap.require(&format!("opt.d.v.{name}"))?.clone());
        }
        trainer.d_opt.restore_state(snap.d_opt_t, d_m, d_v);
        trainer.data_rng = ChaCha8Rng::seed_from_u64(snap.rng_seed);
        trainer.data_rng.set_word_pos(snap.rng_word_pos);
        trainer.step = snap.step;
        Ok(trainer)
    }

    /// Load just the model for inference (encode/decode) from a stage-2
    /// checkpoint.
    pub fn load_model(path: impl AsRef<Path>) -> Result<CodecModel> {
        let trainer = Self::load_checkpoint(path)?;
        Ok(trainer.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FrontendVariant;

    fn tiny_cfg() -> CodecConfig {
        let mut cfg = CodecConfig::toy();
        cfg.patch_size = 8;
        cfg.frontend.variant = FrontendVariant::Conv;
        cfg.frontend.strides = vec![2, 4];
        cfg.frontend.channels = vec![3, 4];
        cfg.frontend.lstm_layers = 1;
        cfg.encoder.dim = 8;
        cfg.encoder.n_layers = 1;
        cfg.encoder.n_heads = 2;
        cfg.encoder.window = 8;
        cfg.decoder.dim = 8;
        cfg.decoder.n_layers = 1;
        cfg.decoder.n_heads = 2;
        cfg.decoder.window = 8;
        cfg.mae.dim = 8;
        cfg.mae.n_layers = 1;
        cfg.mae.n_heads = 2;
        cfg.mae.window = 8;
        cfg.depth_ar = crate::config::DepthArConfig { n_layers: 1, dim: 8, n_heads: 2 };
        cfg.quantizer.codebook_size = 8;
        cfg.quantizer.dim = 4;
        cfg.spectrogram.fft_size = 64;
        cfg.spectrogram.hop = 32;
        cfg.spectrogram.mel_bins = 8;
        cfg.discriminators.hidden = vec![8, 8];
        cfg.discriminators.hops = vec![16, 32];
        cfg.discriminators.fft_mult = 2;
        cfg.discriminators.mel_bins = 4;
        cfg.training.crop_seconds = 0.04; // 320 samples at 8 kHz
        cfg.window_sizes = vec![2, 3];
        cfg.validate().unwrap();
        cfg
    }

    fn tiny_corpus(sr: u32) -> Vec<AudioClip> {
        (0..3)
            .map(|k| {
                let f = 200.0 * (k + 1) as f64;
                let samples: Vec<f64> = (0..sr as usize / 2)
                    .map(|i| {
                        let t = i as f64 / sr as f64;
                        (std::f64::consts::TAU * f * t).sin() * 0.4
                    })
                    .collect();
                AudioClip::new(samples, sr).unwrap()
            })
            .collect()
    }

    fn books_for(cfg: &CodecConfig) -> CodebookSet {
        CodebookSet::random(cfg.quantizer.layers, cfg.quantizer.codebook_size, cfg.quantizer.dim, 7)
            .unwrap()
    }

    #[test]
    fn mask_sampler_matches_rate_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mask = sample_mask(&mut rng, 10, 0.2, 0.3);
            let k = mask.iter().filter(|&&m| m).count();
            assert!((2..=3).contains(&k), "10 frames at 20-30% should mask 2-3, got {k}");
        }
        let mask = sample_mask(&mut rng, 5, 0.0, 0.0);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 0);
    }

    #[test]
    fn stage1_improves_reconstruction() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(cfg.sample_rate);
        let mut t1 = Stage1Trainer::new(&cfg).unwrap();
        let first = t1.train_step(&corpus).unwrap();
        assert_eq!(first.stage, 1);
        assert_eq!(first.parts.l_adv, 0.0);
        assert_eq!(first.l_disc, 0.0);
        let mut last = first.clone();
        for _ in 0..30 {
            last = t1.train_step(&corpus).unwrap();
        }
        assert!(last.total.is_finite());
        assert!(
            last.parts.l_rec < first.parts.l_rec,
            "reconstruction should improve: {} -> {}",
            first.parts.l_rec,
            last.parts.l_rec
        );
    }

    #[test]
    fn stage2_step_runs_and_freezes_patchify() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(cfg.sample_rate);
        let mut t1 = Stage1Trainer::new(&cfg).unwrap();
        for _ in 0..3 {
            t1.train_step(&corpus).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let s1_path = dir.path().join("stage1.almk");
        t1.save_frontend(&s1_path).unwrap();
        let snap = checkpoint::load(&s1_path).unwrap();
        assert_eq!(snap.stage, 1);
        assert!(snap.tensors.iter().all(|(n, _)| {
            n.starts_with("patchify.") || n.starts_with("unpatchify.")
        }), "stage-1 artifact must contain frontend tensors only");

        let mut t2 = Stage2Trainer::new(&cfg, books_for(&cfg), Some(&snap)).unwrap();
        let patchify_before: Vec<Arr> = t2
            .model
            .params
            .with_prefix("patchify.")
            .iter()
            .map(|(_, t)| t.to_array())
            .collect();
        let books_before = t2.model.frozen_codebook_bytes();
        for _ in 0..4 {
            let rep = t2.train_step(&corpus).unwrap();
            assert_eq!(rep.stage, 2);
            assert!(rep.total.is_finite());
            assert!(rep.l_disc.is_finite());
        }
        let patchify_after: Vec<Arr> = t2
            .model
            .params
            .with_prefix("patchify.")
            .iter()
            .map(|(_, t)| t.to_array())
            .collect();
        assert_eq!(patchify_before, patchify_after, "patchify must stay frozen");
        assert_eq!(books_before, t2.model.frozen_codebook_bytes(), "codebooks must stay frozen");
    }

    #[test]
    fn stage2_resume_is_bit_exact() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(cfg.sample_rate);
        let mut a = Stage2Trainer::new(&cfg, books_for(&cfg), None).unwrap();
        for _ in 0..3 {
            a.train_step(&corpus).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.almk");
        a.save_checkpoint(&path).unwrap();

        // Continue the original.
        let rep_a = a.train_step(&corpus).unwrap();
        // Resume the copy and take the same step.
        let mut b = Stage2Trainer::load_checkpoint(&path).unwrap();
        assert_eq!(b.step, 3);
        let rep_b = b.train_step(&corpus).unwrap();

        assert_eq!(rep_a.total.to_bits(), rep_b.total.to_bits(), "loss must match bitwise");
        for ((na, ta), (nb, tb)) in a
            .model
            .params
            .entries()
            .iter()
            .zip(b.model.params.entries())
        {
            assert_eq!(na, nb);
            let (va, vb) = (ta.to_array(), tb.to_array());
            for (x, y) in va.iter().zip(vb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{na} diverged after resume");
            }
        }
    }

    #[test]
    fn ablation_flags_zero_their_loss_fields() {
        let mut cfg = tiny_cfg();
        cfg.losses.enable_mae = false;
        cfg.losses.enable_ar = false;
        let corpus = tiny_corpus(cfg.sample_rate);
        let mut t2 = Stage2Trainer::new(&cfg, books_for(&cfg), None).unwrap();
        let rep = t2.train_step(&corpus).unwrap();
        assert_eq!(rep.parts.l_mae, 0.0, "disabled masked objective must log exactly zero");
        assert_eq!(rep.parts.l_ar, 0.0, "disabled depth objective must log exactly zero");
        assert!(rep.parts.l_rec > 0.0);
    }

    #[test]
    fn single_stage_trains_patchify() {
        let mut cfg = tiny_cfg();
        cfg.training.single_stage = true;
        let corpus = tiny_corpus(cfg.sample_rate);
        let mut t2 = Stage2Trainer::new(&cfg, books_for(&cfg), None).unwrap();
        let before: Vec<Arr> = t2
            .model
            .params
            .with_prefix("patchify.")
            .iter()
            .map(|(_, t)| t.to_array())
            .collect();
        for _ in 0..2 {
            t2.train_step(&corpus).unwrap();
        }
        let after: Vec<Arr> = t2
            .model
            .params
            .with_prefix("patchify.")
            .iter()
            .map(|(_, t)| t.to_array())
            .collect();
        assert_ne!(before, after, "single-stage mode must train patchify");
    }
}
