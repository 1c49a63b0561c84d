//! Full codec assembly: frontend, query-token encoder, residual quantizer
//! over frozen codebooks, token decoder, and the two auxiliary heads.
//!
//! The transmitted representation is the set of learned query tokens only:
//! one per `w` frames, interleaved into the encoder input and quantized
//! after a linear projection. The decoder re-expands each quantized query
//! into `w` mask slots and the frame frontend turns those back into samples.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::autodiff::Tensor;
use crate::config::{CodecConfig, FreezeMode};
use crate::error::{CodecError, Result};
use crate::frontend::{trim_samples, Patchify, UnPatchify};
use crate::interleave::{
    decoder_interleave, decoder_retrieve, encoder_interleave, encoder_retrieve, frame_positions,
    pad_frames,
};
use crate::nn::{init_normal, Linear, ParamSet};
use crate::quantizer::{rvq_decode, rvq_encode, CodeGrid, CodebookSet, RvqResult};
use crate::transformer::{AttentionStack, DepthAr};

/// Everything the encode path produces for one clip at one window size.
#[derive(Debug)]
pub struct EncodeOutput {
    /// `(Tq, layers)` transmitted code indices.
    pub codes: CodeGrid,
    /// Frame count after padding to a multiple of `w`.
    pub t_pad: usize,
    /// Sample count before padding; decode trims to this.
    pub original_len: usize,
    pub window: usize,
}

/// Differentiable quantities for one training step.
pub struct TrainForward {
    /// Reconstruction trimmed to the input length, `(N,)`.
    pub x_hat: Tensor,
    /// Quantizer projection before quantization, `(Tq, d_vq)`.
    pub proj: Tensor,
    /// Quantizer outputs (codes, per-layer embeddings, straight-through sum).
    pub rvq: RvqResult,
    /// Per-layer quantized embeddings stacked `(Tq, L, d_vq)`.
    pub stacked: Tensor,
    /// Depth-head predictions `(Tq, L-1, d_vq)`.
    pub ar_pred: Tensor,
    /// Depth-head targets `(Tq, L-1, d_vq)` (same tensors as `stacked`).
    pub ar_target: Tensor,
    /// Masked-frame predictions `(T_pad, d_enc)`.
    pub mae_pred: Tensor,
    /// Pre-mask frames, padded, gradient-free `(T_pad, d_enc)`.
    pub mae_target: Tensor,
    /// Per-row mask, padded to `T_pad` with `false`.
    pub padded_mask: Vec<bool>,
    /// Commitment plus any dictionary-update term, already weighted.
    pub commit_loss: Tensor,
    pub t_pad: usize,
}

pub struct CodecModel {
    pub cfg: CodecConfig,
    pub params: ParamSet,
    pub patchify: Patchify,
    pub unpatchify: UnPatchify,
    cls: Tensor,
    encoder: AttentionStack,
    vq_proj: Linear,
    books: CodebookSet,
    /// `Some` for layers allowed to train (first-only freeze mode).
    trainable_books: Vec<Option<Tensor>>,
    dec_in: Linear,
    mask_token: Tensor,
    decoder: AttentionStack,
    dec_out: Linear,
    mae_decoder: AttentionStack,
    mae_head: Linear,
    depth_ar: DepthAr,
}

impl CodecModel {
    pub fn new(cfg: &CodecConfig, books: CodebookSet, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let q = &cfg.quantizer;
        if books.dim() != q.dim {
            return Err(CodecError::Config(format!(
                "codebook dim {} != quantizer dim {}",
                books.dim(),
                q.dim
            )));
        }
        if books.size() != q.codebook_size {
            return Err(CodecError::Config(format!(
                "codebook size {} != configured size {}",
                books.size(),
                q.codebook_size
            )));
        }
        if books.layers() < q.layers {
            return Err(CodecError::Config(format!(
                "{} codebook layers for {} quantizer layers",
                books.layers(),
                q.layers
            )));
        }

        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_enc = cfg.encoder.dim;
        let d_dec = cfg.decoder.dim;

        let patchify = Patchify::new(&mut ps, "patchify", &mut rng, cfg);
        let unpatchify = UnPatchify::new(&mut ps, "unpatchify", &mut rng, cfg);
        let cls = ps.register("cls", init_normal(&mut rng, &[1, d_enc], 0.02));
        let encoder = AttentionStack::new(&mut ps, "encoder", &mut rng, &cfg.encoder);
        let vq_proj = Linear::new(&mut ps, "vq_proj", &mut rng, d_enc, q.dim, true);
        let trainable_books: Vec<Option<Tensor>> = (0..q.layers)
            .map(|l| match q.freeze {
                FreezeMode::All => None,
                FreezeMode::FirstOnly if l == 0 => None,
                FreezeMode::FirstOnly => Some(ps.register(
                    format!("books.layer{l}"),
                    books.layer(l).clone().into_dyn(),
                )),
            })
            .collect();
        let dec_in = Linear::new(&mut ps, "dec_in", &mut rng, q.dim, d_dec, true);
        let mask_token = ps.register("mask_token", init_normal(&mut rng, &[1, d_dec], 0.02));
        let decoder = AttentionStack::new(&mut ps, "decoder", &mut rng, &cfg.decoder);
        let dec_out = Linear::new(&mut ps, "dec_out", &mut rng, d_dec, d_enc, true);
        let mae_decoder = AttentionStack::new(&mut ps, "mae", &mut rng, &cfg.mae);
        let mae_head = Linear::new(&mut ps, "mae_head", &mut rng, d_enc, d_enc, true);
        let depth_ar = DepthAr::new(&mut ps, "depth", &mut rng, &cfg.depth_ar, q.dim, q.layers);

        Ok(CodecModel {
            cfg: cfg.clone(),
            params: ps,
            patchify,
            unpatchify,
            cls,
            encoder,
            vq_proj,
            books,
            trainable_books,
            dec_in,
            mask_token,
            decoder,
            dec_out,
            mae_decoder,
            mae_head,
            depth_ar,
        })
    }

    /// The codebooks as currently effective: frozen layers come from the
    /// construction-time set, trainable layers from their live parameters.
    pub fn current_books(&self) -> Result<CodebookSet> {
        let mut out = self.books.clone();
        for (l, t) in self.trainable_books.iter().enumerate() {
            if let Some(t) = t {
                let v = t.to_array().into_dimensionality::<ndarray::Ix2>().unwrap();
                out = out.with_layer_replaced(l, v)?;
            }
        }
        Ok(out)
    }

    /// Byte image of the frozen construction-time codebooks; comparing this
    /// before and after training proves the freeze held.
    pub fn frozen_codebook_bytes(&self) -> Vec<u8> {
        self.books.payload_bytes()
    }

    /// The construction-time codebook set (frozen layers' source of truth).
    pub fn construction_books(&self) -> &CodebookSet {
        &self.books
    }

    fn check_window(&self, w: usize) -> Result<()> {
        if !self.cfg.window_sizes.contains(&w) {
            return Err(CodecError::Config(format!(
                "window {w} not in configured set {:?}",
                self.cfg.window_sizes
            )));
        }
        Ok(())
    }

    /// Encoder side up to the quantizer projection. `frames` is `(T, d_enc)`
    /// (already masked if training); returns `(proj (Tq, d_vq), t_pad)`.
    fn project_queries(&self, frames: &Tensor, w: usize) -> (Tensor, Tensor, usize) {
        let (padded, _) = pad_frames(frames, w);
        let t_pad = padded.shape()[0];
        let seq = encoder_interleave(&padded, &self.cls, w);
        let enc = self.encoder.forward(&seq);
        let queries = encoder_retrieve(&enc, w);
        (self.vq_proj.forward(&queries), enc, t_pad)
    }

    /// Pre-quantization query features `(Tq, d_vq)` for a clip, as data.
    ///
    /// This is the distribution the codebooks must cover; it is what prior
    /// fitting should cluster when no external feature dump is available.
    pub fn query_features(&self, samples: &[f64], w: usize) -> Result<Array2<f64>> {
        self.check_window(w)?;
        if samples.is_empty() {
            return Err(CodecError::Audio("cannot encode an empty clip".into()));
        }
        let p = self.patchify.forward(samples);
        let (proj, _, _) = self.project_queries(&p.frames, w);
        Ok(proj
            .to_array()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("query projections are rank 2"))
    }

    /// Decoder side: quantized queries `(Tq, d_vq)` to frames `(Tq*w, d_enc)`.
    fn expand_queries(&self, quantized: &Tensor, w: usize) -> Tensor {
        let dq = self.dec_in.forward(quantized);
        let seq = decoder_interleave(&dq, &self.mask_token, w);
        let dec = self.decoder.forward(&seq);
        self.dec_out.forward(&decoder_retrieve(&dec, w))
    }

    /// Compress one clip at window `w`. Inference path: no masking.
    pub fn encode_clip(&self, samples: &[f64], w: usize) -> Result<EncodeOutput> {
        self.check_window(w)?;
        if samples.is_empty() {
            return Err(CodecError::Audio("cannot encode an empty clip".into()));
        }
        let p = self.patchify.forward(samples);
        let (proj, _, t_pad) = self.project_queries(&p.frames, w);
        let books = self.current_books()?;
        let rvq = rvq_encode(&proj, &books, self.cfg.quantizer.layers)?;
        Ok(EncodeOutput {
            codes: rvq.codes,
            t_pad,
            original_len: p.original_len,
            window: w,
        })
    }

    /// Reconstruct a waveform from transmitted codes.
    pub fn decode_codes(
        &self,
        codes: &CodeGrid,
        w: usize,
        original_len: usize,
    ) -> Result<Vec<f64>> {
        self.check_window(w)?;
        let books = self.current_books()?;
        let q = rvq_decode(codes, &books)?;
        let quantized = Tensor::constant(q.into_dyn());
        let frames = self.expand_queries(&quantized, w);
        let wave = self.unpatchify.forward(&frames);
        let trimmed = trim_samples(&wave, original_len)?;
        Ok(trimmed.to_array().iter().copied().collect())
    }

    /// Inference pass of the depth head: encode without masking, stack the
    /// per-layer quantized embeddings, and return the transmitted codes
    /// together with the head's continuous predictions for layers `1..L`
    /// as a `(Tq, L-1, d_vq)` array.
    pub fn depth_predictions(
        &self,
        samples: &[f64],
        w: usize,
    ) -> Result<(CodeGrid, ndarray::Array3<f64>)> {
        self.check_window(w)?;
        if samples.is_empty() {
            return Err(CodecError::Audio("cannot encode an empty clip".into()));
        }
        let q = &self.cfg.quantizer;
        let p = self.patchify.forward(samples);
        let (proj, _, t_pad) = self.project_queries(&p.frames, w);
        let books = self.current_books()?;
        let rvq = rvq_encode(&proj, &books, q.layers)?;
        let tq = t_pad / w;
        let layers3: Vec<Tensor> = rvq
            .per_layer_quantized
            .iter()
            .map(|t| t.reshape(&[tq, 1, q.dim]))
            .collect();
        let stacked = Tensor::concat(1, &layers3);
        let pred = self.depth_ar.forward(&stacked);
        let arr = pred
            .to_array()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("depth predictions are rank 3");
        Ok((rvq.codes, arr))
    }

    /// One full differentiable pass: mask, encode, quantize, decode, plus
    /// both auxiliary heads. `mask` has one entry per unpadded frame.
    pub fn train_forward(
        &self,
        samples: &[f64],
        w: usize,
        mask: &[bool],
        freeze_patchify: bool,
    ) -> Result<TrainForward> {
        self.check_window(w)?;
        let p = self.patchify.forward(samples);
        let frames = if freeze_patchify { p.frames.stop_grad() } else { p.frames };
        let t = frames.shape()[0];
        if mask.len() != t {
            return Err(CodecError::shape(
                "mask",
                format!("[{t}]"),
                format!("[{}]", mask.len()),
            ));
        }

        // Targets are the pre-mask frames; they never carry gradient.
        let (mae_target_graph, _) = pad_frames(&frames, w);
        let t_pad = mae_target_graph.shape()[0];
        let mae_target = mae_target_graph.stop_grad();

        // Zero out masked rows, then pad; padded rows count as unmasked.
        let d_enc = self.cfg.encoder.dim;
        let mut gate = Array2::<f64>::ones((t, d_enc));
        for (i, &m) in mask.iter().enumerate() {
            if m {
                gate.row_mut(i).fill(0.0);
            }
        }
        let masked = frames.mul(&Tensor::constant(gate.into_dyn()));
        let mut padded_mask = mask.to_vec();
        padded_mask.resize(t_pad, false);

        let (proj, enc, t_pad2) = self.project_queries(&masked, w);
        debug_assert_eq!(t_pad, t_pad2);

        let q = &self.cfg.quantizer;
        let books = self.current_books()?;
        let rvq = rvq_encode(&proj, &books, q.layers)?;

        // Commitment pulls the projection toward its quantized value; the
        // dictionary term (only for trainable layers) pulls codewords toward
        // the residuals they were chosen for.
        let mut commit_loss = Tensor::scalar_const(0.0);
        if q.commitment_enabled {
            let pull = proj
                .sub(&rvq.quantized_sum.stop_grad())
                .sqr()
                .mean_all()
                .scale(q.commitment_weight);
            commit_loss = commit_loss.add(&pull);
        }
        for (l, book) in self.trainable_books.iter().enumerate() {
            let Some(book) = book else { continue };
            // Residual entering layer l, as data.
            let mut resid = proj.to_array();
            for prev in rvq.per_layer_quantized.iter().take(l) {
                resid = resid - prev.to_array();
            }
            let idx: Vec<usize> = rvq.codes.column(l).iter().map(|&c| c as usize).collect();
            let chosen = book.gather_rows(&idx);
            let dict = chosen
                .sub(&Tensor::constant(resid))
                .sqr()
                .mean_all()
                .scale(q.commitment_weight);
            commit_loss = commit_loss.add(&dict);
        }

        // Reconstruction path.
        let frames_hat = self.expand_queries(&rvq.quantized_sum, w);
        let wave = self.unpatchify.forward(&frames_hat);
        let x_hat = trim_samples(&wave, samples.len())?;

        // Masked-frame head reads the encoder's frame rows.
        let enc_frames = enc.gather_rows(&frame_positions(t_pad, w));
        let mae_pred = self.mae_head.forward(&self.mae_decoder.forward(&enc_frames));

        // Depth head: stack per-layer embeddings along a new depth axis.
        let tq = t_pad / w;
        let layers3: Vec<Tensor> = rvq
            .per_layer_quantized
            .iter()
            .map(|q| q.reshape(&[tq, 1, self.cfg.quantizer.dim]))
            .collect();
        let stacked = Tensor::concat(1, &layers3);
        let ar_pred = self.depth_ar.forward(&stacked);
        let ar_target = stacked.narrow(1, 1, q.layers - 1);

        Ok(TrainForward {
            x_hat,
            proj,
            rvq,
            stacked,
            ar_pred,
            ar_target,
            mae_pred,
            mae_target,
            padded_mask,
            commit_loss,
            t_pad,
        })
    }

    /// Leaf tensors to optimize, excluding any name with one of `prefixes`.
    pub fn trainable_excluding(&self, prefixes: &[&str]) -> Vec<Tensor> {
        self.params
            .entries()
            .iter()
            .filter(|(n, _)| !prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, t)| t.clone())
            .collect()
    }
}

/// Convenience constant input for tests and the encode CLI.
pub fn samples_tensor(samples: &[f64]) -> Tensor {
    Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[samples.len()]), samples.to_vec()).unwrap())
}
