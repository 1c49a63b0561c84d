//! Waveform frontends: Patchify (samples to frames) and UnPatchify (frames
//! back to samples).
//!
//! Both directions are strictly causal. Patchify frame `t` depends only on
//! samples `<= (t + 1) * patch_size - 1`; UnPatchify sample `s` depends only
//! on frames `<= floor(s / patch_size)`. Two variants share each interface:
//! a strided residual convolution stack with optional recurrent smoothing,
//! and a per-patch linear projection followed by a small causal transformer.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::config::{AttentionStackConfig, CodecConfig, FrontendVariant};
use crate::error::{CodecError, Result};
use crate::nn::{Conv1d, ConvTranspose1d, Linear, Lstm, ParamSet};
use crate::transformer::AttentionStack;

/// Frames produced by [`Patchify`] plus the pre-padding sample count, which
/// the decode path needs to trim its output.
pub struct Patchified {
    /// `(T, d)` frame embeddings, one row per `patch_size` samples.
    pub frames: Tensor,
    /// Input length before right-padding to a whole number of patches.
    pub original_len: usize,
}

/// Zero-pad on the right to a whole number of patches.
pub fn pad_to_patch(samples: &[f64], patch: usize) -> Vec<f64> {
    let t = samples.len().div_ceil(patch);
    let mut out = samples.to_vec();
    out.resize(t * patch, 0.0);
    out
}

/// Drop synthesic padding: keep the first `original_len` samples of a
/// `(N,)` waveform tensor. Errors when more samples are requested than the
/// frames can carry.
pub fn trim_samples(waveform: &Tensor, original_len: usize) -> Result<Tensor> {
    let n = waveform.shape()[0];
    if original_len > n {
        return Err(CodecError::Audio(format!(
            "cannot trim to {original_len} samples: frames only cover {n}"
        )));
    }
    Ok(waveform.narrow(0, 0, original_len))
}

/// One residual unit: `x + conv_k1(elu(conv_k3(x)))`, all causal, stride 1.
struct ResidualUnit {
    conv3: Conv1d,
    conv1: Conv1d,
}

impl ResidualUnit {
    fn new(ps: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng, ch: usize) -> Self {
        ResidualUnit {
            conv3: Conv1d::new(ps, &format!("{prefix}.conv3"), rng, ch, ch, 3, 1),
            conv1: Conv1d::new(ps, &format!("{prefix}.conv1"), rng, ch, ch, 1, 1),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        x.add(&self.conv1.forward(&self.conv3.forward(x).elu()))
    }
}

struct ConvFront {
    conv_in: Conv1d,
    blocks: Vec<(ResidualUnit, Conv1d)>,
    lstms: Vec<Lstm>,
    conv_out: Conv1d,
}

impl ConvFront {
    fn new(ps: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng, cfg: &CodecConfig) -> Self {
        let fe = &cfg.frontend;
        let ch = &fe.channels;
        let conv_in = Conv1d::new(ps, &format!("{prefix}.conv_in"), rng, 1, ch[0], 7, 1);
        let mut blocks = Vec::new();
        for (i, &s) in fe.strides.iter().enumerate() {
            let c_in = if i == 0 { ch[0] } else { ch[i - 1] };
            let unit = ResidualUnit::new(ps, &format!("{prefix}.block{i}.res"), rng, c_in);
            let down = Conv1d::new(
                ps,
                &format!("{prefix}.block{i}.down"),
                rng,
                c_in,
                ch[i],
                2 * s,
                s,
            );
            blocks.push((unit, down));
        }
        let top = *ch.last().unwrap();
        let lstms = (0..fe.lstm_layers)
            .map(|i| Lstm::new(ps, &format!("{prefix}.lstm{i}"), rng, top, top))
            .collect();
        let conv_out = Conv1d::new(ps, &format!("{prefix}.conv_out"), rng, top, cfg.encoder.dim, 7, 1);
        ConvFront { conv_in, blocks, lstms, conv_out }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = self.conv_in.forward(x);
        for (unit, down) in &self.blocks {
            h = down.forward(&unit.forward(&h).elu());
        }
        for lstm in &self.lstms {
            h = h.add(&lstm.forward(&h));
        }
        self.conv_out.forward(&h.elu())
    }
}

struct ConvBack {
    conv_in: Conv1d,
    lstms: Vec<Lstm>,
    blocks: Vec<(ConvTranspose1d, ResidualUnit)>,
    conv_out: Conv1d,
}

impl ConvBack {
    fn new(ps: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng, cfg: &CodecConfig) -> Self {
        let fe = &cfg.frontend;
        let ch = &fe.channels;
        let top = *ch.last().unwrap();
        let conv_in = Conv1d::new(ps, &format!("{prefix}.conv_in"), rng, cfg.encoder.dim, top, 7, 1);
        let lstms = (0..fe.lstm_layers)
            .map(|i| Lstm::new(ps, &format!("{prefix}.lstm{i}"), rng, top, top))
            .collect();
        let mut blocks = Vec::new();
        for (rank, i) in (0..fe.strides.len()).rev().enumerate() {
            let s = fe.strides[i];
            let c_in = ch[i];
            let c_out = if i == 0 { ch[0] } else { ch[i - 1] };
            let up = ConvTranspose1d::new(
                ps,
                &format!("{prefix}.block{rank}.up"),
                rng,
                c_in,
                c_out,
                2 * s,
                s,
            );
            let unit = ResidualUnit::new(ps, &format!("{prefix}.block{rank}.res"), rng, c_out);
            blocks.push((up, unit));
        }
        let conv_out = Conv1d::new(ps, &format!("{prefix}.conv_out"), rng, ch[0], 1, 7, 1);
        ConvBack { conv_in, lstms, blocks, conv_out }
    }

    fn forward(&self, frames: &Tensor) -> Tensor {
        let mut h = self.conv_in.forward(frames);
        for lstm in &self.lstms {
            h = h.add(&lstm.forward(&h));
        }
        for (up, unit) in &self.blocks {
            h = unit.forward(&up.forward(&h.elu()));
        }
        self.conv_out.forward(&h.elu())
    }
}

struct LinearFront {
    proj: Linear,
    stack: AttentionStack,
    patch: usize,
}

struct LinearBack {
    stack: AttentionStack,
    proj: Linear,
    patch: usize,
}

fn linear_stack_cfg(cfg: &CodecConfig) -> AttentionStackConfig {
    AttentionStackConfig {
        n_layers: cfg.frontend.linear_layers,
        dim: cfg.encoder.dim,
        n_heads: cfg.encoder.n_heads,
        window: cfg.encoder.window,
        ffn_mult: cfg.encoder.ffn_mult,
        rope_base: cfg.encoder.rope_base,
    }
}

enum FrontInner {
    Conv(ConvFront),
    Linear(LinearFront),
}

enum BackInner {
    Conv(ConvBack),
    Linear(LinearBack),
}

/// Samples to frames: `(N,) -> (N / patch_size, d)` after right-padding.
pub struct Patchify {
    inner: FrontInner,
    pub patch_size: usize,
}

impl Patchify {
    pub fn new(ps: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng, cfg: &CodecConfig) -> Self {
        let inner = match cfg.frontend.variant {
            FrontendVariant::Conv => FrontInner::Conv(ConvFront::new(ps, prefix, rng, cfg)),
            FrontendVariant::Linear => FrontInner::Linear(LinearFront {
                proj: Linear::new(
                    ps,
                    &format!("{prefix}.proj"),
                    rng,
                    cfg.patch_size,
                    cfg.encoder.dim,
                    true,
                ),
                stack: AttentionStack::new(
                    ps,
                    &format!("{prefix}.stack"),
                    rng,
                    &linear_stack_cfg(cfg),
                ),
                patch: cfg.patch_size,
            }),
        };
        Patchify { inner, patch_size: cfg.patch_size }
    }

    pub fn forward(&self, samples: &[f64]) -> Patchified {
        assert!(!samples.is_empty(), "patchify: empty input");
        let original_len = samples.len();
        let padded = pad_to_patch(samples, self.patch_size);
        let n = padded.len();
        let frames = match &self.inner {
            FrontInner::Conv(front) => {
                let x = Tensor::constant(
                    ArrayD::from_shape_vec(IxDyn(&[n, 1]), padded).unwrap(),
                );
                front.forward(&x)
            }
            FrontInner::Linear(front) => {
                let t = n / front.patch;
                let x = Tensor::constant(
                    ArrayD::from_shape_vec(IxDyn(&[t, front.patch]), padded).unwrap(),
                );
                front.stack.forward(&front.proj.forward(&x))
            }
        };
        Patchified { frames, original_len }
    }
}

/// Frames to samples: `(T, d) -> (T * patch_size,)`. The caller trims the
/// tail padding with [`trim_samples`].
pub struct UnPatchify {
    inner: BackInner,
    pub patch_size: usize,
}

impl UnPatchify {
    pub fn new(ps: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng, cfg: &CodecConfig) -> Self {
        let inner = match cfg.frontend.variant {
            FrontendVariant::Conv => BackInner::Conv(ConvBack::new(ps, prefix, rng, cfg)),
            FrontendVariant::Linear => BackInner::Linear(LinearBack {
                stack: AttentionStack::new(
                    ps,
                    &format!("{prefix}.stack"),
                    rng,
                    &linear_stack_cfg(cfg),
                ),
                proj: Linear::new(
                    ps,
                    &format!("{prefix}.proj"),
                    rng,
                    cfg.encoder.dim,
                    cfg.patch_size,
                    true,
                ),
                patch: cfg.patch_size,
            }),
        };
        UnPatchify { inner, patch_size: cfg.patch_size }
    }

    pub fn forward(&self, frames: &Tensor) -> Tensor {
        let shape = frames.shape();
        assert_eq!(shape.len(), 2, "unpatchify: rank 2 input");
        let t = shape[0];
        match &self.inner {
            BackInner::Conv(back) => back.forward(frames).reshape(&[t * self.patch_size]),
            BackInner::Linear(back) => {
                let y = back.proj.forward(&back.stack.forward(frames));
                y.reshape(&[t * back.patch])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg(variant: FrontendVariant) -> CodecConfig {
        let mut cfg = CodecConfig::toy();
        cfg.patch_size = 4;
        cfg.frontend.variant = variant;
        cfg.frontend.strides = vec![2, 2];
        cfg.frontend.channels = vec![3, 5];
        cfg.frontend.lstm_layers = 1;
        cfg.frontend.linear_layers = 1;
        cfg.encoder.dim = 8;
        cfg.encoder.n_heads = 2;
        cfg.decoder.dim = 8;
        cfg.decoder.n_heads = 2;
        cfg.mae.dim = 8;
        cfg.mae.n_heads = 2;
        cfg.validate().unwrap();
        cfg
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_samples(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn shapes_and_padding() {
        for variant in [FrontendVariant::Conv, FrontendVariant::Linear] {
            let cfg = tiny_cfg(variant);
            let mut ps = ParamSet::new();
            let mut r = rng(1);
            let front = Patchify::new(&mut ps, "patchify", &mut r, &cfg);
            let back = UnPatchify::new(&mut ps, "unpatchify", &mut r, &cfg);
            let x = random_samples(&mut r, 10);
            let p = front.forward(&x);
            assert_eq!(p.frames.shape(), &[3, 8], "10 samples pad to 3 patches");
            assert_eq!(p.original_len, 10);
            let wave = back.forward(&p.frames);
            assert_eq!(wave.shape(), &[12]);
            let trimmed = trim_samples(&wave, p.original_len).unwrap();
            assert_eq!(trimmed.shape(), &[10]);
            let err = trim_samples(&wave, 13).unwrap_err();
            assert!(err.to_string().contains("frames only cover"), "{err}");
        }
    }

    /// Frame `t` must be bitwise invariant to samples after
    /// `(t + 1) * patch_size - 1`.
    #[test]
    fn patchify_is_causal() {
        for variant in [FrontendVariant::Conv, FrontendVariant::Linear] {
            let cfg = tiny_cfg(variant);
            let mut ps = ParamSet::new();
            let mut r = rng(2);
            let front = Patchify::new(&mut ps, "patchify", &mut r, &cfg);
            let x = random_samples(&mut r, 32);
            let base = front.forward(&x).frames.to_array();
            let s = 20; // first affected frame: floor(20 / 4) = 5
            let mut bumped = x.clone();
            bumped[s] += 0.5;
            let out = front.forward(&bumped).frames.to_array();
            for t in 0..5 {
                for c in 0..8 {
                    assert_eq!(
                        out[[t, c]],
                        base[[t, c]],
                        "{variant:?}: frame {t} saw future sample {s}"
                    );
                }
            }
            assert!(
                (5..8).any(|t| (0..8).any(|c| out[[t, c]] != base[[t, c]])),
                "{variant:?}: perturbation should reach later frames"
            );
        }
    }

    /// Sample `s` must be bitwise invariant to frames after
    /// `floor(s / patch_size)`.
    #[test]
    fn unpatchify_is_causal() {
        for variant in [FrontendVariant::Conv, FrontendVariant::Linear] {
            let cfg = tiny_cfg(variant);
            let mut ps = ParamSet::new();
            let mut r = rng(3);
            let back = UnPatchify::new(&mut ps, "unpatchify", &mut r, &cfg);
            let t = 8;
            let frames: Vec<f64> = random_samples(&mut r, t * 8);
            let f = Tensor::leaf(ArrayD::from_shape_vec(IxDyn(&[t, 8]), frames.clone()).unwrap());
            let base = back.forward(&f).to_array();
            let j = 5; // first affected sample: 5 * 4 = 20
            let mut bumped = frames.clone();
            for c in 0..8 {
                bumped[j * 8 + c] += 0.5;
            }
            let fb = Tensor::leaf(ArrayD::from_shape_vec(IxDyn(&[t, 8]), bumped).unwrap());
            let out = back.forward(&fb).to_array();
            for s in 0..j * 4 {
                assert_eq!(out[[s]], base[[s]], "{variant:?}: sample {s} saw future frame {j}");
            }
            assert!(
                (j * 4..t * 4).any(|s| out[[s]] != base[[s]]),
                "{variant:?}: perturbation should reach later samples"
            );
        }
    }

    #[test]
    fn round_trip_gradcheck() {
        let cfg = tiny_cfg(FrontendVariant::Conv);
        let mut ps = ParamSet::new();
        let mut r = rng(4);
        let back = UnPatchify::new(&mut ps, "unpatchify", &mut r, &cfg);
        let frames = Tensor::leaf(crate::nn::init_uniform(&mut r, &[2, 8], 0.5));
        let mut inputs = vec![frames.clone()];
        inputs.extend(ps.tensors());
        gradcheck::check(
            &inputs,
            |ins| back.forward(&ins[0]).sqr().mean_all(),
            1e-5,
            2e-4,
            1e-7,
        )
        .unwrap();
    }

    #[test]
    fn construction_is_deterministic() {
        let run = || {
            let cfg = tiny_cfg(FrontendVariant::Conv);
            let mut ps = ParamSet::new();
            let mut r = rng(9);
            let front = Patchify::new(&mut ps, "patchify", &mut r, &cfg);
            let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
            front.forward(&x).frames.to_array()
        };
        assert_eq!(run(), run());
    }
}
