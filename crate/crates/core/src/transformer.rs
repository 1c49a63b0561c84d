//! Transformer stacks: rotary positions, causal sliding-window attention,
//! pre-norm residual blocks, and the depth-wise autoregressive head.
//!
//! All stacks share one layer implementation operating on `(B, S, dim)`
//! activations. The encoder/decoder/masked-autoencoder paths run with
//! `B = 1` over a single interleaved sequence; the depth head folds the
//! token positions (and attention heads) into the batch axis so one `bmm`
//! covers every position at once.

use ndarray::{Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::config::{AttentionStackConfig, DepthArConfig};
use crate::nn::{LayerNorm, Linear, ParamSet};

/// Additive score for blocked attention pairs. Finite so the softmax max
/// subtraction stays well-defined even for fully-masked prefixes.
pub const MASK_NEG: f64 = -1e30;

/// `(s, s)` additive mask: entry `(t, j)` is 0 when `j` lies inside the
/// causal window `[t - window + 1, t]` of row `t`, `MASK_NEG` otherwise.
pub fn causal_window_mask(s: usize, window: usize) -> Array2<f64> {
    assert!(window >= 1, "attention window must be >= 1");
    let mut m = Array2::from_elem((s, s), MASK_NEG);
    for t in 0..s {
        let lo = t.saturating_sub(window - 1);
        for j in lo..=t {
            m[[t, j]] = 0.0;
        }
    }
    m
}

fn mask_tensor(batch: usize, s: usize, window: usize) -> Tensor {
    let m = causal_window_mask(s, window);
    let mut tiled = Array3::<f64>::zeros((batch, s, s));
    for i in 0..batch {
        tiled.index_axis_mut(Axis(0), i).assign(&m);
    }
    Tensor::constant(tiled.into_dyn())
}

/// Rotate each feature pair `(2i, 2i+1)` of the last axis by the angle
/// `position * base^(-2i / d)`; positions index the second-to-last axis.
pub fn rope_rotate(x: &Tensor, positions: &[usize], base: f64) -> Tensor {
    x.rope(positions, base)
}

fn attention_with_mask(q: &Tensor, k: &Tensor, v: &Tensor, mask: &Tensor) -> Tensor {
    let dh = *q.shape().last().expect("attention: rank 3") as f64;
    let scores = q.bmm(&k.permute(&[0, 2, 1])).scale(1.0 / dh.sqrt());
    scores.add(mask).softmax_last().bmm(v)
}

/// Scaled dot-product attention over `(B, S, d_head)` tensors where row `t`
/// attends only to rows `[max(0, t - window + 1), t]`. Blocked pairs get a
/// weight of exactly zero, so outputs are bitwise invariant to out-of-window
/// inputs.
pub fn sliding_causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, window: usize) -> Tensor {
    let shape = q.shape();
    assert_eq!(shape.len(), 3, "attention: rank 3 input");
    attention_with_mask(q, k, v, &mask_tensor(shape[0], shape[1], window))
}

/// Pre-norm residual block: windowed multi-head attention with rotary
/// positions, then a GELU feed-forward expansion.
pub struct TransformerLayer {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    dim: usize,
    n_heads: usize,
    rope_base: f64,
}

impl TransformerLayer {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        cfg: &AttentionStackConfig,
    ) -> Self {
        let d = cfg.dim;
        let ff = d * cfg.ffn_mult;
        TransformerLayer {
            ln1: LayerNorm::new(ps, &format!("{prefix}.ln1"), d),
            wq: Linear::new(ps, &format!("{prefix}.wq"), rng, d, d, true),
            wk: Linear::new(ps, &format!("{prefix}.wk"), rng, d, d, true),
            wv: Linear::new(ps, &format!("{prefix}.wv"), rng, d, d, true),
            wo: Linear::new(ps, &format!("{prefix}.wo"), rng, d, d, true),
            ln2: LayerNorm::new(ps, &format!("{prefix}.ln2"), d),
            ff1: Linear::new(ps, &format!("{prefix}.ff1"), rng, d, ff, true),
            ff2: Linear::new(ps, &format!("{prefix}.ff2"), rng, ff, d, true),
            dim: d,
            n_heads: cfg.n_heads,
            rope_base: cfg.rope_base,
        }
    }

    /// `x`: `(B, S, dim)`; `mask`: `(B * n_heads, S, S)` additive scores.
    pub fn forward(&self, x: &Tensor, positions: &[usize], mask: &Tensor) -> Tensor {
        let shape = x.shape();
        assert_eq!(shape.len(), 3, "transformer layer: rank 3 input");
        let (b, s, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d, self.dim, "transformer layer: dim mismatch");
        let h = self.n_heads;
        let dh = d / h;
        let split = |t: &Tensor| {
            t.reshape(&[b, s, h, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(&[b * h, s, dh])
        };
        let xn = self.ln1.forward(x);
        let q = rope_rotate(&split(&self.wq.forward(&xn)), positions, self.rope_base);
        let k = rope_rotate(&split(&self.wk.forward(&xn)), positions, self.rope_base);
        let v = split(&self.wv.forward(&xn));
        let att = attention_with_mask(&q, &k, &v, mask);
        let merged = att
            .reshape(&[b, h, s, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, s, d]);
        let res = x.add(&self.wo.forward(&merged));
        let ffn = self
            .ff2
            .forward(&self.ff1.forward(&self.ln2.forward(&res)).gelu());
        res.add(&ffn)
    }
}

/// A stack of pre-norm blocks with a final normalization. One instance backs
/// each of the encoder, decoder, masked-autoencoder, and depth heads.
pub struct AttentionStack {
    pub layers: Vec<TransformerLayer>,
    pub final_ln: LayerNorm,
    pub cfg: AttentionStackConfig,
}

impl AttentionStack {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        cfg: &AttentionStackConfig,
    ) -> Self {
        let layers = (0..cfg.n_layers)
            .map(|i| TransformerLayer::new(ps, &format!("{prefix}.layer{i}"), rng, cfg))
            .collect();
        let final_ln = LayerNorm::new(ps, &format!("{prefix}.ln_out"), cfg.dim);
        AttentionStack { layers, final_ln, cfg: cfg.clone() }
    }

    /// Single sequence `(S, dim)` with positions `0..S`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let shape = x.shape();
        assert_eq!(shape.len(), 2, "attention stack: rank 2 input");
        let s = shape[0];
        let positions: Vec<usize> = (0..s).collect();
        let y = self.forward_batched(&x.reshape(&[1, s, self.cfg.dim]), &positions);
        y.reshape(&[s, self.cfg.dim])
    }

    /// Batched sequences `(B, S, dim)` sharing one position vector.
    pub fn forward_batched(&self, x: &Tensor, positions: &[usize]) -> Tensor {
        let shape = x.shape();
        assert_eq!(shape.len(), 3, "attention stack: rank 3 input");
        let (b, s) = (shape[0], shape[1]);
        assert_eq!(positions.len(), s, "attention stack: positions length");
        let mask = mask_tensor(b * self.cfg.n_heads, s, self.cfg.window);
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, positions, &mask);
        }
        self.final_ln.forward(&h)
    }
}

/// Depth-wise autoregressive head over the quantizer axis.
///
/// For every token position it consumes the sequence
/// `[BOD, q_0, ..., q_{L-2}]` of per-layer quantized embeddings and emits a
/// prediction for each of the layers `1..L-1` (0-based); the first layer is
/// never predicted. Positions ride along the batch axis, so all of them run
/// in a single pass.
pub struct DepthAr {
    bod: Tensor,
    in_proj: Linear,
    stack: AttentionStack,
    out_proj: Linear,
    d_vq: usize,
}

impl DepthAr {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        cfg: &DepthArConfig,
        d_vq: usize,
        vq_layers: usize,
    ) -> Self {
        let bod = ps.register(
            format!("{prefix}.bod"),
            crate::nn::init_normal(rng, &[1, d_vq], 0.02),
        );
        let in_proj = Linear::new(ps, &format!("{prefix}.in_proj"), rng, d_vq, cfg.dim, true);
        let stack_cfg = AttentionStackConfig {
            n_layers: cfg.n_layers,
            dim: cfg.dim,
            n_heads: cfg.n_heads,
            // Full causal attention across the quantizer depth.
            window: vq_layers.max(1),
            ffn_mult: 4,
            rope_base: 10000.0,
        };
        let stack = AttentionStack::new(ps, &format!("{prefix}.stack"), rng, &stack_cfg);
        let out_proj = Linear::new(ps, &format!("{prefix}.out_proj"), rng, cfg.dim, d_vq, true);
        DepthAr { bod, in_proj, stack, out_proj, d_vq }
    }

    /// `per_layer`: `(Tq, L, d_vq)` quantized embeddings, layer-ordered.
    /// Returns `(Tq, L-1, d_vq)` where slice `i` predicts layer `i + 1` from
    /// layers `0..=i` (plus the learned begin-of-depth embedding).
    pub fn forward(&self, per_layer: &Tensor) -> Tensor {
        let shape = per_layer.shape();
        assert_eq!(shape.len(), 3, "depth head: rank 3 input");
        let (tq, l, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d, self.d_vq, "depth head: embedding dim mismatch");
        assert!(l >= 2, "depth head: needs at least two quantizer layers");
        let bod = self.bod.repeat_rows(tq).reshape(&[tq, 1, d]);
        let prev = per_layer.narrow(1, 0, l - 1);
        let inp = Tensor::concat(1, &[bod, prev]);
        let positions: Vec<usize> = (0..l).collect();
        let h = self.stack.forward_batched(&self.in_proj.forward(&inp), &positions);
        self.out_proj.forward(&h).narrow(1, 1, l - 1)
    }
}
