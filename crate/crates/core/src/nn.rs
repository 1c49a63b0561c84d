//! Layers, parameter registry, initialization, and the optimizer.
//!
//! Every layer registers its parameters into a [`ParamSet`] under a
//! hierarchical dotted name. Registration order is creation order, and all
//! random draws come from a caller-supplied seeded generator, so two builds
//! with the same seed produce identical parameters.

use std::collections::HashSet;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Arr, Tensor};

/// Ordered, named collection of trainable leaves.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    names: HashSet<String>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Arr) -> Tensor {
        let name = name.into();
        assert!(self.names.insert(name.clone()), "duplicate parameter {name}");
        let t = Tensor::leaf(value);
        self.entries.push((name, t.clone()));
        t
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Tensors whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }
}

pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 * bound - bound).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Box-Muller normal draws; two uniforms per sample keeps the stream simple.
pub fn init_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Affine map over the last axis; weight is `(d_in, d_out)`.
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        let w = ps.register(format!("{prefix}.w"), init_uniform(rng, &[d_in, d_out], bound));
        let b = bias.then(|| ps.register(format!("{prefix}.b"), init_uniform(rng, &[d_out], bound)));
        Linear { w, b, d_in, d_out }
    }

    /// Accepts any rank >= 1 with last axis `d_in`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let shape = x.shape();
        let last = *shape.last().expect("linear: rank >= 1");
        assert_eq!(last, self.d_in, "linear: input dim mismatch");
        let rows = x.len() / last;
        let flat = x.reshape(&[rows, last]);
        let mut y = flat.matmul(&self.w);
        if let Some(b) = &self.b {
            y = y.add_bias(b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out;
        y.reshape(&out_shape)
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, prefix: &str, dim: usize) -> Self {
        let gamma = ps.register(format!("{prefix}.gamma"), ArrayD::ones(IxDyn(&[dim])));
        let beta = ps.register(format!("{prefix}.beta"), ArrayD::zeros(IxDyn(&[dim])));
        LayerNorm { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

/// Causal 1-D convolution over time-major input `(N, c_in) -> (N/stride, c_out)`.
///
/// The input is left-padded by `kernel - stride` zeros, so output frame `t`
/// depends only on input rows `<= (t+1)*stride - 1`. Weight layout is
/// `(kernel * c_in, c_out)` with row `j * c_in + c` holding tap `j` of input
/// channel `c`.
pub struct Conv1d {
    pub w: Tensor,
    pub b: Tensor,
    pub kernel: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1d {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        assert!(kernel >= stride, "conv1d: kernel must be >= stride for causal padding");
        let bound = (1.0 / (c_in * kernel) as f64).sqrt();
        let w = ps.register(
            format!("{prefix}.w"),
            init_uniform(rng, &[kernel * c_in, c_out], bound),
        );
        let b = ps.register(format!("{prefix}.b"), init_uniform(rng, &[c_out], bound));
        Conv1d { w, b, kernel, stride, c_in, c_out }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let shape = x.shape();
        assert_eq!(shape.len(), 2, "conv1d: rank 2 input");
        assert_eq!(shape[1], self.c_in, "conv1d: channel mismatch");
        let n = shape[0];
        assert_eq!(n % self.stride, 0, "conv1d: length not divisible by stride");
        let pad_left = self.kernel - self.stride;
        let xp = x.pad(&[(pad_left, 0), (0, 0)]);
        let m = n / self.stride;
        let cols = self.kernel * self.c_in;
        let mut idx = ndarray::Array2::<usize>::zeros((m, cols));
        for t in 0..m {
            for j in 0..self.kernel {
                let row = t * self.stride + j;
                for c in 0..self.c_in {
                    idx[[t, j * self.c_in + c]] = row * self.c_in + c;
                }
            }
        }
        let col = xp.gather_flat(&idx.into_dyn());
        col.matmul(&self.w).add_bias(&self.b)
    }
}

/// Causal transposed 1-D convolution, time-major `(M, c_in) -> (M*stride, c_out)`.
///
/// Implemented as zero-stuffing upsampling followed by a stride-1 convolution
/// with full padding, cropped to the first `M*stride` rows. Output sample `s`
/// depends only on input frames `<= floor(s / stride)`. Weight layout matches
/// the composed convolution: `(kernel * c_in, c_out)` where row `j * c_in + c`
/// multiplies the input frame `t` satisfying `t*stride - s + kernel - 1 = j`.
pub struct ConvTranspose1d {
    pub w: Tensor,
    pub b: Tensor,
    pub kernel: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvTranspose1d {
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        assert!(kernel >= stride, "conv_transpose1d: kernel must be >= stride");
        let bound = (1.0 / (c_in * kernel) as f64).sqrt();
        let w = ps.register(
            format!("{prefix}.w"),
            init_uniform(rng, &[kernel * c_in, c_out], bound),
        );
        let b = ps.register(format!("{prefix}.b"), init_uniform(rng, &[c_out], bound));
        ConvTranspose1d { w, b, kernel, stride, c_in, c_out }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let shape = x.shape();
        assert_eq!(shape.len(), 2, "conv_transpose1d: rank 2 input");
        assert_eq!(shape[1], self.c_in, "conv_transpose1d: channel mismatch");
        let m = shape[0];
        let up = x.upsample_zeros(0, self.stride);
        let xp = up.pad(&[(self.kernel - 1, self.kernel - 1), (0, 0)]);
        let out_full = (m - 1) * self.stride + self.kernel;
        let cols = self.kernel * self.c_in;
        let mut idx = ndarray::Array2::<usize>::zeros((out_full, cols));
        for t in 0..out_full {
            for j in 0..self.kernel {
                for c in 0..self.c_in {
                    idx[[t, j * self.c_in + c]] = (t + j) * self.c_in + c;
                }
            }
        }
        let col = xp.gather_flat(&idx.into_dyn());
        let y = col.matmul(&self.w).add_bias(&self.b);
        y.narrow(0, 0, m * self.stride)
    }
}

/// 2-D convolution over channels-last input `(H, W, c_in) -> (H', W', c_out)`
/// with symmetric zero padding. Used by the spectrogram discriminators.
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        let fan_in = c_in * kernel.0 * kernel.1;
        let bound = (1.0 / fan_in as f64).sqrt();
        let w = ps.register(
            format!("{prefix}.w"),
            init_uniform(rng, &[kernel.0 * kernel.1 * c_in, c_out], bound),
        );
        let b = ps.register(format!("{prefix}.b"), init_uniform(rng, &[c_out], bound));
        Conv2d { w, b, kernel, stride, pad, c_in, c_out }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1;
        let ow = (w + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1;
        (oh, ow)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let shape = x.shape();
        assert_eq!(shape.len(), 3, "conv2d: rank 3 input (H, W, C)");
        assert_eq!(shape[2], self.c_in, "conv2d: channel mismatch");
        let (h, w) = (shape[0], shape[1]);
        assert!(
            h + 2 * self.pad.0 >= self.kernel.0 && w + 2 * self.pad.1 >= self.kernel.1,
            "conv2d: input smaller than kernel"
        );
        let (oh, ow) = self.out_size(h, w);
        let xp = x.pad(&[(self.pad.0, self.pad.0), (self.pad.1, self.pad.1), (0, 0)]);
        let wp = w + 2 * self.pad.1;
        let (kh, kw) = self.kernel;
        let cols = kh * kw * self.c_in;
        let mut idx = ndarray::Array2::<usize>::zeros((oh * ow, cols));
        for out_h in 0..oh {
            for out_w in 0..ow {
                let r = out_h * ow + out_w;
                for i in 0..kh {
                    for j in 0..kw {
                        let (ih, iw) = (out_h * self.stride.0 + i, out_w * self.stride.1 + j);
                        for c in 0..self.c_in {
                            idx[[r, (i * kw + j) * self.c_in + c]] = (ih * wp + iw) * self.c_in + c;
                        }
                    }
                }
            }
        }
        let col = xp.gather_flat(&idx.into_dyn());
        let y = col.matmul(&self.w).add_bias(&self.b);
        y.reshape(&[oh, ow, self.c_out])
    }
}

/// Single LSTM layer, time-major `(T, c_in) -> (T, hidden)`. Gate order is
/// input, forget, cell, output; the forget bias starts at one.
pub struct Lstm {
    pub wx: Tensor,
    pub wh: Tensor,
    pub b: Tensor,
    c_in: usize,
    hidden: usize,
}

impl Lstm {
    pub fn new(ps: &mut ParamSet, prefix: &str, rng: &mut ChaCha8Rng, c_in: usize, hidden: usize) -> Self {
        let bound = (1.0 / hidden as f64).sqrt();
        let wx = ps.register(format!("{prefix}.wx"), init_uniform(rng, &[c_in, 4 * hidden], bound));
        let wh = ps.register(format!("{prefix}.wh"), init_uniform(rng, &[hidden, 4 * hidden], bound));
        let mut bias = init_uniform(rng, &[4 * hidden], bound);
        for i in hidden..2 * hidden {
            bias[[i]] += 1.0;
        }
        let b = ps.register(format!("{prefix}.b"), bias);
        Lstm { wx, wh, b, c_in, hidden }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let shape = x.shape();
        assert_eq!(shape.len(), 2, "lstm: rank 2 input");
        assert_eq!(shape[1], self.c_in, "lstm: channel mismatch");
        let t_len = shape[0];
        let h = self.hidden;
        let xproj = x.matmul(&self.wx).add_bias(&self.b);
        let mut h_prev = Tensor::constant(Arr::zeros(IxDyn(&[1, h])));
        let mut c_prev = Tensor::constant(Arr::zeros(IxDyn(&[1, h])));
        let mut rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let z = xproj.narrow(0, t, 1).add(&h_prev.matmul(&self.wh));
            let i = z.narrow(1, 0, h).sigmoid();
            let f = z.narrow(1, h, h).sigmoid();
            let g = z.narrow(1, 2 * h, h).tanh_();
            let o = z.narrow(1, 3 * h, h).sigmoid();
            let c = f.mul(&c_prev).add(&i.mul(&g));
            let hs = o.mul(&c.tanh_());
            rows.push(hs.clone());
            h_prev = hs;
            c_prev = c;
        }
        Tensor::concat(0, &rows)
    }
}

/// AdamW: adaptive moments with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    params: Vec<Tensor>,
    m: Vec<Arr>,
    v: Vec<Arr>,
    t: u64,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, lr: f64, weight_decay: f64) -> Self {
        let m = params.iter().map(|p| Arr::zeros(p.value().raw_dim())).collect();
        let v = params.iter().map(|p| Arr::zeros(p.value().raw_dim())).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            params,
            m,
            v,
            t: 0,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.clear_grad();
        }
    }

    /// Global gradient norm over parameters that received a gradient.
    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        for p in &self.params {
            if let Some(g) = p.grad() {
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        sq.sqrt()
    }

    /// Apply one update. Gradients are clipped to `clip` (global norm) when
    /// given. Parameters without a gradient this step are left untouched.
    pub fn step(&mut self, clip: Option<f64>) {
        self.t += 1;
        let scale = match clip {
            Some(max) if max > 0.0 => {
                let norm = self.grad_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let g = if scale != 1.0 { g * scale } else { g };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(&g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let mut w = p.to_array();
            ndarray::Zip::from(&mut w).and(&*m).and(&*v).for_each(|wi, &mi, &vi| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *wi -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *wi);
            });
            p.set_value(w);
        }
    }

    /// Optimizer state for checkpointing: `(step_count, first_moments, second_moments)`.
    pub fn state(&self) -> (u64, &[Arr], &[Arr]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, t: u64, m: Vec<Arr>, v: Vec<Arr>) {
        assert_eq!(m.len(), self.params.len(), "adamw: moment count mismatch");
        assert_eq!(v.len(), self.params.len(), "adamw: moment count mismatch");
        for (i, p) in self.params.iter().enumerate() {
            assert_eq!(m[i].shape(), p.value().shape(), "adamw: moment shape mismatch");
            assert_eq!(v[i].shape(), p.value().shape(), "adamw: moment shape mismatch");
        }
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
