//! Reverse-mode automatic differentiation over dynamic-rank f64 arrays.
//!
//! A `Tensor` is a node in a dynamically built computation graph. Ops record
//! a backward closure; `backward()` on a scalar output propagates gradients
//! to every leaf created with `Tensor::leaf`. Node ids increase monotonically
//! with creation order, so iterating nodes by descending id is a valid
//! reverse topological order. The engine is deliberately single-threaded:
//! identical inputs produce bit-identical values and gradients.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use ndarray::{concatenate, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn, Slice};

pub type Arr = ArrayD<f64>;
type BackFn = Box<dyn Fn(&Arr) -> Vec<Option<Arr>>>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct Inner {
    id: u64,
    value: RefCell<Arr>,
    grad: RefCell<Option<Arr>>,
    parents: Vec<Tensor>,
    back: Option<BackFn>,
    needs_grad: bool,
}

/// Shared handle to a graph node. Cloning is cheap and aliases the node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.inner.id, self.shape())
    }
}

impl Tensor {
    /// Trainable leaf; receives a gradient on `backward()`.
    pub fn leaf(value: Arr) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                parents: vec![],
                back: None,
                needs_grad: true,
            }),
        }
    }

    /// Non-trainable node; gradients stop here.
    pub fn constant(value: Arr) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                parents: vec![],
                back: None,
                needs_grad: false,
            }),
        }
    }

    pub fn scalar_const(v: f64) -> Tensor {
        Tensor::constant(ndarray::arr0(v).into_dyn())
    }

    fn make(value: Arr, parents: Vec<Tensor>, back: impl FnOnce() -> BackFn) -> Tensor {
        let needs_grad = parents.iter().any(|p| p.inner.needs_grad);
        let back = if needs_grad { Some(back()) } else { None };
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                parents,
                back,
                needs_grad,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    pub fn ndim(&self) -> usize {
        self.inner.value.borrow().ndim()
    }

    pub fn len(&self) -> usize {
        self.inner.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Ref<'_, Arr> {
        self.inner.value.borrow()
    }

    pub fn to_array(&self) -> Arr {
        self.inner.value.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> f64 {
        let v = self.inner.value.borrow();
        assert_eq!(v.len(), 1, "scalar() on tensor of {} elements", v.len());
        *v.iter().next().unwrap()
    }

    /// Replace a leaf's value in place (optimizer updates). The caller must
    /// not hold live graphs built from the old value.
    pub fn set_value(&self, value: Arr) {
        assert!(self.inner.back.is_none(), "set_value on non-leaf");
        assert_eq!(
            self.inner.value.borrow().shape(),
            value.shape(),
            "set_value shape mismatch"
        );
        *self.inner.value.borrow_mut() = value;
    }

    pub fn grad(&self) -> Option<Arr> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accum_grad(&self, g: Arr) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Backpropagate from a scalar output. Leaf gradients accumulate into
    /// `grad()`; interior gradients are dropped once consumed.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar output");
        if !self.inner.needs_grad {
            return;
        }
        let mut order: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<Tensor> = vec![self.clone()];
        while let Some(node) = stack.pop() {
            if !node.inner.needs_grad || !seen.insert(node.inner.id) {
                continue;
            }
            for p in &node.inner.parents {
                stack.push(p.clone());
            }
            order.push(node);
        }
        order.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        self.accum_grad(Arr::ones(self.inner.value.borrow().raw_dim()));
        for node in &order {
            let g = node.inner.grad.borrow_mut().take();
            let Some(g) = g else { continue };
            match &node.inner.back {
                Some(back) => {
                    let parent_grads = back(&g);
                    debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
                    for (p, pg) in node.inner.parents.iter().zip(parent_grads) {
                        if let (true, Some(pg)) = (p.inner.needs_grad, pg) {
                            debug_assert_eq!(
                                pg.shape(),
                                p.inner.value.borrow().shape(),
                                "gradient shape mismatch"
                            );
                            p.accum_grad(pg);
                        }
                    }
                }
                // Leaf: keep the gradient for the caller.
                None => *node.inner.grad.borrow_mut() = Some(g),
            }
        }
    }
}

fn assert_same_shape(op: &str, a: &Arr, b: &Arr) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

// Elementwise and scalar ops.
impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        let v = {
            let a = self.value();
            let b = other.value();
            assert_same_shape("add", &a, &b);
            &*a + &*b
        };
        Tensor::make(v, vec![self.clone(), other.clone()], || {
            Box::new(|g| vec![Some(g.clone()), Some(g.clone())])
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let v = {
            let a = self.value();
            let b = other.value();
            assert_same_shape("sub", &a, &b);
            &*a - &*b
        };
        Tensor::make(v, vec![self.clone(), other.clone()], || {
            Box::new(|g| vec![Some(g.clone()), Some(-g)])
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let v = {
            let a = self.value();
            let b = other.value();
            assert_same_shape("mul", &a, &b);
            &*a * &*b
        };
        let (a, b) = (self.clone(), other.clone());
        Tensor::make(v, vec![self.clone(), other.clone()], move || {
            Box::new(move |g| {
                vec![Some(g * &*b.value()), Some(g * &*a.value())]
            })
        })
    }

    pub fn neg(&self) -> Tensor {
        let v = -self.to_array();
        Tensor::make(v, vec![self.clone()], || Box::new(|g| vec![Some(-g)]))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let v = self.to_array() * c;
        Tensor::make(v, vec![self.clone()], move || {
            Box::new(move |g| vec![Some(g * c)])
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let v = self.to_array() + c;
        Tensor::make(v, vec![self.clone()], || Box::new(|g| vec![Some(g.clone())]))
    }

    /// Broadcast-add a rank-1 bias over the last axis.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let v = {
            let x = self.value();
            let b = bias.value();
            assert_eq!(b.ndim(), 1, "add_bias: bias must be rank 1");
            assert_eq!(
                x.shape().last(),
                Some(&b.len()),
                "add_bias: last axis mismatch"
            );
            let b1 = b.view().into_dimensionality::<Ix1>().unwrap();
            &*x + &b1
        };
        let blen = bias.len();
        Tensor::make(v, vec![self.clone(), bias.clone()], move || {
            Box::new(move |g| {
                let gs = g.as_standard_layout();
                let flat = gs.to_shape((g.len() / blen, blen)).unwrap();
                let db = flat.sum_axis(Axis(0)).into_dyn();
                vec![Some(g.clone()), Some(db)]
            })
        })
    }
}

// Matrix products.
impl Tensor {
    /// 2-D matrix product `(M,K) @ (K,N)`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let v = {
            let a = self.value();
            let b = other.value();
            let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs rank 2");
            let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs rank 2");
            assert_eq!(a2.ncols(), b2.nrows(), "matmul: inner dim mismatch");
            a2.dot(&b2).into_dyn()
        };
        let (a, b) = (self.clone(), other.clone());
        Tensor::make(v, vec![self.clone(), other.clone()], move || {
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = a.value();
                let bv = b.value();
                let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
                let da = g2.dot(&b2.t()).into_dyn();
                let db = a2.t().dot(&g2).into_dyn();
                vec![Some(da), Some(db)]
            })
        })
    }

    /// Batched 3-D matrix product `(B,M,K) @ (B,K,N)`.
    pub fn bmm(&self, other: &Tensor) -> Tensor {
        let v = {
            let a = self.value();
            let b = other.value();
            let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm lhs rank 3");
            let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm rhs rank 3");
            assert_eq!(a3.shape()[0], b3.shape()[0], "bmm: batch mismatch");
            assert_eq!(a3.shape()[2], b3.shape()[1], "bmm: inner dim mismatch");
            let (bs, m, n) = (a3.shape()[0], a3.shape()[1], b3.shape()[2]);
            let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
            for i in 0..bs {
                let prod = a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i));
                out.index_axis_mut(Axis(0), i).assign(&prod);
            }
            out.into_dyn()
        };
        let (a, b) = (self.clone(), other.clone());
        Tensor::make(v, vec![self.clone(), other.clone()], move || {
            Box::new(move |g| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let av = a.value();
                let bv = b.value();
                let a3 = av.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = bv.view().into_dimensionality::<Ix3>().unwrap();
                let bs = a3.shape()[0];
                let mut da = ndarray::Array3::<f64>::zeros((bs, a3.shape()[1], a3.shape()[2]));
                let mut db = ndarray::Array3::<f64>::zeros((bs, b3.shape()[1], b3.shape()[2]));
                for i in 0..bs {
                    let gi = g3.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                    db.index_axis_mut(Axis(0), i)
                        .assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
                }
                vec![Some(da.into_dyn()), Some(db.into_dyn())]
            })
        })
    }

    /// 2-D transpose.
    pub fn t2(&self) -> Tensor {
        let v = {
            let x = self.value();
            let x2 = x.view().into_dimensionality::<Ix2>().expect("t2 rank 2");
            x2.t().as_standard_layout().to_owned().into_dyn()
        };
        Tensor::make(v, vec![self.clone()], || {
            Box::new(|g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                vec![Some(g2.t().as_standard_layout().to_owned().into_dyn())]
            })
        })
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let v = self
            .value()
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Tensor::make(v, vec![self.clone()], move || {
            Box::new(move |g| {
                vec![Some(
                    g.view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .to_owned(),
                )]
            })
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let total: usize = shape.iter().product();
        assert_eq!(total, self.len(), "reshape: element count mismatch");
        let v = self
            .value()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        let orig = self.shape();
        Tensor::make(v, vec![self.clone()], move || {
            Box::new(move |g| {
                vec![Some(
                    g.as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(IxDyn(&orig))
                        .unwrap(),
                )]
            })
        })
    }
}

// Structural ops: concat, slice, gather, pad, upsample.
impl Tensor {
    pub fn concat(axis: usize, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat: empty part list");
        let v = {
            let vals: Vec<_> = parts.iter().map(|p| p.to_array()).collect();
            let views: Vec<_> = vals.iter().map(|a| a.view()).collect();
            concatenate(Axis(axis), &views).expect("concat: incompatible shapes")
        };
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::make(v, parts.to_vec(), move || {
            Box::new(move |g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut offset = 0usize;
                for &s in &sizes {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::from(offset..offset + s))
                        .to_owned();
                    out.push(Some(piece));
                    offset += s;
                }
                out
            })
        })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let v = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let full = self.shape();
        Tensor::make(v, vec![self.clone()], move || {
            Box::new(move |g| {
                let mut dx = Arr::zeros(IxDyn(&full));
                dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![Some(dx)]
            })
        })
    }

    /// Select rows of a rank-2 tensor; duplicate indices are allowed and the
    /// backward pass scatter-adds.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let v = {
            let x = self.value();
            let x2 = x.view().into_dimensionality::<Ix2>().expect("gather_rows rank 2");
            let rows = x2.nrows();
            for &i in idx {
                assert!(i < rows, "gather_rows: index {i} out of {rows}");
            }
            x2.select(Axis(0), idx).into_dyn()
        };
        let idx = idx.to_vec();
        let full = self.shape();
        Tensor::make(v, vec![self.clone()], move || {
            Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array2::<f64>::zeros((full[0], full[1]));
                for (out_row, &src_row) in idx.iter().enumerate() {
                    let mut dst = dx.row_mut(src_row);
                    dst += &g2.row(out_row);
                }
                vec![Some(dx.into_dyn())]
            })
        })
    }

    /// Gather from the flattened (row-major) input; output takes the index
    /// array's shape. Backward scatter-adds into the flat input.
    pub fn gather_flat(&self, idx: &ArrayD<usize>) -> Tensor {
        let v = {
            let x = self.value();
            let xs = x.as_standard_layout();
            let flat = xs.as_slice().unwrap();
            let n = flat.len();
            idx.mapv(|i| {
                assert!(i < n, "gather_flat: index {i} out of {n}");
                flat[i]
            })
        };
        let idx = idx.clone();
        let full = self.shape();
        Tensor::make(v, vec![self.clone()], move || {
            Box::new(move |g| {
                let total: usize = full.iter().product();
                let mut dx = vec![0.0f64; total];
                let gs = g.as_standard_layout();
                for (&i, &gv) in idx.iter().zip(gs.iter()) {
                    dx[i] += gv;
                }
                vec![Some(Arr::from_shape_vec(IxDyn(&full), dx).unwrap())]
            })
        })
    }

    /// Tile a `(1, C)` tensor to `(n, C)`.
    pub fn repeat_rows(&self, n: usize) -> Tensor {
        let v = {
            let x = self.value();
            let x2 = x.view().into_dimensionality::<Ix2>().expect("repeat_rows rank 2");
            assert_eq!(x2.nrows(), 1, "repeat_rows: input must have a single row");
            let mut out = ndarray::Array2::<f64>::zeros((n, x2.ncols()));
            for mut row in out.rows_mut() {
                row.assign(&x2.row(0));
            }
            out.into_dyn()
        };
        Tensor::make(v, vec![self.clone()], || {
            Box::new(|g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let db = g2.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn();
                vec![Some(db)]
            })
        })
    }

    /// Zero-pad each axis by `(before, after)`.
    pub fn pad(&self, pads: &[(usize, usize)]) -> Tensor {
        let full = self.shape();
        assert_eq!(pads.len(), full.len(), "pad: one (before, after) per axis");
        let padded: Vec<usize> = full
            .iter()
            .zip(pads)
            .map(|(&s, &(b, a))| s + b + a)
            .collect();
        let mut v = Arr::zeros(IxDyn(&padded));
        {
            let mut interior = v.view_mut();
            for (ax, &(b, _)) in pads.iter().enumerate() {
                interior.slice_axis_inplace(Axis(ax), Slice::from(b..b + full[ax]));
            }
            interior.assign(&self.value());
        }
        let pads = pads.to_vec();
        Tensor::make(v, vec![self.clone()], move || {
            Box::new(move |g| {
                let mut gi = g.view();
                for (ax, &(b, a)) in pads.iter().enumerate() {
                    let len = g.shape()[ax] - b - a;
                    gi.slice_axis_inplace(Axis(ax), Slice::from(b..b + len));
                }
                vec![Some(gi.to_owned())]
            })
        })
    }

    /// Insert `stride - 1` zeros between consecutive entries along `axis`.
    /// Output length along the axis is `(len - 1) * stride + 1`.
    pub fn upsample_zeros(&self, axis: usize, stride: usize) -> Tensor {
        assert!(stride >= 1, "upsample_zeros: stride must be >= 1");
        let full = self.shape();
        let len = full[axis];
        assert!(len >= 1, "upsample_zeros: empty axis");
        let out_len = (len - 1) * stride + 1;
        let mut shape = full.clone();
        shape[axis] = out_len;
        let mut v = Arr::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), Slice::new(0, None, stride as isize))
            .assign(&self.value());
        Tensor::make(v, vec![self.clone()], move || {
            Box::new(move |g| {
                vec![Some(
                    g.slice_axis(Axis(axis), Slice::new(0, None, stride as isize))
                        .to_owned(),
                )]
            })
        })
    }
}

// Reductions.
impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let v = ndarray::arr0(self.value().sum()).into_dyn();
        let full = self.shape();
        Tensor::make(v, vec![self.clone()], move || {
            Box::new(move |g| {
                let g0 = *g.iter().next().unwrap();
                vec![Some(Arr::from_elem(IxDyn(&full), g0))]
            })
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }
}

// Pointwise nonlinearities.
impl Tensor {
    fn unary(
        &self,
        value: Arr,
        dfn: impl Fn(&Arr) -> Arr + 'static,
    ) -> Tensor {
        let x = self.clone();
        Tensor::make(value, vec![self.clone()], move || {
            Box::new(move |g| {
                let d = dfn(&x.value());
                vec![Some(g * &d)]
            })
        })
    }

    pub fn abs(&self) -> Tensor {
        let v = self.value().mapv(f64::abs);
        self.unary(v, |x| x.mapv(|t| if t > 0.0 { 1.0 } else if t < 0.0 { -1.0 } else { 0.0 }))
    }

    pub fn relu(&self) -> Tensor {
        let v = self.value().mapv(|t| t.max(0.0));
        self.unary(v, |x| x.mapv(|t| if t > 0.0 { 1.0 } else { 0.0 }))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let v = self.value().mapv(|t| if t > 0.0 { t } else { slope * t });
        self.unary(v, move |x| x.mapv(|t| if t > 0.0 { 1.0 } else { slope }))
    }

    pub fn elu(&self) -> Tensor {
        let v = self.value().mapv(|t| if t > 0.0 { t } else { t.exp() - 1.0 });
        self.unary(v, |x| x.mapv(|t| if t > 0.0 { 1.0 } else { t.exp() }))
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const K: f64 = 0.7978845608028654; // sqrt(2/pi)
        const C: f64 = 0.044715;
        let v = self
            .value()
            .mapv(|t| 0.5 * t * (1.0 + (K * (t + C * t * t * t)).tanh()));
        self.unary(v, |x| {
            x.mapv(|t| {
                let u = K * (t + C * t * t * t);
                let th = u.tanh();
                0.5 * (1.0 + th) + 0.5 * t * (1.0 - th * th) * K * (1.0 + 3.0 * C * t * t)
            })
        })
    }

    pub fn tanh_(&self) -> Tensor {
        let y = self.value().mapv(f64::tanh);
        let yc = y.clone();
        let x = self.clone();
        let _ = x;
        Tensor::make(y, vec![self.clone()], move || {
            Box::new(move |g| vec![Some(g * &yc.mapv(|t| 1.0 - t * t))])
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let y = self.value().mapv(|t| 1.0 / (1.0 + (-t).exp()));
        let yc = y.clone();
        Tensor::make(y, vec![self.clone()], move || {
            Box::new(move |g| vec![Some(g * &yc.mapv(|t| t * (1.0 - t)))])
        })
    }

    pub fn exp(&self) -> Tensor {
        let y = self.value().mapv(f64::exp);
        let yc = y.clone();
        Tensor::make(y, vec![self.clone()], move || {
            Box::new(move |g| vec![Some(g * &yc)])
        })
    }

    pub fn ln(&self) -> Tensor {
        let v = self.value().mapv(f64::ln);
        self.unary(v, |x| x.mapv(|t| 1.0 / t))
    }

    pub fn sqrt_(&self) -> Tensor {
        let y = self.value().mapv(f64::sqrt);
        let yc = y.clone();
        Tensor::make(y, vec![self.clone()], move || {
            Box::new(move |g| vec![Some(g * &yc.mapv(|t| 0.5 / t))])
        })
    }

    pub fn sqr(&self) -> Tensor {
        let v = self.value().mapv(|t| t * t);
        self.unary(v, |x| x.mapv(|t| 2.0 * t))
    }
}

// Softmax, layer norm, rotary embedding, straight-through.
impl Tensor {
    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let y = {
            let x = self.value();
            let mut y = x.to_owned();
            let d = *x.shape().last().expect("softmax_last: rank >= 1");
            let mut flat = y.view_mut().into_shape_with_order((x.len() / d, d)).unwrap();
            for mut row in flat.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|t| (t - m).exp());
                let s = row.sum();
                row.mapv_inplace(|t| t / s);
            }
            y
        };
        let yc = y.clone();
        Tensor::make(y, vec![self.clone()], move || {
            Box::new(move |g| {
                let d = *yc.shape().last().unwrap();
                let rows = yc.len() / d;
                let yf = yc.view().into_shape_with_order((rows, d)).unwrap();
                let gs = g.as_standard_layout();
                let gf = gs.view().into_shape_with_order((rows, d)).unwrap();
                let mut dx = ndarray::Array2::<f64>::zeros((rows, d));
                for i in 0..rows {
                    let yr = yf.row(i);
                    let gr = gf.row(i);
                    let dot = yr.dot(&gr);
                    let mut dr = dx.row_mut(i);
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(dx.into_dyn().into_shape_with_order(yc.raw_dim()).unwrap())]
            })
        })
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        let (y, xhat, inv_std) = {
            let x = self.value();
            let d = *x.shape().last().expect("layer_norm: rank >= 1");
            assert_eq!(gamma.len(), d, "layer_norm: gamma length");
            assert_eq!(beta.len(), d, "layer_norm: beta length");
            let rows = x.len() / d;
            let xs = x.as_standard_layout();
            let xf = xs.view().into_shape_with_order((rows, d)).unwrap();
            let mut xhat = ndarray::Array2::<f64>::zeros((rows, d));
            let mut inv = ndarray::Array1::<f64>::zeros(rows);
            for i in 0..rows {
                let row = xf.row(i);
                let mu = row.mean().unwrap();
                let var = row.mapv(|t| (t - mu) * (t - mu)).mean().unwrap();
                let istd = 1.0 / (var + eps).sqrt();
                inv[i] = istd;
                let mut hr = xhat.row_mut(i);
                for j in 0..d {
                    hr[j] = (row[j] - mu) * istd;
                }
            }
            let gv = gamma.value();
            let bv = beta.value();
            let g1 = gv.view().into_dimensionality::<Ix1>().unwrap();
            let b1 = bv.view().into_dimensionality::<Ix1>().unwrap();
            let y2 = &xhat * &g1 + &b1;
            let y = y2.into_dyn().into_shape_with_order(x.raw_dim()).unwrap();
            (y, xhat, inv)
        };
        let gamma_c = gamma.clone();
        let shape = self.shape();
        Tensor::make(
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move || {
                Box::new(move |g| {
                    let d = *shape.last().unwrap();
                    let rows = xhat.nrows();
                    let gs = g.as_standard_layout();
                    let gf = gs.view().into_shape_with_order((rows, d)).unwrap();
                    let gamma_v = gamma_c.value();
                    let g1 = gamma_v.view().into_dimensionality::<Ix1>().unwrap();
                    let mut dx = ndarray::Array2::<f64>::zeros((rows, d));
                    let mut dgamma = ndarray::Array1::<f64>::zeros(d);
                    let mut dbeta = ndarray::Array1::<f64>::zeros(d);
                    for i in 0..rows {
                        let gr = gf.row(i);
                        let hr = xhat.row(i);
                        let mut dxhat = ndarray::Array1::<f64>::zeros(d);
                        for j in 0..d {
                            dxhat[j] = gr[j] * g1[j];
                            dgamma[j] += gr[j] * hr[j];
                            dbeta[j] += gr[j];
                        }
                        let mean_dxhat = dxhat.mean().unwrap();
                        let mean_dxhat_h = dxhat.dot(&hr) / d as f64;
                        let mut dr = dx.row_mut(i);
                        for j in 0..d {
                            dr[j] = inv_std[i] * (dxhat[j] - mean_dxhat - hr[j] * mean_dxhat_h);
                        }
                    }
                    vec![
                        Some(dx.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap()),
                        Some(dgamma.into_dyn()),
                        Some(dbeta.into_dyn()),
                    ]
                })
            },
        )
    }

    /// Rotary position embedding over the last two axes `(S, D)`: channel
    /// pair `(2i, 2i+1)` at sequence slot `s` is rotated by
    /// `positions[s] * base^(-2i/D)`.
    pub fn rope(&self, positions: &[usize], base: f64) -> Tensor {
        let shape = self.shape();
        let nd = shape.len();
        assert!(nd >= 2, "rope: rank >= 2");
        let s = shape[nd - 2];
        let d = shape[nd - 1];
        assert_eq!(s, positions.len(), "rope: positions length mismatch");
        assert_eq!(d % 2, 0, "rope: head dim must be even");
        let half = d / 2;
        let mut cos = ndarray::Array2::<f64>::zeros((s, half));
        let mut sin = ndarray::Array2::<f64>::zeros((s, half));
        for (si, &p) in positions.iter().enumerate() {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / d as f64);
                cos[[si, i]] = theta.cos();
                sin[[si, i]] = theta.sin();
            }
        }
        fn rotate(x: &Arr, cos: &ndarray::Array2<f64>, sin: &ndarray::Array2<f64>, dir: f64) -> Arr {
            let shape = x.shape().to_vec();
            let nd = shape.len();
            let (s, d) = (shape[nd - 2], shape[nd - 1]);
            let lead: usize = shape[..nd - 2].iter().product();
            let xs = x.as_standard_layout();
            let xf = xs.view().into_shape_with_order((lead, s, d)).unwrap();
            let mut out = ndarray::Array3::<f64>::zeros((lead, s, d));
            for l in 0..lead {
                for si in 0..s {
                    for i in 0..d / 2 {
                        let (c, sn) = (cos[[si, i]], dir * sin[[si, i]]);
                        let a = xf[[l, si, 2 * i]];
                        let b = xf[[l, si, 2 * i + 1]];
                        out[[l, si, 2 * i]] = a * c - b * sn;
                        out[[l, si, 2 * i + 1]] = a * sn + b * c;
                    }
                }
            }
            out.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap()
        }
        let v = rotate(&self.value(), &cos, &sin, 1.0);
        Tensor::make(v, vec![self.clone()], move || {
            Box::new(move |g| vec![Some(rotate(g, &cos, &sin, -1.0))])
        })
    }

    /// Forward takes `quantized`; backward passes the gradient to `pre`
    /// unchanged (identity surrogate through the non-differentiable step).
    pub fn straight_through(pre: &Tensor, quantized: Arr) -> Tensor {
        assert_eq!(
            pre.value().shape(),
            quantized.shape(),
            "straight_through: shape mismatch"
        );
        Tensor::make(quantized, vec![pre.clone()], || {
            Box::new(|g| vec![Some(g.clone())])
        })
    }

    /// Value passes through; gradient does not.
    pub fn stop_grad(&self) -> Tensor {
        Tensor::constant(self.to_array())
    }
}

/// Finite-difference gradient checking.
pub mod gradcheck {
    use super::{Arr, Tensor};

    /// Compare analytic gradients of `f` (a scalar-valued graph builder over
    /// `inputs`) against central differences. An element passes when
    /// `|a - n| <= tol * max(|a|, |n|)` or `|a - n| <= atol`.
    pub fn check<F>(inputs: &[Tensor], f: F, eps: f64, tol: f64, atol: f64) -> Result<(), String>
    where
        F: Fn(&[Tensor]) -> Tensor,
    {
        for t in inputs {
            t.clear_grad();
        }
        let out = f(inputs);
        if out.len() != 1 {
            return Err("gradcheck: output is not scalar".into());
        }
        out.backward();
        let analytic: Vec<Arr> = inputs
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| Arr::zeros(t.value().raw_dim())))
            .collect();
        for t in inputs {
            t.clear_grad();
        }

        for (k, t) in inputs.iter().enumerate() {
            let base = t.to_array();
            let n = base.len();
            for j in 0..n {
                let mut plus = base.clone();
                plus.as_slice_mut().unwrap()[j] += eps;
                t.set_value(plus);
                let fp = f(inputs).scalar();

                let mut minus = base.clone();
                minus.as_slice_mut().unwrap()[j] -= eps;
                t.set_value(minus);
                let fm = f(inputs).scalar();

                t.set_value(base.clone());
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic[k].as_slice().unwrap()[j];
                let diff = (a - numeric).abs();
                if diff > tol * a.abs().max(numeric.abs()) && diff > atol {
                    return Err(format!(
                        "gradcheck: input {k} element {j}: analytic {a:.9e} vs numeric {numeric:.9e} (diff {diff:.3e})"
                    ));
                }
            }
        }
        Ok(())
    }
}
