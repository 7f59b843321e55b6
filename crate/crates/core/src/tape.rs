//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation eagerly (values are computed when the
//! node is pushed) and [`Tape::backward`] walks the record in reverse. Nodes
//! whose inputs carry no gradient requirement are skipped on the way back,
//! so frozen sub-networks cost only their input gradients.
//!
//! Shape errors in the op constructors are programming errors and panic;
//! the model modules validate user-facing inputs before reaching the tape.

use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, ConvGeom, Dims};
use crate::nn::{Binding, ParamStore};
use crate::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample(Var, usize),
    AvgPool(Var, usize, usize),
    MeanFrames(Var),
    BroadcastFrames(Var),
    FrameMix(Var, Vec<Vec<(usize, f64)>>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Haar(Var),
    HaarInverse(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    GlobalAvgPool(Var),
    Mse(Var, Var),
    BceLogits(Var, f64),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of a binding, in parameter order.
    /// Parameters that received no gradient get zeros.
    pub fn for_binding(&self, binding: &Binding, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        binding
            .vars()
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| {
                self.get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Pushes every tensor of `store` as a leaf.
    pub fn bind(&mut self, store: &ParamStore<T>, trainable: bool) -> Binding {
        let vars = store
            .tensors()
            .map(|t| self.leaf(t.clone(), trainable))
            .collect();
        Binding::new(vars)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Var {
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            assert_eq!(x.shape(), y.shape(), "elementwise op on mismatched shapes");
            x.zip_map(y, f).expect("shapes checked")
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kt = T::of(k);
        self.unary(a, Op::Scale(a, k), |x| x * kt)
    }

    /// `a + k` elementwise.
    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let kt = T::of(k);
        self.unary(a, Op::Offset(a), |x| x + kt)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * s })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(l).min(h))
    }

    /// Stride-1 convolution with "same" zero padding over a `[C, T, H, W]`
    /// volume. `weight` is `[Cout, Cin, kt, kh, kw]` or `[Cout, Cin, kh, kw]`
    /// (a per-frame 2D convolution).
    pub fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Var {
        let d = Dims::of(self.shape(input));
        let ws = self.shape(weight);
        let k = match ws.len() {
            4 => [1, ws[2], ws[3]],
            5 => [ws[2], ws[3], ws[4]],
            _ => panic!("conv weight must be 4-D or 5-D, got {ws:?}"),
        };
        assert_eq!(ws[1], d.c, "conv input channels");
        assert!(k.iter().all(|k| k % 2 == 1), "conv kernels must be odd");
        let geom = ConvGeom {
            input: d,
            cout: ws[0],
            k,
        };
        if let Some(b) = bias {
            assert_eq!(self.shape(b), &[geom.cout], "conv bias shape");
        }
        let mut out = Tensor::zeros(&[geom.cout, d.t, d.h, d.w]);
        kernels::conv_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
            needs,
        )
    }

    /// Nearest-neighbour spatial upsampling.
    pub fn upsample(&mut self, a: Var, factor: usize) -> Var {
        let d = Dims::of(self.shape(a));
        let mut out = Tensor::zeros(&[d.c, d.t, d.h * factor, d.w * factor]);
        kernels::upsample_forward(d, factor, self.value(a).data(), out.data_mut());
        let needs = self.needs(a);
        self.push(out, Op::Upsample(a, factor), needs)
    }

    /// Non-overlapping average pooling: temporal factor `ft`, spatial `fs`.
    pub fn avg_pool(&mut self, a: Var, ft: usize, fs: usize) -> Var {
        let d = Dims::of(self.shape(a));
        assert!(
            ft > 0 && fs > 0 && d.t.is_multiple_of(ft) && d.h.is_multiple_of(fs) && d.w.is_multiple_of(fs),
            "avg_pool factors ({ft}, {fs}) must divide {:?}",
            (d.t, d.h, d.w)
        );
        let mut out = Tensor::zeros(&[d.c, d.t / ft, d.h / fs, d.w / fs]);
        kernels::avgpool_forward(d, ft, fs, self.value(a).data(), out.data_mut());
        let needs = self.needs(a);
        self.push(out, Op::AvgPool(a, ft, fs), needs)
    }

    /// Mean over the frame axis: `[C, T, H, W] -> [C, 1, H, W]`.
    pub fn mean_frames(&mut self, a: Var) -> Var {
        let d = Dims::of(self.shape(a));
        let mut out = Tensor::zeros(&[d.c, 1, d.h, d.w]);
        kernels::avgpool_forward(d, d.t, 1, self.value(a).data(), out.data_mut());
        let needs = self.needs(a);
        self.push(out, Op::MeanFrames(a), needs)
    }

    /// Repeats a single frame: `[C, 1, H, W] -> [C, frames, H, W]`.
    pub fn broadcast_frames(&mut self, a: Var, frames: usize) -> Var {
        let d = Dims::of(self.shape(a));
        assert_eq!(d.t, 1, "broadcast_frames expects one frame");
        let src = self.value(a).data();
        let plane = d.plane();
        let mut out = Tensor::zeros(&[d.c, frames, d.h, d.w]);
        for c in 0..d.c {
            for t in 0..frames {
                out.data_mut()[(c * frames + t) * plane..][..plane]
                    .copy_from_slice(&src[c * plane..][..plane]);
            }
        }
        let needs = self.needs(a);
        self.push(out, Op::BroadcastFrames(a), needs)
    }

    /// Linear mixing along the frame axis: output frame `t` is
    /// `sum(w * input[s] for (s, w) in mix[t])`.
    pub fn frame_mix(&mut self, a: Var, mix: Vec<Vec<(usize, f64)>>) -> Var {
        let d = Dims::of(self.shape(a));
        assert!(mix.iter().flatten().all(|&(s, _)| s < d.t));
        let plane = d.plane();
        let src = self.value(a).data();
        let mut out = Tensor::zeros(&[d.c, mix.len(), d.h, d.w]);
        for c in 0..d.c {
            for (t, terms) in mix.iter().enumerate() {
                let dst = &mut out.data_mut()[(c * mix.len() + t) * plane..][..plane];
                for &(s, w) in terms {
                    let w = T::of(w);
                    for (o, &v) in dst.iter_mut().zip(&src[(c * d.t + s) * plane..][..plane]) {
                        *o += w * v;
                    }
                }
            }
        }
        let needs = self.needs(a);
        self.push(out, Op::FrameMix(a, mix), needs)
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rest = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &rest[..], "concat trailing dims");
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&rest);
        let needs = parts.iter().any(|&p| self.needs(p));
        let value = Tensor::from_vec(&shape, data).expect("concat size");
        self.push(value, Op::Concat(parts.to_vec()), needs)
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.shape()[0], "slice out of range");
        let inner: usize = v.shape()[1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let data = v.data()[start * inner..(start + len) * inner].to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor::from_vec(&shape, data).expect("slice size"),
            Op::Slice(a, start),
            needs,
        )
    }

    /// Single-level orthonormal Haar analysis, `[C, T, H, W] -> [4C, T, H/2, W/2]`.
    pub fn haar(&mut self, a: Var) -> Var {
        let d = Dims::of(self.shape(a));
        assert!(d.h.is_multiple_of(2) && d.w.is_multiple_of(2), "haar needs even spatial dims");
        let mut out = Tensor::zeros(&[4 * d.c, d.t, d.h / 2, d.w / 2]);
        kernels::haar_forward(d, self.value(a).data(), out.data_mut());
        let needs = self.needs(a);
        self.push(out, Op::Haar(a), needs)
    }

    /// Inverse of [`Tape::haar`], `[4C, T, H, W] -> [C, T, 2H, 2W]`.
    pub fn haar_inverse(&mut self, a: Var) -> Var {
        let b = Dims::of(self.shape(a));
        assert_eq!(b.c % 4, 0, "haar_inverse needs 4 bands");
        let d = Dims {
            c: b.c / 4,
            t: b.t,
            h: b.h * 2,
            w: b.w * 2,
        };
        let mut out = Tensor::zeros(&[d.c, d.t, d.h, d.w]);
        kernels::haar_inverse(d, self.value(a).data(), out.data_mut());
        let needs = self.needs(a);
        self.push(out, Op::HaarInverse(a), needs)
    }

    /// Spatial pixel shuffle, `[C·f², T, H, W] -> [C, T, H·f, W·f]`: channel
    /// `c·f² + dy·f + dx` fills offset `(dy, dx)` of every `f×f` cell.
    pub fn depth_to_space(&mut self, a: Var, f: usize) -> Var {
        let d = Dims::of(self.shape(a));
        assert!(f > 0 && d.c.is_multiple_of(f * f), "depth_to_space needs channels divisible by {}", f * f);
        let (c, h, w) = (d.c / (f * f), d.h * f, d.w * f);
        let mut index = Vec::with_capacity(d.c * d.volume());
        for ci in 0..c {
            for t in 0..d.t {
                for y in 0..h {
                    for x in 0..w {
                        let src_c = ci * f * f + (y % f) * f + (x % f);
                        index.push(((src_c * d.t + t) * d.h + y / f) * d.w + x / f);
                    }
                }
            }
        }
        self.gather(a, &[c, d.t, h, w], index)
    }

    /// Inverse of [`Tape::depth_to_space`].
    pub fn space_to_depth(&mut self, a: Var, f: usize) -> Var {
        let d = Dims::of(self.shape(a));
        assert!(f > 0 && d.h.is_multiple_of(f) && d.w.is_multiple_of(f), "space_to_depth needs dims divisible by {f}");
        let (c, h, w) = (d.c * f * f, d.h / f, d.w / f);
        let mut index = Vec::with_capacity(d.c * d.volume());
        for co in 0..c {
            let (ci, dy, dx) = (co / (f * f), (co % (f * f)) / f, co % f);
            for t in 0..d.t {
                for y in 0..h {
                    for x in 0..w {
                        index.push(((ci * d.t + t) * d.h + y * f + dy) * d.w + x * f + dx);
                    }
                }
            }
        }
        self.gather(a, &[c, d.t, h, w], index)
    }

    /// `out[i] = a[index[i]]`.
    fn gather(&mut self, a: Var, shape: &[usize], index: Vec<usize>) -> Var {
        let src = self.value(a).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let needs = self.needs(a);
        self.push(
            Tensor::from_vec(shape, data).expect("gather size"),
            Op::Gather(a, index),
            needs,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape).expect("reshape size");
        let needs = self.needs(a);
        self.push(value, Op::Reshape(a), needs)
    }

    /// `weight · flatten(input) + bias`, with `weight` of shape `[out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Var {
        let (m, n) = {
            let ws = self.shape(weight);
            (ws[0], ws[1])
        };
        let x = self.value(input).data();
        assert_eq!(x.len(), n, "linear input size");
        let w = self.value(weight).data();
        let mut out: Vec<T> = (0..m)
            .map(|i| w[i * n..(i + 1) * n].iter().zip(x).map(|(&a, &b)| a * b).sum())
            .collect();
        if let Some(b) = bias {
            for (o, &bv) in out.iter_mut().zip(self.value(b).data()) {
                *o += bv;
            }
        }
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        self.push(
            Tensor::from_vec(&[m], out).expect("linear size"),
            Op::Linear {
                input,
                weight,
                bias,
            },
            needs,
        )
    }

    /// Mean over everything but the channel axis: `[C, ...] -> [C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.shape()[0];
        let inner = v.len() / c;
        let inv = T::of(1.0 / inner as f64);
        let out = Tensor::from_fn(&[c], |i| {
            v.data()[i * inner..(i + 1) * inner].iter().copied().sum::<T>() * inv
        });
        let needs = self.needs(a);
        self.push(out, Op::GlobalAvgPool(a), needs)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).mse(self.value(b)).expect("mse shapes");
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(m), Op::Mse(a, b), needs)
    }

    /// Mean binary cross-entropy of logits against a constant label.
    pub fn bce_logits(&mut self, logits: Var, target: f64) -> Var {
        let y = T::of(target);
        let v = self.value(logits);
        let n = T::of(v.len() as f64);
        let loss = v
            .data()
            .iter()
            .map(|&x| x.max(T::zero()) - x * y + (T::one() + (-x.abs()).exp()).ln())
            .sum::<T>()
            / n;
        let needs = self.needs(logits);
        self.push(Tensor::scalar(loss), Op::BceLogits(logits, target), needs)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn grad_buffer(&self, grads: &mut [Option<Tensor<T>>], v: Var) -> Tensor<T> {
        grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).expect("shape");
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).expect("shape");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, k) => {
                let k = T::of(*k);
                self.accumulate(grads, *a, g.map(|x| x * k));
            }
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Exp(a) => {
                let ga = g.zip_map(out, |x, e| x * e).expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(out, |x, t| x * (T::one() - t * t)).expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g
                    .zip_map(out, |x, s| x * s * (T::one() - s))
                    .expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let s = T::of(*slope);
                let ga = g
                    .zip_map(self.value(*a), |x, v| if v > T::zero() { x } else { x * s })
                    .expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (l, h) = (T::of(*lo), T::of(*hi));
                let ga = g
                    .zip_map(self.value(*a), |x, v| if v >= l && v <= h { x } else { T::zero() })
                    .expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            } => {
                if self.needs(*input) {
                    let mut gi = self.grad_buffer(grads, *input);
                    kernels::conv_backward_input(
                        geom,
                        g.data(),
                        self.value(*weight).data(),
                        gi.data_mut(),
                    );
                    grads[input.0] = Some(gi);
                }
                let need_b = bias.is_some_and(|b| self.needs(b));
                if self.needs(*weight) || need_b {
                    let mut gw = self.grad_buffer(grads, *weight);
                    let mut gb = bias.map(|b| self.grad_buffer(grads, b));
                    kernels::conv_backward_params(
                        geom,
                        g.data(),
                        self.value(*input).data(),
                        gw.data_mut(),
                        gb.as_mut().map(|t| t.data_mut()),
                    );
                    if self.needs(*weight) {
                        grads[weight.0] = Some(gw);
                    }
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        if self.needs(*b) {
                            grads[b.0] = Some(gb);
                        }
                    }
                }
            }
            Op::Upsample(a, f) => {
                let d = Dims::of(self.shape(*a));
                let mut ga = self.grad_buffer(grads, *a);
                kernels::upsample_backward(d, *f, g.data(), ga.data_mut());
                grads[a.0] = Some(ga);
            }
            Op::AvgPool(a, ft, fs) => {
                let d = Dims::of(self.shape(*a));
                let mut ga = self.grad_buffer(grads, *a);
                kernels::avgpool_backward(d, *ft, *fs, g.data(), ga.data_mut());
                grads[a.0] = Some(ga);
            }
            Op::MeanFrames(a) => {
                let d = Dims::of(self.shape(*a));
                let mut ga = self.grad_buffer(grads, *a);
                kernels::avgpool_backward(d, d.t, 1, g.data(), ga.data_mut());
                grads[a.0] = Some(ga);
            }
            Op::BroadcastFrames(a) => {
                let d = Dims::of(out.shape());
                let plane = d.plane();
                let mut ga = self.grad_buffer(grads, *a);
                for c in 0..d.c {
                    for t in 0..d.t {
                        let src = &g.data()[(c * d.t + t) * plane..][..plane];
                        for (o, &v) in ga.data_mut()[c * plane..][..plane].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                grads[a.0] = Some(ga);
            }
            Op::FrameMix(a, mix) => {
                let d = Dims::of(self.shape(*a));
                let plane = d.plane();
                let mut ga = self.grad_buffer(grads, *a);
                for c in 0..d.c {
                    for (t, terms) in mix.iter().enumerate() {
                        let src = &g.data()[(c * mix.len() + t) * plane..][..plane];
                        for &(s, w) in terms {
                            let w = T::of(w);
                            let dst = &mut ga.data_mut()[(c * d.t + s) * plane..][..plane];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o += w * v;
                            }
                        }
                    }
                }
                grads[a.0] = Some(ga);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        let gp = Tensor::from_vec(
                            self.shape(p),
                            g.data()[offset..offset + n].to_vec(),
                        )
                        .expect("concat grad");
                        self.accumulate(grads, p, gp);
                    }
                    offset += n;
                }
            }
            Op::Slice(a, start) => {
                let inner: usize = self.shape(*a)[1..].iter().product();
                let mut ga = self.grad_buffer(grads, *a);
                let dst = &mut ga.data_mut()[start * inner..start * inner + g.len()];
                for (o, &v) in dst.iter_mut().zip(g.data()) {
                    *o += v;
                }
                grads[a.0] = Some(ga);
            }
            Op::Haar(a) => {
                let d = Dims::of(self.shape(*a));
                let mut back = Tensor::zeros(self.shape(*a));
                kernels::haar_inverse(d, g.data(), back.data_mut());
                self.accumulate(grads, *a, back);
            }
            Op::HaarInverse(a) => {
                let d = Dims::of(out.shape());
                let mut back = Tensor::zeros(self.shape(*a));
                kernels::haar_forward(d, g.data(), back.data_mut());
                self.accumulate(grads, *a, back);
            }
            Op::Gather(a, index) => {
                let mut ga = self.grad_buffer(grads, *a);
                let dst = ga.data_mut();
                for (&i, &v) in index.iter().zip(g.data()) {
                    dst[i] += v;
                }
                grads[a.0] = Some(ga);
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshape(self.shape(*a)).expect("reshape grad");
                self.accumulate(grads, *a, ga);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let w = self.value(*weight);
                let (m, n) = (w.shape()[0], w.shape()[1]);
                if self.needs(*input) {
                    let mut gi = vec![T::zero(); n];
                    for (r, &go) in g.data().iter().enumerate() {
                        for (o, &wv) in gi.iter_mut().zip(&w.data()[r * n..(r + 1) * n]) {
                            *o += go * wv;
                        }
                    }
                    let gi = Tensor::from_vec(self.shape(*input), gi).expect("linear grad");
                    self.accumulate(grads, *input, gi);
                }
                if self.needs(*weight) {
                    let x = self.value(*input).data();
                    let gw = Tensor::from_fn(&[m, n], |k| g.data()[k / n] * x[k % n]);
                    self.accumulate(grads, *weight, gw);
                }
                if let Some(b) = bias {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.shape(*a);
                let inner = self.value(*a).len() / shape[0];
                let inv = T::of(1.0 / inner as f64);
                let ga = Tensor::from_fn(shape, |k| g.data()[k / inner] * inv);
                self.accumulate(grads, *a, ga);
            }
            Op::Mse(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let k = g.item() * T::of(2.0 / x.len() as f64);
                let diff = x.zip_map(y, |p, q| (p - q) * k).expect("shape");
                if self.needs(*b) {
                    self.accumulate(grads, *b, diff.map(|v| -v));
                }
                self.accumulate(grads, *a, diff);
            }
            Op::BceLogits(a, target) => {
                let y = T::of(*target);
                let x = self.value(*a);
                let k = g.item() / T::of(x.len() as f64);
                self.accumulate(grads, *a, x.map(|v| (sigmoid(v) - y) * k));
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape<f64>, Var) -> Var, input: Tensor<f64>) {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), true);
        let y = build(&mut tape, x);
        let grads = tape.backward(y);
        let analytic = grads.get(x).unwrap().clone();
        let eps = 1e-6;
        for k in 0..input.len() {
            let eval = |delta: f64| {
                let mut p = input.clone();
                p.data_mut()[k] += delta;
                let mut t = Tape::new();
                let x = t.leaf(p, true);
                let y = build(&mut t, x);
                t.value(y).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[k];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "coordinate {k}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 37 % 23) as f64 / 11.0) - 1.0)
    }

    #[test]
    fn pixel_shuffle_round_trips_and_differentiates() {
        let x = ramp(&[8, 2, 3, 2]);
        let mut t = Tape::<f64>::new();
        let v = t.constant(x.clone());
        let up = t.depth_to_space(v, 2);
        assert_eq!(t.shape(up), &[2, 2, 6, 4]);
        // channel 1 of the first group lands at offset (0, 1)
        assert_eq!(t.value(up).data()[1], x.data()[2 * 3 * 2]);
        let down = t.space_to_depth(up, 2);
        assert_eq!(t.value(down), &x);
        fd_check(
            |t, x| {
                let y = t.depth_to_space(x, 2);
                let y = t.tanh(y);
                let z = t.space_to_depth(y, 2);
                let z = t.mul(z, z);
                let zero = t.constant(Tensor::zeros(t.shape(z)));
                t.mse(z, zero)
            },
            x,
        );
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let w = ramp(&[2, 2, 3, 3, 3]).map(|v| v * 0.3);
        let target = ramp(&[2, 3, 4, 5]).map(|v| v * 0.5);
        fd_check(
            move |t, x| {
                let w = t.constant(w.clone());
                let y = t.conv(x, w, None);
                let tg = t.constant(target.clone());
                t.mse(y, tg)
            },
            ramp(&[2, 3, 4, 5]),
        );
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let x = ramp(&[3, 2, 4, 4]);
        fd_check(
            move |t, w| {
                let x = t.constant(x.clone());
                let y = t.conv(x, w, None);
                let y = t.tanh(y);
                let z = t.constant(Tensor::zeros(t.shape(y)));
                t.mse(y, z)
            },
            ramp(&[2, 3, 3, 3]).map(|v| v * 0.2),
        );
    }

    #[test]
    fn pooling_and_resampling_gradients() {
        let target = ramp(&[2, 1, 4, 4]);
        fd_check(
            move |t, x| {
                let p = t.avg_pool(x, 1, 2);
                let u = t.upsample(p, 2);
                let m = t.mean_frames(u);
                let s = t.sigmoid(m);
                let tg = t.constant(target.clone());
                t.mse(s, tg)
            },
            ramp(&[2, 4, 4, 4]),
        );
    }

    #[test]
    fn frame_mix_broadcast_and_haar_gradients() {
        let target = ramp(&[2, 3, 4, 4]);
        fd_check(
            move |t, x| {
                let m = t.frame_mix(x, vec![vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0)], vec![(0, 2.0)]]);
                let h = t.haar(m);
                let e = t.exp(h);
                let i = t.haar_inverse(e);
                let tg = t.constant(target.clone());
                t.mse(i, tg)
            },
            ramp(&[2, 2, 4, 4]).map(|v| v * 0.5),
        );
    }

    #[test]
    fn linear_concat_slice_and_bce_gradients() {
        let w = ramp(&[3, 8]).map(|v| v * 0.4);
        fd_check(
            move |t, x| {
                let a = t.slice(x, 0, 1);
                let b = t.slice(x, 1, 1);
                let c = t.concat(&[b, a]);
                let l = t.leaky_relu(c, 0.2);
                let g = t.global_avg_pool(l);
                let w = t.constant(w.clone());
                let gg = t.concat(&[g, g, g, g]);
                let y = t.linear(gg, w, None);
                t.bce_logits(y, 1.0)
            },
            ramp(&[2, 1, 2, 2]).map(|v| v + 0.013),
        );
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut t = Tape::<f32>::new();
        let a = t.leaf(Tensor::full(&[2], 1.0), false);
        let b = t.leaf(Tensor::full(&[2], 2.0), true);
        let c = t.mul(a, b);
        let z = t.constant(Tensor::zeros(&[2]));
        let l = t.mse(c, z);
        let g = t.backward(l);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0]);
    }
}
