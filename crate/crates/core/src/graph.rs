//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass. Each op stores
//! its output value and enough context to push gradients back to its inputs.
//! [`Graph::backward`] walks the tape once in reverse.
//!
//! Every op also adds its cost to a [`CostCounter`]. Conventions:
//! contractions (matmul, convolutions, the scan's inner products) count
//! multiply-accumulates; elementwise ops count one FLOP per output element;
//! `rms_norm` counts four per element; reductions count one per input element.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_at_acc, matmul_bt_acc, matmul_into, Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Instrumented operation counts for everything recorded on a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostCounter {
    pub macs: u64,
    pub elementwise: u64,
}

impl CostCounter {
    /// 1 MAC = 2 FLOPs.
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }
}

/// Backward rule for an op defined outside this module.
pub trait CustomBackward<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` where no gradient flows).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Softplus(Var),
    Sigmoid(Var),
    Silu(Var),
    Gelu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    DepthwiseCausal {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    Reverse(Var, usize),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Slice {
        x: Var,
        start: usize,
    },
    GatherRows(Var, Vec<usize>),
    ZeroRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SmoothL1 {
        pred: Var,
        target: Tensor<T>,
        beta: T,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    BceWithLogits {
        logits: Var,
        targets: Tensor<T>,
    },
    Softmax(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(var.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("grad shape"))
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    cost: CostCounter,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: a.to_vec(),
            actual: b.to_vec(),
        });
    }
    Ok(())
}

/// `(outer, extent, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let mut out = Vec::with_capacity(data.len());
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = (0..rank).map(|k| idx[k] * in_strides[axes[k]]).sum();
        out.push(data[src]);
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    (out, out_shape)
}

fn reverse_data<T: Scalar>(data: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for i in 0..n {
            let src = (o * n + i) * inner;
            let dst = (o * n + (n - 1 - i)) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    T::lit(0.5 * xf * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2)))
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let xf = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::lit(cdf + xf * pdf)
}

impl<T: Scalar> Graph<T> {
    /// A graph that records gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            cost: CostCounter::default(),
            params: HashMap::new(),
        }
    }

    /// A forward-only graph: no op keeps backward context.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Bytes of one tape entry, excluding its value's heap data.
    pub const fn node_bytes() -> usize {
        std::mem::size_of::<Node<T>>()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn cost(&self) -> CostCounter {
        self.cost
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by every recorded value.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.bytes()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// True when an op over `inputs` must keep backward context.
    pub fn any_tracked(&self, inputs: &[Var]) -> bool {
        self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = self.any_tracked(inputs);
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn count_elementwise(&mut self, n: usize) {
        self.cost.elementwise += n as u64;
    }

    fn count_macs(&mut self, n: usize) {
        self.cost.macs += n as u64;
    }

    /// Adds externally computed cost (used by custom ops).
    pub fn add_cost(&mut self, macs: u64, elementwise: u64) {
        self.cost.macs += macs;
        self.cost.elementwise += elementwise;
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let tracked = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter once per graph; later calls return the same leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let tracked = self.grad_enabled && p.requires_grad;
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            tracked,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Uses an existing node as the leaf for parameter `id`, so later
    /// [`Graph::param`] calls resolve to it.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.params.insert(id, var);
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: Vec<Var>,
        value: Tensor<T>,
        rule: Box<dyn CustomBackward<T>>,
    ) -> Var {
        let ins = inputs.clone();
        self.push(value, Op::Custom { inputs, rule }, &ins)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: vec![k, n],
                actual: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.count_macs(m * k * n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        check_same(op, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.count_elementwise(value.numel());
        Ok(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    fn row_map(&mut self, op: &'static str, x: Var, r: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or(TensorError::Rank {
            op,
            expected: 1,
            actual: xs.clone(),
        })?;
        check_same(op, &[c], self.shape(r))?;
        let rv = self.value(r).data();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.chunks(c) {
            data.extend(row.iter().zip(rv).map(|(&a, &b)| f(a, b)));
        }
        let value = Tensor::new(xs, data)?;
        self.count_elementwise(value.numel());
        Ok(value)
    }

    /// `x + bias` broadcast over the last axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.row_map("add_row", x, bias, |a, b| a + b)?;
        Ok(self.push(v, Op::AddRow(x, bias), &[x, bias]))
    }

    /// `x ⊙ weight` broadcast over the last axis.
    pub fn mul_row(&mut self, x: Var, weight: Var) -> Result<Var> {
        let v = self.row_map("mul_row", x, weight, |a, b| a * b)?;
        Ok(self.push(v, Op::MulRow(x, weight), &[x, weight]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x).map(f);
        self.count_elementwise(v.numel());
        v
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.unary(x, |a| a * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.unary(x, |a| a.exp());
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.unary(x, softplus);
        self.push(v, Op::Softplus(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.unary(x, sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.unary(x, |a| a * sigmoid(a));
        self.push(v, Op::Silu(x), &[x])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.unary(x, gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Patch convolution with stride equal to the kernel.
    ///
    /// `x` is `(H × W)`, `w` is `(D × kh × kw)`, `b` is `(D)`; output is
    /// `(D × H/kh × W/kw)`.
    pub fn conv2d_patch(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd) = self.value(x).dims2("conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: 3,
                actual: ws,
            });
        }
        let (d, kh, kw) = (ws[0], ws[1], ws[2]);
        check_same("conv2d", &[d], self.shape(b))?;
        if kh == 0 || kw == 0 || h % kh != 0 || wd % kw != 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                detail: format!("input {h}×{wd} is not tiled by kernel {kh}×{kw}"),
            });
        }
        let (oh, ow) = (h / kh, wd / kw);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let k = kh * kw;
        let mut patch = vec![T::zero(); k];
        let mut out = vec![T::zero(); d * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                for a in 0..kh {
                    let src = (i * kh + a) * wd + j * kw;
                    patch[a * kw..(a + 1) * kw].copy_from_slice(&xv[src..src + kw]);
                }
                for o in 0..d {
                    let wr = &wv[o * k..(o + 1) * k];
                    let acc: T = wr.iter().zip(&patch).map(|(&p, &q)| p * q).sum();
                    out[(o * oh + i) * ow + j] = acc + bv[o];
                }
            }
        }
        self.count_macs(d * oh * ow * k);
        self.count_elementwise(d * oh * ow);
        let value = Tensor::new(vec![d, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b }, &[x, w, b]))
    }

    /// Depthwise causal convolution along rows: `x` `(L × ch)`, `w` `(ch × k)`, `b` `(ch)`.
    /// `y[t, c] = b[c] + Σ_j w[c, j] · x[t − (k − 1) + j, c]`, zero before the start.
    pub fn depthwise_conv1d_causal(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (l, ch) = self.value(x).dims2("depthwise_conv1d")?;
        let (ch2, k) = self.value(w).dims2("depthwise_conv1d")?;
        check_same("depthwise_conv1d", &[ch], &[ch2])?;
        check_same("depthwise_conv1d", &[ch], self.shape(b))?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); l * ch];
        for t in 0..l {
            for j in 0..k {
                let Some(s) = (t + j).checked_sub(k - 1) else { continue };
                for c in 0..ch {
                    out[t * ch + c] = out[t * ch + c] + wv[c * k + j] * xv[s * ch + c];
                }
            }
            for c in 0..ch {
                out[t * ch + c] = out[t * ch + c] + bv[c];
            }
        }
        self.count_macs(l * ch * k);
        self.count_elementwise(l * ch);
        let value = Tensor::new(vec![l, ch], out)?;
        Ok(self.push(value, Op::DepthwiseCausal { x, w, b }, &[x, w, b]))
    }

    /// Dense 1D convolution along rows with symmetric zero padding `(k − 1) / 2`
    /// (length-preserving for odd `k`). `x` `(L × cin)`, `w` `(cout × cin × k)`, `b` `(cout)`.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (l, cin) = self.value(x).dims2("conv1d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                expected: vec![ws.first().copied().unwrap_or(0), cin, ws.get(2).copied().unwrap_or(0)],
                actual: ws,
            });
        }
        let (cout, k) = (ws[0], ws[2]);
        check_same("conv1d", &[cout], self.shape(b))?;
        let pad = (k - 1) / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); l * cout];
        for t in 0..l {
            for o in 0..cout {
                let mut acc = bv[o];
                for j in 0..k {
                    let Some(s) = (t + j).checked_sub(pad) else { continue };
                    if s >= l {
                        continue;
                    }
                    let xr = &xv[s * cin..(s + 1) * cin];
                    for c in 0..cin {
                        acc = acc + wv[(o * cin + c) * k + j] * xr[c];
                    }
                }
                out[t * cout + o] = acc;
            }
        }
        self.count_macs(l * cout * cin * k);
        self.count_elementwise(l * cout);
        let value = Tensor::new(vec![l, cout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, pad }, &[x, w, b]))
    }

    /// Root-mean-square normalization over the last axis, scaled by `w`.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&0);
        check_same("rms_norm", &[d], self.shape(w))?;
        let eps = T::lit(eps);
        let dd = T::lit(d as f64);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut inv = Vec::with_capacity(xv.len() / d.max(1));
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dd;
            let r = (ms + eps).sqrt().recip();
            inv.push(r);
            out.extend(row.iter().zip(wv).map(|(&v, &g)| v * r * g));
        }
        self.count_elementwise(4 * out.len());
        let value = Tensor::new(xs, out)?;
        Ok(self.push(value, Op::RmsNorm { x, w, inv_rms: inv }, &[x, w]))
    }

    pub fn reverse(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Index {
                op: "reverse",
                index: axis,
                extent: shape.len(),
            });
        }
        let data = reverse_data(self.value(x).data(), &shape, axis);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Reverse(x, axis), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                detail: format!("axes {axes:?} are not a permutation of rank {}", shape.len()),
            });
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, axes);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Permute(x, axes.to_vec()), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_cols")?;
        if start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                extent: c,
            });
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        Ok(self.push(value, Op::Slice { x, start }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                extent: r,
            });
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// Replaces rows `idx` with zeros; other rows pass through unchanged.
    pub fn zero_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2("zero_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::Index {
                op: "zero_rows",
                index: bad,
                extent: r,
            });
        }
        let mut value = self.value(x).clone();
        for &i in idx {
            value.data_mut()[i * c..(i + 1) * c].fill(T::zero());
        }
        Ok(self.push(value, Op::ZeroRows(x, idx.to_vec()), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.count_elementwise(self.value(x).numel());
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.value(x).sum() / T::lit(n as f64);
        self.count_elementwise(n);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Tensor<T>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Index {
                op: "reduce_axis",
                index: axis,
                extent: shape.len(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &xv[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        if mean {
            let denom = T::lit(n as f64);
            out.iter_mut().for_each(|v| *v = *v / denom);
        }
        self.count_elementwise(xv.len());
        let mut out_shape = shape;
        out_shape.remove(axis);
        Tensor::new(out_shape, out)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.reduce_axis(x, axis, false)?;
        Ok(self.push(v, Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.reduce_axis(x, axis, true)?;
        Ok(self.push(v, Op::MeanAxis(x, axis), &[x]))
    }

    /// Elementwise Smooth-L1 against a fixed target:
    /// `0.5·d²/β` when `|d| < β`, else `|d| − 0.5·β`, with `d = pred − target`.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<T>, beta: f64) -> Result<Var> {
        check_same("smooth_l1", self.shape(pred), target.shape())?;
        let beta = T::lit(beta);
        let half = T::lit(0.5);
        let data = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let d = (p - t).abs();
                if d < beta {
                    half * d * d / beta
                } else {
                    d - half * beta
                }
            })
            .collect();
        let value = Tensor::new(target.shape().to_vec(), data)?;
        self.count_elementwise(value.numel());
        Ok(self.push(
            value,
            Op::SmoothL1 {
                pred,
                target: target.clone(),
                beta,
            },
            &[pred],
        ))
    }

    /// Mean softmax cross-entropy of `(rows × classes)` logits against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, k) = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != r {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                expected: vec![r],
                actual: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                extent: k,
            });
        }
        let lv = self.value(logits).data();
        let mut total = T::zero();
        for (row, &label) in lv.chunks(k).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total = total + lse - row[label];
        }
        self.count_elementwise(3 * r * k);
        let value = Tensor::scalar(total / T::lit(r as f64));
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Elementwise sigmoid binary cross-entropy on logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        check_same("bce_with_logits", self.shape(logits), targets.shape())?;
        let data = self
            .value(logits)
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .collect();
        let value = Tensor::new(targets.shape().to_vec(), data)?;
        self.count_elementwise(value.numel());
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
            &[logits],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or(TensorError::Rank {
            op: "softmax",
            expected: 1,
            actual: shape.clone(),
        })?;
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
            let s: T = e.iter().copied().sum();
            out.extend(e.into_iter().map(|v| v / s));
        }
        self.count_elementwise(3 * out.len());
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Gradients of scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        if !self.grad_enabled {
            return Err(TensorError::Invalid {
                op: "backward",
                detail: "graph was built in inference mode".into(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Gradients per stored parameter, indexed by [`ParamId`].
    pub fn param_grads(&self, grads: &Gradients<T>, num_params: usize) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![None; num_params];
        for (&id, &v) in &self.params {
            if id.index() < num_params {
                out[id.index()] = grads.get(v);
            }
        }
        out
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e = *e + c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if tracked(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    matmul_bt_acc(g, val(*b), &mut ga, m, n, k);
                    acc(*a, ga);
                }
                if tracked(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    matmul_at_acc(val(*a), g, &mut gb, m, k, n);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                acc(*b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.to_vec());
                let c = self.shape(*bias)[0];
                let mut gb = vec![T::zero(); c];
                for row in g.chunks(c) {
                    for (s, &v) in gb.iter_mut().zip(row) {
                        *s = *s + v;
                    }
                }
                acc(*bias, gb);
            }
            Op::MulRow(x, w) => {
                let c = self.shape(*w)[0];
                let wv = val(*w);
                let xv = val(*x);
                acc(
                    *x,
                    g.chunks(c)
                        .flat_map(|row| row.iter().zip(wv).map(|(&a, &b)| a * b).collect::<Vec<_>>())
                        .collect(),
                );
                let mut gw = vec![T::zero(); c];
                for (grow, xrow) in g.chunks(c).zip(xv.chunks(c)) {
                    for j in 0..c {
                        gw[j] = gw[j] + grow[j] * xrow[j];
                    }
                }
                acc(*w, gw);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|&v| v * *c).collect()),
            Op::Exp(x) => acc(*x, g.iter().zip(out).map(|(&a, &y)| a * y).collect()),
            Op::Softplus(x) => acc(
                *x,
                g.iter().zip(val(*x)).map(|(&a, &v)| a * sigmoid(v)).collect(),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                g.iter().zip(out).map(|(&a, &y)| a * y * (T::one() - y)).collect(),
            ),
            Op::Silu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&a, &v)| {
                        let s = sigmoid(v);
                        a * (s + v * s * (T::one() - s))
                    })
                    .collect(),
            ),
            Op::Gelu(x) => acc(
                *x,
                g.iter().zip(val(*x)).map(|(&a, &v)| a * gelu_grad(v)).collect(),
            ),
            Op::Conv2d { x, w, b } => {
                let (h, wd) = (self.shape(*x)[0], self.shape(*x)[1]);
                let ws = self.shape(*w);
                let (d, kh, kw) = (ws[0], ws[1], ws[2]);
                let (oh, ow) = (h / kh, wd / kw);
                let k = kh * kw;
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = vec![T::zero(); h * wd];
                let mut gw = vec![T::zero(); d * k];
                let mut gb = vec![T::zero(); d];
                for o in 0..d {
                    for i in 0..oh {
                        for j in 0..ow {
                            let go = g[(o * oh + i) * ow + j];
                            gb[o] = gb[o] + go;
                            for a in 0..kh {
                                for c in 0..kw {
                                    let src = (i * kh + a) * wd + j * kw + c;
                                    let widx = o * k + a * kw + c;
                                    gw[widx] = gw[widx] + go * xv[src];
                                    gx[src] = gx[src] + go * wv[widx];
                                }
                            }
                        }
                    }
                }
                acc(*x, gx);
                acc(*w, gw);
                acc(*b, gb);
            }
            Op::DepthwiseCausal { x, w, b } => {
                let (l, ch) = (self.shape(*x)[0], self.shape(*x)[1]);
                let k = self.shape(*w)[1];
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = vec![T::zero(); l * ch];
                let mut gw = vec![T::zero(); ch * k];
                let mut gb = vec![T::zero(); ch];
                for t in 0..l {
                    for c in 0..ch {
                        gb[c] = gb[c] + g[t * ch + c];
                    }
                    for j in 0..k {
                        let Some(s) = (t + j).checked_sub(k - 1) else { continue };
                        for c in 0..ch {
                            let go = g[t * ch + c];
                            gw[c * k + j] = gw[c * k + j] + go * xv[s * ch + c];
                            gx[s * ch + c] = gx[s * ch + c] + go * wv[c * k + j];
                        }
                    }
                }
                acc(*x, gx);
                acc(*w, gw);
                acc(*b, gb);
            }
            Op::Conv1d { x, w, b, pad } => {
                let (l, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (cout, k) = (self.shape(*w)[0], self.shape(*w)[2]);
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = vec![T::zero(); l * cin];
                let mut gw = vec![T::zero(); cout * cin * k];
                let mut gb = vec![T::zero(); cout];
                for t in 0..l {
                    for o in 0..cout {
                        let go = g[t * cout + o];
                        gb[o] = gb[o] + go;
                        for j in 0..k {
                            let Some(s) = (t + j).checked_sub(*pad) else { continue };
                            if s >= l {
                                continue;
                            }
                            for c in 0..cin {
                                let widx = (o * cin + c) * k + j;
                                gw[widx] = gw[widx] + go * xv[s * cin + c];
                                gx[s * cin + c] = gx[s * cin + c] + go * wv[widx];
                            }
                        }
                    }
                }
                acc(*x, gx);
                acc(*w, gw);
                acc(*b, gb);
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let d = self.shape(*w)[0];
                let (xv, wv) = (val(*x), val(*w));
                let dd = T::lit(d as f64);
                let mut gx = Vec::with_capacity(xv.len());
                let mut gw = vec![T::zero(); d];
                for ((grow, xrow), &r) in g.chunks(d).zip(xv.chunks(d)).zip(inv_rms) {
                    let mut dot = T::zero();
                    for j in 0..d {
                        let xh = xrow[j] * r;
                        gw[j] = gw[j] + grow[j] * xh;
                        dot = dot + grow[j] * wv[j] * xh;
                    }
                    let mean_dot = dot / dd;
                    for j in 0..d {
                        let xh = xrow[j] * r;
                        gx.push((grow[j] * wv[j] - xh * mean_dot) * r);
                    }
                }
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::Reverse(x, axis) => acc(*x, reverse_data(g, node.value.shape(), *axis)),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (data, _) = permute_data(g, node.value.shape(), &inverse);
                acc(*x, data);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Slice { x, start } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = node.value.shape()[1];
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*x, gx);
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut gx = vec![T::zero(); r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + g[k * c + j];
                    }
                }
                acc(*x, gx);
            }
            Op::ZeroRows(x, idx) => {
                let c = self.shape(*x)[1];
                let mut gx = g.to_vec();
                for &i in idx {
                    gx[i * c..(i + 1) * c].fill(T::zero());
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    T::one() / T::lit(n as f64)
                } else {
                    T::one()
                };
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                    }
                }
                acc(*x, gx);
            }
            Op::SmoothL1 { pred, target, beta } => acc(
                *pred,
                g.iter()
                    .zip(val(*pred))
                    .zip(target.data())
                    .map(|((&a, &p), &t)| {
                        let d = p - t;
                        if d.abs() < *beta {
                            a * d / *beta
                        } else {
                            a * d.signum()
                        }
                    })
                    .collect(),
            ),
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let k = self.shape(*logits)[1];
                let r = labels.len();
                let scale = g[0] / T::lit(r as f64);
                let mut gl = Vec::with_capacity(r * k);
                for (row, &label) in val(*logits).chunks(k).zip(labels) {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
                    let s: T = e.iter().copied().sum();
                    for (j, ej) in e.into_iter().enumerate() {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        gl.push(scale * (ej / s - onehot));
                    }
                }
                acc(*logits, gl);
            }
            Op::BceWithLogits { logits, targets } => acc(
                *logits,
                g.iter()
                    .zip(val(*logits))
                    .zip(targets.data())
                    .map(|((&a, &x), &t)| a * (sigmoid(x) - t))
                    .collect(),
            ),
            Op::Softmax(x) => {
                let k = *node.value.shape().last().unwrap();
                let mut gx = Vec::with_capacity(out.len());
                for (grow, yrow) in g.chunks(k).zip(out.chunks(k)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&a, &y)| y * (a - dot)));
                }
                acc(*x, gx);
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let contribs = rule.backward(&values, &node.value, g);
                for (v, c) in inputs.iter().zip(contribs) {
                    if let Some(c) = c {
                        acc(*v, c);
                    }
                }
            }
        }
    }
}
