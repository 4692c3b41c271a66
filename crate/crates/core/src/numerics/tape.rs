//! Reverse-mode differentiation over a linear record of operations.
//!
//! Values live on the tape; a `Var` is an index into it. Parameters are bound
//! once per pass by id, so two uses of the same parameter share one leaf and
//! their gradients sum. `backward` consumes the recording: intermediate values
//! are dropped and only leaf gradients remain readable.

use std::collections::HashMap;

use super::param::{Param, ParamId};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric zero padding of `k / 2`; odd kernels only.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    initialized: bool,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Installs externally supplied statistics (checkpoint load, tests).
    pub fn set_running(&mut self, mean: Vec<T>, var: Vec<T>) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(Error::dim("running statistics length mismatch"));
        }
        self.running_mean = mean;
        self.running_var = var;
        self.initialized = true;
        Ok(())
    }
}

enum Op<T> {
    Leaf,
    Released,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Select {
        x: Var,
        axis: usize,
        index: usize,
    },
    Stack {
        xs: Vec<Var>,
        axis: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Gelu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Softmax(Var),
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Mse(Var, Var),
    SumSquares(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps each output flat index of a permutation to its input flat index.
fn permute_index_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n = numel(&out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let src: usize = idx
            .iter()
            .zip(perm)
            .map(|(&i, &p)| i * in_strides[p])
            .sum();
        map.push(src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_pdf<T: Scalar>(x: T) -> T {
    (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(Error::Graph(
                "tape already consumed by backward; record a new pass".into(),
            ))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, op_name: &str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{op_name} produced a non-finite value")));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Gradients are kept only if `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.check_open()?;
        if !tensor.is_finite() {
            return Err(Error::NonFinite("leaf tensor".into()));
        }
        let requires_grad = tensor.requires_grad();
        let mut tensor = tensor;
        tensor.zero_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Result<Var> {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Binds a parameter, reusing the existing leaf if it was already bound.
    pub fn param(&mut self, p: &Param<T>) -> Result<Var> {
        self.check_open()?;
        if let Some(&v) = self.params.get(&p.id()) {
            return Ok(v);
        }
        let mut t = p.tensor.clone();
        t.set_requires_grad(true);
        let v = self.leaf(t)?;
        self.params.insert(p.id(), v);
        Ok(v)
    }

    /// Like `param` but the parameter receives no gradient in this pass.
    pub fn frozen_param(&mut self, p: &Param<T>) -> Result<Var> {
        self.check_open()?;
        if let Some(&v) = self.params.get(&p.id()) {
            return Ok(v);
        }
        let v = self.constant(p.tensor.clone())?;
        self.params.insert(p.id(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        assert!(
            !matches!(node.op, Op::Released),
            "value of node {} was released by backward",
            v.0
        );
        &node.value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes.get(v.0).and_then(|n| n.value.grad())
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).and_then(|&v| self.grad(v))
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!(
                "add: shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!(
                "mul: shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.check_open()?;
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let out = self.value(x).map(|v| v * gelu_cdf(v));
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_open()?;
        let out = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.check_open()?;
        let vx = self.value(x);
        let nd = vx.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!(
                "permute: {perm:?} is not a permutation of {nd} axes"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| vx.shape()[p]).collect();
        let map = permute_index_map(vx.shape(), perm);
        let data = map.iter().map(|&i| vx.data()[i]).collect();
        let out = Tensor::new(&out_shape, data)?;
        self.push("permute", out, Op::Permute(x, perm.to_vec()), &[x])
    }

    /// Removes `axis` by taking the slice at `index`.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        self.check_open()?;
        let vx = self.value(x);
        if axis >= vx.ndim() || index >= vx.shape()[axis] {
            return Err(Error::dim(format!(
                "select: axis {axis} index {index} out of range for {:?}",
                vx.shape()
            )));
        }
        let (outer, n, inner) = split_at_axis(vx.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * n + index) * inner;
            data.extend_from_slice(&vx.data()[base..base + inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(&shape, data)?;
        self.push("select", out, Op::Select { x, axis, index }, &[x])
    }

    /// Stacks equal-shape tensors along a new `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.check_open()?;
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("stack: no inputs"))?;
        let shape = self.value(*first).shape().to_vec();
        if axis > shape.len() {
            return Err(Error::dim(format!("stack: axis {axis} out of range")));
        }
        for &v in xs {
            if self.value(v).shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "stack: shape {:?} differs from {shape:?}",
                    self.value(v).shape()
                )));
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * inner * xs.len());
        for o in 0..outer {
            for &v in xs {
                data.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.insert(axis, xs.len());
        let out = Tensor::new(&out_shape, data)?;
        self.push(
            "stack",
            out,
            Op::Stack {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    // ---- layers ------------------------------------------------------------

    /// Cross-correlation of `x[B, C_in, S]` with `w[C_out, C_in, k]` plus `b[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Result<Var> {
        self.check_open()?;
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::dim(format!(
                "conv1d expects x[B,C,S] and w[O,C,k], got {xs:?} and {ws:?}"
            )));
        }
        let (bsz, cin, s) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        if cin != wcin {
            return Err(Error::dim(format!(
                "conv1d: input has {cin} channels, kernel expects {wcin}"
            )));
        }
        if vb.shape() != [cout] {
            return Err(Error::dim(format!(
                "conv1d: bias shape {:?}, expected [{cout}]",
                vb.shape()
            )));
        }
        let pad = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "conv1d: same padding needs an odd kernel, got k={k}"
                    )));
                }
                k / 2
            }
            Padding::Valid => 0,
        };
        if k > s + 2 * pad {
            return Err(Error::dim(format!(
                "conv1d: kernel {k} longer than padded sequence {}",
                s + 2 * pad
            )));
        }
        let so = s + 2 * pad - k + 1;
        let (xd, wd, bd) = (vx.data(), vw.data(), vb.data());
        let mut y = vec![T::zero(); bsz * cout * so];
        for bi in 0..bsz {
            for o in 0..cout {
                let yrow = &mut y[(bi * cout + o) * so..(bi * cout + o + 1) * so];
                yrow.iter_mut().for_each(|v| *v = bd[o]);
                for c in 0..cin {
                    let xrow = &xd[(bi * cin + c) * s..(bi * cin + c + 1) * s];
                    for j in 0..k {
                        let wv = wd[(o * cin + c) * k + j];
                        let off = j as isize - pad as isize;
                        let t_lo = (-off).max(0) as usize;
                        let t_hi = (so as isize).min(s as isize - off).max(0) as usize;
                        for t in t_lo..t_hi {
                            yrow[t] += wv * xrow[(t as isize + off) as usize];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[bsz, cout, so], y)?;
        self.push("conv1d", out, Op::Conv1d { x, w, b, pad }, &[x, w, b])
    }

    /// Per-channel normalization of `x[B, C, S]` over batch and time.
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        state: &mut BatchNormState<T>,
    ) -> Result<Var> {
        self.check_open()?;
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let xs = vx.shape();
        if xs.len() != 3 {
            return Err(Error::dim(format!("batchnorm1d expects [B,C,S], got {xs:?}")));
        }
        let (bsz, c, s) = (xs[0], xs[1], xs[2]);
        if vg.shape() != [c] || vb.shape() != [c] || state.channels() != c {
            return Err(Error::dim(format!(
                "batchnorm1d: {c} channels but gamma {:?}, beta {:?}, state {}",
                vg.shape(),
                vb.shape(),
                state.channels()
            )));
        }
        let n = bsz * s;
        let xd = vx.data();
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::InvalidArgument(
                        "batchnorm1d: train mode needs at least 2 values per channel".into(),
                    ));
                }
                let nt = T::lit(n as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for bi in 0..bsz {
                        for &v in &xd[(bi * c + ch) * s..(bi * c + ch + 1) * s] {
                            acc += v;
                        }
                    }
                    let m = acc / nt;
                    let mut sq = T::zero();
                    for bi in 0..bsz {
                        for &v in &xd[(bi * c + ch) * s..(bi * c + ch + 1) * s] {
                            sq += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / nt;
                }
                (mean, var)
            }
            Mode::Eval => {
                if !state.initialized {
                    return Err(Error::UninitializedStats);
                }
                (state.running_mean.clone(), state.running_var.clone())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.eps).sqrt()).collect();
        let (gd, bd) = (vg.data(), vb.data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        for bi in 0..bsz {
            for ch in 0..c {
                let base = (bi * c + ch) * s;
                for t in 0..s {
                    let h = (xd[base + t] - mean[ch]) * inv_std[ch];
                    xhat[base + t] = h;
                    y[base + t] = gd[ch] * h + bd[ch];
                }
            }
        }
        let train = mode == Mode::Train;
        if train {
            let m = state.momentum;
            for ch in 0..c {
                state.running_mean[ch] = (T::one() - m) * state.running_mean[ch] + m * mean[ch];
                state.running_var[ch] = (T::one() - m) * state.running_var[ch] + m * var[ch];
            }
            state.initialized = true;
        }
        let out = Tensor::new(xs, y)?;
        self.push(
            "batchnorm1d",
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )
    }

    /// Non-overlapping or strided window maxima along the last axis of `x[B, C, S]`.
    pub fn maxpool1d(&mut self, x: Var, width: usize, stride: usize) -> Result<Var> {
        self.check_open()?;
        if width < 1 || stride < 1 {
            return Err(Error::InvalidArgument(format!(
                "maxpool1d: width {width} and stride {stride} must be at least 1"
            )));
        }
        let vx = self.value(x);
        let xs = vx.shape();
        if xs.len() != 3 {
            return Err(Error::dim(format!("maxpool1d expects [B,C,S], got {xs:?}")));
        }
        let (rows, s) = (xs[0] * xs[1], xs[2]);
        if width > s {
            return Err(Error::dim(format!(
                "sequence shorter than pool stride: width {width} > length {s}"
            )));
        }
        let lo = (s - width) / stride + 1;
        let xd = vx.data();
        let mut y = Vec::with_capacity(rows * lo);
        let mut argmax = Vec::with_capacity(rows * lo);
        for r in 0..rows {
            for i in 0..lo {
                let start = r * s + i * stride;
                let mut best = start;
                for j in start + 1..start + width {
                    if xd[j] > xd[best] {
                        best = j;
                    }
                }
                y.push(xd[best]);
                argmax.push(best);
            }
        }
        let out = Tensor::new(&[xs[0], xs[1], lo], y)?;
        self.push("maxpool1d", out, Op::MaxPool { x, argmax }, &[x])
    }

    /// Mean over the last axis: `[B, C, S] -> [B, C]`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let vx = self.value(x);
        let xs = vx.shape();
        if xs.len() != 3 {
            return Err(Error::dim(format!(
                "adaptive_avg_pool expects [B,C,S], got {xs:?}"
            )));
        }
        let s = xs[2];
        let inv = T::one() / T::lit(s as f64);
        let y = vx
            .data()
            .chunks(s)
            .map(|row| row.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[xs[0], xs[1]], y)?;
        self.push("adaptive_avg_pool", out, Op::AvgPool(x), &[x])
    }

    /// `x[B, D_in] · w[D_in, D_out] + b[D_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || vb.shape() != [ws[1]] {
            return Err(Error::dim(format!(
                "linear: x {xs:?}, w {ws:?}, b {:?} are incompatible",
                vb.shape()
            )));
        }
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        let mut y = Vec::with_capacity(m * n);
        for _ in 0..m {
            y.extend_from_slice(vb.data());
        }
        gemm_acc(vx.data(), vw.data(), &mut y, m, k, n);
        let out = Tensor::new(&[m, n], y)?;
        self.push("linear", out, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut y = vec![T::zero(); m * n];
        gemm_acc(va.data(), vb.data(), &mut y, m, k, n);
        let out = Tensor::new(&[m, n], y)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product `[N, m, k] x [N, k, n] -> [N, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut y = vec![T::zero(); nb * m * n];
        for i in 0..nb {
            gemm_acc(
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                &mut y[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::new(&[nb, m, n], y)?;
        self.push("bmm", out, Op::BatchMatMul(a, b), &[a, b])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let vx = self.value(x);
        let last = *vx
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax of a scalar"))?;
        let mut y = vx.data().to_vec();
        y.chunks_mut(last).for_each(softmax_in_place);
        let out = Tensor::new(vx.shape(), y)?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits[B, K])`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_open()?;
        let vl = self.value(logits);
        let ls = vl.shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::dim(format!(
                "softmax_cross_entropy: logits {ls:?} with {} labels",
                labels.len()
            )));
        }
        let (bsz, k) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = vl.data().to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[label];
            softmax_in_place(row);
        }
        loss /= T::lit(bsz as f64);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim(format!(
                "mse: shapes {:?} and {:?} differ",
                va.shape(),
                vb.shape()
            )));
        }
        let n = T::lit(va.len() as f64);
        let s: T = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.push("mse", Tensor::scalar(s / n), Op::Mse(a, b), &[a, b])
    }

    /// Sum of squared entries over all `xs`; zero for an empty list.
    pub fn sum_squares(&mut self, xs: &[Var]) -> Result<Var> {
        self.check_open()?;
        let mut s = T::zero();
        for &v in xs {
            s += self.value(v).data().iter().map(|&x| x * x).sum::<T>();
        }
        self.push("sum_squares", Tensor::scalar(s), Op::SumSquares(xs.to_vec()), xs)
    }

    // ---- reverse pass ------------------------------------------------------

    /// Propagates from the scalar `loss` to every leaf that requires a
    /// gradient, adding into the leaf's gradient slot. The recording is then
    /// released; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_open()?;
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at node {i}")));
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            match node.op {
                Op::Leaf => {
                    if let (true, Some(g)) = (node.requires_grad, g) {
                        node.value.accumulate_grad(&g)?;
                    }
                }
                _ => {
                    node.op = Op::Released;
                    node.value = Tensor::scalar(T::zero());
                }
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = len(v);
                grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
            }};
        }
        match &node.op {
            Op::Leaf | Op::Released => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if want(*a) {
                    let d = acc!(*a);
                    for j in 0..g.len() {
                        d[j] += g[j] * vb[j];
                    }
                }
                if want(*b) {
                    let d = acc!(*b);
                    for j in 0..g.len() {
                        d[j] += g[j] * va[j];
                    }
                }
            }
            Op::Scale(x, c) => {
                acc!(*x).iter_mut().zip(g).for_each(|(d, &s)| *d += s * *c);
            }
            Op::Sum(x) => {
                let s = g[0];
                acc!(*x).iter_mut().for_each(|d| *d += s);
            }
            Op::Gelu(x) => {
                let xd = self.nodes[x.0].value.data();
                let d = acc!(*x);
                for j in 0..g.len() {
                    let v = xd[j];
                    d[j] += g[j] * (gelu_cdf(v) + v * gelu_pdf(v));
                }
            }
            Op::Reshape(x) => {
                acc!(*x).iter_mut().zip(g).for_each(|(d, &s)| *d += s);
            }
            Op::Permute(x, perm) => {
                let map = permute_index_map(self.nodes[x.0].value.shape(), perm);
                let d = acc!(*x);
                for (o, &src) in map.iter().enumerate() {
                    d[src] += g[o];
                }
            }
            Op::Select { x, axis, index } => {
                let (outer, n, inner) = split_at_axis(self.nodes[x.0].value.shape(), *axis);
                let d = acc!(*x);
                for o in 0..outer {
                    let base = (o * n + index) * inner;
                    for j in 0..inner {
                        d[base + j] += g[o * inner + j];
                    }
                }
            }
            Op::Stack { xs, axis } => {
                let shape = self.nodes[xs[0].0].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis..].iter().product();
                for (slot, &v) in xs.iter().enumerate() {
                    if !want(v) {
                        continue;
                    }
                    let d = acc!(v);
                    for o in 0..outer {
                        let src = (o * xs.len() + slot) * inner;
                        for j in 0..inner {
                            d[o * inner + j] += g[src + j];
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, pad } => self.conv1d_backward(*x, *w, *b, *pad, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.nodes[x.0].value.shape();
                let (bsz, c, s) = (xs[0], xs[1], xs[2]);
                let gd = self.nodes[gamma.0].value.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..bsz {
                    for ch in 0..c {
                        let base = (bi * c + ch) * s;
                        for t in 0..s {
                            dgamma[ch] += g[base + t] * xhat[base + t];
                            dbeta[ch] += g[base + t];
                        }
                    }
                }
                if want(*x) {
                    let n = T::lit((bsz * s) as f64);
                    let d = acc!(*x);
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let base = (bi * c + ch) * s;
                            for t in 0..s {
                                let dh = g[base + t] * gd[ch];
                                d[base + t] += if *train {
                                    // dgamma/dbeta carry the channel sums of dy*xhat and dy.
                                    inv_std[ch] / n
                                        * (n * dh
                                            - gd[ch] * dbeta[ch]
                                            - xhat[base + t] * gd[ch] * dgamma[ch])
                                } else {
                                    dh * inv_std[ch]
                                };
                            }
                        }
                    }
                }
                if want(*gamma) {
                    acc!(*gamma).iter_mut().zip(&dgamma).for_each(|(d, &s)| *d += s);
                }
                if want(*beta) {
                    acc!(*beta).iter_mut().zip(&dbeta).for_each(|(d, &s)| *d += s);
                }
            }
            Op::MaxPool { x, argmax } => {
                let d = acc!(*x);
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g[o];
                }
            }
            Op::AvgPool(x) => {
                let s = *self.nodes[x.0].value.shape().last().unwrap_or(&1);
                let inv = T::one() / T::lit(s as f64);
                let d = acc!(*x);
                for (r, &gr) in g.iter().enumerate() {
                    for t in 0..s {
                        d[r * s + t] += gr * inv;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (m, k, n) = (vx.shape()[0], vx.shape()[1], vw.shape()[1]);
                if want(*x) {
                    gemm_nt_acc(g, vw.data(), acc!(*x), m, n, k);
                }
                if want(*w) {
                    gemm_tn_acc(vx.data(), g, acc!(*w), m, k, n);
                }
                if want(*b) {
                    let d = acc!(*b);
                    for row in g.chunks(n) {
                        d.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if want(*a) {
                    gemm_nt_acc(g, vb.data(), acc!(*a), m, n, k);
                }
                if want(*b) {
                    gemm_tn_acc(va.data(), g, acc!(*b), m, k, n);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (nb, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
                if want(*a) {
                    let d = acc!(*a);
                    for i in 0..nb {
                        gemm_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            &mut d[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if want(*b) {
                    let d = acc!(*b);
                    for i in 0..nb {
                        gemm_tn_acc(
                            &va.data()[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut d[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let last = *node.value.shape().last().unwrap_or(&1);
                let d = acc!(*x);
                for r in 0..y.len() / last {
                    let (yr, gr) = (&y[r * last..(r + 1) * last], &g[r * last..(r + 1) * last]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..last {
                        d[r * last + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::lit(labels.len() as f64);
                let d = acc!(*logits);
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == label { T::one() } else { T::zero() };
                        d[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let c = g[0] * T::lit(2.0) / T::lit(va.len() as f64);
                if want(*a) {
                    let d = acc!(*a);
                    for j in 0..va.len() {
                        d[j] += c * (va[j] - vb[j]);
                    }
                }
                if want(*b) {
                    let d = acc!(*b);
                    for j in 0..va.len() {
                        d[j] -= c * (va[j] - vb[j]);
                    }
                }
            }
            Op::SumSquares(xs) => {
                let c = g[0] * T::lit(2.0);
                for &v in xs {
                    if !want(v) {
                        continue;
                    }
                    let xd = self.nodes[v.0].value.data();
                    let d = acc!(v);
                    for j in 0..xd.len() {
                        d[j] += c * xd[j];
                    }
                }
            }
        }
    }

    fn conv1d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (bsz, cin, s) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (cout, k) = (vw.shape()[0], vw.shape()[2]);
        let so = s + 2 * pad - k + 1;
        let (xd, wd) = (vx.data(), vw.data());
        let want = |v: Var| self.nodes[v.0].requires_grad;

        if want(b) {
            let d = grads[b.0].get_or_insert_with(|| vec![T::zero(); cout]);
            for bi in 0..bsz {
                for (o, d) in d.iter_mut().enumerate() {
                    *d += g[(bi * cout + o) * so..(bi * cout + o + 1) * so]
                        .iter()
                        .copied()
                        .sum::<T>();
                }
            }
        }
        let range = |j: usize| {
            let off = j as isize - pad as isize;
            let lo = (-off).max(0) as usize;
            let hi = (so as isize).min(s as isize - off).max(0) as usize;
            (off, lo, hi)
        };
        if want(w) {
            let d = grads[w.0].get_or_insert_with(|| vec![T::zero(); wd.len()]);
            for bi in 0..bsz {
                for o in 0..cout {
                    let grow = &g[(bi * cout + o) * so..(bi * cout + o + 1) * so];
                    for c in 0..cin {
                        let xrow = &xd[(bi * cin + c) * s..(bi * cin + c + 1) * s];
                        for j in 0..k {
                            let (off, lo, hi) = range(j);
                            let mut acc = T::zero();
                            for t in lo..hi {
                                acc += grow[t] * xrow[(t as isize + off) as usize];
                            }
                            d[(o * cin + c) * k + j] += acc;
                        }
                    }
                }
            }
        }
        if want(x) {
            let d = grads[x.0].get_or_insert_with(|| vec![T::zero(); xd.len()]);
            for bi in 0..bsz {
                for o in 0..cout {
                    let grow = &g[(bi * cout + o) * so..(bi * cout + o + 1) * so];
                    for c in 0..cin {
                        let drow = &mut d[(bi * cin + c) * s..(bi * cin + c + 1) * s];
                        for j in 0..k {
                            let wv = wd[(o * cin + c) * k + j];
                            let (off, lo, hi) = range(j);
                            for t in lo..hi {
                                drow[(t as isize + off) as usize] += wv * grow[t];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// `c[m, n] += a[m, k] · b[k, n]`
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += av * b);
        }
    }
}

/// `c[m, k] += a[m, n] · b[k, n]ᵀ`
fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
        }
    }
}

/// `c[k, n] += a[m, k]ᵀ · b[m, n]`
fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += av * b);
        }
    }
}
