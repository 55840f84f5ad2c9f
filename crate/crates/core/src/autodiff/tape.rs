//! Explicit Wengert tape for reverse-mode differentiation.
//!
//! Every forward op evaluates eagerly and, when at least one input requires a
//! gradient, records itself with references to its inputs. Node indices are
//! assigned in execution order, so reverse index order is a valid reverse
//! topological order and each op is visited exactly once by [`Tape::backward`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{split_axis, strides_of, Tensor};

use super::kernels::{col2im, gemm, gemm_nt, gemm_tn, im2col, ConvGeom};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddAlong {
        x: Var,
        v: Var,
        axis: usize,
    },
    MulAlong {
        x: Var,
        v: Var,
        axis: usize,
    },
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, T),
    Clamp(Var, T, T),
    Softmax(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GlobalAvgPool(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-step computation record. Reset (or drop) between optimizer steps.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (differentiable) ops, excluding leaves.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to
    /// a leaf. `None` for constants or before backward has run.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !self.backward_done || !node.requires_grad {
            return None;
        }
        let data = match self.grads.get(v.0).and_then(|g| g.clone()) {
            Some(g) => g,
            None => vec![T::zero(); node.value.numel()],
        };
        Tensor::new(node.value.shape(), data).ok()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NumericFault { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(name, out, op, &[x])
    }

    // ---- linear algebra -------------------------------------------------

    /// `(m,k)·(k,n)` or batched `(b,m,k)·(b,k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = matmul_dims(&sa, &sb)?;
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let value = Tensor::new(&shape, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Cross-correlation of `x (B,Ci,H,W)` with `w (Co,Ci,kh,kw)`; no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let g = conv_geom(&sx, &sw, stride, padding);
        let (ho, wo) = g.out_hw();
        let (bsz, co) = (sx[0], sw[0]);
        let plane = ho * wo;
        let in_size = sx[1] * sx[2] * sx[3];
        let mut out = vec![T::zero(); bsz * co * plane];
        let mut cols = vec![T::zero(); g.patch() * plane];
        {
            let (xd, wd) = (self.value(x).data(), self.value(w).data());
            for b in 0..bsz {
                im2col(&xd[b * in_size..(b + 1) * in_size], &g, &mut cols);
                gemm(
                    wd,
                    &cols,
                    &mut out[b * co * plane..(b + 1) * co * plane],
                    co,
                    g.patch(),
                    plane,
                );
            }
        }
        let value = Tensor::new(&[bsz, co, ho, wo], out)?;
        self.push("conv2d", value, Op::Conv2d { x, w, stride, padding }, &[x, w])
    }

    /// Per-channel convolution: `x (B,C,H,W)`, `w (C,1,kh,kw)`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || sw[1] != 1 || stride == 0 {
            return Err(Error::shape("depthwise_conv2d", &sx, &sw));
        }
        if sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3] {
            return Err(Error::shape("depthwise_conv2d", &sx, &sw));
        }
        let g = DwGeom::new(&sx, &sw, stride, padding);
        let mut out = vec![T::zero(); g.b * g.c * g.ho * g.wo];
        g.forward(self.value(x).data(), self.value(w).data(), &mut out);
        let value = Tensor::new(&[g.b, g.c, g.ho, g.wo], out)?;
        self.push(
            "depthwise_conv2d",
            value,
            Op::Depthwise { x, w, stride, padding },
            &[x, w],
        )
    }

    // ---- elementwise binary ---------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape(), data)?
        } else if vb.numel() == 1 {
            let s = vb.item();
            va.map(|x| f(x, s))
        } else {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        };
        self.push(name, out, op, &[a, b])
    }

    /// Elementwise sum; `b` may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn along(
        &mut self,
        name: &'static str,
        x: Var,
        v: Var,
        axis: usize,
        mul: bool,
    ) -> Result<Var> {
        let (vx, vv) = (self.value(x), self.value(v));
        if axis >= vx.rank() || vv.rank() != 1 || vv.numel() != vx.shape()[axis] {
            return Err(Error::shape(name, vx.shape(), vv.shape()));
        }
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        let mut out = vx.data().to_vec();
        let vd = vv.data();
        for o in 0..outer {
            for (i, &s) in vd.iter().enumerate().take(len) {
                let base = (o * len + i) * inner;
                for e in &mut out[base..base + inner] {
                    if mul {
                        *e *= s;
                    } else {
                        *e += s;
                    }
                }
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        let op = if mul {
            Op::MulAlong { x, v, axis }
        } else {
            Op::AddAlong { x, v, axis }
        };
        self.push(name, value, op, &[x, v])
    }

    /// Adds a rank-1 `v` broadcast along `axis` of `x` (the bias case).
    pub fn add_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.along("add_along", x, v, axis, false)
    }

    /// Multiplies by a rank-1 `v` broadcast along `axis` of `x`.
    pub fn mul_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        self.along("mul_along", x, v, axis, true)
    }

    // ---- elementwise unary ----------------------------------------------

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("scalar_scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary("add_scalar", x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary("silu", x, Op::Silu(x), |v| v * sigmoid(v))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, Op::Log(x), |v| v.ln())
    }

    pub fn powf(&mut self, x: Var, p: T) -> Result<Var> {
        self.unary("powf", x, Op::Powf(x, p), |v| v.powf(p))
    }

    /// Clamps to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary("clamp", x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    // ---- reductions -----------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(Error::shape("softmax", vx.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        let mut out = vx.data().to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let mut m = T::neg_infinity();
                for i in 0..len {
                    m = m.max(out[idx(i)]);
                }
                let mut s = T::zero();
                for i in 0..len {
                    let e = (out[idx(i)] - m).exp();
                    out[idx(i)] = e;
                    s += e;
                }
                for i in 0..len {
                    out[idx(i)] /= s;
                }
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        self.push("softmax", value, Op::Softmax(x, axis), &[x])
    }

    fn reduce(&mut self, name: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() {
            return Err(Error::shape(name, vx.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(vx.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let d = vx.data();
        for o in 0..outer {
            for i in 0..len {
                let src = &d[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        if mean {
            let n = T::lit(len as f64);
            out.iter_mut().for_each(|v| *v /= n);
        }
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        let op = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        self.push(name, value, op, &[x])
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce("sum", x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce("mean", x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s: T = vx.data().iter().copied().sum::<T>() / T::lit(vx.numel() as f64);
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// `(B,C,H,W) → (B,C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 4 {
            return Err(Error::shape("global_avg_pool", vx.shape(), &[0, 0, 0, 0]));
        }
        let s = vx.shape();
        let (bc, hw) = (s[0] * s[1], s[2] * s[3]);
        let n = T::lit(hw as f64);
        let out: Vec<T> = vx
            .data()
            .chunks_exact(hw)
            .map(|c| c.iter().copied().sum::<T>() / n)
            .collect();
        debug_assert_eq!(out.len(), bc);
        let value = Tensor::new(&[s[0], s[1]], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(x), &[x])
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let mut seen = vec![false; vx.rank()];
        if axes.len() != vx.rank() || axes.iter().any(|&a| a >= vx.rank() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", vx.shape(), axes));
        }
        let (data, shape) = permute_data(vx.data(), vx.shape(), axes);
        let value = Tensor::new(&shape, data)?;
        self.push("permute", value, Op::Permute(x, axes.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(xs.first().map(|v| v.0).unwrap_or(usize::MAX))
            .ok_or_else(|| Error::shape("concat", &[], &[]))?
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let vv = self.value(v);
                let chunk = vv.shape()[axis] * inner;
                out.extend_from_slice(&vv.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        self.push("concat", value, Op::Concat(xs.to_vec(), axis), xs)
    }

    /// `x[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() || len == 0 || start + len > vx.shape()[axis] {
            return Err(Error::shape("slice", vx.shape(), &[axis, start, len]));
        }
        let (outer, full, inner) = split_axis(vx.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        self.push("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates d`loss` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("tape already differentiated; reset before reuse".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc_map(&mut self, v: Var, g: &[T], f: impl Fn(usize, T) -> T) {
        if let Some(dst) = self.acc(v) {
            for (i, (d, &gv)) in dst.iter_mut().zip(g).enumerate() {
                *d += f(i, gv);
            }
        }
    }

    fn acc_scalar(&mut self, v: Var, s: T) {
        if let Some(dst) = self.acc(v) {
            dst[0] += s;
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (batch, m, k, n) = matmul_dims(&sa, &sb).expect("validated in forward");
                if self.requires_grad(a) {
                    let bd = self.value(b).data().to_vec();
                    let dst = self.acc(a).unwrap();
                    for t in 0..batch {
                        gemm_nt(
                            &g[t * m * n..(t + 1) * m * n],
                            &bd[t * k * n..(t + 1) * k * n],
                            &mut dst[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.requires_grad(b) {
                    let ad = self.value(a).data().to_vec();
                    let dst = self.acc(b).unwrap();
                    for t in 0..batch {
                        gemm_tn(
                            &ad[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut dst[t * k * n..(t + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                }
            }
            Op::Conv2d { x, w, stride, padding } => {
                let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
                let geom = conv_geom(&sx, &sw, stride, padding);
                let (ho, wo) = geom.out_hw();
                let (bsz, co, plane, patch) = (sx[0], sw[0], ho * wo, geom.patch());
                let in_size = sx[1] * sx[2] * sx[3];
                let mut cols = vec![T::zero(); patch * plane];
                if self.requires_grad(w) {
                    let xd = self.value(x).data().to_vec();
                    let dst = self.acc(w).unwrap();
                    for b in 0..bsz {
                        im2col(&xd[b * in_size..(b + 1) * in_size], &geom, &mut cols);
                        gemm_nt(&g[b * co * plane..(b + 1) * co * plane], &cols, dst, co, plane, patch);
                    }
                }
                if self.requires_grad(x) {
                    let wd = self.value(w).data().to_vec();
                    let dst = self.acc(x).unwrap();
                    for b in 0..bsz {
                        cols.fill(T::zero());
                        gemm_tn(&wd, &g[b * co * plane..(b + 1) * co * plane], &mut cols, patch, co, plane);
                        col2im(&cols, &geom, &mut dst[b * in_size..(b + 1) * in_size]);
                    }
                }
            }
            Op::Depthwise { x, w, stride, padding } => {
                let geom = DwGeom::new(self.shape(x), self.shape(w), stride, padding);
                if self.requires_grad(w) {
                    let xd = self.value(x).data().to_vec();
                    let dst = self.acc(w).unwrap();
                    geom.backward_w(&xd, g, dst);
                }
                if self.requires_grad(x) {
                    let wd = self.value(w).data().to_vec();
                    let dst = self.acc(x).unwrap();
                    geom.backward_x(&wd, g, dst);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -T::one() } else { T::one() };
                self.acc_map(a, g, |_, gv| gv);
                if self.value(b).numel() == 1 && self.value(a).numel() != 1 {
                    let s: T = g.iter().copied().sum();
                    self.acc_scalar(b, sign * s);
                } else {
                    self.acc_map(b, g, |_, gv| sign * gv);
                }
            }
            Op::Mul(a, b) => {
                let ad = self.value(a).data().to_vec();
                let bd = self.value(b).data().to_vec();
                if bd.len() == 1 && ad.len() != 1 {
                    let s = bd[0];
                    self.acc_map(a, g, |_, gv| gv * s);
                    let t: T = g.iter().zip(&ad).map(|(&gv, &av)| gv * av).sum();
                    self.acc_scalar(b, t);
                } else {
                    self.acc_map(a, g, |j, gv| gv * bd[j]);
                    self.acc_map(b, g, |j, gv| gv * ad[j]);
                }
            }
            Op::AddAlong { x, v, axis } | Op::MulAlong { x, v, axis } => {
                let mul = matches!(op, Op::MulAlong { .. });
                let (outer, len, inner) = split_axis(self.shape(x), axis);
                let vd = self.value(v).data().to_vec();
                let xd = if mul { self.value(x).data().to_vec() } else { Vec::new() };
                let chan = |j: usize| (j / inner) % len;
                if mul {
                    self.acc_map(x, g, |j, gv| gv * vd[chan(j)]);
                } else {
                    self.acc_map(x, g, |_, gv| gv);
                }
                if let Some(dst) = self.acc(v) {
                    for o in 0..outer {
                        for (c, d) in dst.iter_mut().enumerate() {
                            let base = (o * len + c) * inner;
                            for j in base..base + inner {
                                *d += if mul { g[j] * xd[j] } else { g[j] };
                            }
                        }
                    }
                }
            }
            Op::Scale(x, c) => self.acc_map(x, g, |_, gv| gv * c),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc_map(x, g, |_, gv| gv),
            Op::Relu(x) => {
                let xd = self.value(x).data().to_vec();
                self.acc_map(x, g, |j, gv| if xd[j] > T::zero() { gv } else { T::zero() });
            }
            Op::Silu(x) => {
                let xd = self.value(x).data().to_vec();
                self.acc_map(x, g, |j, gv| {
                    let s = sigmoid(xd[j]);
                    gv * s * (T::one() + xd[j] * (T::one() - s))
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_map(x, g, |j, gv| gv * y[j] * (T::one() - y[j]));
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_map(x, g, |j, gv| gv * (T::one() - y[j] * y[j]));
            }
            Op::Exp(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_map(x, g, |j, gv| gv * y[j]);
            }
            Op::Log(x) => {
                let xd = self.value(x).data().to_vec();
                self.acc_map(x, g, |j, gv| gv / xd[j]);
            }
            Op::Powf(x, p) => {
                let xd = self.value(x).data().to_vec();
                self.acc_map(x, g, |j, gv| gv * p * xd[j].powf(p - T::one()));
            }
            Op::Clamp(x, lo, hi) => {
                let xd = self.value(x).data().to_vec();
                self.acc_map(x, g, |j, gv| if xd[j] >= lo && xd[j] <= hi { gv } else { T::zero() });
            }
            Op::Softmax(x, axis) => {
                let y = self.nodes[i].value.data().to_vec();
                let (outer, len, inner) = split_axis(self.shape(x), axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + j;
                        let dot: T = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                self.acc_map(x, &dx, |_, v| v);
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let (_, len, inner) = split_axis(self.shape(x), axis);
                let scale = if matches!(op, Op::Mean(..)) {
                    T::one() / T::lit(len as f64)
                } else {
                    T::one()
                };
                if let Some(dst) = self.acc(x) {
                    for (j, d) in dst.iter_mut().enumerate() {
                        let o = j / (len * inner);
                        let r = j % inner;
                        *d += g[o * inner + r] * scale;
                    }
                }
            }
            Op::SumAll(x) => self.acc_map(x, &vec![g[0]; self.value(x).numel()], |_, v| v),
            Op::MeanAll(x) => {
                let n = self.value(x).numel();
                let s = g[0] / T::lit(n as f64);
                self.acc_map(x, &vec![s; n], |_, v| v);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(x).to_vec();
                let hw = s[2] * s[3];
                let n = T::lit(hw as f64);
                if let Some(dst) = self.acc(x) {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += g[j / hw] / n;
                    }
                }
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (k, &a) in axes.iter().enumerate() {
                    inverse[a] = k;
                }
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (dx, _) = permute_data(g, &out_shape, &inverse);
                self.acc_map(x, &dx, |_, v| v);
            }
            Op::Concat(xs, axis) => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&out_shape, axis);
                let mut offset = 0;
                for v in xs {
                    let len = self.shape(v)[axis];
                    if let Some(dst) = self.acc(v) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            for (d, &gv) in dst[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                            {
                                *d += gv;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let len = self.nodes[i].value.shape()[axis];
                let (outer, full, inner) = split_axis(self.shape(x), axis);
                if let Some(dst) = self.acc(x) {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        for (d, &gv) in dst[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *d += gv;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (sa.len(), sb.len()) {
        (2, 2) if sa[1] == sb[0] => Ok((1, sa[0], sa[1], sb[1])),
        (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => Ok((sa[0], sa[1], sa[2], sb[2])),
        _ => Err(Error::shape("matmul", sa, sb)),
    }
}

fn conv_geom(sx: &[usize], sw: &[usize], stride: usize, padding: usize) -> ConvGeom {
    ConvGeom {
        channels: sx[1],
        height: sx[2],
        width: sx[3],
        kh: sw[2],
        kw: sw[3],
        stride,
        padding,
    }
}

pub(crate) fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    // Stride in the source for each output axis.
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

struct DwGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl DwGeom {
    fn new(sx: &[usize], sw: &[usize], stride: usize, padding: usize) -> Self {
        let (h, w, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        Self {
            b: sx[0],
            c: sx[1],
            h,
            w,
            kh,
            kw,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        }
    }

    /// Calls `f(out_index, in_index, weight_index)` for every valid tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.b {
            for c in 0..self.c {
                let in_base = (b * self.c + c) * self.h * self.w;
                let out_base = (b * self.c + c) * self.ho * self.wo;
                for oy in 0..self.ho {
                    for ox in 0..self.wo {
                        for ki in 0..self.kh {
                            let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for kj in 0..self.kw {
                                let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(
                                    out_base + oy * self.wo + ox,
                                    in_base + iy as usize * self.w + ix as usize,
                                    (c * self.kh + ki) * self.kw + kj,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Scalar>(&self, x: &[T], w: &[T], out: &mut [T]) {
        self.for_each_tap(|o, i, k| out[o] += x[i] * w[k]);
    }

    fn backward_x<T: Scalar>(&self, w: &[T], g: &[T], dx: &mut [T]) {
        self.for_each_tap(|o, i, k| dx[i] += g[o] * w[k]);
    }

    fn backward_w<T: Scalar>(&self, x: &[T], g: &[T], dw: &mut [T]) {
        self.for_each_tap(|o, i, k| dw[k] += g[o] * x[i]);
    }
}
