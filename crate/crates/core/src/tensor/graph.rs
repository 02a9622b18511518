use std::cell::RefCell;
use std::rc::Rc;

use super::broadcast::BroadcastPlan;
use super::kernels::{self, gemm, out_extents};
use super::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Stride/padding/group layout of a 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        ConvSpec {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Log,
    Swish,
    Relu,
    Sigmoid,
    Softplus,
    Square,
    Tanh,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch_a: usize,
        batch_b: usize,
        mkn: [usize; 3],
    },
    SumAll(Var),
    SumAxis(Var, usize),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    BatchNorm(Var, Vec<f64>),
    Conv3d {
        x: Var,
        w: Var,
        spec: ConvSpec,
        out: [usize; 3],
    },
    MaxPool(Var, Vec<usize>),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Fused(Var, Vec<f64>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Append-only tape of tensor operations. Nodes are stored in creation order,
/// which is a topological order, and `backward` walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Option<Vec<usize>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.get(v)?;
        let shape = self.shapes[v.0].as_ref()?;
        Tensor::new(shape, g.to_vec()).ok()
    }
}

fn unary_fwd(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Swish => x * sigmoid(x),
        Unary::Relu => x.max(0.0),
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Square => x * x,
        Unary::Tanh => x.tanh(),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn matmul_dims(shape: &[usize], trans: bool) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!("matmul operand must be ≥2-D, got {shape:?}")));
    }
    let r = shape.len();
    let batch = shape[..r - 2].iter().product();
    let (rows, cols) = if trans {
        (shape[r - 1], shape[r - 2])
    } else {
        (shape[r - 2], shape[r - 1])
    };
    Ok((batch, rows, cols))
}

fn permute_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            counter[d] += 1;
            off += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    map
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn param(&self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Copy of `v`'s value as a gradient-free leaf.
    pub fn detach(&self, v: Var) -> Var {
        let t = (*self.val(v)).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.val(v)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    // ---- elementwise ----

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let plan = BroadcastPlan::new(ta.shape(), tb.shape())?;
        let (da, db) = (ta.data(), tb.data());
        let data = if plan.is_identity() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n: usize = plan.out_shape.iter().product();
            let mut out = vec![0.0; n];
            plan.visit(|o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&plan.out_shape, data)?, op, ng))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, Op::Scale(x, c), self.ng(x))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, Op::AddScalar(x), self.ng(x))
    }

    fn unary(&self, x: Var, kind: Unary) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|&v| unary_fwd(kind, v)).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, Op::Unary(x, kind), self.ng(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn swish(&self, x: Var) -> Var {
        self.unary(x, Unary::Swish)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.push(out, Op::Clamp(x, lo, hi), self.ng(x))
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product of the trailing two axes, reading either operand
    /// transposed. A batch of size one broadcasts against the other operand.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (self.val(a), self.val(b));
        let (batch_a, m, k) = matmul_dims(va.shape(), ta)?;
        let (batch_b, k2, n) = matmul_dims(vb.shape(), tb)?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        if batch_a != batch_b && batch_a != 1 && batch_b != 1 {
            return Err(Error::dim(format!(
                "matmul batch extents differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let batch = batch_a.max(batch_b);
        let lead = if batch_a >= batch_b {
            &va.shape()[..va.rank() - 2]
        } else {
            &vb.shape()[..vb.rank() - 2]
        };
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ia = if batch_a == 1 { 0 } else { bi };
            let ib = if batch_b == 1 { 0 } else { bi };
            gemm(
                m,
                k,
                n,
                &va.data()[ia * m * k..(ia + 1) * m * k],
                ta,
                &vb.data()[ib * k * n..(ib + 1) * k * n],
                tb,
                &mut out[bi * m * n..(bi + 1) * m * n],
                0.0,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        let op = Op::MatMul {
            a,
            b,
            ta,
            tb,
            batch_a,
            batch_b,
            mkn: [m, k, n],
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, ng))
    }

    // ---- reductions ----

    pub fn sum(&self, x: Var) -> Var {
        let s = self.val(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), self.ng(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.val(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let t = self.val(x);
        if axis >= t.rank() {
            return Err(Error::dim(format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for i in 0..n {
                let src = &d[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape: Vec<usize> = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis(x, axis), self.ng(x)))
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let n = self.val(x).shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    // ---- normalisation ----

    /// Softmax along the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let t = self.val(x);
        let n = *t.shape().last().expect("rank ≥ 1");
        let out = Tensor::new(t.shape(), kernels::softmax_rows(t.data(), n)).expect("same shape");
        self.push(out, Op::Softmax(x), self.ng(x))
    }

    pub fn log_softmax(&self, x: Var) -> Var {
        let t = self.val(x);
        let n = *t.shape().last().expect("rank ≥ 1");
        let out =
            Tensor::new(t.shape(), kernels::log_softmax_rows(t.data(), n)).expect("same shape");
        self.push(out, Op::LogSoftmax(x), self.ng(x))
    }

    /// Zero-mean unit-variance normalisation of each last-axis vector
    /// (population variance, `eps` inside the root). No affine part.
    pub fn layer_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let t = self.val(x);
        let n = *t.shape().last().expect("rank ≥ 1");
        if n < 2 {
            return Err(Error::dim("layer_norm needs a last axis of at least 2"));
        }
        let mut out = vec![0.0; t.numel()];
        let mut rstds = Vec::with_capacity(t.numel() / n);
        for (xr, yr) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            let mean = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (y, v) in yr.iter_mut().zip(xr) {
                *y = (v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(out, Op::LayerNorm(x, rstds), self.ng(x)))
    }

    /// Batch-statistics normalisation over axis 1 of [N, C, ...]. Returns the
    /// normalised tensor plus per-channel batch mean and population variance.
    pub fn batch_norm(&self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let t = self.val(x);
        if t.rank() < 2 {
            return Err(Error::dim(format!("batch_norm needs [N, C, ...], got {:?}", t.shape())));
        }
        let (outer, c, inner) = split_axis(t.shape(), 1);
        let count = (outer * inner) as f64;
        let d = t.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                mean[ch] += d[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                var[ch] += d[base..base + inner]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    out[i] = (d[i] - mean[ch]) * rstd[ch];
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let v = self.push(out, Op::BatchNorm(x, rstd), self.ng(x));
        Ok((v, mean, var))
    }

    // ---- convolution & pooling ----

    /// Zero-padded grouped cross-correlation, x: [N,Cin,D,H,W],
    /// w: [Cout,Cin/groups,kd,kh,kw].
    pub fn conv3d(&self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (tx, tw) = (self.val(x), self.val(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 5 || ws.len() != 5 {
            return Err(Error::dim(format!("conv3d expects 5-D input and kernel, got {xs:?}, {ws:?}")));
        }
        let g = spec.groups;
        if g == 0 || xs[1] % g != 0 || ws[0] % g != 0 || ws[1] * g != xs[1] {
            return Err(Error::dim(format!(
                "conv3d channel mismatch: input {xs:?}, kernel {ws:?}, groups {g}"
            )));
        }
        let out = out_extents(
            [xs[2], xs[3], xs[4]],
            [ws[2], ws[3], ws[4]],
            spec.stride,
            spec.padding,
        )
        .ok_or_else(|| {
            Error::dim(format!("conv3d output extent non-positive: input {xs:?}, kernel {ws:?}"))
        })?;
        let y = kernels::conv3d_forward(tx.data(), xs, tw.data(), ws, &spec, out);
        let shape = [xs[0], ws[0], out[0], out[1], out[2]];
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Conv3d { x, w, spec, out }, ng))
    }

    pub fn max_pool3d(&self, x: Var, spec: PoolSpec) -> Result<Var> {
        let t = self.val(x);
        let s = t.shape();
        if s.len() != 5 {
            return Err(Error::dim(format!("max_pool3d expects 5-D input, got {s:?}")));
        }
        let out = out_extents([s[2], s[3], s[4]], spec.kernel, spec.stride, spec.padding)
            .ok_or_else(|| Error::dim(format!("max_pool3d output extent non-positive for {s:?}")))?;
        let (y, arg) = kernels::maxpool3d_forward(t.data(), s, &spec, out);
        let shape = [s[0], s[1], out[0], out[1], out[2]];
        Ok(self.push(Tensor::new(&shape, y)?, Op::MaxPool(x, arg), self.ng(x)))
    }

    // ---- shape manipulation ----

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.val(x)).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), self.ng(x)))
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.val(x);
        let mut seen = vec![false; t.rank()];
        if axes.len() != t.rank() || axes.iter().any(|&a| a >= t.rank() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!("invalid permutation {axes:?} for {:?}", t.shape())));
        }
        let map = permute_index_map(t.shape(), axes);
        let data = map.iter().map(|&i| t.data()[i]).collect();
        let shape: Vec<usize> = axes.iter().map(|&a| t.shape()[a]).collect();
        Ok(self.push(Tensor::new(&shape, data)?, Op::Permute(x, axes.to_vec()), self.ng(x)))
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.val(x);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::dim(format!(
                "slice [{start}, {}) on axis {axis} out of range for {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(Tensor::new(&shape, data)?, Op::Slice { x, axis, start }, self.ng(x)))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let base_shape = self.shape(*first);
        if axis >= base_shape.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base_shape:?}")));
        }
        let vals: Vec<Rc<Tensor>> = xs.iter().map(|&v| self.val(v)).collect();
        let mut total = 0;
        for t in &vals {
            let s = t.shape();
            if s.len() != base_shape.len()
                || s.iter().zip(&base_shape).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim(format!("concat shape mismatch {s:?} vs {base_shape:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in &vals {
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(xs.to_vec(), axis), ng))
    }

    /// Row lookup: table [V, d] → [len(idx), d].
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.val(table);
        if t.rank() != 2 {
            return Err(Error::dim(format!("gather_rows table must be 2-D, got {:?}", t.shape())));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(Error::dim(format!("row index {i} out of range {v}")));
            }
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[idx.len(), d], data)?;
        Ok(self.push(out, Op::Gather(table, idx.to_vec()), self.ng(table)))
    }

    /// Selects `x[r, idx[r]]` from the last axis viewed as rows → [rows].
    pub fn pick(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.val(x);
        let n = *t.shape().last().expect("rank ≥ 1");
        let rows = t.numel() / n;
        if idx.len() != rows {
            return Err(Error::dim(format!("pick needs {rows} indices, got {}", idx.len())));
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::dim(format!("pick index {i} out of range {n}")));
            }
            data.push(t.data()[r * n + i]);
        }
        let out = Tensor::new(&[rows], data)?;
        Ok(self.push(out, Op::Pick(x, idx.to_vec()), self.ng(x)))
    }

    /// Attaches externally computed per-row values and their gradients:
    /// `x` is split into `values.len()` equal chunks and `grad` holds
    /// d value[r] / d chunk r laid out like `x`.
    pub fn fused_rows(&self, x: Var, values: Vec<f64>, grad: Vec<f64>) -> Result<Var> {
        let t = self.val(x);
        if grad.len() != t.numel() || values.is_empty() || !t.numel().is_multiple_of(values.len()) {
            return Err(Error::dim("fused_rows gradient layout does not match input"));
        }
        let out = Tensor::from_vec(values);
        Ok(self.push(out, Op::Fused(x, grad), self.ng(x)))
    }

    // ---- reverse pass ----

    /// Reverse-mode sweep from a scalar node. Every node is visited once,
    /// in reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar, got {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut shapes: Vec<Option<Vec<usize>>> = (0..n).map(|_| None).collect();
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        fn acc<'a>(
            grads: &'a mut [Option<Vec<f64>>],
            nodes: &[Node],
            v: Var,
        ) -> Option<&'a mut Vec<f64>> {
            let node = &nodes[v.0];
            if !node.needs_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
        }

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    shapes[id] = Some(y.shape().to_vec());
                    grads[id] = Some(g);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let (sa, sb) = (nodes[a.0].value.shape().to_vec(), nodes[b.0].value.shape().to_vec());
                    let plan = BroadcastPlan::new(&sa, &sb)?;
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        plan.visit(|o, ia, _| ga[ia] += g[o]);
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        plan.visit(|o, _, ib| gb[ib] += sign * g[o]);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let plan = BroadcastPlan::new(va.shape(), vb.shape())?;
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        let db = vb.data();
                        plan.visit(|o, ia, ib| ga[ia] += g[o] * db[ib]);
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        let da = va.data();
                        plan.visit(|o, ia, ib| gb[ib] += g[o] * da[ia]);
                    }
                }
                Op::Scale(x, c) => {
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(d, s)| *d += c * s);
                    }
                }
                Op::AddScalar(x) | Op::Reshape(x) => {
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                    }
                }
                Op::Unary(x, kind) => {
                    let xv = nodes[x.0].value.clone();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        let (xd, yd) = (xv.data(), y.data());
                        for i in 0..gx.len() {
                            let d = match kind {
                                Unary::Exp => yd[i],
                                Unary::Log => 1.0 / xd[i],
                                Unary::Swish => {
                                    let s = sigmoid(xd[i]);
                                    s + xd[i] * s * (1.0 - s)
                                }
                                Unary::Relu => {
                                    if xd[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sigmoid => yd[i] * (1.0 - yd[i]),
                                Unary::Softplus => sigmoid(xd[i]),
                                Unary::Square => 2.0 * xd[i],
                                Unary::Tanh => 1.0 - yd[i] * yd[i],
                            };
                            gx[i] += g[i] * d;
                        }
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = nodes[x.0].value.clone();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (i, &v) in xv.data().iter().enumerate() {
                            if v >= *lo && v <= *hi {
                                gx[i] += g[i];
                            }
                        }
                    }
                }
                Op::MatMul {
                    a,
                    b,
                    ta,
                    tb,
                    batch_a,
                    batch_b,
                    mkn: [m, k, n],
                } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (va, vb) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
                    let batch = (*batch_a).max(*batch_b);
                    if let Some(ga) = acc(&mut grads, &nodes, *a) {
                        for bi in 0..batch {
                            let ia = if *batch_a == 1 { 0 } else { bi };
                            let ib = if *batch_b == 1 { 0 } else { bi };
                            let gc = &g[bi * m * n..(bi + 1) * m * n];
                            let bs = &vb.data()[ib * k * n..(ib + 1) * k * n];
                            let gas = &mut ga[ia * m * k..(ia + 1) * m * k];
                            if !*ta {
                                gemm(m, n, k, gc, false, bs, !*tb, gas, 1.0);
                            } else {
                                gemm(k, n, m, bs, *tb, gc, true, gas, 1.0);
                            }
                        }
                    }
                    if let Some(gb) = acc(&mut grads, &nodes, *b) {
                        for bi in 0..batch {
                            let ia = if *batch_a == 1 { 0 } else { bi };
                            let ib = if *batch_b == 1 { 0 } else { bi };
                            let gc = &g[bi * m * n..(bi + 1) * m * n];
                            let as_ = &va.data()[ia * m * k..(ia + 1) * m * k];
                            let gbs = &mut gb[ib * k * n..(ib + 1) * k * n];
                            if !*tb {
                                gemm(k, m, n, as_, !*ta, gc, false, gbs, 1.0);
                            } else {
                                gemm(n, m, k, gc, true, as_, *ta, gbs, 1.0);
                            }
                        }
                    }
                }
                Op::SumAll(x) => {
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        gx.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::SumAxis(x, axis) => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        let (outer, n, inner) = split_axis(&shape, *axis);
                        for o in 0..outer {
                            for i in 0..n {
                                let dst = &mut gx[(o * n + i) * inner..(o * n + i + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    let n = *y.shape().last().unwrap();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for ((gr, yr), dr) in g.chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for i in 0..n {
                                dr[i] += yr[i] * (gr[i] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    let n = *y.shape().last().unwrap();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for ((gr, yr), dr) in g.chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                            let s: f64 = gr.iter().sum();
                            for i in 0..n {
                                dr[i] += gr[i] - yr[i].exp() * s;
                            }
                        }
                    }
                }
                Op::LayerNorm(x, rstd) => {
                    let n = *y.shape().last().unwrap();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (r, ((gr, yr), dr)) in g
                            .chunks(n)
                            .zip(y.data().chunks(n))
                            .zip(gx.chunks_mut(n))
                            .enumerate()
                        {
                            let mg = gr.iter().sum::<f64>() / n as f64;
                            let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            for i in 0..n {
                                dr[i] += rstd[r] * (gr[i] - mg - yr[i] * mgy);
                            }
                        }
                    }
                }
                Op::BatchNorm(x, rstd) => {
                    let (outer, c, inner) = split_axis(y.shape(), 1);
                    let count = (outer * inner) as f64;
                    let yd = y.data();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        let mut mg = vec![0.0; c];
                        let mut mgy = vec![0.0; c];
                        for o in 0..outer {
                            for ch in 0..c {
                                let base = (o * c + ch) * inner;
                                for i in base..base + inner {
                                    mg[ch] += g[i];
                                    mgy[ch] += g[i] * yd[i];
                                }
                            }
                        }
                        for o in 0..outer {
                            for ch in 0..c {
                                let base = (o * c + ch) * inner;
                                let (a, b) = (mg[ch] / count, mgy[ch] / count);
                                for i in base..base + inner {
                                    gx[i] += rstd[ch] * (g[i] - a - yd[i] * b);
                                }
                            }
                        }
                    }
                }
                Op::Conv3d { x, w, spec, out } => {
                    let (vx, vw) = (nodes[x.0].value.clone(), nodes[w.0].value.clone());
                    let (want_x, want_w) = (nodes[x.0].needs_grad, nodes[w.0].needs_grad);
                    let (gx_new, gw_new) = kernels::conv3d_backward(
                        vx.data(),
                        vx.shape(),
                        vw.data(),
                        vw.shape(),
                        spec,
                        *out,
                        &g,
                        want_x,
                        want_w,
                    );
                    if let (Some(src), Some(gx)) = (gx_new, acc(&mut grads, &nodes, *x)) {
                        gx.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                    if let (Some(src), Some(gw)) = (gw_new, acc(&mut grads, &nodes, *w)) {
                        gw.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                Op::MaxPool(x, arg) => {
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (o, &i) in arg.iter().enumerate() {
                            if i != usize::MAX {
                                gx[i] += g[o];
                            }
                        }
                    }
                }
                Op::Permute(x, axes) => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        let map = permute_index_map(&shape, axes);
                        for (o, &i) in map.iter().enumerate() {
                            gx[i] += g[o];
                        }
                    }
                }
                Op::Slice { x, axis, start } => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    let len = y.shape()[*axis];
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        let (outer, n, inner) = split_axis(&shape, *axis);
                        for o in 0..outer {
                            let dst = (o * n + start) * inner;
                            let src = o * len * inner;
                            for i in 0..len * inner {
                                gx[dst + i] += g[src + i];
                            }
                        }
                    }
                }
                Op::Concat(xs, axis) => {
                    let (outer, total, inner) = split_axis(y.shape(), *axis);
                    let mut offset = 0;
                    for x in xs {
                        let n = nodes[x.0].value.shape()[*axis];
                        if let Some(gx) = acc(&mut grads, &nodes, *x) {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                for i in 0..n * inner {
                                    gx[o * n * inner + i] += g[src + i];
                                }
                            }
                        }
                        offset += n;
                    }
                }
                Op::Gather(table, idx) => {
                    let d = y.shape()[1];
                    if let Some(gt) = acc(&mut grads, &nodes, *table) {
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..d {
                                gt[i * d + j] += g[r * d + j];
                            }
                        }
                    }
                }
                Op::Pick(x, idx) => {
                    let n = *nodes[x.0].value.shape().last().unwrap();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        for (r, &i) in idx.iter().enumerate() {
                            gx[r * n + i] += g[r];
                        }
                    }
                }
                Op::Fused(x, jac) => {
                    let rows = g.len();
                    if let Some(gx) = acc(&mut grads, &nodes, *x) {
                        let chunk = gx.len() / rows;
                        for r in 0..rows {
                            for i in r * chunk..(r + 1) * chunk {
                                gx[i] += g[r] * jac[i];
                            }
                        }
                    }
                }
            }
        }
        Ok(Grads { grads, shapes })
    }
}
