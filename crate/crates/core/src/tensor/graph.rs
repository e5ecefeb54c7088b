use super::broadcast::{broadcast_shape, reduce_to, zip_broadcast};
use super::conv::{self, ConvDims};
use super::Tensor;
use crate::error::TensorError;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    Relu(Var),
    Minimum(Var, Var),
    Abs(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Mse(Var, Var),
    Cosine(Var, Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, before: usize },
    Reshape(Var),
    RoundSte(Var),
    AvgPool2(Var),
    Upsample2(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of executed primitives. Recording order is a valid topological order,
/// so backward is a single reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    kink_distance: f64,
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<(), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

fn round_half_away(x: f64) -> f64 {
    // f64::round rounds half away from zero.
    x.round()
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            kink_distance: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::Mse(a, b)
            | Op::Cosine(a, b)
            | Op::Minimum(a, b) => vec![*a, *b],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Sum(x)
            | Op::Reshape(x)
            | Op::RoundSte(x)
            | Op::AvgPool2(x)
            | Op::Upsample2(x) => vec![*x],
            Op::Clamp { x, .. }
            | Op::Softmax { x, .. }
            | Op::SumAxis { x, .. }
            | Op::Slice { x, .. }
            | Op::Pad { x, .. } => vec![*x],
        }
    }

    /// Records an input. Gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest distance observed between an argument of a non-smooth
    /// primitive (rectifier, abs, clamp) and its kink.
    pub fn min_kink_distance(&self) -> f64 {
        self.kink_distance
    }

    fn note_kinks(&mut self, values: &[f64], kinks: &[f64]) {
        for &v in values {
            for &k in kinks {
                self.kink_distance = self.kink_distance.min((v - k).abs());
            }
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let data = zip_broadcast(ta.data(), ta.shape(), tb.data(), tb.shape(), &shape, f);
        self.push(Tensor::new(shape, data)?, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    fn unary(
        &mut self,
        x: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var, TensorError> {
        let t = self.value(x).map(f);
        self.push(t, op, name)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, "neg", Op::Neg(x), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(x, "scale", Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(x, "add_scalar", Op::AddScalar(x), |v| v + c)
    }

    /// Rectifier `max(0, x)`; subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let vals = self.value(x).data().to_vec();
        self.note_kinks(&vals, &[0.0]);
        self.unary(x, "relu", Op::Relu(x), |v| v.max(0.0))
    }

    /// Elementwise `min(a, b)`; on ties the value and gradient come from `b`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape("minimum", ta.shape(), tb.shape())?;
        let gaps = zip_broadcast(ta.data(), ta.shape(), tb.data(), tb.shape(), &shape, |x, y| x - y);
        self.note_kinks(&gaps, &[0.0]);
        self.binary(a, b, "minimum", Op::Minimum(a, b), |x, y| if x < y { x } else { y })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        let vals = self.value(x).data().to_vec();
        self.note_kinks(&vals, &[0.0]);
        self.unary(x, "abs", Op::Abs(x), f64::abs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, "sigmoid", Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, "exp", Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, "log", Op::Log(x), f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, "sqrt", Op::Sqrt(x), f64::sqrt)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, TensorError> {
        self.mul(x, x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        if lo > hi {
            return Err(TensorError::Invalid {
                op: "clamp",
                reason: format!("lo {lo} > hi {hi}"),
            });
        }
        let vals = self.value(x).data().to_vec();
        self.note_kinks(&vals, &[lo, hi]);
        self.unary(x, "clamp", Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Forward: round half away from zero. Backward: identity.
    pub fn round_ste(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, "round_ste", Op::RoundSte(x), round_half_away)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// 2-D convolution, stride 1, zero padding `pad` on every side.
    /// `input` is `[C_in, H, W]`, `weight` is `[C_out, C_in, K, K]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (ti, tw) = (self.value(input), self.value(weight));
        let (si, sw) = (ti.shape(), tw.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: si.to_vec(),
            rhs: sw.to_vec(),
        };
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] {
            return Err(mismatch());
        }
        let dims = ConvDims {
            c_in: si[0],
            c_out: sw[0],
            h: si[1],
            w: si[2],
            k: sw[2],
            pad,
        };
        if dims.h + 2 * pad < dims.k || dims.w + 2 * pad < dims.k {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            let sb = self.value(b).shape();
            if sb != [dims.c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![dims.c_out],
                    rhs: sb.to_vec(),
                });
            }
        }
        let out = conv::forward(
            dims,
            ti.data(),
            tw.data(),
            bias.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(vec![dims.c_out, dims.out_h(), dims.out_w()], out)?;
        self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            },
            "conv2d",
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        check_axis(t.shape(), axis)?;
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = f64::NEG_INFINITY;
                for r in 0..n {
                    m = m.max(src[base + r * inner]);
                }
                let mut z = 0.0;
                for r in 0..n {
                    let e = (src[base + r * inner] - m).exp();
                    out[base + r * inner] = e;
                    z += e;
                }
                for r in 0..n {
                    out[base + r * inner] /= z;
                }
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        self.push(t, Op::Softmax { x, axis }, "softmax")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        check_axis(t.shape(), axis)?;
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..n {
                let row = &src[(o * n + r) * inner..(o * n + r + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis }, "sum_axis")
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        check_axis(self.shape(x), axis)?;
        let n = self.shape(x)[axis].max(1) as f64;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = ta.numel().max(1) as f64;
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), "mse")
    }

    /// Cosine similarity of two tensors viewed as flat vectors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_similarity",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (dot, na, nb) = cosine_parts(ta.data(), tb.data());
        if na == 0.0 || nb == 0.0 {
            return Err(TensorError::Invalid {
                op: "cosine_similarity",
                reason: "zero-norm vector".into(),
            });
        }
        self.push(Tensor::scalar(dot / (na * nb)), Op::Cosine(a, b), "cosine_similarity")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        check_axis(&base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        check_axis(t.shape(), axis)?;
        if start > end || end > t.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                reason: format!("range {start}..{end} outside axis of length {}", t.shape()[axis]),
            });
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, "slice")
    }

    /// Zero padding along one axis.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        check_axis(t.shape(), axis)?;
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let m = n + before + after;
        let mut out = vec![0.0; outer * m * inner];
        for o in 0..outer {
            out[(o * m + before) * inner..(o * m + before + n) * inner]
                .copy_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = m;
        self.push(Tensor::new(shape, out)?, Op::Pad { x, axis, before }, "pad")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    /// 2×2 average pooling over the last two axes of `[C, H, W]`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "avg_pool2",
                reason: format!("needs [C, even H, even W], got {s:?}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = t.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let b = (ch * h + 2 * y) * w + 2 * x;
                    out[(ch * oh + y) * ow + x] =
                        0.25 * (src[b] + src[b + 1] + src[b + w] + src[b + w + 1]);
                }
            }
        }
        self.push(Tensor::new(vec![c, oh, ow], out)?, Op::AvgPool2(x), "avg_pool2")
    }

    /// Nearest-neighbour 2× upsampling over the last two axes of `[C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 {
            return Err(TensorError::Invalid {
                op: "upsample2",
                reason: format!("needs [C, H, W], got {s:?}"),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let src = t.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(ch * oh + y) * ow + x] = src[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        self.push(Tensor::new(vec![c, oh, ow], out)?, Op::Upsample2(x), "upsample2")
    }

    /// Reverse sweep from a one-element `loss`. Gradients of every
    /// `requires_grad` node are available through [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                reason: format!("loss must have one element, shape {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (p, contrib) in self.vjp(i, &g) {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let out_shape = node.value.shape();
        let val = |v: Var| &self.nodes[v.0].value;
        let map_g = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(f).collect() };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to(g, out_shape, val(*a).shape())),
                (*b, reduce_to(g, out_shape, val(*b).shape())),
            ],
            Op::Sub(a, b) => {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                vec![
                    (*a, reduce_to(g, out_shape, val(*a).shape())),
                    (*b, reduce_to(&neg, out_shape, val(*b).shape())),
                ]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let bb = zip_broadcast(g, out_shape, tb.data(), tb.shape(), out_shape, |x, y| x * y);
                let aa = zip_broadcast(g, out_shape, ta.data(), ta.shape(), out_shape, |x, y| x * y);
                vec![
                    (*a, reduce_to(&bb, out_shape, ta.shape())),
                    (*b, reduce_to(&aa, out_shape, tb.shape())),
                ]
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = zip_broadcast(g, out_shape, tb.data(), tb.shape(), out_shape, |x, y| x / y);
                // d(a/b)/db = -(a/b)/b
                let q: Vec<f64> = g.iter().zip(out).map(|(x, y)| -x * y).collect();
                let gb = zip_broadcast(&q, out_shape, tb.data(), tb.shape(), out_shape, |x, y| x / y);
                vec![
                    (*a, reduce_to(&ga, out_shape, ta.shape())),
                    (*b, reduce_to(&gb, out_shape, tb.shape())),
                ]
            }
            Op::Neg(x) => vec![(*x, g.iter().map(|v| -v).collect())],
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::AddScalar(x) | Op::Reshape(x) | Op::RoundSte(x) => vec![(*x, g.to_vec())],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let bt = transpose(tb.data(), k, n);
                let at = transpose(ta.data(), m, k);
                vec![
                    (*a, matmul_raw(g, &bt, m, n, k)),
                    (*b, matmul_raw(&at, g, k, m, n)),
                ]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            } => {
                let mut res = Vec::with_capacity(3);
                if self.nodes[input.0].requires_grad {
                    res.push((*input, conv::backward_input(*dims, g, val(*weight).data())));
                }
                if self.nodes[weight.0].requires_grad {
                    res.push((*weight, conv::backward_weight(*dims, g, val(*input).data())));
                }
                if let Some(b) = bias {
                    res.push((*b, conv::backward_bias(*dims, g)));
                }
                res
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let pick = zip_broadcast(ta.data(), ta.shape(), tb.data(), tb.shape(), out_shape, |x, y| {
                    if x < y { 1.0 } else { 0.0 }
                });
                let ga: Vec<f64> = g.iter().zip(&pick).map(|(v, p)| v * p).collect();
                let gb: Vec<f64> = g.iter().zip(&pick).map(|(v, p)| v * (1.0 - p)).collect();
                vec![
                    (*a, reduce_to(&ga, out_shape, ta.shape())),
                    (*b, reduce_to(&gb, out_shape, tb.shape())),
                ]
            }
            Op::Relu(x) => {
                let xs = val(*x).data();
                vec![(*x, map_g(&|j| if xs[j] > 0.0 { g[j] } else { 0.0 }))]
            }
            Op::Abs(x) => {
                let xs = val(*x).data();
                vec![(*x, map_g(&|j| g[j] * sign(xs[j])))]
            }
            Op::Sigmoid(x) => vec![(*x, map_g(&|j| g[j] * out[j] * (1.0 - out[j])))],
            Op::Exp(x) => vec![(*x, map_g(&|j| g[j] * out[j]))],
            Op::Log(x) => {
                let xs = val(*x).data();
                vec![(*x, map_g(&|j| g[j] / xs[j]))]
            }
            Op::Sqrt(x) => vec![(*x, map_g(&|j| g[j] * 0.5 / out[j]))],
            Op::Clamp { x, lo, hi } => {
                let xs = val(*x).data();
                vec![(
                    *x,
                    map_g(&|j| if xs[j] > *lo && xs[j] < *hi { g[j] } else { 0.0 }),
                )]
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(out_shape, *axis);
                let mut res = vec![0.0; g.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let base = o * n * inner + c;
                        let dot: f64 = (0..n).map(|r| g[base + r * inner] * out[base + r * inner]).sum();
                        for r in 0..n {
                            let j = base + r * inner;
                            res[j] = out[j] * (g[j] - dot);
                        }
                    }
                }
                vec![(*x, res)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                let mut res = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for r in 0..n {
                        res[(o * n + r) * inner..(o * n + r + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*x, res)]
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = 2.0 * g[0] / ta.numel().max(1) as f64;
                let ga: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| c * (x - y)).collect();
                let gb = ga.iter().map(|v| -v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let (_, na, nb) = cosine_parts(ta, tb);
                let cos = out[0];
                let ga = ta
                    .iter()
                    .zip(tb)
                    .map(|(x, y)| g[0] * (y / (na * nb) - cos * x / (na * na)))
                    .collect();
                let gb = ta
                    .iter()
                    .zip(tb)
                    .map(|(x, y)| g[0] * (x / (na * nb) - cos * y / (nb * nb)))
                    .collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = val(p).shape()[*axis];
                    let mut gp = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[s..s + n * inner]);
                    }
                    offset += n;
                    res.push((p, gp));
                }
                res
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                let len = out_shape[*axis];
                let mut res = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    res[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, res)]
            }
            Op::Pad { x, axis, before } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                let m = out_shape[*axis];
                let mut res = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let s = (o * m + before) * inner;
                    res.extend_from_slice(&g[s..s + n * inner]);
                }
                vec![(*x, res)]
            }
            Op::AvgPool2(x) => {
                let s = val(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut res = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            res[(ch * h + y) * w + xx] = 0.25 * g[(ch * oh + y / 2) * ow + xx / 2];
                        }
                    }
                }
                vec![(*x, res)]
            }
            Op::Upsample2(x) => {
                let s = val(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut res = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            res[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
                        }
                    }
                }
                vec![(*x, res)]
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let dot = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot, na, nb)
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}
