//! Reverse-mode automatic differentiation over f64 tensors.
//!
//! A [`Tape`] records every operation as a single-output node; node inputs
//! always point at earlier nodes, so one reverse sweep in index order is a
//! valid topological traversal. Values are computed eagerly at push time and
//! every push checks its result for NaN/inf, which pins the first offending
//! op when training blows up instead of reporting a poisoned loss.

use crate::conv::{conv2d, conv2d_grad_bias, conv2d_grad_input, conv2d_grad_weights, ConvSpec};
use crate::error::{Error, Result};
use crate::freq::fft::{fft2d, ifft2d, Spectrum};
use crate::freq::haar::{hwt_packed, ihwt_packed};
use crate::freq::sobel::{sobel_magnitude, sobel_magnitude_backward};
use crate::spline::{SplineGrid, DEGREE};
use crate::tensor::Tensor;

/// Handle to a tape node. Only meaningful for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    Min(VarId, VarId),
    Max(VarId, VarId),
    AddScalar(VarId),
    MulScalar(VarId, f64),
    Relu(VarId),
    Sigmoid(VarId),
    Silu(VarId),
    Softplus(VarId),
    Exp(VarId),
    Sqrt(VarId),
    Clamp(VarId, f64, f64),
    Softmax(VarId),
    Matmul(VarId, VarId),
    Reshape(VarId),
    Permute(VarId, Vec<usize>),
    SliceAxis { x: VarId, axis: usize, start: usize },
    Concat { xs: Vec<VarId>, axis: usize },
    SumAxis { x: VarId, axis: usize },
    SumAll(VarId),
    Conv2d { x: VarId, w: VarId, b: Option<VarId>, spec: ConvSpec },
    MaxPool2d { x: VarId, argmax: Vec<usize> },
    GlobalAvgPool(VarId),
    UpsampleNearest2(VarId),
    ChannelNorm { x: VarId, gamma: VarId, beta: VarId, mean: Vec<f64>, istd: Vec<f64> },
    Hwt(VarId),
    Ihwt(VarId),
    Fft2d(VarId),
    Ifft2d(VarId),
    SpectralReflect(VarId),
    GroupKan { x: VarId, alpha: VarId, wbase: VarId, grid: SplineGrid },
    SobelMag(VarId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Min(..) => "min",
            Op::Max(..) => "max",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Silu(..) => "silu",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::Matmul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::SliceAxis { .. } => "slice_axis",
            Op::Concat { .. } => "concat",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll(..) => "sum_all",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::UpsampleNearest2(..) => "upsample_nearest2",
            Op::ChannelNorm { .. } => "channel_norm",
            Op::Hwt(..) => "hwt",
            Op::Ihwt(..) => "ihwt",
            Op::Fft2d(..) => "fft2d",
            Op::Ifft2d(..) => "ifft2d",
            Op::SpectralReflect(..) => "spectral_reflect",
            Op::GroupKan { .. } => "group_kan",
            Op::SobelMag(..) => "sobel_mag",
        }
    }

    fn inputs(&self) -> Vec<VarId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Min(a, b) | Op::Max(a, b) | Op::Matmul(a, b) => {
                vec![*a, *b]
            }
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Clamp(a, _, _)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::SumAll(a)
            | Op::GlobalAvgPool(a)
            | Op::UpsampleNearest2(a)
            | Op::Hwt(a)
            | Op::Ihwt(a)
            | Op::Fft2d(a)
            | Op::Ifft2d(a)
            | Op::SpectralReflect(a)
            | Op::SobelMag(a) => vec![*a],
            Op::SliceAxis { x, .. } | Op::SumAxis { x, .. } | Op::MaxPool2d { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                if let Some(bid) = b {
                    v.push(*bid);
                }
                v
            }
            Op::ChannelNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::GroupKan { x, alpha, wbase, .. } => vec![*x, *alpha, *wbase],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, or zeros when the node never influenced the loss.
    pub fn get_or_zeros(&self, id: VarId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")))
            }
        })
        .collect()
}

fn bcast_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut s = 1usize;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Visit every element of the broadcast output shape, handing the callback
/// the flat output index plus the flat indices into both operands.
fn for_each_bcast(out_shape: &[usize], a_shape: &[usize], b_shape: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out_shape.iter().product();
    if a_shape == b_shape {
        for i in 0..total {
            f(i, i, i);
        }
        return;
    }
    let a_str = bcast_strides(a_shape);
    let b_str = bcast_strides(b_shape);
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for oi in 0..total {
        f(oi, ai, bi);
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            ai += a_str[ax];
            bi += b_str[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            coords[ax] = 0;
            ai -= a_str[ax] * out_shape[ax];
            bi -= b_str[ax] * out_shape[ax];
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<VarId> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: self.nodes.len(),
            });
        }
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            ref other => other.inputs().iter().any(|id| self.nodes[id.0].requires_grad),
        };
        self.nodes.push(Node { op, value, requires_grad });
        Ok(VarId(self.nodes.len() - 1))
    }

    /// Differentiable input (parameters, images under test).
    pub fn leaf(&mut self, value: Tensor) -> Result<VarId> {
        self.push(Op::Leaf, value)
    }

    /// Non-differentiable input (targets, masks, fixed tables).
    pub fn constant(&mut self, value: Tensor) -> Result<VarId> {
        self.push(Op::Constant, value)
    }

    fn binary(
        &mut self,
        op: fn(VarId, VarId) -> Op,
        a: VarId,
        b: VarId,
        f: fn(f64, f64) -> f64,
    ) -> Result<VarId> {
        let built = op(a, b);
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(ta.shape(), tb.shape(), built.name())?;
        let mut out = Tensor::zeros(&out_shape);
        {
            let od = out.data_mut();
            let (ad, bd) = (ta.data(), tb.data());
            for_each_bcast(&out_shape, ta.shape(), tb.shape(), |oi, ai, bi| {
                od[oi] = f(ad[ai], bd[bi]);
            });
        }
        self.push(built, out)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    pub fn min(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(Op::Min, a, b, |x, y| if x <= y { x } else { y })
    }

    pub fn max(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(Op::Max, a, b, |x, y| if x >= y { x } else { y })
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let out = self.nodes[a.0].value.map(|v| v + c);
        self.push(Op::AddScalar(a), out)
    }

    pub fn mul_scalar(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let out = self.nodes[a.0].value.map(|v| v * c);
        self.push(Op::MulScalar(a, c), out)
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        let out = self.nodes[a.0].value.map(|v| v.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        let out = self.nodes[a.0].value.map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn silu(&mut self, a: VarId) -> Result<VarId> {
        let out = self.nodes[a.0].value.map(|v| v * sigmoid(v));
        self.push(Op::Silu(a), out)
    }

    pub fn softplus(&mut self, a: VarId) -> Result<VarId> {
        let out = self.nodes[a.0].value.map(softplus);
        self.push(Op::Softplus(a), out)
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        let out = self.nodes[a.0].value.map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn sqrt(&mut self, a: VarId) -> Result<VarId> {
        let out = self.nodes[a.0].value.map(f64::sqrt);
        self.push(Op::Sqrt(a), out)
    }

    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> Result<VarId> {
        if !(lo <= hi) {
            return Err(Error::contract("clamp", "lo must not exceed hi"));
        }
        let out = self.nodes[a.0].value.map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), out)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: VarId) -> Result<VarId> {
        let t = &self.nodes[a.0].value;
        let rank = t.rank();
        if rank == 0 {
            return Err(Error::shape("softmax", "rank-0 input".to_string()));
        }
        let row = t.shape()[rank - 1];
        let mut out = t.clone();
        for chunk in out.data_mut().chunks_exact_mut(row) {
            let m = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in chunk.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in chunk.iter_mut() {
                *v /= sum;
            }
        }
        self.push(Op::Softmax(a), out)
    }

    /// Batched matrix product `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] || ta.shape()[2] != tb.shape()[1] {
            return Err(Error::shape(
                "matmul",
                format!("incompatible shapes {:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let n = tb.shape()[2];
        let out = Tensor::new(&[bs, m, n], matmul_raw(ta.data(), tb.data(), bs, m, k, n))?;
        self.push(Op::Matmul(a, b), out)
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let out = self.nodes[a.0].value.reshape(shape)?;
        self.push(Op::Reshape(a), out)
    }

    pub fn permute(&mut self, a: VarId, perm: &[usize]) -> Result<VarId> {
        let out = permute_raw(&self.nodes[a.0].value, perm)?;
        self.push(Op::Permute(a, perm.to_vec()), out)
    }

    pub fn slice_axis(&mut self, a: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        let t = &self.nodes[a.0].value;
        if axis >= t.rank() || start + len > t.shape()[axis] || len == 0 {
            return Err(Error::shape(
                "slice_axis",
                format!("slice [{start}, {}) on axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let full = t.shape()[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let out = Tensor::new(&shape, data)?;
        self.push(Op::SliceAxis { x: a, axis, start }, out)
    }

    /// Channel slice of an `[N, C, H, W]` tensor.
    pub fn slice_channels(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        self.slice_axis(a, 1, start, len)
    }

    pub fn concat(&mut self, xs: &[VarId], axis: usize) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::contract("concat", "no inputs"));
        }
        let first = self.nodes[xs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut axis_total = 0usize;
        for id in xs {
            let s = self.nodes[id.0].value.shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(Error::shape(
                    "concat",
                    format!("shape {s:?} incompatible with {first:?} along axis {axis}"),
                ));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0usize;
        for id in xs {
            let t = &self.nodes[id.0].value;
            let len = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * len * inner..(o + 1) * len * inner];
                let dst = (o * axis_total + offset) * inner;
                data[dst..dst + len * inner].copy_from_slice(src);
            }
            offset += len;
        }
        let out = Tensor::new(&shape, data)?;
        self.push(Op::Concat { xs: xs.to_vec(), axis }, out)
    }

    /// Sum over one axis, keeping it as extent 1.
    pub fn sum_axis(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let t = &self.nodes[a.0].value;
        if axis >= t.rank() {
            return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let mut shape = t.shape().to_vec();
        let extent = shape[axis];
        shape[axis] = 1;
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    data[o * inner + i] += t.data()[base + i];
                }
            }
        }
        let out = Tensor::new(&shape, data)?;
        self.push(Op::SumAxis { x: a, axis }, out)
    }

    pub fn mean_axis(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let extent = self.nodes[a.0].value.shape()[axis];
        let s = self.sum_axis(a, axis)?;
        self.mul_scalar(s, 1.0 / extent as f64)
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        let s = self.nodes[a.0].value.sum();
        self.push(Op::SumAll(a), Tensor::new(&[1], vec![s])?)
    }

    pub fn conv2d(&mut self, x: VarId, spec: &ConvSpec, w: VarId, b: Option<VarId>) -> Result<VarId> {
        let out = conv2d(
            &self.nodes[x.0].value,
            spec,
            &self.nodes[w.0].value,
            b.map(|id| &self.nodes[id.0].value),
        )?;
        self.push(Op::Conv2d { x, w, b, spec: spec.clone() }, out)
    }

    /// Non-overlapping 2x2 max pooling (window == stride == 2).
    pub fn max_pool2(&mut self, x: VarId) -> Result<VarId> {
        let t = &self.nodes[x.0].value;
        let (n, c, h, w) = t.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("max_pool2d", format!("extents {h}x{w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        let td = t.data();
        let od = out.data_mut();
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let oi = (p * oh + oy) * ow + ox;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let ii = (p * h + 2 * oy + dy) * w + 2 * ox + dx;
                            if td[ii] > best {
                                best = td[ii];
                                best_idx = ii;
                            }
                        }
                    }
                    od[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
        self.push(Op::MaxPool2d { x, argmax }, out)
    }

    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let t = &self.nodes[x.0].value;
        let (n, c, h, w) = t.dims4()?;
        let mut out = Tensor::zeros(&[n, c, 1, 1]);
        let scale = 1.0 / (h * w) as f64;
        for p in 0..n * c {
            out.data_mut()[p] = t.data()[p * h * w..(p + 1) * h * w].iter().sum::<f64>() * scale;
        }
        self.push(Op::GlobalAvgPool(x), out)
    }

    pub fn upsample_nearest2(&mut self, x: VarId) -> Result<VarId> {
        let t = &self.nodes[x.0].value;
        let (n, c, h, w) = t.dims4()?;
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let td = t.data();
        let od = out.data_mut();
        for p in 0..n * c {
            for y in 0..h {
                for x2 in 0..w {
                    let v = td[(p * h + y) * w + x2];
                    let base = (p * 2 * h + 2 * y) * 2 * w + 2 * x2;
                    od[base] = v;
                    od[base + 1] = v;
                    od[base + 2 * w] = v;
                    od[base + 2 * w + 1] = v;
                }
            }
        }
        self.push(Op::UpsampleNearest2(x), out)
    }

    /// Per-position normalization over the channel axis with learnable
    /// affine: `y = gamma * (x - mean_c) / sqrt(var_c + eps) + beta`.
    pub fn channel_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> Result<VarId> {
        let t = &self.nodes[x.0].value;
        let (n, c, h, w) = t.dims4()?;
        let gt = &self.nodes[gamma.0].value;
        let bt = &self.nodes[beta.0].value;
        if gt.shape() != [c] || bt.shape() != [c] {
            return Err(Error::shape(
                "channel_norm",
                format!("gamma {:?} / beta {:?} must both be [{c}]", gt.shape(), bt.shape()),
            ));
        }
        let plane = h * w;
        let mut mean = vec![0.0; n * plane];
        let mut istd = vec![0.0; n * plane];
        let mut out = Tensor::zeros(t.shape());
        let td = t.data();
        let od = out.data_mut();
        for ni in 0..n {
            for s in 0..plane {
                let mut m = 0.0;
                for ci in 0..c {
                    m += td[(ni * c + ci) * plane + s];
                }
                m /= c as f64;
                let mut v = 0.0;
                for ci in 0..c {
                    let d = td[(ni * c + ci) * plane + s] - m;
                    v += d * d;
                }
                v /= c as f64;
                let is = 1.0 / (v + NORM_EPS).sqrt();
                mean[ni * plane + s] = m;
                istd[ni * plane + s] = is;
                for ci in 0..c {
                    let xh = (td[(ni * c + ci) * plane + s] - m) * is;
                    od[(ni * c + ci) * plane + s] = gt.data()[ci] * xh + bt.data()[ci];
                }
            }
        }
        self.push(Op::ChannelNorm { x, gamma, beta, mean, istd }, out)
    }

    /// Single-level Haar split, subbands stacked along channels:
    /// `[N, C, H, W] -> [N, 4C, H/2, W/2]` ordered `LL | LH | HL | HH`.
    pub fn hwt(&mut self, x: VarId) -> Result<VarId> {
        let out = hwt_packed(&self.nodes[x.0].value)?;
        self.push(Op::Hwt(x), out)
    }

    /// Inverse of [`Tape::hwt`].
    pub fn ihwt(&mut self, x: VarId) -> Result<VarId> {
        let out = ihwt_packed(&self.nodes[x.0].value)?;
        self.push(Op::Ihwt(x), out)
    }

    /// Unnormalized 2D Fourier transform of a real field, packed as
    /// `[N, 2C, H, W]` with the real block first.
    pub fn fft2d(&mut self, x: VarId) -> Result<VarId> {
        let out = fft2d(&self.nodes[x.0].value)?.pack()?;
        self.push(Op::Fft2d(x), out)
    }

    /// Real part of the normalized inverse transform of a packed spectrum:
    /// `[N, 2C, H, W] -> [N, C, H, W]`.
    pub fn ifft2d(&mut self, x: VarId) -> Result<VarId> {
        let s = Spectrum::unpack(&self.nodes[x.0].value)?;
        let out = ifft2d(&s)?;
        self.push(Op::Ifft2d(x), out.re)
    }

    /// Project a packed spectrum onto the conjugate-symmetric subspace, so
    /// its inverse transform is exactly real.
    pub fn spectral_reflect(&mut self, x: VarId) -> Result<VarId> {
        let out = spectral_reflect_raw(&self.nodes[x.0].value)?;
        self.push(Op::SpectralReflect(x), out)
    }

    /// Per-channel-group spline activation plus a silu base branch:
    /// `y = sum_m alpha[g, m] B_m(x) + wbase[g] silu(x)` where `g` is the
    /// contiguous group owning the channel. `alpha` is `[G, M]`, `wbase` `[G]`.
    pub fn group_kan(&mut self, x: VarId, alpha: VarId, wbase: VarId, grid: &SplineGrid) -> Result<VarId> {
        let t = &self.nodes[x.0].value;
        let (_n, c, _h, _w) = t.dims4()?;
        let at = &self.nodes[alpha.0].value;
        let wt = &self.nodes[wbase.0].value;
        if at.rank() != 2 || at.shape()[1] != grid.num_basis() {
            return Err(Error::shape(
                "group_kan",
                format!("alpha {:?} must be [groups, {}]", at.shape(), grid.num_basis()),
            ));
        }
        let groups = at.shape()[0];
        if wt.shape() != [groups] {
            return Err(Error::shape("group_kan", format!("wbase {:?} must be [{groups}]", wt.shape())));
        }
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_kan", format!("{groups} groups do not divide {c} channels")));
        }
        let out = group_kan_forward(t, at, wt, grid, groups);
        self.push(Op::GroupKan { x, alpha, wbase, grid: grid.clone() }, out)
    }

    /// Smoothed Sobel gradient magnitude (fixed kernels, replicate padding).
    pub fn sobel_mag(&mut self, x: VarId) -> Result<VarId> {
        let out = sobel_magnitude(&self.nodes[x.0].value)?;
        self.push(Op::SobelMag(x), out)
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient buffer
    /// per node that participated; nodes with `requires_grad == false` get
    /// none.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::contract("backward", "loss must be a scalar"));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::contract("backward", "loss does not depend on any leaf"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn add_to(&self, grads: &mut [Option<Tensor>], id: VarId, contrib: Tensor) {
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn bcast_backward(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        a: VarId,
        b: VarId,
        da: impl Fn(f64, f64) -> f64,
        db: impl Fn(f64, f64) -> f64,
    ) {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (wa, wb) = (self.wants(a), self.wants(b));
        let mut ga = if wa { Some(Tensor::zeros(ta.shape())) } else { None };
        let mut gb = if wb { Some(Tensor::zeros(tb.shape())) } else { None };
        {
            let (ad, bd, gd) = (ta.data(), tb.data(), g.data());
            let mut gad = ga.as_mut().map(|t| t.data_mut());
            let mut gbd = gb.as_mut().map(|t| t.data_mut());
            for_each_bcast(g.shape(), ta.shape(), tb.shape(), |oi, ai, bi| {
                if let Some(buf) = gad.as_deref_mut() {
                    buf[ai] += gd[oi] * da(ad[ai], bd[bi]);
                }
                if let Some(buf) = gbd.as_deref_mut() {
                    buf[bi] += gd[oi] * db(ad[ai], bd[bi]);
                }
            });
        }
        if let Some(t) = ga {
            self.add_to(grads, a, t);
        }
        if let Some(t) = gb {
            self.add_to(grads, b, t);
        }
    }

    fn unary_backward(&self, grads: &mut [Option<Tensor>], g: &Tensor, a: VarId, d: impl Fn(f64) -> f64) {
        if !self.wants(a) {
            return;
        }
        let ta = &self.nodes[a.0].value;
        let mut out = Tensor::zeros(ta.shape());
        for ((o, x), gv) in out.data_mut().iter_mut().zip(ta.data()).zip(g.data()) {
            *o = gv * d(*x);
        }
        self.add_to(grads, a, out);
    }

    fn accumulate_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => self.bcast_backward(grads, g, *a, *b, |_, _| 1.0, |_, _| 1.0),
            Op::Sub(a, b) => self.bcast_backward(grads, g, *a, *b, |_, _| 1.0, |_, _| -1.0),
            Op::Mul(a, b) => self.bcast_backward(grads, g, *a, *b, |_, y| y, |x, _| x),
            Op::Div(a, b) => self.bcast_backward(grads, g, *a, *b, |_, y| 1.0 / y, |x, y| -x / (y * y)),
            Op::Min(a, b) => self.bcast_backward(
                grads,
                g,
                *a,
                *b,
                |x, y| if x <= y { 1.0 } else { 0.0 },
                |x, y| if x <= y { 0.0 } else { 1.0 },
            ),
            Op::Max(a, b) => self.bcast_backward(
                grads,
                g,
                *a,
                *b,
                |x, y| if x >= y { 1.0 } else { 0.0 },
                |x, y| if x >= y { 0.0 } else { 1.0 },
            ),
            Op::AddScalar(a) => self.unary_backward(grads, g, *a, |_| 1.0),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.unary_backward(grads, g, *a, move |_| c)
            }
            Op::Relu(a) => self.unary_backward(grads, g, *a, |x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Sigmoid(a) => self.unary_backward(grads, g, *a, |x| {
                let s = sigmoid(x);
                s * (1.0 - s)
            }),
            Op::Silu(a) => self.unary_backward(grads, g, *a, |x| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }),
            Op::Softplus(a) => self.unary_backward(grads, g, *a, sigmoid),
            Op::Exp(a) => self.unary_backward(grads, g, *a, f64::exp),
            Op::Sqrt(a) => self.unary_backward(grads, g, *a, |x| 0.5 / x.sqrt()),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary_backward(grads, g, *a, move |x| if x > lo && x < hi { 1.0 } else { 0.0 })
            }
            Op::Softmax(a) => {
                if !self.wants(*a) {
                    return;
                }
                let y = &self.nodes[i].value;
                let row = y.shape()[y.rank() - 1];
                let mut out = Tensor::zeros(y.shape());
                for ((orow, yrow), grow) in out
                    .data_mut()
                    .chunks_exact_mut(row)
                    .zip(y.data().chunks_exact(row))
                    .zip(g.data().chunks_exact(row))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                    for ((o, yv), gv) in orow.iter_mut().zip(yrow).zip(grow) {
                        *o = yv * (gv - dot);
                    }
                }
                self.add_to(grads, *a, out);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = tb.shape()[2];
                if self.wants(*a) {
                    // dA = g . B^T
                    let bt = transpose_batched(tb.data(), bs, k, n);
                    let ga = Tensor::new(ta.shape(), matmul_raw(g.data(), &bt, bs, m, n, k)).unwrap();
                    self.add_to(grads, *a, ga);
                }
                if self.wants(*b) {
                    // dB = A^T . g
                    let at = transpose_batched(ta.data(), bs, m, k);
                    let gb = Tensor::new(tb.shape(), matmul_raw(&at, g.data(), bs, k, m, n)).unwrap();
                    self.add_to(grads, *b, gb);
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let back = g.reshape(self.nodes[a.0].value.shape()).unwrap();
                    self.add_to(grads, *a, back);
                }
            }
            Op::Permute(a, perm) => {
                if self.wants(*a) {
                    let mut inv = vec![0usize; perm.len()];
                    for (dst, &src) in perm.iter().enumerate() {
                        inv[src] = dst;
                    }
                    let back = permute_raw(g, &inv).unwrap();
                    self.add_to(grads, *a, back);
                }
            }
            Op::SliceAxis { x, axis, start } => {
                if !self.wants(*x) {
                    return;
                }
                let t = &self.nodes[x.0].value;
                let mut out = Tensor::zeros(t.shape());
                let full = t.shape()[*axis];
                let len = g.shape()[*axis];
                let outer: usize = t.shape()[..*axis].iter().product();
                let inner: usize = t.shape()[*axis + 1..].iter().product();
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    out.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.add_to(grads, *x, out);
            }
            Op::Concat { xs, axis } => {
                let total = g.shape()[*axis];
                let outer: usize = g.shape()[..*axis].iter().product();
                let inner: usize = g.shape()[*axis + 1..].iter().product();
                let mut offset = 0usize;
                for id in xs {
                    let t = &self.nodes[id.0].value;
                    let len = t.shape()[*axis];
                    if self.wants(*id) {
                        let mut part = Tensor::zeros(t.shape());
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            part.data_mut()[dst..dst + len * inner]
                                .copy_from_slice(&g.data()[src..src + len * inner]);
                        }
                        self.add_to(grads, *id, part);
                    }
                    offset += len;
                }
            }
            Op::SumAxis { x, axis } => {
                if !self.wants(*x) {
                    return;
                }
                let t = &self.nodes[x.0].value;
                let extent = t.shape()[*axis];
                let outer: usize = t.shape()[..*axis].iter().product();
                let inner: usize = t.shape()[*axis + 1..].iter().product();
                let mut out = Tensor::zeros(t.shape());
                for o in 0..outer {
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        for ii in 0..inner {
                            out.data_mut()[base + ii] = g.data()[o * inner + ii];
                        }
                    }
                }
                self.add_to(grads, *x, out);
            }
            Op::SumAll(a) => {
                if self.wants(*a) {
                    let t = &self.nodes[a.0].value;
                    self.add_to(grads, *a, Tensor::full(t.shape(), g.data()[0]));
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                if self.wants(*x) {
                    let gx = conv2d_grad_input(self.nodes[x.0].value.shape(), spec, &self.nodes[w.0].value, g);
                    self.add_to(grads, *x, gx);
                }
                if self.wants(*w) {
                    let gw = conv2d_grad_weights(&self.nodes[x.0].value, spec, g);
                    self.add_to(grads, *w, gw);
                }
                if let Some(bid) = b {
                    if self.wants(*bid) {
                        self.add_to(grads, *bid, conv2d_grad_bias(g));
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if !self.wants(*x) {
                    return;
                }
                let mut out = Tensor::zeros(self.nodes[x.0].value.shape());
                for (gi, &src) in g.data().iter().zip(argmax) {
                    out.data_mut()[src] += gi;
                }
                self.add_to(grads, *x, out);
            }
            Op::GlobalAvgPool(a) => {
                if !self.wants(*a) {
                    return;
                }
                let t = &self.nodes[a.0].value;
                let (n, c, h, w) = t.dims4().unwrap();
                let scale = 1.0 / (h * w) as f64;
                let mut out = Tensor::zeros(t.shape());
                for p in 0..n * c {
                    let gv = g.data()[p] * scale;
                    for v in out.data_mut()[p * h * w..(p + 1) * h * w].iter_mut() {
                        *v = gv;
                    }
                }
                self.add_to(grads, *a, out);
            }
            Op::UpsampleNearest2(a) => {
                if !self.wants(*a) {
                    return;
                }
                let t = &self.nodes[a.0].value;
                let (n, c, h, w) = t.dims4().unwrap();
                let mut out = Tensor::zeros(t.shape());
                for p in 0..n * c {
                    for y in 0..h {
                        for x2 in 0..w {
                            let base = (p * 2 * h + 2 * y) * 2 * w + 2 * x2;
                            out.data_mut()[(p * h + y) * w + x2] =
                                g.data()[base] + g.data()[base + 1] + g.data()[base + 2 * w] + g.data()[base + 2 * w + 1];
                        }
                    }
                }
                self.add_to(grads, *a, out);
            }
            Op::ChannelNorm { x, gamma, beta, mean, istd } => {
                let t = &self.nodes[x.0].value;
                let (n, c, h, w) = t.dims4().unwrap();
                let plane = h * w;
                let gt = &self.nodes[gamma.0].value;
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = Tensor::zeros(&[c]);
                    let mut gb = Tensor::zeros(&[c]);
                    for ni in 0..n {
                        for s in 0..plane {
                            let (m, is) = (mean[ni * plane + s], istd[ni * plane + s]);
                            for ci in 0..c {
                                let idx = (ni * c + ci) * plane + s;
                                let xh = (t.data()[idx] - m) * is;
                                gg.data_mut()[ci] += g.data()[idx] * xh;
                                gb.data_mut()[ci] += g.data()[idx];
                            }
                        }
                    }
                    if self.wants(*gamma) {
                        self.add_to(grads, *gamma, gg);
                    }
                    if self.wants(*beta) {
                        self.add_to(grads, *beta, gb);
                    }
                }
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(t.shape());
                    let cf = c as f64;
                    for ni in 0..n {
                        for s in 0..plane {
                            let (m, is) = (mean[ni * plane + s], istd[ni * plane + s]);
                            let mut sum_u = 0.0;
                            let mut sum_ux = 0.0;
                            for ci in 0..c {
                                let idx = (ni * c + ci) * plane + s;
                                let u = gt.data()[ci] * g.data()[idx];
                                let xh = (t.data()[idx] - m) * is;
                                sum_u += u;
                                sum_ux += u * xh;
                            }
                            for ci in 0..c {
                                let idx = (ni * c + ci) * plane + s;
                                let u = gt.data()[ci] * g.data()[idx];
                                let xh = (t.data()[idx] - m) * is;
                                gx.data_mut()[idx] = is * (u - sum_u / cf - xh * sum_ux / cf);
                            }
                        }
                    }
                    self.add_to(grads, *x, gx);
                }
            }
            // The Haar pair is orthonormal, so each adjoint is the other
            // transform applied to the gradient.
            Op::Hwt(a) => {
                if self.wants(*a) {
                    self.add_to(grads, *a, ihwt_packed(g).unwrap());
                }
            }
            Op::Ihwt(a) => {
                if self.wants(*a) {
                    self.add_to(grads, *a, hwt_packed(g).unwrap());
                }
            }
            // d/dx Re-pack(DFT x) = Re(unnormalized inverse DFT of the packed
            // gradient), i.e. H*W times the normalized inverse.
            Op::Fft2d(a) => {
                if self.wants(*a) {
                    let gs = Spectrum::unpack(g).unwrap();
                    let inv = ifft2d(&gs).unwrap();
                    let (_, _, h, w) = inv.re.dims4().unwrap();
                    let scale = (h * w) as f64;
                    self.add_to(grads, *a, inv.re.map(|v| v * scale));
                }
            }
            // d/dX Re((1/HW) conj(DFT) X) = (1/HW) DFT of the real gradient.
            Op::Ifft2d(a) => {
                if self.wants(*a) {
                    let s = fft2d(g).unwrap();
                    let (_, _, h, w) = g.dims4().unwrap();
                    let scale = 1.0 / (h * w) as f64;
                    let packed = Spectrum {
                        re: s.re.map(|v| v * scale),
                        im: s.im.map(|v| v * scale),
                    }
                    .pack()
                    .unwrap();
                    self.add_to(grads, *a, packed);
                }
            }
            // The projection is symmetric as a real-linear map.
            Op::SpectralReflect(a) => {
                if self.wants(*a) {
                    self.add_to(grads, *a, spectral_reflect_raw(g).unwrap());
                }
            }
            Op::GroupKan { x, alpha, wbase, grid } => {
                self.group_kan_backward(grads, g, *x, *alpha, *wbase, grid);
            }
            Op::SobelMag(a) => {
                if self.wants(*a) {
                    let gx = sobel_magnitude_backward(&self.nodes[a.0].value, g).unwrap();
                    self.add_to(grads, *a, gx);
                }
            }
        }
    }

    fn group_kan_backward(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        x: VarId,
        alpha: VarId,
        wbase: VarId,
        grid: &SplineGrid,
    ) {
        let t = &self.nodes[x.0].value;
        let at = &self.nodes[alpha.0].value;
        let wt = &self.nodes[wbase.0].value;
        let (n, c, h, w) = t.dims4().unwrap();
        let groups = at.shape()[0];
        let m = at.shape()[1];
        let per_group = c / groups;
        let plane = h * w;
        let (wx, wa, ww) = (self.wants(x), self.wants(alpha), self.wants(wbase));
        if !(wx || wa || ww) {
            return;
        }
        let mut gx = if wx { Some(Tensor::zeros(t.shape())) } else { None };
        let mut ga = if wa { Some(Tensor::zeros(at.shape())) } else { None };
        let mut gw = if ww { Some(Tensor::zeros(wt.shape())) } else { None };
        let (lo, hi) = grid.domain();
        for ni in 0..n {
            for ci in 0..c {
                let gidx = ci / per_group;
                let coefs = &at.data()[gidx * m..(gidx + 1) * m];
                let wb = wt.data()[gidx];
                for s in 0..plane {
                    let idx = (ni * c + ci) * plane + s;
                    let xv = t.data()[idx];
                    let gv = g.data()[idx];
                    let (first, vals, ders) = grid.basis_and_deriv_nonzero(xv);
                    if wx {
                        // Clamped inputs hold the spline flat, so only the
                        // silu branch passes gradient there.
                        let mut d = 0.0;
                        if xv > lo && xv < hi {
                            for r in 0..=DEGREE {
                                d += coefs[first + r] * ders[r];
                            }
                        }
                        let sg = sigmoid(xv);
                        d += wb * sg * (1.0 + xv * (1.0 - sg));
                        gx.as_mut().unwrap().data_mut()[idx] = gv * d;
                    }
                    if wa {
                        let gad = ga.as_mut().unwrap().data_mut();
                        for r in 0..=DEGREE {
                            gad[gidx * m + first + r] += gv * vals[r];
                        }
                    }
                    if ww {
                        gw.as_mut().unwrap().data_mut()[gidx] += gv * xv * sigmoid(xv);
                    }
                }
            }
        }
        if let Some(gt) = gx {
            self.add_to(grads, x, gt);
        }
        if let Some(gt) = ga {
            self.add_to(grads, alpha, gt);
        }
        if let Some(gt) = gw {
            self.add_to(grads, wbase, gt);
        }
    }
}

fn group_kan_forward(t: &Tensor, at: &Tensor, wt: &Tensor, grid: &SplineGrid, groups: usize) -> Tensor {
    let (n, c, h, w) = t.dims4().unwrap();
    let m = at.shape()[1];
    let per_group = c / groups;
    let plane = h * w;
    let mut out = Tensor::zeros(t.shape());
    let od = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let gidx = ci / per_group;
            let coefs = &at.data()[gidx * m..(gidx + 1) * m];
            let wb = wt.data()[gidx];
            for s in 0..plane {
                let idx = (ni * c + ci) * plane + s;
                let xv = t.data()[idx];
                let (first, vals) = grid.basis_nonzero(xv);
                let mut y = 0.0;
                for r in 0..=DEGREE {
                    y += coefs[first + r] * vals[r];
                }
                od[idx] = y + wb * xv * sigmoid(xv);
            }
        }
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], bs: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; bs * m * n];
    for bi in 0..bs {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * k * n..(bi + 1) * k * n];
        let ob = &mut out[bi * m * n..(bi + 1) * m * n];
        for mi in 0..m {
            let arow = &ab[mi * k..(mi + 1) * k];
            let orow = &mut ob[mi * n..(mi + 1) * n];
            for (ki, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &bb[ki * n..(ki + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

fn transpose_batched(a: &[f64], bs: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for bi in 0..bs {
        let src = &a[bi * rows * cols..(bi + 1) * rows * cols];
        let dst = &mut out[bi * rows * cols..(bi + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

fn permute_raw(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    if perm.len() != rank {
        return Err(Error::shape("permute", format!("perm {perm:?} has wrong length for rank {rank}")));
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    let in_strides = t.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = t.numel();
    let mut data = vec![0.0; total];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in data.iter_mut() {
        *slot = t.data()[src];
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            src += step[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            coords[ax] = 0;
            src -= step[ax] * out_shape[ax];
        }
    }
    Tensor::new(&out_shape, data)
}

fn spectral_reflect_raw(packed: &Tensor) -> Result<Tensor> {
    let s = Spectrum::unpack(packed)?;
    let r = crate::freq::fft::conj_reflect(&s)?;
    let half = |a: &Tensor, b: &Tensor| {
        let mut out = a.clone();
        for (o, bv) in out.data_mut().iter_mut().zip(b.data()) {
            *o = (*o + bv) * 0.5;
        }
        out
    };
    Spectrum {
        re: half(&s.re, &r.re),
        im: half(&s.im, &r.im),
    }
    .pack()
}
