//! Define-by-run tape: every op evaluates eagerly and records how to pull
//! gradients back through itself.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::error::{config, Result, TensorError};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::gemm::gemm;
use crate::kernels::{self, axis_split, PoolKind};
use crate::tensor::{numel, Tensor};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// How [`Tape::standardize`] groups elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormLayout {
    /// Consecutive runs of `size` elements form one group (layer/group norm).
    Chunks { size: usize },
    /// Group = channel index of an `[outer, channels, inner]` view (batch norm).
    Channels { channels: usize, inner: usize },
}

impl NormLayout {
    fn groups(self, n: usize) -> usize {
        match self {
            NormLayout::Chunks { size } => n / size,
            NormLayout::Channels { channels, .. } => channels,
        }
    }

    /// Calls `f(group, range)` over contiguous segments of a buffer of `n`.
    fn for_each_segment(self, n: usize, mut f: impl FnMut(usize, std::ops::Range<usize>)) {
        match self {
            NormLayout::Chunks { size } => {
                for g in 0..n / size {
                    f(g, g * size..(g + 1) * size);
                }
            }
            NormLayout::Channels { channels, inner } => {
                for seg in 0..n / inner {
                    f(seg % channels, seg * inner..(seg + 1) * inner);
                }
            }
        }
    }
}

/// Per-group statistics computed by [`Tape::standardize`] (biased variance).
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    Standardize {
        x: Var,
        layout: NormLayout,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Upsample2x(Var),
    Dropout(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    is_param: bool,
}

/// Ordered record of executed ops. Inputs always precede their consumers,
/// so reverse insertion order is a valid reverse topological order.
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], one per trainable leaf.
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, expected: &[usize], got: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(v: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
    cdf + v * FRAC_1_SQRT_2PI * (-0.5 * v * v).exp()
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Sums a gradient in broadcast output space back down to `shape`.
fn reduce_to(shape: &[usize], out: &[usize], g: &[f64]) -> Vec<f64> {
    if shape == out {
        return g.to_vec();
    }
    let mut r = vec![0.0; numel(shape)];
    let s = kernels::broadcast_strides(shape, out);
    kernels::for_each_broadcast(out, &s, &s, |o, i, _| r[i] += g[o]);
    r
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar(v.index));
        }
        Ok(&self.nodes[v.index])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.check(v).expect("var from another tape").value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.check(v)?.value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].needs_grad)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = self.needs(inputs);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: trainable,
            is_param: trainable,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A trainable leaf; [`Tape::backward`] reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        let out_shape = kernels::broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| shape_err(name, ta.shape(), tb.shape()))?;
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(out_shape, data)?
        } else {
            let sa = kernels::broadcast_strides(ta.shape(), &out_shape);
            let sb = kernels::broadcast_strides(tb.shape(), &out_shape);
            let mut data = vec![0.0; numel(&out_shape)];
            let (da, db) = (ta.data(), tb.data());
            kernels::for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
            Tensor::new(out_shape, data)?
        };
        self.push(name, value, op(a, b), &[a, b])
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.check(x)?.value.map(|v| v * s);
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    /// Batched matrix product `[..., m, k] · [..., k, n]`. Either side may be
    /// rank 2, in which case it is shared across the other side's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.check(a)?.value, &self.check(b)?.value);
        let plan = MatmulPlan::new(ta.shape(), tb.shape())?;
        let mut out = vec![0.0; plan.batch * plan.m * plan.n];
        for i in 0..plan.batch {
            gemm(
                plan.m,
                plan.k,
                plan.n,
                &ta.data()[plan.a_off(i)..],
                false,
                &tb.data()[plan.b_off(i)..],
                false,
                &mut out[i * plan.m * plan.n..],
                0.0,
            );
        }
        let value = Tensor::new(plan.out_shape.clone(), out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.check(x)?.value.clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = &self.check(x)?.value;
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(config("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let (out_shape, strides) = permute_plan(t.shape(), perm);
        let mut data = vec![0.0; t.numel()];
        let src = t.data();
        kernels::for_each_broadcast(&out_shape, &strides, &strides, |o, i, _| data[o] = src[i]);
        let value = Tensor::new(out_shape, data)?;
        self.push("permute", value, Op::Permute(x, perm.to_vec()), &[x])
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.check(x)?.value.rank();
        if a >= rank || b >= rank {
            return Err(config("transpose", format!("axes ({a}, {b}) out of range for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| config("concat", "no inputs"))?;
        let base = self.check(*first)?.value.shape().to_vec();
        if axis >= base.len() {
            return Err(config("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.check(v)?.value.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in xs {
                let t = &self.nodes[v.index].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        self.push("concat", value, Op::Concat(xs.to_vec(), axis), xs)
    }

    /// The slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.check(x)?.value;
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(config(
                "narrow",
                format!("range {start}+{len} on axis {axis} of {:?}", t.shape()),
            ));
        }
        let (outer, full, inner) = axis_split(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        self.push("narrow", value, Op::Narrow { x, axis, start }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.check(x)?.value.map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.check(x)?.value.map(gelu);
        self.push("gelu", value, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.check(x)?.value.map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.check(x)?.value;
        if axis >= t.rank() {
            return Err(config("softmax", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[at(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("softmax", value, Op::Softmax(x, axis), &[x])
    }

    /// Zero-mean, unit-variance normalisation within each group of `layout`
    /// (biased variance, `eps` added before the square root).
    pub fn standardize(&mut self, x: Var, layout: NormLayout, eps: f64) -> Result<(Var, NormStats)> {
        let t = &self.check(x)?.value;
        let n = t.numel();
        let valid = match layout {
            NormLayout::Chunks { size } => size > 0 && n % size == 0,
            NormLayout::Channels { channels, inner } => {
                channels > 0 && inner > 0 && n % (channels * inner) == 0
            }
        };
        if !valid {
            return Err(config("standardize", format!("{layout:?} does not tile {:?}", t.shape())));
        }
        let groups = layout.groups(n);
        let count = n / groups;
        let src = t.data();
        let mut mean = vec![0.0; groups];
        layout.for_each_segment(n, |g, r| mean[g] += src[r].iter().sum::<f64>());
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0; groups];
        layout.for_each_segment(n, |g, r| {
            var[g] += src[r].iter().map(|v| (v - mean[g]).powi(2)).sum::<f64>()
        });
        for v in &mut var {
            *v /= count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut data = vec![0.0; n];
        layout.for_each_segment(n, |g, r| {
            for i in r {
                data[i] = (src[i] - mean[g]) * inv_std[g];
            }
        });
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let v = self.push("standardize", value, Op::Standardize { x, layout, inv_std }, &[x])?;
        Ok((v, NormStats { mean, var, count }))
    }

    /// 2-D cross-correlation of `x: [B,Cin,H,W]` with `w: [Cout,Cin,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geom("conv2d", x, w, b, stride, pad, false)?;
        let bias = b.map(|b| self.nodes[b.index].value.data());
        let out = conv::conv2d_forward(
            &geom,
            self.nodes[x.index].value.data(),
            self.nodes[w.index].value.data(),
            bias,
        );
        let value = Tensor::new([geom.batch, geom.cout, geom.ho, geom.wo], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Per-channel cross-correlation of `x: [B,C,H,W]` with `w: [C,1,k,k]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = self.conv_geom("depthwise_conv2d", x, w, b, stride, pad, true)?;
        let bias = b.map(|b| self.nodes[b.index].value.data());
        let out = conv::depthwise_forward(
            &geom,
            self.nodes[x.index].value.data(),
            self.nodes[w.index].value.data(),
            bias,
        );
        let value = Tensor::new([geom.batch, geom.cin, geom.ho, geom.wo], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("depthwise_conv2d", value, Op::Depthwise { x, w, b, geom }, &inputs)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_geom(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        depthwise: bool,
    ) -> Result<ConvGeom> {
        let xs = self.check(x)?.value.shape();
        let ws = self.check(w)?.value.shape();
        if xs.len() != 4 {
            return Err(config(op, format!("input must be [B,C,H,W], got {xs:?}")));
        }
        if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(config(op, format!("kernel must be [O,I,k,k] with odd k, got {ws:?}")));
        }
        let expected_in = if depthwise { 1 } else { xs[1] };
        if ws[1] != expected_in || (depthwise && ws[0] != xs[1]) {
            let mut want = ws.to_vec();
            want[1] = expected_in;
            if depthwise {
                want[0] = xs[1];
            }
            return Err(shape_err(op, &want, ws));
        }
        if let Some(b) = b {
            let bs = self.check(b)?.value.shape();
            if bs != [ws[0]] {
                return Err(shape_err(op, &[ws[0]], bs));
            }
        }
        let k = ws[2];
        let (ho, wo) = match (
            conv::out_extent(xs[2], k, stride, pad),
            conv::out_extent(xs[3], k, stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(config(
                    op,
                    format!(
                        "output extent of {}x{} with k={k}, stride={stride}, pad={pad} is not integral",
                        xs[2], xs[3]
                    ),
                ))
            }
        };
        Ok(ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            h: xs[2],
            w: xs[3],
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    /// Windowed pooling over the trailing two axes of `[B,C,H,W]`, no padding.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, k: usize, stride: usize) -> Result<Var> {
        let t = &self.check(x)?.value;
        let s = t.shape();
        if s.len() != 4 || k == 0 {
            return Err(config("pool2d", format!("need [B,C,H,W] and k > 0, got {s:?}")));
        }
        let (Some(ho), Some(wo)) = (conv::out_extent(s[2], k, stride, 0), conv::out_extent(s[3], k, stride, 0)) else {
            return Err(config(
                "pool2d",
                format!("{}x{} does not tile with k={k}, stride={stride}", s[2], s[3]),
            ));
        };
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = t.data();
        let mut data = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::new();
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    let mut sum = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let at = base + (oy * stride + ky) * w + ox * stride + kx;
                            sum += src[at];
                            if src[at] > best {
                                best = src[at];
                                best_at = at;
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            data.push(best);
                            argmax.push(best_at);
                        }
                        PoolKind::Avg => data.push(sum / (k * k) as f64),
                    }
                }
            }
        }
        let value = Tensor::new([s[0], s[1], ho, wo], data)?;
        let op = match kind {
            PoolKind::Max => Op::MaxPool { x, argmax },
            PoolKind::Avg => Op::AvgPool { x, k, stride },
        };
        self.push("pool2d", value, op, &[x])
    }

    /// Pools `[B,C,H,W]` down to `[B,C,1,1]`.
    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let s = self.check(x)?.value.shape().to_vec();
        if s.len() != 4 {
            return Err(config("global_pool", format!("need [B,C,H,W], got {s:?}")));
        }
        let flat = self.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let pooled = match kind {
            PoolKind::Max => self.max_axis(flat, 2)?,
            PoolKind::Avg => self.mean_axis(flat, 2)?,
        };
        self.reshape(pooled, &[s[0], s[1], 1, 1])
    }

    /// Maximum along `axis`, keeping it with extent 1.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.check(x)?.value;
        if axis >= t.rank() {
            return Err(config("max_axis", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best_at = o * len * inner + i;
                for j in 1..len {
                    let at = (o * len + j) * inner + i;
                    if src[at] > src[best_at] {
                        best_at = at;
                    }
                }
                data.push(src[best_at]);
                argmax.push(best_at);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, data)?;
        self.push("max_axis", value, Op::MaxAxis { x, argmax }, &[x])
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.check(x)?.value;
        if axis >= t.rank() {
            return Err(config("mean_axis", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..][..inner];
                for (d, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        for d in &mut data {
            *d /= len as f64;
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, data)?;
        self.push("mean_axis", value, Op::MeanAxis(x, axis), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.check(x)?.value.sum());
        self.push("sum_all", value, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = &self.check(x)?.value;
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push("mean_all", value, Op::MeanAll(x), &[x])
    }

    /// Bilinear 2× upsampling of `[B,C,H,W]` with half-pixel centres.
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let t = &self.check(x)?.value;
        let s = t.shape();
        if s.len() != 4 {
            return Err(config("upsample_bilinear2x", format!("need [B,C,H,W], got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ty, tx) = (kernels::bilinear_taps(h), kernels::bilinear_taps(w));
        let src = t.data();
        let mut data = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    data.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        let value = Tensor::new([s[0], s[1], 2 * h, 2 * w], data)?;
        self.push("upsample_bilinear2x", value, Op::Upsample2x(x), &[x])
    }

    /// Inverted dropout. With `training == false` or `p == 0` the input
    /// handle is returned unchanged; `p == 1` zeroes everything.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        let t = &self.check(x)?.value;
        if !(0.0..=1.0).contains(&p) {
            return Err(config("dropout", format!("rate {p} outside [0, 1]")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = if p < 1.0 { 1.0 / (1.0 - p) } else { 0.0 };
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout(x, mask), &[x])
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ps, ts) = (self.check(pred)?.value.shape(), self.check(target)?.value.shape());
        if ps != ts {
            return Err(shape_err("mse", ts, ps));
        }
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    /// Reverse-mode sweep from a scalar `loss`. Every trainable leaf gets a
    /// gradient of its own shape (zeros when it does not influence `loss`).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.is_param.then(|| {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape")
                })
            })
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        let mut send = |v: Var, contribution: Vec<f64>| accumulate(&mut grads[v.index], contribution);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    send(*a, reduce_to(self.val(*a).shape(), out.shape(), g));
                }
                if self.wants(*b) {
                    let mut gb = reduce_to(self.val(*b).shape(), out.shape(), g);
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    send(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let sa = kernels::broadcast_strides(ta.shape(), out.shape());
                let sb = kernels::broadcast_strides(tb.shape(), out.shape());
                if self.wants(*a) {
                    let mut ga = vec![0.0; ta.numel()];
                    kernels::for_each_broadcast(out.shape(), &sa, &sb, |o, i, j| ga[i] += g[o] * tb.data()[j]);
                    send(*a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; tb.numel()];
                    kernels::for_each_broadcast(out.shape(), &sa, &sb, |o, i, j| gb[j] += g[o] * ta.data()[i]);
                    send(*b, gb);
                }
            }
            Op::Scale(x, s) => send(*x, g.iter().map(|v| v * s).collect()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let plan = MatmulPlan::new(ta.shape(), tb.shape()).expect("validated in forward");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if self.wants(*a) {
                    let mut ga = vec![0.0; ta.numel()];
                    for i in 0..plan.batch {
                        let off = plan.a_off(i);
                        gemm(m, n, k, &g[i * m * n..], false, &tb.data()[plan.b_off(i)..], true, &mut ga[off..], 1.0);
                    }
                    send(*a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; tb.numel()];
                    for i in 0..plan.batch {
                        let off = plan.b_off(i);
                        gemm(k, m, n, &ta.data()[plan.a_off(i)..], true, &g[i * m * n..], false, &mut gb[off..], 1.0);
                    }
                    send(*b, gb);
                }
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Permute(x, perm) => {
                let (out_shape, strides) = permute_plan(self.val(*x).shape(), perm);
                let mut gx = vec![0.0; g.len()];
                kernels::for_each_broadcast(&out_shape, &strides, &strides, |o, i, _| gx[i] = g[o]);
                send(*x, gx);
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                let total = out.shape()[*axis] * inner;
                for &v in xs {
                    let chunk = self.val(v).shape()[*axis] * inner;
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        send(v, gv);
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => {
                let tx = self.val(*x);
                let (outer, full, inner) = axis_split(tx.shape(), *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![0.0; tx.numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, gx);
            }
            Op::Relu(x) => {
                let xs = self.val(*x).data();
                send(*x, g.iter().zip(xs).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Gelu(x) => {
                let xs = self.val(*x).data();
                send(*x, g.iter().zip(xs).map(|(g, &v)| g * gelu_grad(v)).collect());
            }
            Op::Sigmoid(x) => {
                send(*x, g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect());
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Standardize { x, layout, inv_std } => {
                let n = out.numel();
                let groups = layout.groups(n);
                let count = (n / groups) as f64;
                let y = out.data();
                let mut mean_g = vec![0.0; groups];
                let mut mean_gy = vec![0.0; groups];
                layout.for_each_segment(n, |grp, r| {
                    for i in r {
                        mean_g[grp] += g[i];
                        mean_gy[grp] += g[i] * y[i];
                    }
                });
                let mut gx = vec![0.0; n];
                layout.for_each_segment(n, |grp, r| {
                    let (mg, mgy) = (mean_g[grp] / count, mean_gy[grp] / count);
                    for i in r {
                        gx[i] = inv_std[grp] * (g[i] - mg - y[i] * mgy);
                    }
                });
                send(*x, gx);
            }
            Op::Conv2d { x, w, b, geom } | Op::Depthwise { x, w, b, geom } => {
                let need = [self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b))];
                let backward = if matches!(node.op, Op::Conv2d { .. }) {
                    conv::conv2d_backward
                } else {
                    conv::depthwise_backward
                };
                let r = backward(geom, self.val(*x).data(), self.val(*w).data(), g, need);
                if let Some(dx) = r.dx {
                    send(*x, dx);
                }
                if let Some(dw) = r.dw {
                    send(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    send(*b, db);
                }
            }
            Op::MaxPool { x, argmax } | Op::MaxAxis { x, argmax } => {
                let mut gx = vec![0.0; self.val(*x).numel()];
                for (gv, &at) in g.iter().zip(argmax) {
                    gx[at] += gv;
                }
                send(*x, gx);
            }
            Op::AvgPool { x, k, stride } => {
                let tx = self.val(*x);
                let s = tx.shape();
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (out.shape()[2], out.shape()[3]);
                let scale = 1.0 / (k * k) as f64;
                let mut gx = vec![0.0; tx.numel()];
                for p in 0..s[0] * s[1] {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[(p * ho + oy) * wo + ox] * scale;
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    gx[p * h * w + (oy * stride + ky) * w + ox * stride + kx] += gv;
                                }
                            }
                        }
                    }
                }
                send(*x, gx);
            }
            Op::MeanAxis(x, axis) => {
                let tx = self.val(*x);
                let (outer, len, inner) = axis_split(tx.shape(), *axis);
                let mut gx = vec![0.0; tx.numel()];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[(o * len + j) * inner + i] = g[o * inner + i] / len as f64;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::SumAll(x) => send(*x, vec![g[0]; self.val(*x).numel()]),
            Op::MeanAll(x) => {
                let n = self.val(*x).numel();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::Upsample2x(x) => {
                let tx = self.val(*x);
                let s = tx.shape();
                let (h, w) = (s[2], s[3]);
                let (ty, txs) = (kernels::bilinear_taps(h), kernels::bilinear_taps(w));
                let mut gx = vec![0.0; tx.numel()];
                let mut o = 0;
                for p in 0..s[0] * s[1] {
                    let plane = &mut gx[p * h * w..(p + 1) * h * w];
                    for &(y0, y1, fy) in &ty {
                        for &(x0, x1, fx) in &txs {
                            let gv = g[o];
                            o += 1;
                            plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                            plane[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Dropout(x, mask) => send(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
        }
    }
}

fn permute_plan(in_shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = in_shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape = perm.iter().map(|&p| in_shape[p]).collect();
    let strides = perm.iter().map(|&p| in_strides[p]).collect();
    (out_shape, strides)
}

struct MatmulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(config("matmul", format!("operands must be at least rank 2: {a:?} · {b:?}")));
        }
        let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(shape_err("matmul", &[k, n], &[k2, n]));
        }
        let batch_dims = match (ba.is_empty(), bb.is_empty()) {
            (_, true) => ba,
            (true, false) => bb,
            (false, false) if ba == bb => ba,
            _ => return Err(shape_err("matmul", ba, bb)),
        };
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            batch: numel(batch_dims),
            m,
            k,
            n,
            a_batched: !ba.is_empty(),
            b_batched: !bb.is_empty(),
            out_shape,
        })
    }

    fn a_off(&self, i: usize) -> usize {
        if self.a_batched {
            i * self.m * self.k
        } else {
            0
        }
    }

    fn b_off(&self, i: usize) -> usize {
        if self.b_batched {
            i * self.k * self.n
        } else {
            0
        }
    }
}
