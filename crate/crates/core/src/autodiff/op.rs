//! The fixed operation set and its forward evaluation.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use super::kernels::{self, ConvGeom};
use crate::error::{invalid, mismatch, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Operation kind plus its attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Elementwise sum with trailing-axis broadcasting.
    Add,
    /// Elementwise product with trailing-axis broadcasting.
    Mul,
    /// Rank-2 or batched rank-3 matrix product.
    Matmul { transpose_a: bool, transpose_b: bool },
    /// Inputs `(x, weight)` or `(x, weight, bias)`.
    Conv2d { stride: usize, padding: usize },
    Silu,
    Softmax { axis: usize },
    /// Group normalization without affine terms, over `(B, C, ...)` inputs.
    Normalize { group_count: usize, epsilon: f64 },
    Reshape { shape: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    /// Gathers rows of a `(rows, width)` table.
    EmbedLookup { indices: Vec<usize> },
    Scale(f64),
    /// Sum of all elements, shape `[1]`.
    Sum,
    /// Swaps the last two axes.
    Transpose,
}

/// Attribute-free discriminant of [`Op`], parseable from its name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Mul,
    Matmul,
    Conv2d,
    Silu,
    Softmax,
    Normalize,
    Reshape,
    Concat,
    Slice,
    EmbedLookup,
    Scale,
    Sum,
    Transpose,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::Add,
        OpKind::Mul,
        OpKind::Matmul,
        OpKind::Conv2d,
        OpKind::Silu,
        OpKind::Softmax,
        OpKind::Normalize,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::EmbedLookup,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::Transpose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Matmul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Silu => "silu",
            OpKind::Softmax => "softmax",
            OpKind::Normalize => "normalize",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::EmbedLookup => "embed_lookup",
            OpKind::Scale => "scale",
            OpKind::Sum => "sum",
            OpKind::Transpose => "transpose",
        }
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Matmul { .. } => OpKind::Matmul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Silu => OpKind::Silu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Normalize { .. } => OpKind::Normalize,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::EmbedLookup { .. } => OpKind::EmbedLookup,
            Op::Scale(_) => OpKind::Scale,
            Op::Sum => OpKind::Sum,
            Op::Transpose => OpKind::Transpose,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }
}

fn arity(op: &Op, inputs: &[&Tensor], expected: core::ops::RangeInclusive<usize>) -> Result<()> {
    if expected.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(invalid(
            op.name(),
            format!("expected {expected:?} inputs, got {}", inputs.len()),
        ))
    }
}

pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MatmulDims> {
    if a.len() != b.len() || !(a.len() == 2 || a.len() == 3) {
        return Err(mismatch("matmul", a, b));
    }
    let r = a.len();
    let batch = if r == 3 {
        if a[0] != b[0] {
            return Err(mismatch("matmul", a, b));
        }
        a[0]
    } else {
        1
    };
    let (m, ka) = if ta { (a[r - 1], a[r - 2]) } else { (a[r - 2], a[r - 1]) };
    let (kb, n) = if tb { (b[r - 1], b[r - 2]) } else { (b[r - 2], b[r - 1]) };
    if ka != kb {
        return Err(mismatch("matmul", a, b));
    }
    Ok(MatmulDims { batch, m, k: ka, n })
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
        return Err(mismatch("conv2d", x, w));
    }
    if stride == 0 {
        return Err(invalid("conv2d", "stride must be positive"));
    }
    let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
    if h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(mismatch("conv2d", x, w));
    }
    Ok(ConvGeom {
        c_in: x[1],
        h,
        w: wd,
        c_out: w[0],
        kh,
        kw,
        stride,
        padding,
        h_out: (h + 2 * padding - kh) / stride + 1,
        w_out: (wd + 2 * padding - kw) / stride + 1,
    })
}

/// `(outer, axis_len, inner)` decomposition around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

/// Per-group statistics of a group normalization: `(group_size, groups_total)`.
pub(crate) fn norm_layout(shape: &[usize], group_count: usize) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(invalid("normalize", format!("needs (B, C, ...) input, got {shape:?}")));
    }
    let c = shape[1];
    if group_count == 0 || c % group_count != 0 {
        return Err(invalid(
            "normalize",
            format!("{group_count} groups do not divide {c} channels"),
        ));
    }
    let spatial: usize = shape[2..].iter().product();
    Ok(((c / group_count) * spatial, shape[0] * group_count))
}

/// Evaluates `op` on concrete tensors. This is the tape-free forward path.
pub fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Add | Op::Mul => {
            arity(op, inputs, 2..=2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                let f = if matches!(op, Op::Add) {
                    |x: f64, y: f64| x + y
                } else {
                    |x: f64, y: f64| x * y
                };
                return a.zip_with(b, f);
            }
            let out = kernels::broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| mismatch(op.name(), a.shape(), b.shape()))?;
            let sa = kernels::broadcast_strides(a.shape(), &out);
            let sb = kernels::broadcast_strides(b.shape(), &out);
            let mut data = vec![0.0; out.iter().product()];
            let (ad, bd) = (a.data(), b.data());
            if matches!(op, Op::Add) {
                kernels::for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = ad[i] + bd[j]);
            } else {
                kernels::for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = ad[i] * bd[j]);
            }
            Tensor::new(out, data)
        }
        Op::Matmul {
            transpose_a,
            transpose_b,
        } => {
            arity(op, inputs, 2..=2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let d = matmul_dims(a.shape(), b.shape(), *transpose_a, *transpose_b)?;
            let mut data = vec![0.0; d.batch * d.m * d.n];
            for bi in 0..d.batch {
                kernels::gemm_acc(
                    &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k],
                    &b.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n],
                    &mut data[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                    d.m,
                    d.k,
                    d.n,
                    *transpose_a,
                    *transpose_b,
                );
            }
            let shape = if a.rank() == 3 {
                vec![d.batch, d.m, d.n]
            } else {
                vec![d.m, d.n]
            };
            Tensor::new(shape, data)
        }
        Op::Conv2d { stride, padding } => {
            arity(op, inputs, 2..=3)?;
            let (x, w) = (inputs[0], inputs[1]);
            let g = conv_geom(x.shape(), w.shape(), *stride, *padding)?;
            let bias = inputs.get(2).copied();
            if let Some(b) = bias {
                if b.len() != g.c_out {
                    return Err(mismatch("conv2d", w.shape(), b.shape()));
                }
            }
            let batch = x.shape()[0];
            let data = kernels::conv2d_forward(x.data(), w.data(), bias.map(Tensor::data), batch, &g);
            Tensor::new(vec![batch, g.c_out, g.h_out, g.w_out], data)
        }
        Op::Silu => {
            arity(op, inputs, 1..=1)?;
            Ok(inputs[0].map(|x| x * sigmoid(x)))
        }
        Op::Softmax { axis } => {
            arity(op, inputs, 1..=1)?;
            let x = inputs[0];
            if *axis >= x.rank() {
                return Err(invalid("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
            }
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut out = x.clone();
            let d = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        max = max.max(d[at(j)]);
                    }
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = math::exp(d[at(j)] - max);
                        d[at(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        d[at(j)] /= total;
                    }
                }
            }
            Ok(out)
        }
        Op::Normalize {
            group_count,
            epsilon,
        } => {
            arity(op, inputs, 1..=1)?;
            let x = inputs[0];
            if !(*epsilon > 0.0) {
                return Err(invalid("normalize", "epsilon must be positive"));
            }
            let (size, groups) = norm_layout(x.shape(), *group_count)?;
            let mut out = x.clone();
            for chunk in out.data_mut().chunks_exact_mut(size).take(groups) {
                let mean = chunk.iter().sum::<f64>() / size as f64;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / size as f64;
                let inv = 1.0 / math::sqrt(var + epsilon);
                for v in chunk.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
            Ok(out)
        }
        Op::Reshape { shape } => {
            arity(op, inputs, 1..=1)?;
            inputs[0].clone().reshaped(shape)
        }
        Op::Concat { axis } => {
            if inputs.is_empty() {
                return Err(invalid("concat", "no inputs"));
            }
            let first = inputs[0].shape();
            if *axis >= first.len() {
                return Err(invalid("concat", format!("axis {axis} out of range for {first:?}")));
            }
            for t in &inputs[1..] {
                let s = t.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !compatible {
                    return Err(mismatch("concat", first, s));
                }
            }
            let (outer, _, inner) = split_axis(first, *axis);
            let total_axis: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut data = Vec::with_capacity(outer * total_axis * inner);
            for o in 0..outer {
                for t in inputs {
                    let block = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total_axis;
            Tensor::new(shape, data)
        }
        Op::Slice { axis, start, end } => {
            arity(op, inputs, 1..=1)?;
            let x = inputs[0];
            if *axis >= x.rank() || start >= end || *end > x.shape()[*axis] {
                return Err(invalid(
                    "slice",
                    format!("range {start}..{end} on axis {axis} invalid for {:?}", x.shape()),
                ));
            }
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                data.extend_from_slice(&x.data()[(o * len + start) * inner..(o * len + end) * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = end - start;
            Tensor::new(shape, data)
        }
        Op::EmbedLookup { indices } => {
            arity(op, inputs, 1..=1)?;
            let table = inputs[0];
            if table.rank() != 2 {
                return Err(invalid("embed_lookup", format!("table must be rank 2, got {:?}", table.shape())));
            }
            if indices.is_empty() {
                return Err(invalid("embed_lookup", "no indices"));
            }
            let (rows, width) = (table.shape()[0], table.shape()[1]);
            let mut data = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                if i >= rows {
                    return Err(invalid("embed_lookup", format!("index {i} out of range for {rows} rows")));
                }
                data.extend_from_slice(&table.data()[i * width..(i + 1) * width]);
            }
            Tensor::new(vec![indices.len(), width], data)
        }
        Op::Scale(c) => {
            arity(op, inputs, 1..=1)?;
            Ok(inputs[0].map(|x| x * c))
        }
        Op::Sum => {
            arity(op, inputs, 1..=1)?;
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        Op::Transpose => {
            arity(op, inputs, 1..=1)?;
            let x = inputs[0];
            if x.rank() < 2 {
                return Err(invalid("transpose", format!("needs rank >= 2, got {:?}", x.shape())));
            }
            let r = x.rank();
            let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
            let mut shape = x.shape().to_vec();
            shape.swap(r - 2, r - 1);
            Tensor::new(shape, transpose_last(x.data(), rows, cols))
        }
    }
}

pub(crate) fn transpose_last(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks_exact(rows * cols).zip(out.chunks_exact_mut(rows * cols)) {
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}
