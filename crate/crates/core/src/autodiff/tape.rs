//! Append-only differentiation tape and reverse-mode backward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, ConvGeom};
use super::op::{self, Op};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

struct Node {
    op: Option<Op>,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Records every operation of one forward pass. Single use: build, run
/// [`Tape::backward`], drop.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Option<Op>, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(None, Vec::new(), value, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(None, Vec::new(), value, false)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignNode(v.index));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Evaluates `op` and records it.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let ids = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let out = op::forward(&op, &values)?;
        let requires_grad = ids.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Some(op), ids, out, requires_grad))
    }

    /// Reverse-mode sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.check(root)?;
        let root_value = &self.nodes[r].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=r).map(|_| None).collect();
        grads[r] = Some(Tensor::ones(root_value.shape()));
        for i in (0..=r).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let want: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let input_grads = self.vjp(op, node, &g, &want)?;
            grads[i] = Some(g);
            for ((&j, gi), w) in node.inputs.iter().zip(input_grads).zip(want) {
                let Some(gi) = gi else { continue };
                debug_assert!(w);
                match grads[j].as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    None => grads[j] = Some(gi),
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn input(&self, node: &Node, k: usize) -> &Tensor {
        &self.nodes[node.inputs[k]].value
    }

    /// Vector-Jacobian products for each input of `node` given upstream `g`.
    fn vjp(&self, op: &Op, node: &Node, g: &Tensor, want: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let gd = g.data();
        let out: Vec<Option<Tensor>> = match op {
            Op::Add => {
                let (a, b) = (self.input(node, 0), self.input(node, 1));
                vec![
                    want[0].then(|| reduced(gd, g.shape(), a.shape())),
                    want[1].then(|| reduced(gd, g.shape(), b.shape())),
                ]
            }
            Op::Mul => {
                let (a, b) = (self.input(node, 0), self.input(node, 1));
                let shape = g.shape();
                let ga = want[0].then(|| {
                    let prod = broadcast_product(gd, shape, b);
                    reduced(&prod, shape, a.shape())
                });
                let gb = want[1].then(|| {
                    let prod = broadcast_product(gd, shape, a);
                    reduced(&prod, shape, b.shape())
                });
                vec![ga, gb]
            }
            Op::Matmul {
                transpose_a,
                transpose_b,
            } => {
                let (a, b) = (self.input(node, 0), self.input(node, 1));
                let d = op::matmul_dims(a.shape(), b.shape(), *transpose_a, *transpose_b)?;
                let (ta, tb) = (*transpose_a, *transpose_b);
                let (mk, kn, mn) = (d.m * d.k, d.k * d.n, d.m * d.n);
                let ga = want[0].then(|| {
                    let mut buf = vec![0.0; a.len()];
                    for bi in 0..d.batch {
                        let gb = &gd[bi * mn..(bi + 1) * mn];
                        let bb = &b.data()[bi * kn..(bi + 1) * kn];
                        let dst = &mut buf[bi * mk..(bi + 1) * mk];
                        if ta {
                            // dA (k×m) = op(B) · Gᵀ
                            kernels::gemm_acc(bb, gb, dst, d.k, d.n, d.m, tb, true);
                        } else {
                            // dA (m×k) = G · op(B)ᵀ
                            kernels::gemm_acc(gb, bb, dst, d.m, d.n, d.k, false, !tb);
                        }
                    }
                    Tensor::new(a.shape().to_vec(), buf)
                });
                let gb = want[1].then(|| {
                    let mut buf = vec![0.0; b.len()];
                    for bi in 0..d.batch {
                        let gm = &gd[bi * mn..(bi + 1) * mn];
                        let ab = &a.data()[bi * mk..(bi + 1) * mk];
                        let dst = &mut buf[bi * kn..(bi + 1) * kn];
                        if tb {
                            // dB (n×k) = Gᵀ · op(A)
                            kernels::gemm_acc(gm, ab, dst, d.n, d.m, d.k, true, ta);
                        } else {
                            // dB (k×n) = op(A)ᵀ · G
                            kernels::gemm_acc(ab, gm, dst, d.k, d.m, d.n, !ta, false);
                        }
                    }
                    Tensor::new(b.shape().to_vec(), buf)
                });
                vec![transpose_result(ga)?, transpose_result(gb)?]
            }
            Op::Conv2d { stride, padding } => {
                let (x, w) = (self.input(node, 0), self.input(node, 1));
                let geom: ConvGeom = op::conv_geom(x.shape(), w.shape(), *stride, *padding)?;
                let has_bias = node.inputs.len() == 3;
                let flags = [want[0], want[1], has_bias && want[2]];
                let (dx, dw, db) =
                    kernels::conv2d_backward(x.data(), w.data(), gd, x.shape()[0], &geom, flags);
                let mut v = vec![
                    dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
                    dw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
                ];
                if has_bias {
                    let b = self.input(node, 2);
                    v.push(db.map(|d| Tensor::new(b.shape().to_vec(), d)).transpose()?);
                }
                v
            }
            Op::Silu => {
                let x = self.input(node, 0);
                let data = x
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &g)| {
                        let s = op::sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                vec![Some(Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Softmax { axis } => {
                let y = &node.value;
                let (outer, len, inner) = op::split_axis(y.shape(), *axis);
                let yd = y.data();
                let mut data = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..len {
                            data[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), data)?)]
            }
            Op::Normalize {
                group_count,
                epsilon,
            } => {
                let x = self.input(node, 0);
                let (size, groups) = op::norm_layout(x.shape(), *group_count)?;
                let y = node.value.data();
                let mut data = vec![0.0; x.len()];
                for gi in 0..groups {
                    let range = gi * size..(gi + 1) * size;
                    let xs = &x.data()[range.clone()];
                    let mean = xs.iter().sum::<f64>() / size as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / size as f64;
                    let inv = 1.0 / math::sqrt(var + epsilon);
                    let (ys, gs) = (&y[range.clone()], &gd[range.clone()]);
                    let g_mean = gs.iter().sum::<f64>() / size as f64;
                    let gy_mean = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / size as f64;
                    for ((dst, &g), &yv) in data[range].iter_mut().zip(gs).zip(ys) {
                        *dst = inv * (g - g_mean - yv * gy_mean);
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Reshape { .. } => {
                let x = self.input(node, 0);
                vec![Some(g.clone().reshaped(x.shape())?)]
            }
            Op::Concat { axis } => {
                let mut start = 0;
                let mut v = Vec::with_capacity(node.inputs.len());
                for (k, &w) in want.iter().enumerate() {
                    let len = self.input(node, k).shape()[*axis];
                    let piece = if w {
                        Some(op::forward(
                            &Op::Slice {
                                axis: *axis,
                                start,
                                end: start + len,
                            },
                            &[g],
                        )?)
                    } else {
                        None
                    };
                    v.push(piece);
                    start += len;
                }
                v
            }
            Op::Slice { axis, start, end } => {
                let x = self.input(node, 0);
                let (outer, len, inner) = op::split_axis(x.shape(), *axis);
                let mut data = vec![0.0; x.len()];
                let width = (end - start) * inner;
                for o in 0..outer {
                    data[(o * len + start) * inner..(o * len + end) * inner]
                        .copy_from_slice(&gd[o * width..(o + 1) * width]);
                }
                vec![Some(Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::EmbedLookup { indices } => {
                let table = self.input(node, 0);
                let width = table.shape()[1];
                let mut data = vec![0.0; table.len()];
                for (row, &i) in indices.iter().enumerate() {
                    for (d, s) in data[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&gd[row * width..(row + 1) * width])
                    {
                        *d += s;
                    }
                }
                vec![Some(Tensor::new(table.shape().to_vec(), data)?)]
            }
            Op::Scale(c) => vec![Some(g.map(|v| v * c))],
            Op::Sum => {
                let x = self.input(node, 0);
                vec![Some(Tensor::full(x.shape(), gd[0]))]
            }
            Op::Transpose => {
                let x = self.input(node, 0);
                let r = x.rank();
                let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
                // g has the swapped shape (cols × rows)
                vec![Some(Tensor::new(x.shape().to_vec(), op::transpose_last(gd, cols, rows))?)]
            }
        };
        // only hand back what was asked for
        Ok(out
            .into_iter()
            .zip(want)
            .map(|(g, &w)| if w { g } else { None })
            .collect())
    }
}

fn reduced(g: &[f64], from: &[usize], to: &[usize]) -> Tensor {
    Tensor::new(to.to_vec(), kernels::reduce_to(g, from, to)).expect("reduction preserves element count")
}

/// `g ⊙ broadcast(other)` over the shape of `g`.
fn broadcast_product(g: &[f64], shape: &[usize], other: &Tensor) -> Vec<f64> {
    if other.shape() == shape {
        return g.iter().zip(other.data()).map(|(a, b)| a * b).collect();
    }
    let so = kernels::broadcast_strides(other.shape(), shape);
    let zero = vec![0; shape.len()];
    let od = other.data();
    let mut out = vec![0.0; g.len()];
    kernels::for_each_broadcast(shape, &so, &zero, |o, i, _| out[o] = g[o] * od[i]);
    out
}

fn transpose_result(t: Option<Result<Tensor>>) -> Result<Option<Tensor>> {
    t.transpose()
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is not an ancestor of the root or
    /// does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when none reached it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn take(&mut self, v: Var) -> Result<Tensor> {
        if v.tape != self.tape {
            return Err(Error::ForeignNode(v.index));
        }
        self.grads
            .get_mut(v.index)
            .and_then(Option::take)
            .ok_or_else(|| Error::NonFinite(format!("missing gradient for node {}", v.index)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.apply(Op::Mul, &[x, x]).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let s = tape.apply(Op::Sum, &[x]).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
        // root gradient w.r.t. itself
        assert_eq!(g.get(s).unwrap().data(), &[1.0]);
    }

    #[test]
    fn rejects_non_scalar_root_and_foreign_nodes() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
        let mut other = Tape::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(Error::ForeignNode(_))));
        assert!(tape.apply(Op::Silu, &[y]).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let p = tape.param(Tensor::scalar(5.0));
        let y = tape.apply(Op::Mul, &[c, p]).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[2.0]);
    }
}
