//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node holding its output value and whatever
//! it needs for the backward rule. Nodes are appended in evaluation order,
//! so the tape is topologically sorted by construction and [`Tape::backward`]
//! is a single reverse sweep.

use std::collections::BTreeMap;

use super::attention::{attention_backward, attention_forward, AttnShape, Rope};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RmsNorm {
        x: Var,
        gamma: Var,
        inv_rms: Vec<T>,
    },
    Modulate {
        x: Var,
        shift: Var,
        scale: Var,
        group: usize,
    },
    GatedAdd {
        x: Var,
        gate: Var,
        y: Var,
        group: usize,
    },
    ConcatRows(Var, Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: Box<AttnShape>,
        probs: Vec<T>,
    },
    Rope {
        x: Var,
        rope: Box<Rope<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients keyed by parameter name.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
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

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Named differentiable leaf; names must be unique per tape.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        debug_assert!(
            self.params.iter().all(|(n, _)| n != name),
            "duplicate parameter {name}"
        );
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_owned(), v));
        v
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(silu);
        let rg = self.rg(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / T::lit(t.numel() as f64));
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Row-wise RMS normalisation over the trailing dimension, scaled by `gamma`.
    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: T) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.cols();
        if self.shape(gamma) != [d] {
            return Err(Error::shape("rms_norm", xt.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let mut out = xt.data().to_vec();
        let mut inv_rms = Vec::with_capacity(xt.rows());
        let inv_d = T::one() / T::lit(d as f64);
        for row in out.chunks_exact_mut(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
            let inv = T::one() / (ms + eps).sqrt();
            for (o, &gi) in row.iter_mut().zip(g) {
                *o = *o * inv * gi;
            }
            inv_rms.push(inv);
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma]);
        Ok(self.push(value, Op::RmsNorm { x, gamma, inv_rms }, rg))
    }

    fn check_grouped(&self, op: &'static str, x: Var, per_group: Var, group: usize) -> Result<()> {
        let xs = self.value(x);
        let gs = self.value(per_group);
        if group == 0 || xs.rows() != gs.rows() * group || xs.cols() != gs.cols() {
            return Err(Error::shape(op, xs.shape(), gs.shape()));
        }
        Ok(())
    }

    /// `x·(1 + scale_b) + shift_b`, where row `r` of `x` belongs to group `b = r / group`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var, group: usize) -> Result<Var> {
        self.check_grouped("modulate", x, shift, group)?;
        self.same_shape("modulate", shift, scale)?;
        let xt = self.value(x);
        let d = xt.cols();
        let (sh, sc) = (self.value(shift).data(), self.value(scale).data());
        let mut out = xt.data().to_vec();
        for (r, row) in out.chunks_exact_mut(d).enumerate() {
            let b = r / group;
            for (j, o) in row.iter_mut().enumerate() {
                *o = *o * (T::one() + sc[b * d + j]) + sh[b * d + j];
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(&[x, shift, scale]);
        Ok(self.push(
            value,
            Op::Modulate {
                x,
                shift,
                scale,
                group,
            },
            rg,
        ))
    }

    /// `x + gate_b ⊙ y`, grouped as in [`Tape::modulate`].
    pub fn gated_add(&mut self, x: Var, gate: Var, y: Var, group: usize) -> Result<Var> {
        self.same_shape("gated_add", x, y)?;
        self.check_grouped("gated_add", x, gate, group)?;
        let d = self.value(x).cols();
        let g = self.value(gate).data();
        let yd = self.value(y).data();
        let mut out = self.value(x).data().to_vec();
        for (r, row) in out.chunks_exact_mut(d).enumerate() {
            let b = r / group;
            for (j, o) in row.iter_mut().enumerate() {
                *o += g[b * d + j] * yd[r * d + j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gate, y]);
        Ok(self.push(value, Op::GatedAdd { x, gate, y, group }, rg))
    }

    /// Stacks the rows of two rank-2 tensors.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("concat_rows", sa, sb));
        }
        let shape = vec![sa[0] + sb[0], sa[1]];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::ConcatRows(a, b), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.cols();
        if idx.is_empty() || idx.iter().any(|&i| i >= xt.rows()) {
            return Err(Error::Precondition(format!(
                "row index out of range for {} rows",
                xt.rows()
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(xt.row(i));
        }
        let value = Tensor::new(vec![idx.len(), d], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GatherRows { x, idx }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        let n = xt.cols();
        if len == 0 || start + len > n {
            return Err(Error::Precondition(format!(
                "column slice {start}..{} out of range for width {n}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(xt.rows() * len);
        for r in 0..xt.rows() {
            data.extend_from_slice(&xt.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![xt.rows(), len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    /// Grouped-query attention; see [`AttnShape`] for the packing.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        shape.validate()?;
        let qw = shape.heads * shape.head_dim;
        let kw = shape.kv_heads * shape.head_dim;
        let (qs, ks) = (self.shape(q), self.shape(k));
        if qs != [shape.batch * shape.lq, qw] || ks != [shape.batch * shape.lk, kw] {
            return Err(Error::shape("attention", qs, ks));
        }
        self.same_shape("attention", k, v)?;
        let (out, probs) = attention_forward(
            &shape,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let value = Tensor::new(vec![shape.batch * shape.lq, qw], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                shape: Box::new(shape),
                probs,
            },
            rg,
        ))
    }

    /// Probabilities saved by every attention node in tape order, each `[batch, heads, lq, lk]`.
    pub fn attention_maps(&self) -> Vec<&[T]> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Attention { probs, .. } => Some(probs.as_slice()),
                _ => None,
            })
            .collect()
    }

    pub fn rope(&mut self, x: Var, rope: Rope<T>) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[1] != rope.n_heads * rope.head_dim || xs[0] % rope.len != 0 {
            return Err(Error::shape(
                "rope",
                xs,
                &[rope.len, rope.n_heads * rope.head_dim],
            ));
        }
        let data = rope.apply(self.value(x).data(), false);
        let value = Tensor::new(xs.to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Rope {
                x,
                rope: Box::new(rope),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`; returns a gradient for every
    /// registered parameter (zeros where the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Precondition(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        let mut out = Gradients::new();
        for (name, v) in &self.params {
            let shape = self.shape(*v);
            let t = match grads[v.0].take() {
                Some(g) => Tensor::new(shape.to_vec(), g)?,
                None => Tensor::zeros(shape),
            };
            out.insert(name.clone(), t);
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                if self.wants(*a) {
                    let dst = grads[a.0].get_or_insert_with(|| vec![T::zero(); m * k]);
                    gemm_nt(m, n, k, g, bt.data(), dst, true);
                }
                if self.wants(*b) {
                    let dst = grads[b.0].get_or_insert_with(|| vec![T::zero(); k * n]);
                    gemm_tn(k, m, n, at.data(), g, dst, true);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    acc(grads, *a, g.iter().zip(bd).map(|(&x, &y)| x * y).collect());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.iter().zip(ad).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => acc(grads, *a, g.iter().map(|&x| x * *c).collect()),
            Op::Silu(a) => {
                let xd = self.value(*a).data();
                acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(xd)
                        .map(|(&gi, &x)| gi * silu_grad(x))
                        .collect(),
                );
            }
            Op::Square(a) => {
                let xd = self.value(*a).data();
                let two = T::lit(2.0);
                acc(
                    grads,
                    *a,
                    g.iter().zip(xd).map(|(&gi, &x)| gi * two * x).collect(),
                );
            }
            Op::Sum(a) => acc(grads, *a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(grads, *a, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let xt = self.value(*x);
                let d = xt.cols();
                let gm = self.value(*gamma).data();
                let inv_d = T::one() / T::lit(d as f64);
                let mut dx = vec![T::zero(); xt.numel()];
                let mut dgamma = vec![T::zero(); d];
                for (r, (xr, gr)) in xt.data().chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                    let inv = inv_rms[r];
                    let mut dot = T::zero();
                    for j in 0..d {
                        let xhat = xr[j] * inv;
                        dgamma[j] += gr[j] * xhat;
                        dot += gr[j] * gm[j] * xhat;
                    }
                    let dxr = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xhat = xr[j] * inv;
                        dxr[j] = inv * (gr[j] * gm[j] - xhat * dot * inv_d);
                    }
                }
                if self.wants(*x) {
                    acc(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, dgamma);
                }
            }
            Op::Modulate {
                x,
                shift,
                scale,
                group,
            } => {
                let xt = self.value(*x);
                let d = xt.cols();
                let sc = self.value(*scale).data();
                let nb = self.value(*shift).numel();
                let mut dx = vec![T::zero(); xt.numel()];
                let mut dshift = vec![T::zero(); nb];
                let mut dscale = vec![T::zero(); nb];
                for (i, (&gi, &xi)) in g.iter().zip(xt.data()).enumerate() {
                    let bj = (i / d / group) * d + i % d;
                    dx[i] = gi * (T::one() + sc[bj]);
                    dshift[bj] += gi;
                    dscale[bj] += gi * xi;
                }
                if self.wants(*x) {
                    acc(grads, *x, dx);
                }
                if self.wants(*shift) {
                    acc(grads, *shift, dshift);
                }
                if self.wants(*scale) {
                    acc(grads, *scale, dscale);
                }
            }
            Op::GatedAdd { x, gate, y, group } => {
                let d = self.value(*x).cols();
                let gd = self.value(*gate).data();
                let yd = self.value(*y).data();
                if self.wants(*x) {
                    acc(grads, *x, g.to_vec());
                }
                if self.wants(*gate) {
                    let mut dgate = vec![T::zero(); gd.len()];
                    for (i, (&gi, &yi)) in g.iter().zip(yd).enumerate() {
                        dgate[(i / d / group) * d + i % d] += gi * yi;
                    }
                    acc(grads, *gate, dgate);
                }
                if self.wants(*y) {
                    let dy = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * gd[(i / d / group) * d + i % d])
                        .collect();
                    acc(grads, *y, dy);
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).numel();
                if self.wants(*a) {
                    acc(grads, *a, g[..na].to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g[na..].to_vec());
                }
            }
            Op::GatherRows { x, idx } => {
                let xt = self.value(*x);
                let d = xt.cols();
                let mut dx = vec![T::zero(); xt.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..d {
                        dx[src * d + j] += g[r * d + j];
                    }
                }
                acc(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let xt = self.value(*x);
                let n = xt.cols();
                let len = node.value.cols();
                let mut dx = vec![T::zero(); xt.numel()];
                for r in 0..xt.rows() {
                    dx[r * n + start..r * n + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    shape,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                );
                if self.wants(*q) {
                    acc(grads, *q, dq);
                }
                if self.wants(*k) {
                    acc(grads, *k, dk);
                }
                if self.wants(*v) {
                    acc(grads, *v, dv);
                }
            }
            Op::Rope { x, rope } => acc(grads, *x, rope.apply(g, true)),
        }
    }
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}
