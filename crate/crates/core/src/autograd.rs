//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! which is already a topological order. [`Tape::backward`] walks it once in
//! reverse. Parameters enter the tape through [`Tape::param`] and their
//! gradients come back keyed by [`ParamId`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, split_axis, Conv2dSpec};
use crate::tensor::{numel_of, Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a parameter in a [`crate::params::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias { x: Var, bias: Var, axis: usize },
    Bmm { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Expand(Var),
    Conv2d { x: Var, w: Var, spec: Conv2dSpec },
    LayerNorm { x: Var, gamma: Var, beta: Var, means: Vec<T>, rstds: Vec<T> },
    Softmax(Var),
    Gelu(Var),
    Silu(Var),
    Modulate { x: Var, scale: Var, shift: Var },
    GatherRows { table: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf not tied to a parameter store.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        let v = self.leaf(value);
        self.nodes[v.0].param = Some(id);
        v
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

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Adds a 1-d `bias` along `axis` of `x` (the only broadcast besides
    /// scalars).
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || self.shape(bias) != [xs[axis]] {
            return Err(Error::shape(format!(
                "bias {:?} does not match axis {axis} of {xs:?}",
                self.shape(bias)
            )));
        }
        let (outer, n, inner) = split_axis(&xs, axis);
        let bd = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for (c, &bv) in bd.iter().enumerate() {
                let base = (o * n + c) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::from_parts(xs, out);
        Ok(self.push(out, Op::AddBias { x, bias, axis }, &[x, bias]))
    }

    /// 2-d or batched 3-d matrix product; `trans_b` multiplies by `bᵀ`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = kernels::bmm(self.value(a), self.value(b), trans_b)?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::shape(format!(
                "matmul expects 2-d operands, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        self.bmm(a, b, false)
    }

    /// `x·wᵀ` for `x [m, in]`, `w [out, in]`.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        self.bmm(x, w, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = kernels::permute(self.value(x), perm)?;
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along {axis} of {base:?} and {s:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(Error::shape(format!(
                "slice [{start}, {}) on axis {axis} of {xs:?}",
                start + len
            )));
        }
        let (outer, n, inner) = split_axis(&xs, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Repeats `x` along a new leading axis of extent `n`.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::shape("expand to zero copies"));
        }
        let src = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let mut out = Vec::with_capacity(src.numel() * n);
        for _ in 0..n {
            out.extend_from_slice(src.data());
        }
        let out = Tensor::from_parts(shape, out);
        Ok(self.push(out, Op::Expand(x), &[x]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), spec)?;
        Ok(self.push(out, Op::Conv2d { x, w, spec }, &[x, w]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, means, rstds) =
            kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::silu);
        self.push(out, Op::Silu(x), &[x])
    }

    /// `x·(1 + scale) + shift` with `x [B, N, D]` and per-sample
    /// `scale, shift [B, D]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [b, n, d] = xs[..] else {
            return Err(Error::shape(format!("modulate expects [B, N, D], got {xs:?}")));
        };
        if self.shape(scale) != [b, d] || self.shape(shift) != [b, d] {
            return Err(Error::shape(format!(
                "modulate of {xs:?} with scale {:?} and shift {:?}",
                self.shape(scale),
                self.shape(shift)
            )));
        }
        let (xd, sd, hd) = (
            self.value(x).data(),
            self.value(scale).data(),
            self.value(shift).data(),
        );
        let mut out = Vec::with_capacity(xd.len());
        for bi in 0..b {
            let (sr, hr) = (&sd[bi * d..(bi + 1) * d], &hd[bi * d..(bi + 1) * d]);
            for ni in 0..n {
                let row = &xd[(bi * n + ni) * d..(bi * n + ni + 1) * d];
                out.extend((0..d).map(|j| row[j] * (T::one() + sr[j]) + hr[j]));
            }
        }
        let out = Tensor::from_parts(xs, out);
        Ok(self.push(out, Op::Modulate { x, scale, shift }, &[x, scale, shift]))
    }

    /// Rows `idx` of a 2-d `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        let [rows, cols] = ts[..] else {
            return Err(Error::shape(format!("gather_rows expects a 2-d table, got {ts:?}")));
        };
        if idx.is_empty() {
            return Err(Error::shape("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Range(format!("row {bad} of a {rows}-row table")));
        }
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::from_parts(vec![idx.len(), cols], out);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::from_f64(v.numel() as f64));
        self.push(out, Op::Mean(x), &[x])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads)?;
        }

        let mut by_param = HashMap::new();
        let mut by_node = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let g = grads[i]
                .take()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            if let Some(pid) = node.param {
                match by_param.get_mut(&pid) {
                    Some(existing) => Tensor::add_assign(existing, &g)?,
                    None => {
                        by_param.insert(pid, g.clone());
                    }
                }
            }
            by_node.insert(i, g);
        }
        Ok(Gradients { by_param, by_node })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y)?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::AddBias { x, bias, axis } => {
                self.accumulate(grads, *x, g.clone())?;
                if self.requires_grad(*bias) {
                    let (outer, n, inner) = split_axis(g.shape(), *axis);
                    let mut db = vec![T::zero(); n];
                    for o in 0..outer {
                        for (c, acc) in db.iter_mut().enumerate() {
                            let base = (o * n + c) * inner;
                            *acc += g.data()[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![n], db))?;
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (da, db) = kernels::bmm_backward(self.value(*a), self.value(*b), *trans_b, g);
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Permute(x, perm) => {
                let gx = kernels::permute(g, &kernels::inverse_perm(perm))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let n = ps[*axis];
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(numel_of(&ps));
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + n * inner]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(ps, d))?;
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&xs, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![T::zero(); numel_of(&xs)];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(xs, d))?;
            }
            Op::Expand(x) => {
                let xs = self.shape(*x).to_vec();
                let m = numel_of(&xs);
                let mut d = vec![T::zero(); m];
                for chunk in g.data().chunks_exact(m) {
                    d.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                }
                self.accumulate(grads, *x, Tensor::from_parts(xs, d))?;
            }
            Op::Conv2d { x, w, spec } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *spec,
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx)?;
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw)?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            } => {
                let (dx, dg, db) =
                    kernels::layer_norm_backward(self.value(*x), self.value(*gamma), means, rstds, g);
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gamma, dg)?;
                self.accumulate(grads, *beta, db)?;
            }
            Op::Softmax(x) => {
                let dx = kernels::softmax_backward(&node.value, g);
                self.accumulate(grads, *x, dx)?;
            }
            Op::Gelu(x) => {
                let dx = self.value(*x).zip_map(g, |v, gv| kernels::gelu_grad(v) * gv)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Silu(x) => {
                let dx = self.value(*x).zip_map(g, |v, gv| kernels::silu_grad(v) * gv)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Modulate { x, scale, shift } => {
                let xs = self.shape(*x).to_vec();
                let (b, n, d) = (xs[0], xs[1], xs[2]);
                let (xd, sd, gd) = (
                    self.value(*x).data(),
                    self.value(*scale).data(),
                    g.data(),
                );
                let mut dx = Vec::with_capacity(xd.len());
                let mut dscale = vec![T::zero(); b * d];
                let mut dshift = vec![T::zero(); b * d];
                for bi in 0..b {
                    for ni in 0..n {
                        let r = (bi * n + ni) * d;
                        for j in 0..d {
                            let gv = gd[r + j];
                            dx.push(gv * (T::one() + sd[bi * d + j]));
                            dscale[bi * d + j] += gv * xd[r + j];
                            dshift[bi * d + j] += gv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xs, dx))?;
                self.accumulate(grads, *scale, Tensor::from_parts(vec![b, d], dscale))?;
                self.accumulate(grads, *shift, Tensor::from_parts(vec![b, d], dshift))?;
            }
            Op::GatherRows { table, idx } => {
                let ts = self.shape(*table).to_vec();
                let cols = ts[1];
                let mut d = vec![T::zero(); numel_of(&ts)];
                for (r, &row) in idx.iter().enumerate() {
                    let src = &g.data()[r * cols..(r + 1) * cols];
                    d[row * cols..(row + 1) * cols]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, &b)| *a += b);
                }
                self.accumulate(grads, *table, Tensor::from_parts(ts, d))?;
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv))?;
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).numel() as f64);
                let gv = g.data()[0] / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv))?;
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`]: one gradient per differentiable leaf.
/// Leaves the loss does not depend on get zeros.
pub struct Gradients<T> {
    by_param: HashMap<ParamId, Tensor<T>>,
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    /// L2 norm over all parameter gradients, summed in parameter order.
    pub fn global_norm(&self) -> f64 {
        let mut ids: Vec<_> = self.by_param.keys().copied().collect();
        ids.sort_unstable_by_key(|p| p.0);
        ids.iter()
            .map(|id| {
                let n = self.by_param[id].norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
        assert_eq!(tape.value(y).shape(), &[1, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f32>::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[7, 3], 1.0, &mut rng);
        let mut oracle = vec![0.0f64; 15];
        for i in 0..5 {
            for j in 0..3 {
                for k in 0..7 {
                    oracle[i * 3 + j] += a.data()[i * 7 + k] as f64 * b.data()[k * 3 + j] as f64;
                }
            }
        }
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let y = tape.matmul(av, bv).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&oracle) {
            assert!((*got as f64 - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn linear_rule_gradient() {
        // loss = Σ (w·x) with x fixed: ∂/∂w = x replicated per row
        let mut tape = Tape::<f64>::new();
        let w = tape.param(ParamId(0), t(&[3, 2], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]));
        let x = tape.constant(t(&[2, 1], &[2.0, -1.5]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(ParamId(0)).unwrap().data(), &[2.0, -1.5, 2.0, -1.5, 2.0, -1.5]);
    }

    #[test]
    fn power_rule_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_and_constants_get_nothing() {
        let mut tape = Tape::<f64>::new();
        let used = tape.param(ParamId(0), t(&[2], &[1.0, 2.0]));
        let unused = tape.param(ParamId(1), t(&[2, 2], &[1.0; 4]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(used, c).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(ParamId(1)).unwrap().data(), &[0.0; 4]);
        assert!(g.wrt(c).is_none());
        let _ = unused;
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_slice_roundtrip_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(
            tape.value(c).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let s = tape.slice(c, 1, 1, 2).unwrap();
        assert!(tape.value(s).bitwise_eq(tape.value(b)));
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[0.0; 4]);
        assert_eq!(g.wrt(b).unwrap().data(), &[1.0; 8]);
    }
}
