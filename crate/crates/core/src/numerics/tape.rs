//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes only ever reference earlier nodes, so
//! walking the tape from the end visits them in reverse topological order.
//! Parameters are borrowed rather than copied, which keeps one tape per
//! training sample cheap.

use std::borrow::Cow;

use super::tensor::{kernels, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Reshape(Var),
    Transpose(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

/// Gradients of a scalar loss with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Borrowed trainable tensor.
    pub fn param(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Owned trainable tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Owned tensor that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let n = xv.last_dim();
        if bv.numel() != n {
            return Err(shape_err!(
                "bias of length {} cannot broadcast over rows of length {n}",
                bv.numel()
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.derived(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        self.derived(out, Op::Scale(x, s), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.softmax(xv.shape().len() - 1)?;
        Ok(self.derived(out, Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let out = xv.layer_norm(gv, bv, eps)?;
        let d = xv.last_dim();
        let rows = xv.n_rows();
        let mut xhat = vec![T::ZERO; xv.numel()];
        let mut inv_std = vec![T::ZERO; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let (mean, is) = kernels::row_stats(row, eps);
            inv_std[r] = is;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * is;
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.derived(out, op, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).gelu();
        self.derived(out, Op::Gelu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.derived(out, Op::Transpose(x), &[x]))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > r {
            return Err(shape_err!("row slice {start}..{} of {r} rows", start + len));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(&[len, c], data)?;
        Ok(self.derived(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start + len > c {
            return Err(shape_err!("column slice {start}..{} of {c} columns", start + len));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(&[r, len], data)?;
        Ok(self.derived(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let (_, c) = self.value(*first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(shape_err!("concat_rows column mismatch: {pc} vs {c}"));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(&[rows, c], data)?;
        Ok(self.derived(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let (r, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(shape_err!("concat_cols row mismatch: {pr} vs {r}"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(&[r, total], data)?;
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.sum() / T::from_f64(xv.numel() as f64);
        self.derived(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// `-log softmax(logits)[label]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        let n = lv.numel();
        if label >= n {
            return Err(Error::Index(format!("label {label} with {n} classes")));
        }
        let loss = cross_entropy_value(lv.data(), label);
        let mut probs = lv.data().to_vec();
        kernels::softmax_in_place(&mut probs);
        let op = Op::CrossEntropy {
            logits,
            label,
            probs,
        };
        Ok(self.derived(Tensor::scalar(loss), op, &[logits]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "gradient requested for non-scalar loss of shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::ONE));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(
        &self,
        node: &Node<'a, T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let y = node.value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                if self.wants(*a) {
                    let mut da = vec![T::ZERO; m * k];
                    kernels::matmul_nt(dy.data(), bv.data(), &mut da, m, n, k);
                    accumulate(grads, *a, Tensor::new(&[m, k], da)?)?;
                }
                if self.wants(*b) {
                    let mut db = vec![T::ZERO; k * n];
                    kernels::matmul_tn(av.data(), dy.data(), &mut db, k, m, n);
                    accumulate(grads, *b, Tensor::new(&[k, n], db)?)?;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, dy.clone())?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, dy.clone())?;
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    accumulate(grads, *x, dy.clone())?;
                }
                if self.wants(*bias) {
                    let bshape = self.value(*bias).shape().to_vec();
                    let n = dy.last_dim();
                    let mut db = vec![T::ZERO; n];
                    for row in dy.data().chunks(n) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(grads, *bias, Tensor::new(&bshape, db)?)?;
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, dy.mul(self.value(*b))?)?;
                }
                if self.wants(*b) {
                    accumulate(grads, *b, dy.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, dy.scale(*s))?;
            }
            Op::Softmax(x) => {
                let n = y.last_dim();
                let mut dx = vec![T::ZERO; y.numel()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(n)
                    .zip(dy.data().chunks(n))
                    .zip(dx.chunks_mut(n))
                {
                    let dot = yr.iter().zip(gr).fold(T::ZERO, |acc, (&a, &b)| acc + a * b);
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape(), dx)?)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = y.last_dim();
                let rows = y.n_rows();
                let gv = self.value(*gamma);
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::ZERO; d];
                    let mut db = vec![T::ZERO; d];
                    for r in 0..rows {
                        for j in 0..d {
                            let g = dy.data()[r * d + j];
                            dg[j] += g * xhat[r * d + j];
                            db[j] += g;
                        }
                    }
                    if self.wants(*gamma) {
                        accumulate(grads, *gamma, Tensor::new(gv.shape(), dg)?)?;
                    }
                    if self.wants(*beta) {
                        let bshape = self.value(*beta).shape().to_vec();
                        accumulate(grads, *beta, Tensor::new(&bshape, db)?)?;
                    }
                }
                if self.wants(*x) {
                    let inv_d = T::ONE / T::from_f64(d as f64);
                    let mut dx = vec![T::ZERO; y.numel()];
                    let mut dxhat = vec![T::ZERO; d];
                    for r in 0..rows {
                        let mut sum_g = T::ZERO;
                        let mut sum_gx = T::ZERO;
                        for j in 0..d {
                            dxhat[j] = dy.data()[r * d + j] * gv.data()[j];
                            sum_g += dxhat[j];
                            sum_gx += dxhat[j] * xhat[r * d + j];
                        }
                        let mean_g = sum_g * inv_d;
                        let mean_gx = sum_gx * inv_d;
                        for j in 0..d {
                            dx[r * d + j] =
                                inv_std[r] * (dxhat[j] - mean_g - xhat[r * d + j] * mean_gx);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(y.shape(), dx)?)?;
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| g * kernels::gelu_grad(v))
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape(), dx)?)?;
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(grads, *x, dy.reshape(&shape)?)?;
            }
            Op::Transpose(x) => {
                accumulate(grads, *x, dy.transpose()?)?;
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let mut dx = vec![T::ZERO; xv.numel()];
                dx[start * c..start * c + dy.numel()].copy_from_slice(dy.data());
                accumulate(grads, *x, Tensor::new(xv.shape(), dx)?)?;
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = xv.dims2()?;
                let w = dy.last_dim();
                let mut dx = vec![T::ZERO; xv.numel()];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w]
                        .copy_from_slice(&dy.data()[i * w..(i + 1) * w]);
                }
                accumulate(grads, *x, Tensor::new(xv.shape(), dx)?)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        let part = dy.data()[offset..offset + n].to_vec();
                        accumulate(grads, p, Tensor::new(self.value(p).shape(), part)?)?;
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dy.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.wants(p) {
                        let mut part = Vec::with_capacity(r * w);
                        for i in 0..r {
                            part.extend_from_slice(
                                &dy.data()[i * total + offset..i * total + offset + w],
                            );
                        }
                        accumulate(grads, p, Tensor::new(&[r, w], part)?)?;
                    }
                    offset += w;
                }
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = dy.data()[0] / T::from_f64(xv.numel() as f64);
                accumulate(grads, *x, Tensor::full(xv.shape(), g))?;
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let g = dy.data()[0];
                let mut dx: Vec<T> = probs.iter().map(|&p| p * g).collect();
                dx[*label] -= g;
                let shape = self.value(*logits).shape().to_vec();
                accumulate(grads, *logits, Tensor::new(&shape, dx)?)?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.accumulate(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Numerically stable `-log softmax(logits)[label]`.
pub fn cross_entropy_value<T: Scalar>(logits: &[T], label: usize) -> T {
    let (argmax, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, logits[0]), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    // log-sum-exp around the maximum, with the maximum's own unit term
    // folded into ln_1p so confident predictions keep full precision
    let rest = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .fold(T::ZERO, |acc, (_, &v)| acc + (v - max).exp());
    (max - logits[label]) + rest.ln_1p()
}

/// Gradients of the scalar `loss` with respect to every trainable node.
pub fn grad<T: Scalar>(tape: &Tape<'_, T>, loss: Var) -> Result<Gradients<T>> {
    tape.backward(loss)
}
