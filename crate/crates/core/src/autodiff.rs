//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every op appends one node to the [`Tape`]. Node inputs always have smaller
//! indices than the node itself, so a single reverse sweep visits each node
//! once in a valid order.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, gemm};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
        b_t: bool,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_t: bool,
        alpha: T,
    },
    Add(usize, usize),
    AddRow {
        a: usize,
        row: usize,
    },
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Gelu(usize),
    Softmax {
        a: usize,
        cols: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: usize,
        ids: Vec<Option<usize>>,
    },
    MaskedMean {
        x: usize,
        mask: Vec<bool>,
        groups: usize,
        counts: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Dropout {
        a: usize,
        scale: Vec<T>,
    },
    Reshape(usize),
    SplitHeads {
        a: usize,
        batch: usize,
        len: usize,
        heads: usize,
    },
    MergeHeads {
        a: usize,
        batch: usize,
        len: usize,
        heads: usize,
    },
}

/// Recorded computation graph plus the forward values of every node.
pub struct Tape<T: Real = f32> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires_grad: Vec<bool>,
    ops: Vec<Op<T>>,
    params: Vec<Option<ParamId>>,
    grad_enabled: bool,
    training: bool,
    rng: ChaCha8Rng,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// Gradient tracking on, dropout off.
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            requires_grad: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
            grad_enabled: true,
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Gradient tracking on, dropout active with masks drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        let mut t = Self::new();
        t.training = true;
        t.rng = ChaCha8Rng::seed_from_u64(seed);
        t
    }

    /// No gradient tracking, dropout off.
    pub fn inference() -> Self {
        let mut t = Self::new();
        t.grad_enabled = false;
        t
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let rg = self.grad_enabled && inputs.iter().any(|&i| self.requires_grad[i]);
        self.values.push(value);
        self.grads.push(None);
        self.requires_grad.push(rg);
        self.ops.push(op);
        self.params.push(None);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.requires_grad[v.0] = requires_grad && self.grad_enabled;
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf holding a copy of a stored parameter. Frozen parameters do not
    /// track gradients.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let rg = !store.is_frozen(id);
        let v = self.leaf(store.value(id).clone(), rg);
        self.params[v.0] = Some(id);
        v
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.values[a.0].shape().to_vec(),
            rhs: self.values[b.0].shape().to_vec(),
        }
    }

    fn dims2(&self, v: Var) -> Option<(usize, usize)> {
        match self.values[v.0].shape() {
            [m, n] => Some((*m, *n)),
            _ => None,
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m,k] x [n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (m, k) = self.dims2(a).ok_or_else(|| self.shape_err("matmul", a, b))?;
        let (b0, b1) = self.dims2(b).ok_or_else(|| self.shape_err("matmul", a, b))?;
        let (kb, n) = if b_t { (b1, b0) } else { (b0, b1) };
        if k != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![T::ZERO; m * n];
        gemm(
            m,
            k,
            n,
            T::ONE,
            self.values[a.0].data(),
            false,
            self.values[b.0].data(),
            b_t,
            &mut out,
            false,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
                b_t,
            },
            &[a.0, b.0],
        ))
    }

    /// Batched `alpha * [g,m,k] x [g,k,n]` (or `[g,n,k]^T` when `b_t`).
    pub fn bmm(&mut self, a: Var, b: Var, b_t: bool, alpha: T) -> Result<Var> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        let (batch, m, k, bk, n) = match (sa, sb) {
            ([g, m, k], [g2, x, y]) if g == g2 => {
                if b_t {
                    (*g, *m, *k, *y, *x)
                } else {
                    (*g, *m, *k, *x, *y)
                }
            }
            _ => return Err(self.shape_err("bmm", a, b)),
        };
        if k != bk {
            return Err(self.shape_err("bmm", a, b));
        }
        let mut out = vec![T::ZERO; batch * m * n];
        {
            let ad = self.values[a.0].data();
            let bd = self.values[b.0].data();
            for g in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    alpha,
                    &ad[g * m * k..],
                    false,
                    &bd[g * k * n..],
                    b_t,
                    &mut out[g * m * n..],
                    false,
                );
            }
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(
            value,
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                b_t,
                alpha,
            },
            &[a.0, b.0],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(self.shape_err("add", a, b));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.values[a.0].shape(), data)?;
        Ok(self.push(value, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Broadcast-add a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.values[a.0].cols();
        if self.values[row.0].len() != n {
            return Err(self.shape_err("add_row", a, row));
        }
        let mut value = self.values[a.0].clone();
        let r = self.values[row.0].data();
        for chunk in value.data_mut().chunks_mut(n) {
            for (x, &y) in chunk.iter_mut().zip(r) {
                *x += y;
            }
        }
        Ok(self.push(value, Op::AddRow { a: a.0, row: row.0 }, &[a.0, row.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.values[a.0].shape(), data)?;
        Ok(self.push(value, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let src = &self.values[a.0];
        let value = Tensor::from_fn(src.shape(), |i| src.data()[i] * c);
        self.push(value, Op::Scale(a.0, c), &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.values[a.0].data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let src = &self.values[a.0];
        let value = Tensor::from_fn(src.shape(), |i| kernels::gelu(src.data()[i]));
        self.push(value, Op::Gelu(a.0), &[a.0])
    }

    /// Softmax over the trailing dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let cols = self.values[a.0].cols();
        let mut value = self.values[a.0].clone();
        for row in value.data_mut().chunks_mut(cols) {
            kernels::softmax_in_place(row, |_| false);
        }
        self.push(value, Op::Softmax { a: a.0, cols }, &[a.0])
    }

    /// Softmax over attention scores `[batch*heads, q_len, k_len]`.
    ///
    /// `key_mask` (length `batch * k_len`, `true` = real position) and the
    /// causal flag give masked keys exactly zero weight.
    pub fn attention_softmax(
        &mut self,
        scores: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
        causal: bool,
    ) -> Result<Var> {
        let (groups, q_len, k_len) = match self.values[scores.0].shape() {
            [g, q, k] => (*g, *q, *k),
            s => {
                return Err(Error::Shape {
                    op: "attention_softmax",
                    lhs: s.to_vec(),
                    rhs: vec![heads],
                })
            }
        };
        if heads == 0 || groups % heads != 0 {
            return Err(Error::Shape {
                op: "attention_softmax",
                lhs: vec![groups, q_len, k_len],
                rhs: vec![heads],
            });
        }
        if let Some(mask) = key_mask {
            if mask.len() != (groups / heads) * k_len {
                return Err(Error::Shape {
                    op: "attention_softmax",
                    lhs: vec![groups / heads, k_len],
                    rhs: vec![mask.len()],
                });
            }
        }
        let mut value = self.values[scores.0].clone();
        for (r, row) in value.data_mut().chunks_mut(k_len).enumerate() {
            let g = r / q_len;
            let q = r % q_len;
            let b = g / heads;
            kernels::softmax_in_place(row, |k| {
                (causal && k > q) || key_mask.is_some_and(|m| !m[b * k_len + k])
            });
        }
        Ok(self.push(
            value,
            Op::Softmax {
                a: scores.0,
                cols: k_len,
            },
            &[scores.0],
        ))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.values[x.0].cols();
        if self.values[gamma.0].len() != d || self.values[beta.0].len() != d {
            return Err(self.shape_err("layer_norm", x, gamma));
        }
        let rows = self.values[x.0].rows();
        let inv_d = T::ONE / T::from_usize(d);
        let mut xhat = vec![T::ZERO; rows * d];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; rows * d];
        {
            let xd = self.values[x.0].data();
            let gd = self.values[gamma.0].data();
            let bd = self.values[beta.0].data();
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rs = T::ONE / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gd[j] + bd[j];
                }
            }
        }
        let value = Tensor::new(self.values[x.0].shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// Row lookup into a `[rows, d]` table; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let t = &self.values[table.0];
        let (nrows, d) = (t.rows(), t.cols());
        let mut out = vec![T::ZERO; ids.len() * d];
        for (i, id) in ids.iter().enumerate() {
            if let Some(r) = *id {
                if r >= nrows {
                    return Err(Error::Index {
                        context: "gather_rows",
                        index: r,
                        bound: nrows,
                    });
                }
                out[i * d..(i + 1) * d].copy_from_slice(t.row(r));
            }
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Convenience wrapper over [`Tape::gather_rows`] for dense ids.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ids: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        self.gather_rows(table, &ids)
    }

    /// Mean of the rows of `x` (`[groups*len, d]`) whose mask entry is `true`,
    /// per group of `len` consecutive rows. Returns `[groups, d]`.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool], groups: usize) -> Result<Var> {
        let (rows, d) = (self.values[x.0].rows(), self.values[x.0].cols());
        if groups == 0 || mask.len() != rows || rows % groups != 0 {
            return Err(Error::Shape {
                op: "masked_mean",
                lhs: self.values[x.0].shape().to_vec(),
                rhs: vec![mask.len(), groups],
            });
        }
        let len = rows / groups;
        let mut counts = vec![0usize; groups];
        let mut out = vec![T::ZERO; groups * d];
        let xd = self.values[x.0].data();
        for g in 0..groups {
            let acc = &mut out[g * d..(g + 1) * d];
            for t in 0..len {
                let r = g * len + t;
                if mask[r] {
                    counts[g] += 1;
                    acc.iter_mut().zip(&xd[r * d..(r + 1) * d]).for_each(|(a, &v)| *a += v);
                }
            }
            if counts[g] == 0 {
                return Err(Error::EmptyPool);
            }
            let inv = T::ONE / T::from_usize(counts[g]);
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        let value = Tensor::new(&[groups, d], out)?;
        Ok(self.push(
            value,
            Op::MaskedMean {
                x: x.0,
                mask: mask.to_vec(),
                groups,
                counts,
            },
            &[x.0],
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, n) = self.dims2(logits).ok_or(Error::Shape {
            op: "cross_entropy",
            lhs: self.values[logits.0].shape().to_vec(),
            rhs: vec![targets.len()],
        })?;
        if targets.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![b, n],
                rhs: vec![targets.len()],
            });
        }
        let ld = self.values[logits.0].data();
        let mut probs = ld.to_vec();
        let mut loss = T::ZERO;
        for (r, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::Index {
                    context: "cross_entropy target",
                    index: t,
                    bound: n,
                });
            }
            let row = &ld[r * n..(r + 1) * n];
            loss += kernels::log_sum_exp(row) - row[t];
            kernels::softmax_in_place(&mut probs[r * n..(r + 1) * n], |_| false);
        }
        loss /= T::from_usize(b);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            &[logits.0],
        ))
    }

    /// Inverted dropout; identity outside training mode or at `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return a;
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let n = self.values[a.0].len();
        let scale: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { T::ZERO } else { keep })
            .collect();
        let src = &self.values[a.0];
        let value = Tensor::from_fn(src.shape(), |i| src.data()[i] * scale[i]);
        self.push(value, Op::Dropout { a: a.0, scale }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.values[a.0].clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a.0), &[a.0]))
    }

    /// `[batch*len, heads*dh] -> [batch*heads, len, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let src = &self.values[a.0];
        let d = src.cols();
        if heads == 0 || !d.is_multiple_of(heads) || src.rows() != batch * len {
            return Err(Error::Shape {
                op: "split_heads",
                lhs: src.shape().to_vec(),
                rhs: vec![batch, len, heads],
            });
        }
        let dh = d / heads;
        let sd = src.data();
        let mut out = vec![T::ZERO; sd.len()];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let s = (b * len + t) * d + h * dh;
                    let o = ((b * heads + h) * len + t) * dh;
                    out[o..o + dh].copy_from_slice(&sd[s..s + dh]);
                }
            }
        }
        let value = Tensor::new(&[batch * heads, len, dh], out)?;
        Ok(self.push(
            value,
            Op::SplitHeads {
                a: a.0,
                batch,
                len,
                heads,
            },
            &[a.0],
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let src = &self.values[a.0];
        let dh = src.cols();
        if src.len() != batch * len * heads * dh {
            return Err(Error::Shape {
                op: "merge_heads",
                lhs: src.shape().to_vec(),
                rhs: vec![batch, len, heads],
            });
        }
        let d = heads * dh;
        let sd = src.data();
        let mut out = vec![T::ZERO; sd.len()];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let o = (b * len + t) * d + h * dh;
                    let s = ((b * heads + h) * len + t) * dh;
                    out[o..o + dh].copy_from_slice(&sd[s..s + dh]);
                }
            }
        }
        let value = Tensor::new(&[batch * len, d], out)?;
        Ok(self.push(
            value,
            Op::MergeHeads {
                a: a.0,
                batch,
                len,
                heads,
            },
            &[a.0],
        ))
    }

    fn grad_slot<'g>(grads: &'g mut [Option<Vec<T>>], values: &[Tensor<T>], i: usize) -> &'g mut Vec<T> {
        grads[i].get_or_insert_with(|| vec![T::ZERO; values[i].len()])
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients are kept; the
    /// gradients of intermediate nodes are released as the sweep passes them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::NotScalar(self.values[loss.0].shape().to_vec()));
        }
        if !self.requires_grad[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) || !self.requires_grad[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[T]) {
        let rg = &self.requires_grad;
        let values = &self.values;
        let grads = &mut self.grads;
        match &self.ops[i] {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, b_t } => {
                if rg[a] {
                    let da = Self::grad_slot(grads, values, a);
                    // dA = g . op(B)^T
                    gemm(m, n, k, T::ONE, g, false, values[b].data(), !b_t, da, true);
                }
                if rg[b] {
                    let db = Self::grad_slot(grads, values, b);
                    if b_t {
                        // B is [n,k]: dB = g^T . A
                        gemm(n, m, k, T::ONE, g, true, values[a].data(), false, db, true);
                    } else {
                        // dB = A^T . g
                        gemm(k, m, n, T::ONE, values[a].data(), true, g, false, db, true);
                    }
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_t,
                alpha,
            } => {
                if rg[a] {
                    let da = Self::grad_slot(grads, values, a);
                    let bd = values[b].data();
                    for q in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            alpha,
                            &g[q * m * n..],
                            false,
                            &bd[q * k * n..],
                            !b_t,
                            &mut da[q * m * k..],
                            true,
                        );
                    }
                }
                if rg[b] {
                    let db = Self::grad_slot(grads, values, b);
                    let ad = values[a].data();
                    for q in 0..batch {
                        if b_t {
                            gemm(
                                n,
                                m,
                                k,
                                alpha,
                                &g[q * m * n..],
                                true,
                                &ad[q * m * k..],
                                false,
                                &mut db[q * k * n..],
                                true,
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                alpha,
                                &ad[q * m * k..],
                                true,
                                &g[q * m * n..],
                                false,
                                &mut db[q * k * n..],
                                true,
                            );
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if rg[x] {
                        let dx = Self::grad_slot(grads, values, x);
                        dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            &Op::AddRow { a, row } => {
                if rg[a] {
                    let da = Self::grad_slot(grads, values, a);
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if rg[row] {
                    let n = values[row].len();
                    let dr = Self::grad_slot(grads, values, row);
                    for chunk in g.chunks(n) {
                        dr.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if rg[a] {
                    let bd = values[b].data();
                    let da = Self::grad_slot(grads, values, a);
                    for ((d, &v), &y) in da.iter_mut().zip(g).zip(bd) {
                        *d += v * y;
                    }
                }
                if rg[b] {
                    let ad = values[a].data();
                    let db = Self::grad_slot(grads, values, b);
                    for ((d, &v), &x) in db.iter_mut().zip(g).zip(ad) {
                        *d += v * x;
                    }
                }
            }
            &Op::Scale(a, c) => {
                if rg[a] {
                    let da = Self::grad_slot(grads, values, a);
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v * c);
                }
            }
            &Op::Sum(a) => {
                if rg[a] {
                    let da = Self::grad_slot(grads, values, a);
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Gelu(a) => {
                if rg[a] {
                    let ad = values[a].data();
                    let da = Self::grad_slot(grads, values, a);
                    for ((d, &v), &x) in da.iter_mut().zip(g).zip(ad) {
                        *d += v * kernels::gelu_grad(x);
                    }
                }
            }
            &Op::Softmax { a, cols } => {
                if rg[a] {
                    let p = values[i].data();
                    let da = Self::grad_slot(grads, values, a);
                    for ((dr, gr), pr) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(p.chunks(cols)) {
                        let dot: T = gr.iter().zip(pr).map(|(&x, &y)| x * y).sum();
                        for ((d, &gv), &pv) in dr.iter_mut().zip(gr).zip(pr) {
                            *d += pv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = values[gamma].len();
                if rg[gamma] {
                    let dg = Self::grad_slot(grads, values, gamma);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((acc, &gv), &hv) in dg.iter_mut().zip(gr).zip(hr) {
                            *acc += gv * hv;
                        }
                    }
                }
                if rg[beta] {
                    let db = Self::grad_slot(grads, values, beta);
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(acc, &gv)| *acc += gv);
                    }
                }
                if rg[x] {
                    let gam = values[gamma].data().to_vec();
                    let inv_d = T::ONE / T::from_usize(d);
                    let dx = Self::grad_slot(grads, values, x);
                    let mut dxhat = vec![T::ZERO; d];
                    for (r, ((dr, gr), hr)) in dx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = T::ZERO;
                        let mut mean_dh_h = T::ZERO;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                            mean_dh += dxhat[j];
                            mean_dh_h += dxhat[j] * hr[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        let rs = rstd[r];
                        for j in 0..d {
                            dr[j] += rs * (dxhat[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let table = *table;
                if rg[table] {
                    let d = values[table].cols();
                    let dt = Self::grad_slot(grads, values, table);
                    for (k, id) in ids.iter().enumerate() {
                        if let Some(r) = *id {
                            dt[r * d..(r + 1) * d]
                                .iter_mut()
                                .zip(&g[k * d..(k + 1) * d])
                                .for_each(|(acc, &v)| *acc += v);
                        }
                    }
                }
            }
            Op::MaskedMean {
                x,
                mask,
                groups,
                counts,
            } => {
                let x = *x;
                if rg[x] {
                    let d = values[x].cols();
                    let len = mask.len() / groups;
                    let dx = Self::grad_slot(grads, values, x);
                    for (r, &on) in mask.iter().enumerate() {
                        if on {
                            let grp = r / len;
                            let inv = T::ONE / T::from_usize(counts[grp]);
                            dx[r * d..(r + 1) * d]
                                .iter_mut()
                                .zip(&g[grp * d..(grp + 1) * d])
                                .for_each(|(acc, &v)| *acc += v * inv);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let logits = *logits;
                if rg[logits] {
                    let b = targets.len();
                    let n = probs.len() / b;
                    let coef = g[0] / T::from_usize(b);
                    let dl = Self::grad_slot(grads, values, logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let y = if j == t { T::ONE } else { T::ZERO };
                            dl[r * n + j] += coef * (probs[r * n + j] - y);
                        }
                    }
                }
            }
            Op::Dropout { a, scale } => {
                let a = *a;
                if rg[a] {
                    let da = Self::grad_slot(grads, values, a);
                    for ((d, &v), &s) in da.iter_mut().zip(g).zip(scale) {
                        *d += v * s;
                    }
                }
            }
            &Op::Reshape(a) => {
                if rg[a] {
                    let da = Self::grad_slot(grads, values, a);
                    da.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            &Op::SplitHeads { a, batch, len, heads } => {
                if rg[a] {
                    let d = values[a].cols();
                    let dh = d / heads;
                    let da = Self::grad_slot(grads, values, a);
                    for b in 0..batch {
                        for t in 0..len {
                            for h in 0..heads {
                                let s = (b * len + t) * d + h * dh;
                                let o = ((b * heads + h) * len + t) * dh;
                                da[s..s + dh]
                                    .iter_mut()
                                    .zip(&g[o..o + dh])
                                    .for_each(|(acc, &v)| *acc += v);
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads { a, batch, len, heads } => {
                if rg[a] {
                    let dh = values[a].cols();
                    let d = heads * dh;
                    let da = Self::grad_slot(grads, values, a);
                    for b in 0..batch {
                        for t in 0..len {
                            for h in 0..heads {
                                let o = (b * len + t) * d + h * dh;
                                let s = ((b * heads + h) * len + t) * dh;
                                da[s..s + dh]
                                    .iter_mut()
                                    .zip(&g[o..o + dh])
                                    .for_each(|(acc, &v)| *acc += v);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Add the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (i, p) in self.params.iter().enumerate() {
            if let (Some(id), Some(g)) = (p, &self.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
    }
}

/// Standalone inverted dropout over a tensor, deterministic in `seed`.
pub fn dropout_apply<T: Real>(x: &Tensor<T>, rate: f64, seed: u64, training: bool) -> Tensor<T> {
    if !training || rate <= 0.0 {
        return x.clone();
    }
    let mut tape = Tape::training(seed);
    let v = tape.constant(x.clone());
    let out = tape.dropout(v, rate);
    tape.value(out).clone()
}
