//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every tensor is two-dimensional (`rows × cols`, row-major) and lives on a
//! [`Tape`]: forward methods evaluate eagerly, record the operation, and hand
//! back an [`Id`]. Calling [`Tape::backward`] on a scalar root replays the
//! tape in reverse and accumulates gradients for every leaf created with
//! `needs_grad = true`. A tape is built per forward pass and dropped
//! afterwards; nothing is mutated in place.

use thiserror::Error;

use crate::num::scalar::Scalar;

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Id(usize);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NumError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range for bound {bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("backward requires a 1x1 root, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("cross_entropy: every position is ignored, loss undefined")]
    AllTargetsIgnored,
}

pub type Result<T> = std::result::Result<T, NumError>;

enum Op<T> {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, T),
    AddScalar(Id),
    Matmul(Id, Id),
    Transpose(Id),
    Relu(Id),
    Sigmoid(Id),
    Sqrt(Id),
    Sum(Id),
    RowSum(Id),
    SoftmaxRows(Id),
    LayerNormRows { x: Id, rstd: Vec<T> },
    RowMul { x: Id, g: Id },
    AddBias { x: Id, b: Id },
    CrossEntropy { logits: Id, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Embed { table: Id, ids: Vec<usize> },
    ConcatRows(Vec<Id>),
    ConcatCols(Vec<Id>),
    SliceCols { x: Id, start: usize },
    SliceRows { x: Id, start: usize },
    PermuteRows { x: Id, perm: Vec<usize> },
    AddConstMask(Id),
    Dropout { x: Id, keep: Vec<bool>, scale: T },
}

struct Node<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`]. Only leaves retain a slot;
/// intermediate gradients are released as soon as they have been propagated.
pub struct Grads<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the root with respect to the given leaf, or `None` if the
    /// leaf did not require gradients or no path reached the root.
    pub fn get(&self, id: Id) -> Option<&[T]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: Id) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: Id) -> &[T] {
        &self.nodes[id.0].data
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self, id: Id) -> T {
        debug_assert_eq!(self.shape(id), (1, 1));
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Id {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { rows, cols, data, op, needs_grad });
        Id(self.nodes.len() - 1)
    }

    fn grad_of(&self, id: Id) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<T>, needs_grad: bool) -> Result<Id> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(NumError::InvalidShape {
                op: "leaf",
                detail: format!("{rows}x{cols} with {} elements", data.len()),
            });
        }
        Ok(self.push(rows, cols, data, Op::Leaf, needs_grad))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Id> {
        self.leaf(rows, cols, data, false)
    }

    fn binary_same_shape(&self, op: &'static str, a: Id, b: Id) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(NumError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Result<Id> {
        let (r, c) = self.binary_same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(r, c, data, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Result<Id> {
        let (r, c) = self.binary_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(r, c, data, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Result<Id> {
        let (r, c) = self.binary_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(r, c, data, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, x: Id, c: T) -> Id {
        let (r, cl) = self.shape(x);
        let data = self.value(x).iter().map(|&v| v * c).collect();
        let g = self.grad_of(x);
        self.push(r, cl, data, Op::Scale(x, c), g)
    }

    pub fn add_scalar(&mut self, x: Id, c: T) -> Id {
        let (r, cl) = self.shape(x);
        let data = self.value(x).iter().map(|&v| v + c).collect();
        let g = self.grad_of(x);
        self.push(r, cl, data, Op::AddScalar(x), g)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Id) -> Id {
        let neg = self.scale(x, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Result<Id> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(NumError::ShapeMismatch { op: "matmul", lhs: (n, k), rhs: (k2, m) });
        }
        let mut data = vec![T::zero(); n * m];
        mm_nn(self.value(a), self.value(b), &mut data, n, k, m);
        let g = self.grad_of(a) || self.grad_of(b);
        Ok(self.push(n, m, data, Op::Matmul(a, b), g))
    }

    pub fn transpose(&mut self, x: Id) -> Id {
        let (r, c) = self.shape(x);
        let src = self.value(x);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let g = self.grad_of(x);
        self.push(c, r, data, Op::Transpose(x), g)
    }

    pub fn relu(&mut self, x: Id) -> Id {
        let (r, c) = self.shape(x);
        let data = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let g = self.grad_of(x);
        self.push(r, c, data, Op::Relu(x), g)
    }

    pub fn sigmoid(&mut self, x: Id) -> Id {
        let (r, c) = self.shape(x);
        let data = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let g = self.grad_of(x);
        self.push(r, c, data, Op::Sigmoid(x), g)
    }

    /// Elementwise square root. Inputs must be strictly positive for a finite
    /// gradient; callers add a small epsilon first.
    pub fn sqrt(&mut self, x: Id) -> Id {
        let (r, c) = self.shape(x);
        let data = self.value(x).iter().map(|&v| v.sqrt()).collect();
        let g = self.grad_of(x);
        self.push(r, c, data, Op::Sqrt(x), g)
    }

    /// Sum of all elements, as 1x1.
    pub fn sum(&mut self, x: Id) -> Id {
        let total: T = self.value(x).iter().copied().sum();
        let g = self.grad_of(x);
        self.push(1, 1, vec![total], Op::Sum(x), g)
    }

    /// Mean of all elements, as 1x1.
    pub fn mean(&mut self, x: Id) -> Id {
        let (r, c) = self.shape(x);
        let s = self.sum(x);
        self.scale(s, T::one() / T::of((r * c) as f64))
    }

    /// Per-row sum: `rows × cols` to `rows × 1`.
    pub fn row_sum(&mut self, x: Id) -> Id {
        let (r, c) = self.shape(x);
        let src = self.value(x);
        let data: Vec<T> = (0..r).map(|i| src[i * c..(i + 1) * c].iter().copied().sum()).collect();
        let g = self.grad_of(x);
        self.push(r, 1, data, Op::RowSum(x), g)
    }

    /// Numerically stable softmax along each row.
    pub fn softmax_rows(&mut self, x: Id) -> Id {
        let (r, c) = self.shape(x);
        let src = self.value(x);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let out = &mut data[i * c..(i + 1) * c];
            let mut denom = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mx).exp();
                denom += *o;
            }
            for o in out.iter_mut() {
                *o = *o / denom;
            }
        }
        let g = self.grad_of(x);
        self.push(r, c, data, Op::SoftmaxRows(x), g)
    }

    /// Per-row layer normalization without affine parameters:
    /// `(x - mean) / sqrt(var + eps)` with biased variance.
    pub fn layer_norm_rows(&mut self, x: Id, eps: T) -> Id {
        let (r, c) = self.shape(x);
        let src = self.value(x);
        let inv_c = T::one() / T::of(c as f64);
        let mut data = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean: T = row.iter().copied().sum::<T>() * inv_c;
            let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for (o, &v) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let g = self.grad_of(x);
        self.push(r, c, data, Op::LayerNormRows { x, rstd }, g)
    }

    /// Broadcast multiply: each row of `x` (`n × d`) by the row vector `g`
    /// (`1 × d`).
    pub fn row_mul(&mut self, x: Id, g: Id) -> Result<Id> {
        let (r, c) = self.shape(x);
        let sg = self.shape(g);
        if sg != (1, c) {
            return Err(NumError::ShapeMismatch { op: "row_mul", lhs: (r, c), rhs: sg });
        }
        let gv = self.value(g).to_vec();
        let data: Vec<T> = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(&gv).map(|(&v, &w)| v * w).collect::<Vec<_>>())
            .collect();
        let ng = self.grad_of(x) || self.grad_of(g);
        Ok(self.push(r, c, data, Op::RowMul { x, g }, ng))
    }

    /// Broadcast add: the row vector `b` (`1 × d`) to each row of `x`.
    pub fn add_bias(&mut self, x: Id, b: Id) -> Result<Id> {
        let (r, c) = self.shape(x);
        let sb = self.shape(b);
        if sb != (1, c) {
            return Err(NumError::ShapeMismatch { op: "add_bias", lhs: (r, c), rhs: sb });
        }
        let bv = self.value(b).to_vec();
        let data: Vec<T> = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(&bv).map(|(&v, &w)| v + w).collect::<Vec<_>>())
            .collect();
        let ng = self.grad_of(x) || self.grad_of(b);
        Ok(self.push(r, c, data, Op::AddBias { x, b }, ng))
    }

    /// Mean token-level cross entropy between `logits` (`n × V`) and integer
    /// targets; `None` positions are ignored. Returns 1x1. Errors if every
    /// position is ignored — the mean would be undefined.
    pub fn cross_entropy(&mut self, logits: Id, targets: &[Option<usize>]) -> Result<Id> {
        let (n, v) = self.shape(logits);
        if targets.len() != n {
            return Err(NumError::InvalidShape {
                op: "cross_entropy",
                detail: format!("{n} logit rows but {} targets", targets.len()),
            });
        }
        if targets.iter().all(Option::is_none) {
            return Err(NumError::AllTargetsIgnored);
        }
        let src = self.value(logits);
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        let mut count = 0usize;
        for i in 0..n {
            if let Some(t) = targets[i] {
                if t >= v {
                    return Err(NumError::IndexOutOfRange { op: "cross_entropy", index: t, bound: v });
                }
            }
            let row = &src[i * v..(i + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sumexp: T = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + sumexp.ln();
            for (o, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *o = (x - lse).exp();
            }
            if let Some(t) = targets[i] {
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = total / T::of(count as f64);
        let g = self.grad_of(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count };
        Ok(self.push(1, 1, vec![loss], op, g))
    }

    /// Row gather from an embedding table (`V × d`): output row `i` is
    /// `table[ids[i]]`.
    pub fn embed(&mut self, table: Id, ids: &[usize]) -> Result<Id> {
        let (v, d) = self.shape(table);
        if ids.is_empty() {
            return Err(NumError::InvalidShape { op: "embed", detail: "empty id list".into() });
        }
        for &id in ids {
            if id >= v {
                return Err(NumError::IndexOutOfRange { op: "embed", index: id, bound: v });
            }
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let g = self.grad_of(table);
        Ok(self.push(ids.len(), d, data, Op::Embed { table, ids: ids.to_vec() }, g))
    }

    /// Stack tensors with equal column counts, top to bottom.
    pub fn concat_rows(&mut self, parts: &[Id]) -> Result<Id> {
        let Some((&first, rest)) = parts.split_first() else {
            return Err(NumError::InvalidShape { op: "concat_rows", detail: "no inputs".into() });
        };
        let (mut rows, cols) = self.shape(first);
        for &p in rest {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(NumError::ShapeMismatch { op: "concat_rows", lhs: (rows, cols), rhs: (r, c) });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let g = parts.iter().any(|&p| self.grad_of(p));
        Ok(self.push(rows, cols, data, Op::ConcatRows(parts.to_vec()), g))
    }

    /// Place tensors with equal row counts side by side, left to right.
    pub fn concat_cols(&mut self, parts: &[Id]) -> Result<Id> {
        let Some((&first, rest)) = parts.split_first() else {
            return Err(NumError::InvalidShape { op: "concat_cols", detail: "no inputs".into() });
        };
        let (rows, mut cols) = self.shape(first);
        for &p in rest {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(NumError::ShapeMismatch { op: "concat_cols", lhs: (rows, cols), rhs: (r, c) });
            }
            cols += c;
        }
        let mut data = vec![T::zero(); rows * cols];
        let mut off = 0usize;
        for &p in parts {
            let (_, c) = self.shape(p);
            let src = self.value(p);
            for i in 0..rows {
                data[i * cols + off..i * cols + off + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let g = parts.iter().any(|&p| self.grad_of(p));
        Ok(self.push(rows, cols, data, Op::ConcatCols(parts.to_vec()), g))
    }

    /// Columns `[start, start + len)` of `x`.
    pub fn slice_cols(&mut self, x: Id, start: usize, len: usize) -> Result<Id> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > c {
            return Err(NumError::InvalidShape {
                op: "slice_cols",
                detail: format!("range {start}..{} of {c} columns", start + len),
            });
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let g = self.grad_of(x);
        Ok(self.push(r, len, data, Op::SliceCols { x, start }, g))
    }

    /// Rows `[start, start + len)` of `x`.
    pub fn slice_rows(&mut self, x: Id, start: usize, len: usize) -> Result<Id> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > r {
            return Err(NumError::InvalidShape {
                op: "slice_rows",
                detail: format!("range {start}..{} of {r} rows", start + len),
            });
        }
        let data = self.value(x)[start * c..(start + len) * c].to_vec();
        let g = self.grad_of(x);
        Ok(self.push(len, c, data, Op::SliceRows { x, start }, g))
    }

    /// Row gather: output row `i` is `x[perm[i]]`.
    pub fn permute_rows(&mut self, x: Id, perm: &[usize]) -> Result<Id> {
        let (r, c) = self.shape(x);
        if perm.is_empty() {
            return Err(NumError::InvalidShape { op: "permute_rows", detail: "empty permutation".into() });
        }
        for &p in perm {
            if p >= r {
                return Err(NumError::IndexOutOfRange { op: "permute_rows", index: p, bound: r });
            }
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(perm.len() * c);
        for &p in perm {
            data.extend_from_slice(&src[p * c..(p + 1) * c]);
        }
        let g = self.grad_of(x);
        Ok(self.push(perm.len(), c, data, Op::PermuteRows { x, perm: perm.to_vec() }, g))
    }

    /// Add a constant mask (same shape); no gradient flows into the mask.
    /// Used for additive attention masks built from 0 / -inf entries.
    pub fn add_const_mask(&mut self, x: Id, mask: &[T]) -> Result<Id> {
        let (r, c) = self.shape(x);
        if mask.len() != r * c {
            return Err(NumError::InvalidShape {
                op: "add_const_mask",
                detail: format!("mask has {} elements for {r}x{c}", mask.len()),
            });
        }
        let data = zip_map(self.value(x), mask, |a, b| a + b);
        let g = self.grad_of(x);
        Ok(self.push(r, c, data, Op::AddConstMask(x), g))
    }

    /// Inverted dropout with a caller-supplied keep mask; kept elements are
    /// scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Id, keep: Vec<bool>, p: f64) -> Result<Id> {
        let (r, c) = self.shape(x);
        if keep.len() != r * c {
            return Err(NumError::InvalidShape {
                op: "dropout",
                detail: format!("mask has {} elements for {r}x{c}", keep.len()),
            });
        }
        let scale = T::of(1.0 / (1.0 - p));
        let data = self
            .value(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { T::zero() })
            .collect();
        let g = self.grad_of(x);
        Ok(self.push(r, c, data, Op::Dropout { x, keep, scale }, g))
    }

    /// Reverse pass from a scalar root. Returns per-leaf gradients.
    pub fn backward(&self, root: Id) -> Result<Grads<T>> {
        if self.shape(root) != (1, 1) {
            return Err(NumError::NonScalarRoot(self.shape(root)));
        }
        let mut slots: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                slots[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue; // keep the slot for the caller
            }
            let Some(gout) = slots[idx].take() else { continue };
            self.propagate(idx, &gout, &mut slots);
        }
        Ok(Grads { slots })
    }

    fn propagate(&self, idx: usize, gout: &[T], slots: &mut Vec<Option<Vec<T>>>) {
        let node = &self.nodes[idx];
        let numel = |id: Id| {
            let (r, c) = self.shape(id);
            r * c
        };
        // Accumulate into an input's slot if that input participates in the
        // gradient computation at all.
        macro_rules! into {
            ($id:expr, $body:expr) => {
                if self.grad_of($id) {
                    let slot = slots[$id.0].get_or_insert_with(|| vec![T::zero(); numel($id)]);
                    #[allow(clippy::redundant_closure_call)]
                    ($body)(slot.as_mut_slice());
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                into!(*a, |g: &mut [T]| axpy(g, gout, T::one()));
                into!(*b, |g: &mut [T]| axpy(g, gout, T::one()));
            }
            Op::Sub(a, b) => {
                into!(*a, |g: &mut [T]| axpy(g, gout, T::one()));
                into!(*b, |g: &mut [T]| axpy(g, gout, -T::one()));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a), self.value(*b));
                into!(*a, |g: &mut [T]| {
                    for ((gi, &go), &bv) in g.iter_mut().zip(gout).zip(db) {
                        *gi += go * bv;
                    }
                });
                into!(*b, |g: &mut [T]| {
                    for ((gi, &go), &av) in g.iter_mut().zip(gout).zip(da) {
                        *gi += go * av;
                    }
                });
            }
            Op::Scale(x, c) => {
                into!(*x, |g: &mut [T]| axpy(g, gout, *c));
            }
            Op::AddScalar(x) | Op::AddConstMask(x) => {
                into!(*x, |g: &mut [T]| axpy(g, gout, T::one()));
            }
            Op::Matmul(a, b) => {
                let (n, k) = self.shape(*a);
                let (_, m) = self.shape(*b);
                let (da, db) = (self.value(*a), self.value(*b));
                into!(*a, |g: &mut [T]| mm_nt(gout, db, g, n, m, k));
                into!(*b, |g: &mut [T]| mm_tn(da, gout, g, n, k, m));
            }
            Op::Transpose(x) => {
                let (r, c) = self.shape(*x); // output is c x r
                into!(*x, |g: &mut [T]| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gout[j * r + i];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let dx = self.value(*x);
                into!(*x, |g: &mut [T]| {
                    for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(dx) {
                        if xv > T::zero() {
                            *gi += go;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.data;
                into!(*x, |g: &mut [T]| {
                    for ((gi, &go), &yv) in g.iter_mut().zip(gout).zip(y) {
                        *gi += go * yv * (T::one() - yv);
                    }
                });
            }
            Op::Sqrt(x) => {
                let y = &node.data;
                let half = T::of(0.5);
                into!(*x, |g: &mut [T]| {
                    for ((gi, &go), &yv) in g.iter_mut().zip(gout).zip(y) {
                        *gi += go * half / yv;
                    }
                });
            }
            Op::Sum(x) => {
                let go = gout[0];
                into!(*x, |g: &mut [T]| {
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                });
            }
            Op::RowSum(x) => {
                let (_, c) = self.shape(*x);
                into!(*x, |g: &mut [T]| {
                    for (i, row) in g.chunks_exact_mut(c).enumerate() {
                        for gi in row {
                            *gi += gout[i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (_, c) = self.shape(*x);
                let y = &node.data;
                into!(*x, |g: &mut [T]| {
                    for ((grow, yrow), gorow) in
                        g.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(gout.chunks_exact(c))
                    {
                        let dot: T = yrow.iter().zip(gorow).map(|(&yv, &go)| yv * go).sum();
                        for ((gi, &yv), &go) in grow.iter_mut().zip(yrow).zip(gorow) {
                            *gi += yv * (go - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, rstd } => {
                let (_, c) = self.shape(*x);
                let inv_c = T::one() / T::of(c as f64);
                let y = &node.data;
                into!(*x, |g: &mut [T]| {
                    for (i, ((grow, yrow), gorow)) in g
                        .chunks_exact_mut(c)
                        .zip(y.chunks_exact(c))
                        .zip(gout.chunks_exact(c))
                        .enumerate()
                    {
                        let m1: T = gorow.iter().copied().sum::<T>() * inv_c;
                        let m2: T = gorow.iter().zip(yrow).map(|(&go, &yv)| go * yv).sum::<T>() * inv_c;
                        let rs = rstd[i];
                        for ((gi, &yv), &go) in grow.iter_mut().zip(yrow).zip(gorow) {
                            *gi += rs * (go - m1 - yv * m2);
                        }
                    }
                });
            }
            Op::RowMul { x, g: gv } => {
                let (_, c) = self.shape(*x);
                let dx = self.value(*x);
                let dg = self.value(*gv);
                into!(*x, |g: &mut [T]| {
                    for (grow, gorow) in g.chunks_exact_mut(c).zip(gout.chunks_exact(c)) {
                        for ((gi, &go), &w) in grow.iter_mut().zip(gorow).zip(dg) {
                            *gi += go * w;
                        }
                    }
                });
                into!(*gv, |g: &mut [T]| {
                    for (xrow, gorow) in dx.chunks_exact(c).zip(gout.chunks_exact(c)) {
                        for ((gi, &go), &xv) in g.iter_mut().zip(gorow).zip(xrow) {
                            *gi += go * xv;
                        }
                    }
                });
            }
            Op::AddBias { x, b } => {
                let (_, c) = self.shape(*x);
                into!(*x, |g: &mut [T]| axpy(g, gout, T::one()));
                into!(*b, |g: &mut [T]| {
                    for gorow in gout.chunks_exact(c) {
                        for (gi, &go) in g.iter_mut().zip(gorow) {
                            *gi += go;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let (_, v) = self.shape(*logits);
                let inv = gout[0] / T::of(*count as f64);
                into!(*logits, |g: &mut [T]| {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let grow = &mut g[i * v..(i + 1) * v];
                        let prow = &probs[i * v..(i + 1) * v];
                        for (j, (gi, &p)) in grow.iter_mut().zip(prow).enumerate() {
                            let ind = if j == *t { T::one() } else { T::zero() };
                            *gi += inv * (p - ind);
                        }
                    }
                });
            }
            Op::Embed { table, ids } => {
                let (_, d) = self.shape(*table);
                into!(*table, |g: &mut [T]| {
                    for (i, &id) in ids.iter().enumerate() {
                        let grow = &mut g[id * d..(id + 1) * d];
                        let gorow = &gout[i * d..(i + 1) * d];
                        for (gi, &go) in grow.iter_mut().zip(gorow) {
                            *gi += go;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0usize;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    into!(p, |g: &mut [T]| axpy(g, &gout[off..off + r * c], T::one()));
                    off += r * c;
                }
            }
            Op::ConcatCols(parts) => {
                let cols = node.cols;
                let mut off = 0usize;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    into!(p, |g: &mut [T]| {
                        for i in 0..r {
                            let grow = &mut g[i * c..(i + 1) * c];
                            let gorow = &gout[i * cols + off..i * cols + off + c];
                            for (gi, &go) in grow.iter_mut().zip(gorow) {
                                *gi += go;
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (_, c) = self.shape(*x);
                let (rows, len) = (node.rows, node.cols);
                into!(*x, |g: &mut [T]| {
                    for i in 0..rows {
                        let grow = &mut g[i * c + start..i * c + start + len];
                        let gorow = &gout[i * len..(i + 1) * len];
                        for (gi, &go) in grow.iter_mut().zip(gorow) {
                            *gi += go;
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = node.cols;
                let len = node.rows;
                into!(*x, |g: &mut [T]| {
                    axpy(&mut g[start * c..(start + len) * c], &gout[..len * c], T::one())
                });
            }
            Op::PermuteRows { x, perm } => {
                let c = node.cols;
                into!(*x, |g: &mut [T]| {
                    for (i, &p) in perm.iter().enumerate() {
                        let grow = &mut g[p * c..(p + 1) * c];
                        let gorow = &gout[i * c..(i + 1) * c];
                        for (gi, &go) in grow.iter_mut().zip(gorow) {
                            *gi += go;
                        }
                    }
                });
            }
            Op::Dropout { x, keep, scale } => {
                into!(*x, |g: &mut [T]| {
                    for ((gi, &go), &k) in g.iter_mut().zip(gout).zip(keep) {
                        if k {
                            *gi += go * *scale;
                        }
                    }
                });
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    // Split on sign so the exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `dst += alpha * src`, elementwise.
fn axpy<T: Scalar>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// `out[n×m] += a[n×k] · b[k×m]`
fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n×k] += a[n×m] · bᵀ` where `b` is `k×m`.
fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let a_row = &a[i * m..(i + 1) * m];
        let o_row = &mut out[i * k..(i + 1) * k];
        for (kk, o) in o_row.iter_mut().enumerate() {
            let b_row = &b[kk * m..(kk + 1) * m];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out[k×m] += aᵀ · b` where `a` is `n×k`, `b` is `n×m`.
fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * m..(i + 1) * m];
        for (kk, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[kk * m..(kk + 1) * m];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}
