//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Big enough for small MLPs, nothing more: the primitive set is
//! `{add, sub, mul, div, matmul, sum, mean, square, sqrt, exp, log,
//! tanh, sin, cos, broadcast, slice, concat}`. Broadcasting is limited
//! to scalar operands and a `[rows, n] (+) [n]` leading-batch case so
//! shape errors stay local.
//!
//! The same tape serves two consumers: parameter gradients for training
//! (`grad`) and vector-Jacobian products with respect to an input leaf
//! (`vjp`), which the divergence estimator in the likelihood path needs.
//!
//! Tensors are immutable values and safe to share across threads; a
//! `Tape` stays on the thread that built it.

use crate::error::{AuditError, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor of rank 1 or 2. Scalars are `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    /// Construct from shape and flat data, validating the size invariant
    /// and that every stored value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.is_empty() {
            return Err(AuditError::Contract(format!(
                "tensor shape {:?} does not hold {} elements",
                shape,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AuditError::Contract(
                "tensor constructed with non-finite values".into(),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: F) -> Self {
        Tensor::from_parts(vec![1], vec![v])
    }

    pub fn vector(data: Vec<F>) -> Self {
        Tensor::from_parts(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![F::zero(); numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<F> {
        if !self.is_scalar() {
            return Err(AuditError::Contract(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Row `i` of a rank-2 tensor as a vector.
    pub fn row(&self, i: usize) -> Result<Tensor<F>> {
        if self.shape.len() != 2 || i >= self.shape[0] {
            return Err(AuditError::Contract(format!(
                "row {} of tensor with shape {:?}",
                i, self.shape
            )));
        }
        let cols = self.shape[1];
        Ok(Tensor::vector(self.data[i * cols..(i + 1) * cols].to_vec()))
    }

    /// Stack equal-length vectors into a rank-2 tensor.
    pub fn from_rows(rows: &[Tensor<F>]) -> Result<Tensor<F>> {
        if rows.is_empty() {
            return Err(AuditError::Contract("from_rows on empty slice".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(AuditError::shape("from_rows", &[cols], r.shape()));
            }
            data.extend_from_slice(r.data());
        }
        Ok(Tensor::from_parts(vec![rows.len(), cols], data))
    }

    pub fn map(&self, mut f: impl FnMut(F) -> F) -> Tensor<F> {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor<F>, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        if self.shape != other.shape {
            return Err(AuditError::shape(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn scale(&self, s: F) -> Tensor<F> {
        self.map(|v| v * s)
    }

    /// `self + s * other`, elementwise.
    pub fn add_scaled(&self, other: &Tensor<F>, s: F) -> Result<Tensor<F>> {
        self.zip_map(other, "add_scaled", |a, b| a + s * b)
    }

    pub fn l2_norm(&self) -> F {
        crate::scalar::l2_norm(&self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Compute kernels, shared by tape execution and the tapeless fast path.
// ---------------------------------------------------------------------------

/// `out[r, c] = a[r, k] @ b[k, c]`, row-major.
pub(crate) fn matmul_kernel<F: Scalar>(a: &[F], b: &[F], r: usize, k: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); r * c];
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * c..(kk + 1) * c];
            for (o, &bkj) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + aik * bkj;
            }
        }
    }
    out
}

/// `x[rows, n] + bias[n]` broadcast over rows.
pub(crate) fn add_row_kernel<F: Scalar>(x: &[F], bias: &[F], rows: usize) -> Vec<F> {
    let n = bias.len();
    let mut out = Vec::with_capacity(rows * n);
    for i in 0..rows {
        for j in 0..n {
            out.push(x[i * n + j] + bias[j]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// How a binary elementwise op's operands line up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Align {
    Same,
    LhsScalar,
    RhsScalar,
    /// lhs is `[rows, n]`, rhs is `[n]`.
    RhsRow,
    /// lhs is `[n]`, rhs is `[rows, n]`.
    LhsRow,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var, Align),
    Sub(Var, Var, Align),
    Mul(Var, Var, Align),
    Div(Var, Var, Align),
    Matmul(Var, Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    Broadcast(Var),
    Slice { src: Var, start: usize, end: usize, cols: bool },
    Concat(Var, Var, bool),
}

struct Node<F> {
    op: Op,
    value: Tensor<F>,
}

/// Ordered record of primitive applications; parents always precede children.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    leaves: Vec<Var>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), leaves: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor<F>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Register a differentiation target; `grad` reports one gradient per
    /// tracked leaf, in registration order.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        let v = self.push(Op::Leaf, value);
        self.leaves.push(v);
        v
    }

    /// Register a value that participates in the graph but gets no gradient slot.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    fn align(&self, op: &'static str, a: Var, b: Var) -> Result<(Align, Vec<usize>)> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return Ok((Align::Same, sa.to_vec()));
        }
        if self.value(b).is_scalar() {
            return Ok((Align::RhsScalar, sa.to_vec()));
        }
        if self.value(a).is_scalar() {
            return Ok((Align::LhsScalar, sb.to_vec()));
        }
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            return Ok((Align::RhsRow, sa.to_vec()));
        }
        if sb.len() == 2 && sa.len() == 1 && sb[1] == sa[0] {
            return Ok((Align::LhsRow, sb.to_vec()));
        }
        Err(AuditError::shape(op, sa, sb))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        make: impl Fn(Var, Var, Align) -> Op,
    ) -> Result<Var> {
        let (align, out_shape) = self.align(op_name, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<F> = match align {
            Align::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Align::RhsScalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Align::LhsScalar => db.iter().map(|&y| f(da[0], y)).collect(),
            Align::RhsRow => {
                let n = db.len();
                da.iter().enumerate().map(|(i, &x)| f(x, db[i % n])).collect()
            }
            Align::LhsRow => {
                let n = da.len();
                db.iter().enumerate().map(|(i, &y)| f(da[i % n], y)).collect()
            }
        };
        Ok(self.push(make(a, b, align), Tensor::from_parts(out_shape, data)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// Matrix product; accepts `[r,k]@[k,c]`, `[r,k]@[k]` and `[k]@[k,c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let (r, k, c, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (2, 1) if sa[1] == sb[0] => (sa[0], sa[1], 1, vec![sa[0]]),
            (1, 2) if sa[0] == sb[0] => (1, sa[0], sb[1], vec![sb[1]]),
            _ => return Err(AuditError::shape("matmul", &sa, &sb)),
        };
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), r, k, c);
        Ok(self.push(Op::Matmul(a, b), Tensor::from_parts(out_shape, data)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = crate::scalar::sum(self.value(a).data());
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::from_usize(self.value(a).len()).expect("usize fits scalar");
        let s = crate::scalar::sum(self.value(a).data()) / n;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, make: impl Fn(Var) -> Op) -> Var {
        let value = self.value(a).map(f);
        self.push(make(a), value)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sin(), Op::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.cos(), Op::Cos)
    }

    /// Materialize `[1] -> shape` or `[n] -> [rows, n]`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let data: Vec<F> = if src.is_scalar() {
            vec![src.data()[0]; shape.iter().product()]
        } else if src.shape().len() == 1 && shape.len() == 2 && shape[1] == src.len() {
            src.data().iter().copied().cycle().take(shape[0] * shape[1]).collect()
        } else {
            return Err(AuditError::shape("broadcast", src.shape(), shape));
        };
        Ok(self.push(Op::Broadcast(a), Tensor::from_parts(shape.to_vec(), data)))
    }

    /// Contiguous range of a vector: `src[start..end]`.
    pub fn slice(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.value(src);
        if s.shape().len() != 1 || start >= end || end > s.len() {
            return Err(AuditError::Contract(format!(
                "slice [{start}..{end}] of shape {:?}",
                s.shape()
            )));
        }
        let data = s.data()[start..end].to_vec();
        Ok(self.push(Op::Slice { src, start, end, cols: false }, Tensor::vector(data)))
    }

    /// Column range of a matrix: `src[:, start..end]`.
    pub fn slice_cols(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.value(src);
        if s.shape().len() != 2 || start >= end || end > s.shape()[1] {
            return Err(AuditError::Contract(format!(
                "slice_cols [{start}..{end}] of shape {:?}",
                s.shape()
            )));
        }
        let (rows, cols) = (s.shape()[0], s.shape()[1]);
        let mut data = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            data.extend_from_slice(&s.data()[i * cols + start..i * cols + end]);
        }
        let shape = vec![rows, end - start];
        Ok(self.push(Op::Slice { src, start, end, cols: true }, Tensor::from_parts(shape, data)))
    }

    /// Concatenate two vectors, or two matrices along columns.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        match (sa.len(), sb.len()) {
            (1, 1) => {
                let mut data = self.value(a).data().to_vec();
                data.extend_from_slice(self.value(b).data());
                Ok(self.push(Op::Concat(a, b, false), Tensor::vector(data)))
            }
            (2, 2) if sa[0] == sb[0] => {
                let rows = sa[0];
                let (ca, cb) = (sa[1], sb[1]);
                let mut data = Vec::with_capacity(rows * (ca + cb));
                for i in 0..rows {
                    data.extend_from_slice(&self.value(a).data()[i * ca..(i + 1) * ca]);
                    data.extend_from_slice(&self.value(b).data()[i * cb..(i + 1) * cb]);
                }
                Ok(self.push(Op::Concat(a, b, true), Tensor::from_parts(vec![rows, ca + cb], data)))
            }
            _ => Err(AuditError::shape("concat", &sa, &sb)),
        }
    }

    // -- reverse pass -------------------------------------------------------

    /// Reduce an out-shaped adjoint back to an operand's shape.
    fn reduce_adjoint(&self, adj: &Tensor<F>, operand: Var, align: Align, is_lhs: bool) -> Tensor<F> {
        let target = self.value(operand).shape();
        let collapse = match (align, is_lhs) {
            (Align::Same, _) => return adj.clone(),
            (Align::LhsScalar, true) | (Align::RhsScalar, false) => true,
            (Align::RhsScalar, true) | (Align::LhsScalar, false) => return adj.clone(),
            (Align::LhsRow, true) | (Align::RhsRow, false) => false,
            (Align::RhsRow, true) | (Align::LhsRow, false) => return adj.clone(),
        };
        if collapse {
            Tensor::scalar(crate::scalar::sum(adj.data()))
        } else {
            // column-sum of a [rows, n] adjoint down to [n]
            let n = target[0];
            let mut out = vec![F::zero(); n];
            for (i, &v) in adj.data().iter().enumerate() {
                out[i % n] = out[i % n] + v;
            }
            Tensor::vector(out)
        }
    }

    /// Elementwise-expand an operand to the output shape of a binary op.
    fn expand_operand(&self, operand: Var, align: Align, is_lhs: bool, out_len: usize) -> Vec<F> {
        let src = self.value(operand).data();
        let broadcasts = matches!(
            (align, is_lhs),
            (Align::LhsScalar, true)
                | (Align::RhsScalar, false)
                | (Align::LhsRow, true)
                | (Align::RhsRow, false)
        );
        if !broadcasts {
            return src.to_vec();
        }
        if src.len() == 1 {
            vec![src[0]; out_len]
        } else {
            src.iter().copied().cycle().take(out_len).collect()
        }
    }

    fn accumulate(slot: &mut Option<Tensor<F>>, delta: Tensor<F>) {
        match slot {
            Some(existing) => {
                let sum = existing
                    .zip_map(&delta, "adjoint", |a, b| a + b)
                    .expect("adjoint shapes agree by construction");
                *existing = sum;
            }
            None => *slot = Some(delta),
        }
    }

    /// Reverse sweep from `seed_node` with adjoint `seed`, returning one
    /// adjoint slot per node.
    fn backward(&self, seed_node: Var, seed: Tensor<F>) -> Vec<Option<Tensor<F>>> {
        let mut adj: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[seed_node.0] = Some(seed);

        for idx in (0..=seed_node.0).rev() {
            let d_out = match adj[idx].take() {
                Some(d) => d,
                None => continue,
            };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {
                    adj[idx] = Some(d_out);
                    continue;
                }
                Op::Add(a, b, al) => {
                    let da = self.reduce_adjoint(&d_out, a, al, true);
                    let db = self.reduce_adjoint(&d_out, b, al, false);
                    Self::accumulate(&mut adj[a.0], da);
                    Self::accumulate(&mut adj[b.0], db);
                }
                Op::Sub(a, b, al) => {
                    let da = self.reduce_adjoint(&d_out, a, al, true);
                    let db = self.reduce_adjoint(&d_out.map(|v| -v), b, al, false);
                    Self::accumulate(&mut adj[a.0], da);
                    Self::accumulate(&mut adj[b.0], db);
                }
                Op::Mul(a, b, al) => {
                    let bexp = self.expand_operand(b, al, false, d_out.len());
                    let aexp = self.expand_operand(a, al, true, d_out.len());
                    let da_full = Tensor::from_parts(
                        d_out.shape().to_vec(),
                        d_out.data().iter().zip(&bexp).map(|(&g, &y)| g * y).collect(),
                    );
                    let db_full = Tensor::from_parts(
                        d_out.shape().to_vec(),
                        d_out.data().iter().zip(&aexp).map(|(&g, &x)| g * x).collect(),
                    );
                    Self::accumulate(&mut adj[a.0], self.reduce_adjoint(&da_full, a, al, true));
                    Self::accumulate(&mut adj[b.0], self.reduce_adjoint(&db_full, b, al, false));
                }
                Op::Div(a, b, al) => {
                    // out = a / b:  d a = g / b ;  d b = -g * out / b
                    let bexp = self.expand_operand(b, al, false, d_out.len());
                    let out = node.value.data();
                    let da_full = Tensor::from_parts(
                        d_out.shape().to_vec(),
                        d_out.data().iter().zip(&bexp).map(|(&g, &y)| g / y).collect(),
                    );
                    let db_full = Tensor::from_parts(
                        d_out.shape().to_vec(),
                        d_out
                            .data()
                            .iter()
                            .zip(out.iter().zip(&bexp))
                            .map(|(&g, (&o, &y))| -g * o / y)
                            .collect(),
                    );
                    Self::accumulate(&mut adj[a.0], self.reduce_adjoint(&da_full, a, al, true));
                    Self::accumulate(&mut adj[b.0], self.reduce_adjoint(&db_full, b, al, false));
                }
                Op::Matmul(a, b) => {
                    let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
                    let (r, k, c) = match (sa.len(), sb.len()) {
                        (2, 2) => (sa[0], sa[1], sb[1]),
                        (2, 1) => (sa[0], sa[1], 1),
                        (1, 2) => (1, sa[0], sb[1]),
                        _ => unreachable!("validated at record time"),
                    };
                    let (av, bv, g) = (self.value(a).data(), self.value(b).data(), d_out.data());
                    // dA[i,kk] = sum_j g[i,j] * B[kk,j]
                    let mut da = vec![F::zero(); r * k];
                    for i in 0..r {
                        for kk in 0..k {
                            let mut acc = F::zero();
                            for j in 0..c {
                                acc = acc + g[i * c + j] * bv[kk * c + j];
                            }
                            da[i * k + kk] = acc;
                        }
                    }
                    // dB[kk,j] = sum_i A[i,kk] * g[i,j]
                    let mut db = vec![F::zero(); k * c];
                    for i in 0..r {
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            for j in 0..c {
                                db[kk * c + j] = db[kk * c + j] + aik * g[i * c + j];
                            }
                        }
                    }
                    Self::accumulate(&mut adj[a.0], Tensor::from_parts(sa.to_vec(), da));
                    Self::accumulate(&mut adj[b.0], Tensor::from_parts(sb.to_vec(), db));
                }
                Op::Sum(a) => {
                    let g = d_out.data()[0];
                    let src = self.value(a);
                    Self::accumulate(
                        &mut adj[a.0],
                        Tensor::from_parts(src.shape().to_vec(), vec![g; src.len()]),
                    );
                }
                Op::Mean(a) => {
                    let src = self.value(a);
                    let n = F::from_usize(src.len()).expect("usize fits scalar");
                    let g = d_out.data()[0] / n;
                    Self::accumulate(
                        &mut adj[a.0],
                        Tensor::from_parts(src.shape().to_vec(), vec![g; src.len()]),
                    );
                }
                Op::Square(a) => {
                    let two = F::lit(2.0);
                    let x = self.value(a);
                    let da = Tensor::from_parts(
                        x.shape().to_vec(),
                        x.data().iter().zip(d_out.data()).map(|(&v, &g)| two * v * g).collect(),
                    );
                    Self::accumulate(&mut adj[a.0], da);
                }
                Op::Sqrt(a) => {
                    let half = F::lit(0.5);
                    let out = node.value.data();
                    let da = Tensor::from_parts(
                        d_out.shape().to_vec(),
                        out.iter().zip(d_out.data()).map(|(&o, &g)| half * g / o).collect(),
                    );
                    Self::accumulate(&mut adj[a.0], da);
                }
                Op::Exp(a) => {
                    let out = node.value.data();
                    let da = Tensor::from_parts(
                        d_out.shape().to_vec(),
                        out.iter().zip(d_out.data()).map(|(&o, &g)| o * g).collect(),
                    );
                    Self::accumulate(&mut adj[a.0], da);
                }
                Op::Log(a) => {
                    let x = self.value(a);
                    let da = Tensor::from_parts(
                        x.shape().to_vec(),
                        x.data().iter().zip(d_out.data()).map(|(&v, &g)| g / v).collect(),
                    );
                    Self::accumulate(&mut adj[a.0], da);
                }
                Op::Tanh(a) => {
                    let out = node.value.data();
                    let da = Tensor::from_parts(
                        d_out.shape().to_vec(),
                        out.iter()
                            .zip(d_out.data())
                            .map(|(&o, &g)| g * (F::one() - o * o))
                            .collect(),
                    );
                    Self::accumulate(&mut adj[a.0], da);
                }
                Op::Sin(a) => {
                    let x = self.value(a);
                    let da = Tensor::from_parts(
                        x.shape().to_vec(),
                        x.data().iter().zip(d_out.data()).map(|(&v, &g)| g * v.cos()).collect(),
                    );
                    Self::accumulate(&mut adj[a.0], da);
                }
                Op::Cos(a) => {
                    let x = self.value(a);
                    let da = Tensor::from_parts(
                        x.shape().to_vec(),
                        x.data().iter().zip(d_out.data()).map(|(&v, &g)| -g * v.sin()).collect(),
                    );
                    Self::accumulate(&mut adj[a.0], da);
                }
                Op::Broadcast(a) => {
                    let src = self.value(a);
                    let da = if src.is_scalar() {
                        Tensor::scalar(crate::scalar::sum(d_out.data()))
                    } else {
                        let n = src.len();
                        let mut out = vec![F::zero(); n];
                        for (i, &v) in d_out.data().iter().enumerate() {
                            out[i % n] = out[i % n] + v;
                        }
                        Tensor::vector(out)
                    };
                    Self::accumulate(&mut adj[a.0], da);
                }
                Op::Slice { src, start, end, cols } => {
                    let s = self.value(src);
                    let mut out = vec![F::zero(); s.len()];
                    if cols {
                        let (rows, width) = (s.shape()[0], s.shape()[1]);
                        let w = end - start;
                        for i in 0..rows {
                            for j in 0..w {
                                out[i * width + start + j] = d_out.data()[i * w + j];
                            }
                        }
                    } else {
                        out[start..end].copy_from_slice(d_out.data());
                    }
                    Self::accumulate(&mut adj[src.0], Tensor::from_parts(s.shape().to_vec(), out));
                }
                Op::Concat(a, b, cols) => {
                    let (sa, sb) = (self.value(a), self.value(b));
                    if cols {
                        let rows = sa.shape()[0];
                        let (ca, cb) = (sa.shape()[1], sb.shape()[1]);
                        let mut da = vec![F::zero(); rows * ca];
                        let mut db = vec![F::zero(); rows * cb];
                        for i in 0..rows {
                            let g = &d_out.data()[i * (ca + cb)..(i + 1) * (ca + cb)];
                            da[i * ca..(i + 1) * ca].copy_from_slice(&g[..ca]);
                            db[i * cb..(i + 1) * cb].copy_from_slice(&g[ca..]);
                        }
                        Self::accumulate(&mut adj[a.0], Tensor::from_parts(sa.shape().to_vec(), da));
                        Self::accumulate(&mut adj[b.0], Tensor::from_parts(sb.shape().to_vec(), db));
                    } else {
                        let na = sa.len();
                        Self::accumulate(&mut adj[a.0], Tensor::vector(d_out.data()[..na].to_vec()));
                        Self::accumulate(&mut adj[b.0], Tensor::vector(d_out.data()[na..].to_vec()));
                    }
                }
            }
        }
        adj
    }

    /// Gradient of a scalar root with respect to every tracked leaf.
    /// Leaves off the path to the root get zero gradients.
    pub fn grad(&self, root: Var) -> Result<Vec<Tensor<F>>> {
        if !self.value(root).is_scalar() {
            return Err(AuditError::Contract(format!(
                "grad root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let adj = self.backward(root, Tensor::scalar(F::one()));
        Ok(self
            .leaves
            .iter()
            .map(|&leaf| {
                adj[leaf.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(leaf).shape()))
            })
            .collect())
    }

    /// `cotangent^T (d output / d wrt)` for one designated leaf.
    pub fn vjp(&self, output: Var, cotangent: &Tensor<F>, wrt: Var) -> Result<Tensor<F>> {
        if cotangent.shape() != self.value(output).shape() {
            return Err(AuditError::shape(
                "vjp",
                cotangent.shape(),
                self.value(output).shape(),
            ));
        }
        if !matches!(self.nodes[wrt.0].op, Op::Leaf) {
            return Err(AuditError::Contract("vjp target must be a leaf".into()));
        }
        let adj = self.backward(output, cotangent.clone());
        Ok(adj[wrt.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value(wrt).shape())))
    }
}

/// Run a graph builder over fresh leaves, returning the root value, the tape,
/// and the root handle for `grad`/`vjp`.
pub fn forward<F, B>(leaves: Vec<Tensor<F>>, builder: B) -> Result<(Tensor<F>, Tape<F>, Var)>
where
    F: Scalar,
    B: FnOnce(&mut Tape<F>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.into_iter().map(|t| tape.leaf(t)).collect();
    let root = builder(&mut tape, &vars)?;
    Ok((tape.value(root).clone(), tape, root))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type T = Tensor<f64>;

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut hi = x.to_vec();
        let mut lo = x.to_vec();
        hi[i] += h;
        lo[i] -= h;
        (f(&hi) - f(&lo)) / (2.0 * h)
    }

    #[test]
    fn forward_square() {
        let (v, _, _) = forward(vec![T::vector(vec![2.0])], |t, l| {
            t.mul(l[0], l[0])
        })
        .unwrap();
        assert_eq!(v.data(), &[4.0]);
    }

    #[test]
    fn forward_exp_at_zero() {
        let (v, _, _) = forward(vec![T::vector(vec![0.0])], |t, l| Ok(t.exp(l[0]))).unwrap();
        assert_eq!(v.data(), &[1.0]);
    }

    #[test]
    fn forward_identity_matmul() {
        let a = T::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = T::vector(vec![3.0, 4.0]);
        let (v, _, _) = forward(vec![a, b], |t, l| t.matmul(l[0], l[1])).unwrap();
        assert_eq!(v.data(), &[3.0, 4.0]);
    }

    #[test]
    fn shape_error_names_operation() {
        let a = T::vector(vec![1.0, 2.0]);
        let b = T::vector(vec![1.0, 2.0, 3.0]);
        let err = match forward(vec![a, b], |t, l| t.add(l[0], l[1])) {
            Err(e) => e,
            Ok(_) => panic!("expected shape error"),
        };
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn grad_of_square_is_2x() {
        let (_, tape, root) = forward(vec![T::vector(vec![3.0])], |t, l| {
            let sq = t.mul(l[0], l[0])?;
            Ok(t.sum(sq))
        })
        .unwrap();
        let g = tape.grad(root).unwrap();
        assert!((g[0].data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let (_, tape, root) = forward(vec![T::vector(vec![1.0, -2.0, 0.5, 9.0])], |t, l| {
            Ok(t.sum(l[0]))
        })
        .unwrap();
        assert_eq!(tape.grad(root).unwrap()[0].data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_tanh_matches_finite_difference() {
        let (_, tape, root) = forward(vec![T::vector(vec![0.7])], |t, l| {
            let y = t.tanh(l[0]);
            Ok(t.sum(y))
        })
        .unwrap();
        let analytic = tape.grad(root).unwrap()[0].data()[0];
        let oracle = fd_grad(|x| x[0].tanh(), &[0.7], 0, 1e-5);
        assert!((analytic - oracle).abs() / oracle.abs() < 1e-4);
    }

    #[test]
    fn grad_requires_scalar_root() {
        let (_, tape, root) =
            forward(vec![T::vector(vec![1.0, 2.0])], |t, l| t.mul(l[0], l[0])).unwrap();
        assert!(matches!(tape.grad(root), Err(AuditError::Contract(_))));
    }

    #[test]
    fn off_path_leaf_gets_zero_gradient() {
        let (_, tape, root) = forward(
            vec![T::vector(vec![2.0]), T::vector(vec![5.0, 5.0])],
            |t, l| {
                let sq = t.square(l[0]);
                Ok(t.sum(sq))
            },
        )
        .unwrap();
        let g = tape.grad(root).unwrap();
        assert_eq!(g[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn vjp_linear_map() {
        let a = T::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(a);
        let x = tape.leaf(T::vector(vec![1.0, 1.0]));
        let y = tape.matmul(a, x).unwrap();
        let vt = tape.vjp(y, &T::vector(vec![1.0, 0.0]), x).unwrap();
        assert_eq!(vt.data(), &[1.0, 2.0]);
    }

    #[test]
    fn vjp_identity_returns_cotangent() {
        let mut tape = Tape::new();
        let x = tape.leaf(T::vector(vec![0.3, -0.8, 2.0]));
        let zero = tape.constant(T::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.add(x, zero).unwrap();
        let v = T::vector(vec![7.0, -1.0, 0.25]);
        assert_eq!(tape.vjp(y, &v, x).unwrap().data(), v.data());
    }

    #[test]
    fn vjp_cubic_matches_directional_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(T::vector(vec![1.0, 2.0]));
        let x2 = tape.square(x);
        let y = tape.mul(x2, x).unwrap();
        let vt = tape.vjp(y, &T::vector(vec![1.0, 1.0]), x).unwrap();
        // oracle: forward finite-difference directional derivative of v^T f
        let f = |x: &[f64]| x[0].powi(3) + x[1].powi(3);
        for (i, &g) in vt.data().iter().enumerate() {
            let oracle = fd_grad(f, &[1.0, 2.0], i, 1e-6);
            assert!((g - oracle).abs() / oracle.abs() < 1e-4, "coord {i}: {g} vs {oracle}");
        }
        assert!((vt.data()[0] - 3.0).abs() < 1e-9);
        assert!((vt.data()[1] - 12.0).abs() < 1e-9);
    }

    #[test]
    fn vjp_rejects_wrong_cotangent_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(T::vector(vec![1.0, 2.0]));
        let y = tape.square(x);
        assert!(matches!(
            tape.vjp(y, &T::vector(vec![1.0]), x),
            Err(AuditError::Shape { .. })
        ));
    }

    /// Scalar graphs for every primitive, each with a generic input squasher
    /// so gradients flow through the op under test.
    fn primitive_cases() -> Vec<(&'static str, fn(&mut Tape<f64>, Var) -> Result<Var>, usize)> {
        vec![
            ("add", |t, x| {
                let c = t.constant(T::vector(vec![0.3, -0.2, 1.1, 0.9]));
                let y = t.add(x, c)?;
                Ok(t.sum(y))
            }, 4),
            ("sub", |t, x| {
                let c = t.constant(T::vector(vec![0.3, -0.2, 1.1, 0.9]));
                let y = t.sub(c, x)?;
                let sq = t.square(y);
                Ok(t.sum(sq))
            }, 4),
            ("mul", |t, x| {
                let c = t.constant(T::vector(vec![0.5, 2.0, -1.5, 0.25]));
                let y = t.mul(x, c)?;
                Ok(t.sum(y))
            }, 4),
            ("div", |t, x| {
                let c = t.constant(T::vector(vec![0.5, 2.0, -1.5, 4.0]));
                let y = t.div(x, c)?;
                Ok(t.sum(y))
            }, 4),
            ("div_denominator", |t, x| {
                let c = t.constant(T::vector(vec![0.5, 2.0, -1.5, 4.0]));
                let off = t.constant(T::scalar(3.0));
                let xs = t.add(x, off)?; // keep denominator away from 0
                let y = t.div(c, xs)?;
                Ok(t.sum(y))
            }, 4),
            ("matmul", |t, x| {
                let w = t.constant(T::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.2, 0.3, -0.7]).unwrap());
                let xm = t.broadcast(x, &[2, 2])?; // not meaningful math, exercises grad flow
                let y = t.matmul(xm, w)?;
                Ok(t.sum(y))
            }, 2),
            ("sum", |t, x| Ok(t.sum(x)), 4),
            ("mean", |t, x| Ok(t.mean(x)), 4),
            ("square", |t, x| {
                let y = t.square(x);
                Ok(t.sum(y))
            }, 4),
            ("sqrt", |t, x| {
                let off = t.constant(T::scalar(3.0));
                let xs = t.add(x, off)?; // keep argument positive on [-2,2]
                let y = t.sqrt(xs);
                Ok(t.sum(y))
            }, 4),
            ("exp", |t, x| {
                let y = t.exp(x);
                Ok(t.sum(y))
            }, 4),
            ("log", |t, x| {
                let off = t.constant(T::scalar(3.0));
                let xs = t.add(x, off)?;
                let y = t.log(xs);
                Ok(t.sum(y))
            }, 4),
            ("tanh", |t, x| {
                let y = t.tanh(x);
                Ok(t.sum(y))
            }, 4),
            ("sin", |t, x| {
                let y = t.sin(x);
                Ok(t.sum(y))
            }, 4),
            ("cos", |t, x| {
                let y = t.cos(x);
                Ok(t.sum(y))
            }, 4),
            ("broadcast", |t, x| {
                let xb = t.broadcast(x, &[3, 4])?;
                let sq = t.square(xb);
                Ok(t.sum(sq))
            }, 4),
            ("slice", |t, x| {
                let y = t.slice(x, 1, 3)?;
                let sq = t.square(y);
                Ok(t.sum(sq))
            }, 4),
            ("concat", |t, x| {
                let c = t.constant(T::vector(vec![1.0, -1.0]));
                let y = t.concat(x, c)?;
                let sq = t.square(y);
                Ok(t.sum(sq))
            }, 4),
            ("row_broadcast_add", |t, x| {
                let m = t.constant(T::matrix(3, 4, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap());
                let y = t.add(m, x)?;
                let sq = t.square(y);
                Ok(t.sum(sq))
            }, 4),
            ("row_broadcast_mul", |t, x| {
                let m = t.constant(T::matrix(3, 4, (0..12).map(|i| 0.2 + i as f64 * 0.1).collect()).unwrap());
                let y = t.mul(m, x)?;
                Ok(t.sum(y))
            }, 4),
            ("scalar_broadcast_mul", |t, x| {
                let m = t.constant(T::scalar(1.7));
                let y = t.mul(x, m)?;
                let sq = t.square(y);
                Ok(t.sum(sq))
            }, 4),
        ]
    }

    #[test]
    fn every_primitive_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (name, build, dim) in primitive_cases() {
            for _ in 0..100 {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                let (_, tape, root) =
                    forward(vec![T::vector(x.clone())], |t, l| build(t, l[0])).unwrap();
                let analytic = tape.grad(root).unwrap()[0].clone();

                let eval = |pt: &[f64]| -> f64 {
                    let (v, _, _) =
                        forward(vec![T::vector(pt.to_vec())], |t, l| build(t, l[0])).unwrap();
                    v.data()[0]
                };
                for i in 0..dim {
                    let oracle = fd_grad(eval, &x, i, 1e-5);
                    let got = analytic.data()[i];
                    let denom = oracle.abs().max(1e-6);
                    assert!(
                        (got - oracle).abs() / denom < 1e-4,
                        "{name} coord {i}: analytic {got} vs fd {oracle} at {x:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn grad_is_linear_in_the_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let build = |t: &mut Tape<f64>, x: Var, wa: f64, wb: f64| -> Result<Var> {
                let f = t.exp(x);
                let f = t.sum(f);
                let g = t.square(x);
                let g = t.sum(g);
                let ca = t.constant(T::scalar(wa));
                let cb = t.constant(T::scalar(wb));
                let fa = t.mul(f, ca)?;
                let gb = t.mul(g, cb)?;
                t.add(fa, gb)
            };
            let grad_for = |wa: f64, wb: f64| -> Vec<f64> {
                let (_, tape, root) =
                    forward(vec![T::vector(x.clone())], |t, l| build(t, l[0], wa, wb)).unwrap();
                tape.grad(root).unwrap()[0].data().to_vec()
            };
            let combined = grad_for(a, b);
            let gf = grad_for(1.0, 0.0);
            let gg = grad_for(0.0, 1.0);
            for i in 0..3 {
                assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vjp_with_basis_cotangents_reproduces_jacobian() {
        // f(x) = tanh(W x) for a fixed W; Jacobian column j from forward
        // finite differences, row i from vjp with cotangent e_i.
        let w = vec![0.4, -0.3, 0.8, 0.2, 0.5, -0.9];
        let x0 = vec![0.3, -1.2, 0.7];
        let build = |t: &mut Tape<f64>, x: Var| -> Result<Var> {
            let wt = t.constant(T::matrix(2, 3, w.clone()).unwrap());
            let wx = t.matmul(wt, x)?;
            Ok(t.tanh(wx))
        };
        let eval = |pt: &[f64]| -> Vec<f64> {
            let (_, tape, root) =
                forward(vec![T::vector(pt.to_vec())], |t, l| build(t, l[0])).unwrap();
            tape.value(root).data().to_vec()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(T::vector(x0.clone()));
        let y = build(&mut tape, x).unwrap();

        let h = 1e-6;
        for i in 0..2 {
            let mut e = vec![0.0; 2];
            e[i] = 1.0;
            let row = tape.vjp(y, &T::vector(e), x).unwrap();
            for j in 0..3 {
                let mut hi = x0.clone();
                let mut lo = x0.clone();
                hi[j] += h;
                lo[j] -= h;
                let col = (eval(&hi)[i] - eval(&lo)[i]) / (2.0 * h);
                let denom = col.abs().max(1e-6);
                assert!(
                    (row.data()[j] - col).abs() / denom < 1e-4,
                    "J[{i}][{j}]: vjp {} vs fd {col}",
                    row.data()[j]
                );
            }
        }
    }

    #[test]
    fn batched_rows_match_single_sample_calls() {
        let w = T::matrix(3, 2, vec![0.4, -0.3, 0.8, 0.2, 0.5, -0.9]).unwrap();
        let xb = T::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.5, 0.4, 0.9]).unwrap();
        let (batch, _, _) = forward(vec![xb.clone(), w.clone()], |t, l| {
            let y = t.matmul(l[0], l[1])?;
            Ok(t.tanh(y))
        })
        .unwrap();
        for i in 0..2 {
            let (single, _, _) = forward(vec![xb.row(i).unwrap(), w.clone()], |t, l| {
                let y = t.matmul(l[0], l[1])?;
                Ok(t.tanh(y))
            })
            .unwrap();
            assert_eq!(batch.row(i).unwrap().data(), single.data());
        }
    }

    #[test]
    fn concat_slice_round_trip_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(T::vector(vec![1.0, 2.0]));
        let b = tape.leaf(T::vector(vec![3.0]));
        let cat = tape.concat(a, b).unwrap();
        let back = tape.slice(cat, 0, 2).unwrap();
        let sq = tape.square(back);
        let root = tape.sum(sq);
        let g = tape.grad(root).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
        assert_eq!(g[1].data(), &[0.0]);
    }
}
