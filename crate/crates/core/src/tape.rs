//! Reverse-mode differentiation over a flat, topologically ordered tape.
//!
//! Every primitive appends one node holding its forward value. Nodes only
//! reference earlier nodes, so a single reverse sweep visits each node once
//! and delivers total derivatives. Row-wise primitives treat a tensor as a
//! matrix of `rows() x cols()` (all leading axes flattened).
//!
//! The ReLU subgradient at 0 is 0.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive set, for callers that dispatch on a kind value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    ElementwiseMul,
    Concat,
    Relu,
    Tanh,
    Sigmoid,
    SoftmaxRows,
    Mean,
    Sum,
    L2Norm,
    CosineSimilarity,
    ScalarMul(f64),
    Log,
}

impl Primitive {
    pub fn arity(self) -> usize {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::ElementwiseMul | Primitive::Concat => 2,
            Primitive::CosineSimilarity => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchedMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SplitHeads {
        x: Var,
        heads: usize,
        seq: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
        seq: usize,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Log(Var),
    ScalarMul(Var, T),
    ScalarAdd(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    /// Norms are the denominators actually used; a clamped norm is a constant.
    CosineRows {
        a: Var,
        b: Var,
        norms_a: Vec<T>,
        norms_b: Vec<T>,
        clamped_a: Vec<bool>,
        clamped_b: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a node that requires grad and is reachable from the loss.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.nodes.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter that was placed on the tape (zeros when unreachable).
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&id, g)| (id, g))
    }
}

fn shape_str(shapes: &[&[usize]]) -> String {
    shapes.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" vs ")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::contract("tape already consumed by backward"));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Places a stored parameter on the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable)?;
        if p.trainable {
            self.params.insert(id, v);
        }
        Ok(v)
    }

    /// Dispatches one of the named primitives. Row-wise conventions as in the module docs.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(Error::shape(
                "apply",
                format!("{kind:?} takes {} inputs, got {}", kind.arity(), inputs.len()),
            ));
        }
        match kind {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::ElementwiseMul => self.mul(inputs[0], inputs[1]),
            Primitive::Concat => self.concat_cols(inputs[0], inputs[1]),
            Primitive::Relu => self.relu(inputs[0]),
            Primitive::Tanh => self.tanh(inputs[0]),
            Primitive::Sigmoid => self.sigmoid(inputs[0]),
            Primitive::SoftmaxRows => self.softmax_rows(inputs[0]),
            Primitive::Mean => self.mean(inputs[0]),
            Primitive::Sum => self.sum(inputs[0]),
            Primitive::L2Norm => self.l2_norm(inputs[0]),
            Primitive::CosineSimilarity => self.cosine_rows(inputs[0], inputs[1]),
            Primitive::ScalarMul(s) => self.scalar_mul(inputs[0], T::from_f64_lossy(s)),
            Primitive::Log => self.log(inputs[0]),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", shape_str(&[sa, sb])));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    /// `[g, m, k] x [g, k, n] -> [g, m, n]`, or with `trans_b` the right operand is `[g, n, k]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && {
            if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            }
        };
        if !ok {
            return Err(Error::shape("batched_matmul", shape_str(&[sa, sb])));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); g * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for i in 0..g {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &da[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &db[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::from_parts(vec![g, m, n], out),
            Op::BatchedMatMul { a, b, trans_b },
            rg,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, shape_str(&[self.shape(a), self.shape(b)])));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise_mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `[n]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || *sx.last().unwrap() != sb[0] {
            return Err(Error::shape("add_bias", shape_str(&[sx, sb])));
        }
        let vx = self.value(x);
        let vb = self.value(bias).data();
        let c = vb.len();
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + vb[i % c]).collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddBias(x, bias), rg)
    }

    /// Concatenates along the last axis: `[r, ca] ++ [r, cb] -> [r, ca + cb]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", shape_str(&[sa, sb])));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let (ca, cb, rows) = (va.cols(), vb.cols(), va.rows());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, data), Op::ConcatCols(a, b), rg)
    }

    /// Concatenates 2-D parts along the first axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("stack_rows", "no inputs"))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.ndim() != 2 || v.cols() != cols {
                return Err(Error::shape("stack_rows", shape_str(&[self.shape(first), v.shape()])));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::StackRows(parts.to_vec()),
            rg,
        )
    }

    /// Row lookup: output row `i` is row `indices[i]` of `x` viewed as a matrix.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        if indices.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} out of bounds for {:?}", vx.shape()),
            ));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&vx.data()[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![indices.len(), cols], data),
            Op::GatherRows(x, indices.to_vec()),
            rg,
        )
    }

    /// `[b * seq, heads * dk] -> [b * heads, seq, dk]`.
    pub fn split_heads(&mut self, x: Var, heads: usize, seq: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, d) = (vx.rows(), vx.cols());
        if vx.ndim() != 2 || heads == 0 || seq == 0 || d % heads != 0 || rows % seq != 0 {
            return Err(Error::shape(
                "split_heads",
                format!("{:?} with heads={heads} seq={seq}", vx.shape()),
            ));
        }
        let (b, dk) = (rows / seq, d / heads);
        let mut out = vec![T::zero(); rows * d];
        let src = vx.data();
        for bi in 0..b {
            for t in 0..seq {
                for h in 0..heads {
                    let s = (bi * seq + t) * d + h * dk;
                    let o = ((bi * heads + h) * seq + t) * dk;
                    out[o..o + dk].copy_from_slice(&src[s..s + dk]);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![b * heads, seq, dk], out),
            Op::SplitHeads { x, heads, seq },
            rg,
        )
    }

    /// Inverse of [`Tape::split_heads`]: `[b * heads, seq, dk] -> [b * seq, heads * dk]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize, seq: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) || s[1] != seq {
            return Err(Error::shape(
                "merge_heads",
                format!("{s:?} with heads={heads} seq={seq}"),
            ));
        }
        let (b, dk) = (s[0] / heads, s[2]);
        let d = heads * dk;
        let mut out = vec![T::zero(); vx.len()];
        let src = vx.data();
        for bi in 0..b {
            for t in 0..seq {
                for h in 0..heads {
                    let o = (bi * seq + t) * d + h * dk;
                    let i = ((bi * heads + h) * seq + t) * dk;
                    out[o..o + dk].copy_from_slice(&src[i..i + dk]);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![b * seq, d], out),
            Op::MergeHeads { x, heads, seq },
            rg,
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= T::zero()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn scalar_mul(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |v| v * s, Op::ScalarMul(x, s))
    }

    pub fn scalar_add(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |v| v + s, Op::ScalarAdd(x))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(cols) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= total;
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().fold(T::zero(), |a, &v| a + v) / T::from_usize(v.len()).unwrap();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Euclidean norm of the whole tensor.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).sum_squares().sqrt();
        if n == T::zero() {
            return Err(Error::Domain {
                op: "l2_norm",
                detail: "zero-norm input".into(),
            });
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(n), Op::L2Norm(x), rg)
    }

    /// Row-wise cosine similarity of two same-shape tensors; `[m, d] -> [m]`.
    /// A 1-D pair yields a single value. A zero-norm row is a domain error.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.cosine_impl(a, b, None)
    }

    /// Like [`Tape::cosine_rows`] but each norm is clamped below at `eps`, so
    /// zero rows give similarity 0 instead of an error.
    pub fn cosine_rows_clamped(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        self.cosine_impl(a, b, Some(eps))
    }

    fn cosine_impl(&mut self, a: Var, b: Var, eps: Option<T>) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let cols = va.cols();
        let rows = va.rows();
        let mut norms_a = Vec::with_capacity(rows);
        let mut norms_b = Vec::with_capacity(rows);
        let mut clamped_a = Vec::with_capacity(rows);
        let mut clamped_b = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for (ra, rb) in va.data().chunks(cols).zip(vb.data().chunks(cols)) {
            let (dot, na, nb) = dot_norms(ra, rb);
            let (na, ca, nb, cb) = match eps {
                Some(e) => (na.max(e), na < e, nb.max(e), nb < e),
                None if na == T::zero() || nb == T::zero() => {
                    return Err(Error::Domain {
                        op: "cosine_similarity",
                        detail: format!("zero-norm row {}", norms_a.len()),
                    });
                }
                None => (na, false, nb, false),
            };
            norms_a.push(na);
            norms_b.push(nb);
            clamped_a.push(ca);
            clamped_b.push(cb);
            out.push(dot / (na * nb));
        }
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::from_parts(vec![rows], out),
            Op::CosineRows {
                a,
                b,
                norms_a,
                norms_b,
                clamped_a,
                clamped_b,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar loss. Consumes the tape: further recording
    /// or a second backward call is a contract violation.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::contract("tape already consumed by backward"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if loss.0 + 1 != self.nodes.len() {
            log::debug!("backward from node {} of {}", loss.0, self.nodes.len());
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![T::one()]));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let gy = match &self.nodes[i].op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(i, &gy, &mut grads);
        }

        let params = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()));
                (id, g)
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn backprop_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires_grad(*a) {
                    let ga = self.grad_buf(*a, grads);
                    // dA = dC * B^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        vb.data(),
                        1,
                        n as isize,
                        T::one(),
                        ga,
                        k as isize,
                        1,
                    );
                }
                if self.requires_grad(*b) {
                    let gb = self.grad_buf(*b, grads);
                    // dB = A^T * dC
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::one(),
                        gb,
                        n as isize,
                        1,
                    );
                }
            }
            Op::BatchedMatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = y.shape()[2];
                let (ki, ni) = (k as isize, n as isize);
                if self.requires_grad(*a) {
                    let ga = self.grad_buf(*a, grads);
                    for p in 0..bs {
                        let gc = &g[p * m * n..(p + 1) * m * n];
                        let bp = &vb.data()[p * k * n..(p + 1) * k * n];
                        let gap = &mut ga[p * m * k..(p + 1) * m * k];
                        if *trans_b {
                            // B stored [n, k]: dA = dC * B
                            T::gemm(m, n, k, T::one(), gc, ni, 1, bp, ki, 1, T::one(), gap, ki, 1);
                        } else {
                            // B stored [k, n]: dA = dC * B^T
                            T::gemm(m, n, k, T::one(), gc, ni, 1, bp, 1, ni, T::one(), gap, ki, 1);
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let gb = self.grad_buf(*b, grads);
                    for p in 0..bs {
                        let gc = &g[p * m * n..(p + 1) * m * n];
                        let ap = &va.data()[p * m * k..(p + 1) * m * k];
                        let gbp = &mut gb[p * k * n..(p + 1) * k * n];
                        if *trans_b {
                            // dB[n, k] = dC^T * A
                            T::gemm(n, m, k, T::one(), gc, 1, ni, ap, ki, 1, T::one(), gbp, ki, 1);
                        } else {
                            // dB[k, n] = A^T * dC
                            T::gemm(k, m, n, T::one(), ap, 1, ki, gc, ni, 1, T::one(), gbp, ni, 1);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, grads, |ga| add_into(ga, g));
                self.accumulate(*b, grads, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, grads, |ga| add_into(ga, g));
                self.accumulate(*b, grads, |gb| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                self.accumulate(*x, grads, |gx| add_into(gx, g));
                let c = self.value(*bias).len();
                self.accumulate(*bias, grads, |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(*a, grads, |ga| {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(vb) {
                        *d += s * o;
                    }
                });
                self.accumulate(*b, grads, |gb| {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(va) {
                        *d += s * o;
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let w = ca + cb;
                self.accumulate(*a, grads, |ga| {
                    for (dst, src) in ga.chunks_mut(ca).zip(g.chunks(w)) {
                        add_into(dst, &src[..ca]);
                    }
                });
                self.accumulate(*b, grads, |gb| {
                    for (dst, src) in gb.chunks_mut(cb).zip(g.chunks(w)) {
                        add_into(dst, &src[ca..]);
                    }
                });
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(p, grads, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows(x, idx) => {
                let cols = y.cols();
                self.accumulate(*x, grads, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::SplitHeads { x, heads, seq } => {
                let (heads, seq) = (*heads, *seq);
                let d = self.value(*x).cols();
                let dk = d / heads;
                let b = self.value(*x).rows() / seq;
                self.accumulate(*x, grads, |gx| {
                    for bi in 0..b {
                        for t in 0..seq {
                            for h in 0..heads {
                                let s = (bi * seq + t) * d + h * dk;
                                let o = ((bi * heads + h) * seq + t) * dk;
                                add_into(&mut gx[s..s + dk], &g[o..o + dk]);
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, heads, seq } => {
                let (heads, seq) = (*heads, *seq);
                let s = self.value(*x).shape();
                let (b, dk) = (s[0] / heads, s[2]);
                let d = heads * dk;
                self.accumulate(*x, grads, |gx| {
                    for bi in 0..b {
                        for t in 0..seq {
                            for h in 0..heads {
                                let o = (bi * seq + t) * d + h * dk;
                                let i = ((bi * heads + h) * seq + t) * dk;
                                add_into(&mut gx[i..i + dk], &g[o..o + dk]);
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let yd = y.data();
                self.accumulate(*x, grads, |gx| {
                    for ((d, &s), &o) in gx.iter_mut().zip(g).zip(yd) {
                        if o > T::zero() {
                            *d += s;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let yd = y.data();
                self.accumulate(*x, grads, |gx| {
                    for ((d, &s), &o) in gx.iter_mut().zip(g).zip(yd) {
                        *d += s * (T::one() - o * o);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yd = y.data();
                self.accumulate(*x, grads, |gx| {
                    for ((d, &s), &o) in gx.iter_mut().zip(g).zip(yd) {
                        *d += s * o * (T::one() - o);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let cols = y.cols();
                let yd = y.data();
                self.accumulate(*x, grads, |gx| {
                    for ((dr, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(yd.chunks(cols)) {
                        let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&s, &o)| a + s * o);
                        for ((d, &s), &o) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += o * (s - dot);
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xd = self.value(*x).data();
                self.accumulate(*x, grads, |gx| {
                    for ((d, &s), &o) in gx.iter_mut().zip(g).zip(xd) {
                        *d += s / o;
                    }
                });
            }
            Op::ScalarMul(x, k) => {
                let k = *k;
                self.accumulate(*x, grads, |gx| {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += s * k;
                    }
                });
            }
            Op::ScalarAdd(x) => {
                self.accumulate(*x, grads, |gx| add_into(gx, g));
            }
            Op::Sum(x) => {
                let s = g[0];
                self.accumulate(*x, grads, |gx| gx.iter_mut().for_each(|d| *d += s));
            }
            Op::Mean(x) => {
                let s = g[0] / T::from_usize(self.value(*x).len()).unwrap();
                self.accumulate(*x, grads, |gx| gx.iter_mut().for_each(|d| *d += s));
            }
            Op::L2Norm(x) => {
                let xd = self.value(*x).data();
                let scale = g[0] / y.item();
                self.accumulate(*x, grads, |gx| {
                    for (d, &o) in gx.iter_mut().zip(xd) {
                        *d += scale * o;
                    }
                });
            }
            Op::CosineRows {
                a,
                b,
                norms_a,
                norms_b,
                clamped_a,
                clamped_b,
            } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let cols = va.cols();
                let cos = y.data();
                let row_grad =
                    |dst: &mut [T], own: &[T], other: &[T], r: usize, own_norm: T, other_norm: T, clamped: bool| {
                        // d cos / d own = other / (|own||other|) - cos * own / |own|^2
                        let s = g[r];
                        let inv = T::one() / (own_norm * other_norm);
                        let self_term = if clamped {
                            T::zero()
                        } else {
                            cos[r] / (own_norm * own_norm)
                        };
                        for ((d, &o), &x) in dst.iter_mut().zip(other).zip(own) {
                            *d += s * (o * inv - self_term * x);
                        }
                    };
                self.accumulate(*a, grads, |ga| {
                    for r in 0..cos.len() {
                        let span = r * cols..(r + 1) * cols;
                        row_grad(
                            &mut ga[span.clone()],
                            &va.data()[span.clone()],
                            &vb.data()[span],
                            r,
                            norms_a[r],
                            norms_b[r],
                            clamped_a[r],
                        );
                    }
                });
                self.accumulate(*b, grads, |gb| {
                    for r in 0..cos.len() {
                        let span = r * cols..(r + 1) * cols;
                        row_grad(
                            &mut gb[span.clone()],
                            &vb.data()[span.clone()],
                            &va.data()[span],
                            r,
                            norms_b[r],
                            norms_a[r],
                            clamped_b[r],
                        );
                    }
                });
            }
        }
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Tensor<T>>]) -> &'g mut [T] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.shape(v).to_vec()))
            .data_mut()
    }

    fn accumulate(&self, v: Var, grads: &mut [Option<Tensor<T>>], f: impl FnOnce(&mut [T])) {
        if self.requires_grad(v) {
            f(self.grad_buf(v, grads));
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn dot_norms<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Cosine similarity of two vectors outside any tape.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("[{}] vs [{}]", a.len(), b.len()),
        ));
    }
    let (dot, na, nb) = dot_norms(a, b);
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Domain {
            op: "cosine_similarity",
            detail: "zero-norm vector".into(),
        });
    }
    Ok(dot / (na * nb))
}

/// [`cosine`] with both norms clamped below at `eps`.
pub fn cosine_clamped<T: Scalar>(a: &[T], b: &[T], eps: T) -> Result<T> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("[{}] vs [{}]", a.len(), b.len()),
        ));
    }
    let (dot, na, nb) = dot_norms(a, b);
    Ok(dot / (na.max(eps) * nb.max(eps)))
}
