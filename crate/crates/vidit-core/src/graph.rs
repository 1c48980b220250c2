//! Compute graph with hand-written reverse-mode derivatives.
//!
//! The op catalog is closed: each operation below records its parents and
//! enough saved state to run its own backward rule, and [`Graph::backward`]
//! chains those rules in reverse topological order (node ids are already
//! topological because the graph is append-only). There is no general tape;
//! adding an op means writing its forward kernel and its vector-Jacobian
//! product by hand.
//!
//! The graph is generic over [`Scalar`] so the identical computation can be
//! replayed at f64 for gradient verification. Leaves built from [`Tensor`]s
//! share the underlying f32 buffer when the graph element type is f32.
//!
//! Numerical conventions:
//! - reductions (`sum_all`, `mean_all`), softmax normalizers and layer-norm
//!   statistics accumulate in f64 regardless of element type;
//! - `layer_norm` uses eps = 1e-6 on the variance;
//! - `gelu` is the tanh approximation;
//! - `mha` applies 1/sqrt(head_dim) inside the score product.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Buf<T> {
    Owned(Vec<T>),
    Shared(Arc<Vec<f32>>),
}

impl<T: Scalar> Buf<T> {
    fn as_slice(&self) -> &[T] {
        match self {
            Buf::Owned(v) => v,
            Buf::Shared(a) => T::view_f32(a).expect("shared buffer in non-f32 graph"),
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Gelu(Var),
    SumAll(Var),
    MeanAll(Var),
    Embedding { table: Var, ids: Vec<usize> },
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mha { q: Var, k: Var, v: Var, heads: usize },
}

enum Aux<T> {
    None,
    /// Per-row mean and 1/sqrt(var + eps).
    LayerNorm { mean: Vec<T>, inv_std: Vec<T> },
    /// Attention probabilities, `heads * t_q * t_k`, head-major.
    Probs(Vec<T>),
    /// tanh of the gelu inner polynomial, reused by the backward rule.
    GeluTanh(Vec<T>),
}

struct Node<T> {
    shape: Vec<usize>,
    buf: Buf<T>,
    op: Op,
    aux: Aux<T>,
    needs_grad: bool,
}

/// Per-leaf gradients produced by [`Graph::backward`].
pub struct GradTable<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradTable<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn get_f32(&self, v: Var) -> Option<Vec<f32>> {
        self.get(v).map(|g| g.iter().map(|x| x.to_f32()).collect())
    }
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        self.nodes[v.0].buf.as_slice()
    }

    /// Node value converted to an f32 tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let data: Vec<f32> = node.buf.as_slice().iter().map(|x| x.to_f32()).collect();
        Tensor::from_vec(&node.shape, data).expect("node buffer matches its shape")
    }

    fn push(&mut self, shape: Vec<usize>, buf: Vec<T>, op: Op, aux: Aux<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), buf.len());
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::AddRow(a, b) | Op::MulRow(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Slice { x: a, .. }
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::SumAll(a)
            | Op::MeanAll(a) => self.nodes[a.0].needs_grad,
            Op::Concat { xs, .. } => xs.iter().any(|x| self.nodes[x.0].needs_grad),
            Op::LayerNorm { x, gamma, beta } => {
                self.nodes[x.0].needs_grad
                    || self.nodes[gamma.0].needs_grad
                    || self.nodes[beta.0].needs_grad
            }
            Op::Embedding { table, .. } => self.nodes[table.0].needs_grad,
            Op::Mha { q, k, v, .. } => {
                self.nodes[q.0].needs_grad
                    || self.nodes[k.0].needs_grad
                    || self.nodes[v.0].needs_grad
            }
        };
        self.nodes.push(Node { shape, buf: Buf::Owned(buf), op, aux, needs_grad });
        Var(self.nodes.len() - 1)
    }

    // ---- leaves ----

    /// Leaf sharing the tensor's f32 buffer when possible.
    pub fn leaf(&mut self, t: &Tensor, needs_grad: bool) -> Var {
        let buf = if T::view_f32(&t.buf()).is_some() {
            Buf::Shared(t.buf())
        } else {
            Buf::Owned(t.data().iter().map(|&x| T::from_f32(x)).collect())
        };
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            buf,
            op: Op::Leaf,
            aux: Aux::None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Leaf from an owned element buffer (used by gradient checks, which
    /// must perturb at full element precision).
    pub fn leaf_owned(&mut self, shape: &[usize], data: Vec<T>, needs_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim(
                "leaf_owned",
                format!("shape {:?} vs {} elements", shape, data.len()),
            ));
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            buf: Buf::Owned(data),
            op: Op::Leaf,
            aux: Aux::None,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise ----

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Add(a, b), Aux::None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Sub(a, b), Aux::None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Mul(a, b), Aux::None))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let cc = T::from_f64(c as f64);
        let out: Vec<T> = self.value(x).iter().map(|&v| v * cc).collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::Scale(x, c as f64), Aux::None)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let cc = T::from_f64(c as f64);
        let out: Vec<T> = self.value(x).iter().map(|&v| v + cc).collect();
        self.push(self.nodes[x.0].shape.clone(), out, Op::AddScalar(x), Aux::None)
    }

    /// Broadcast add of a rank-1 vector over the last axis.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.last_dim("add_row", x, row)?;
        let xs = self.value(x);
        let rs = self.value(row);
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks_exact(d) {
            for (j, &v) in chunk.iter().enumerate() {
                out.push(v + rs[j]);
            }
        }
        Ok(self.push(self.nodes[x.0].shape.clone(), out, Op::AddRow(x, row), Aux::None))
    }

    /// Broadcast multiply by a rank-1 vector over the last axis.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.last_dim("mul_row", x, row)?;
        let xs = self.value(x);
        let rs = self.value(row);
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks_exact(d) {
            for (j, &v) in chunk.iter().enumerate() {
                out.push(v * rs[j]);
            }
        }
        Ok(self.push(self.nodes[x.0].shape.clone(), out, Op::MulRow(x, row), Aux::None))
    }

    fn last_dim(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let xs = &self.nodes[x.0].shape;
        let rs = &self.nodes[row.0].shape;
        let d = *xs.last().ok_or_else(|| Error::dim(op, "rank-0 operand"))?;
        if rs.len() != 1 || rs[0] != d {
            return Err(Error::dim(op, format!("row {:?} vs last axis of {:?}", rs, xs)));
        }
        Ok(d)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::ONE,
                self.value(a).as_ptr(),
                k as isize,
                1,
                self.value(b).as_ptr(),
                n as isize,
                1,
                T::ZERO,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), Aux::None))
    }

    // ---- shape ----

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = &self.nodes[x.0].shape;
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::arg("permute", format!("axes {:?} for rank {}", axes, rank)));
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out = permute_copy(self.value(x), shape, axes);
        Ok(self.push(new_shape, out, Op::Permute(x, axes.to_vec()), Aux::None))
    }

    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        let n: usize = new_shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?}", self.nodes[x.0].shape, new_shape),
            ));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(new_shape.to_vec(), out, Op::Reshape(x), Aux::None))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::arg(
                "slice",
                format!("axis {} range {}..{} of {:?}", axis, start, start + len, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(new_shape, out, Op::Slice { x, axis, start }, Aux::None))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::arg("concat", "no operands"));
        }
        let first = self.nodes[xs[0].0].shape.clone();
        if axis >= first.len() {
            return Err(Error::arg("concat", format!("axis {} for rank {}", axis, first.len())));
        }
        let mut total_axis = 0;
        for &v in xs {
            let s = &self.nodes[v.0].shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim("concat", format!("{:?} vs {:?} on axis {}", s, first, axis)));
            }
            total_axis += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &v in xs {
                let d = self.nodes[v.0].shape[axis];
                let src = self.value(v);
                out.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut new_shape = first;
        new_shape[axis] = total_axis;
        Ok(self.push(new_shape, out, Op::Concat { xs: xs.to_vec(), axis }, Aux::None))
    }

    // ---- nonlinearities ----

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::dim("softmax", "rank-0 operand"))?;
        let src = self.value(x);
        let mut out = vec![T::ZERO; src.len()];
        for (row_in, row_out) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            softmax_row(row_in, row_out);
        }
        Ok(self.push(shape, out, Op::Softmax(x), Aux::None))
    }

    /// Layer norm over the last axis with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm", "rank-0 operand"))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = &self.nodes[v.0].shape;
            if s.len() != 1 || s[0] != d {
                return Err(Error::dim("layer_norm", format!("{} {:?} vs last axis {}", name, s, d)));
            }
        }
        let rows = self.value(x).len() / d;
        let mut out = vec![T::ZERO; rows * d];
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        {
            let src = self.value(x);
            let gs = self.value(gamma);
            let bs = self.value(beta);
            for (row_in, row_out) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                let mut sum = 0.0f64;
                for &v in row_in {
                    sum += v.to_f64();
                }
                let mean = sum / d as f64;
                let mut var = 0.0f64;
                for &v in row_in {
                    let c = v.to_f64() - mean;
                    var += c * c;
                }
                var /= d as f64;
                let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                let (mean_t, inv_t) = (T::from_f64(mean), T::from_f64(inv_std));
                for j in 0..d {
                    row_out[j] = (row_in[j] - mean_t) * inv_t * gs[j] + bs[j];
                }
                means.push(mean_t);
                inv_stds.push(inv_t);
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm { x, gamma, beta },
            Aux::LayerNorm { mean: means, inv_std: inv_stds },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) =
            (T::from_f64(GELU_C), T::from_f64(GELU_A), T::from_f64(0.5));
        let xs = self.value(x);
        let mut out = Vec::with_capacity(xs.len());
        let mut tanhs = Vec::with_capacity(xs.len());
        for &v in xs {
            let t = (c * (v + a * v * v * v)).tanh();
            out.push(half * v * (T::ONE + t));
            tanhs.push(t);
        }
        self.push(self.nodes[x.0].shape.clone(), out, Op::Gelu(x), Aux::GeluTanh(tanhs))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = 0.0f64;
        for &v in self.value(x) {
            acc += v.to_f64();
        }
        self.push(vec![], vec![T::from_f64(acc)], Op::SumAll(x), Aux::None)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let mut acc = 0.0f64;
        for &v in self.value(x) {
            acc += v.to_f64();
        }
        self.push(vec![], vec![T::from_f64(acc / n as f64)], Op::MeanAll(x), Aux::None)
    }

    // ---- lookup ----

    /// Row gather: `out[i] = table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = &self.nodes[table.0].shape;
        if shape.len() != 2 {
            return Err(Error::dim("embedding", format!("table {:?}", shape)));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::arg("embedding", format!("id {} out of {} rows", bad, rows)));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding { table, ids: ids.to_vec() },
            Aux::None,
        ))
    }

    // ---- attention ----

    /// Multi-head attention. `q` is (t_q, d); `k`, `v` are (t_k, d);
    /// d splits evenly into `heads`. Scores are scaled by 1/sqrt(d/heads).
    pub fn mha(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (
            self.nodes[q.0].shape.clone(),
            self.nodes[k.0].shape.clone(),
            self.nodes[v.0].shape.clone(),
        );
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk != sv {
            return Err(Error::dim("mha", format!("q {:?}, k {:?}, v {:?}", sq, sk, sv)));
        }
        let d = sq[1];
        if heads == 0 || d % heads != 0 {
            return Err(Error::arg("mha", format!("dim {} not divisible by {} heads", d, heads)));
        }
        let (t_q, t_k, dh) = (sq[0], sk[0], d / heads);
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let mut probs = vec![T::ZERO; heads * t_q * t_k];
        let mut out = vec![T::ZERO; t_q * d];
        {
            let qs = self.value(q);
            let ks = self.value(k);
            let vs = self.value(v);
            for h in 0..heads {
                let p = &mut probs[h * t_q * t_k..(h + 1) * t_q * t_k];
                unsafe {
                    // scores = scale * Q_h K_h^T, written straight into the prob buffer
                    T::gemm(
                        t_q,
                        dh,
                        t_k,
                        scale,
                        qs.as_ptr().add(h * dh),
                        d as isize,
                        1,
                        ks.as_ptr().add(h * dh),
                        1,
                        d as isize,
                        T::ZERO,
                        p.as_mut_ptr(),
                        t_k as isize,
                        1,
                    );
                }
                for row in p.chunks_exact_mut(t_k) {
                    softmax_row_inplace(row);
                }
                unsafe {
                    // out_h = P V_h into the head's column block
                    T::gemm(
                        t_q,
                        t_k,
                        dh,
                        T::ONE,
                        p.as_ptr(),
                        t_k as isize,
                        1,
                        vs.as_ptr().add(h * dh),
                        d as isize,
                        1,
                        T::ZERO,
                        out.as_mut_ptr().add(h * dh),
                        d as isize,
                        1,
                    );
                }
            }
        }
        Ok(self.push(vec![t_q, d], out, Op::Mha { q, k, v, heads }, Aux::Probs(probs)))
    }

    // ---- reverse mode ----

    /// Gradients of a scalar `loss` with respect to every leaf that was
    /// created with `needs_grad`, chained through the hand-written per-op
    /// rules. Nodes that cannot reach a gradient-bearing leaf are skipped.
    pub fn backward(&self, loss: Var) -> Result<GradTable<T>> {
        if !self.nodes[loss.0].shape.is_empty() {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::ONE]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad && !matches!(self.nodes[id].op, Op::Leaf) {
                adj[id] = None;
                continue;
            }
            let Some(dy) = adj[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    // keep: this is the output of backward
                    adj[id] = Some(dy);
                }
                Op::Add(a, b) => {
                    self.accum(&mut adj, *a, &dy, |g, dy| add_into(g, dy));
                    self.accum_owned(&mut adj, *b, dy);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut adj, *a, &dy, |g, dy| add_into(g, dy));
                    if self.nodes[b.0].needs_grad {
                        let mut part = dy;
                        for v in part.iter_mut() {
                            *v = -*v;
                        }
                        self.accum_owned(&mut adj, *b, part);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        let part: Vec<T> =
                            dy.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                        self.accum_owned(&mut adj, *a, part);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut part = dy;
                        for (p, &x) in part.iter_mut().zip(av) {
                            *p = *p * x;
                        }
                        self.accum_owned(&mut adj, *b, part);
                    }
                }
                Op::Scale(a, c) => {
                    let cc = T::from_f64(*c);
                    let mut part = dy;
                    for v in part.iter_mut() {
                        *v = *v * cc;
                    }
                    self.accum_owned(&mut adj, *a, part);
                }
                Op::AddScalar(a) => {
                    self.accum_owned(&mut adj, *a, dy);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    if self.nodes[a.0].needs_grad {
                        // dA += dY B^T, straight into the adjoint buffer
                        let (da, beta) = adj_slot(&mut adj, *a, m * k);
                        unsafe {
                            T::gemm(
                                m,
                                n,
                                k,
                                T::ONE,
                                dy.as_ptr(),
                                n as isize,
                                1,
                                self.value(*b).as_ptr(),
                                1,
                                n as isize,
                                beta,
                                da.as_mut_ptr(),
                                k as isize,
                                1,
                            );
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        // dB += A^T dY
                        let (db, beta) = adj_slot(&mut adj, *b, k * n);
                        unsafe {
                            T::gemm(
                                k,
                                m,
                                n,
                                T::ONE,
                                self.value(*a).as_ptr(),
                                1,
                                k as isize,
                                dy.as_ptr(),
                                n as isize,
                                1,
                                beta,
                                db.as_mut_ptr(),
                                n as isize,
                                1,
                            );
                        }
                    }
                }
                Op::Permute(a, axes) => {
                    let mut inverse = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let part = permute_copy(&dy, &self.nodes[id].shape, &inverse);
                    self.accum_owned(&mut adj, *a, part);
                }
                Op::Reshape(a) => {
                    self.accum_owned(&mut adj, *a, dy);
                }
                Op::Slice { x, axis, start } => {
                    let src_shape = &self.nodes[x.0].shape;
                    let out_shape = &self.nodes[id].shape;
                    let outer: usize = src_shape[..*axis].iter().product();
                    let inner: usize = src_shape[*axis + 1..].iter().product();
                    let len = out_shape[*axis];
                    let full = src_shape[*axis];
                    let ga = adj[x.0].get_or_insert_with(|| vec![T::ZERO; outer * full * inner]);
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut ga[dst..dst + len * inner], &dy[src..src + len * inner]);
                    }
                }
                Op::Concat { xs, axis } => {
                    let out_shape = &self.nodes[id].shape;
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let total = out_shape[*axis];
                    let mut offset = 0;
                    for &xv in xs {
                        let d = self.nodes[xv.0].shape[*axis];
                        if self.nodes[xv.0].needs_grad {
                            let mut part = vec![T::ZERO; outer * d * inner];
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * d * inner;
                                part[dst..dst + d * inner]
                                    .copy_from_slice(&dy[src..src + d * inner]);
                            }
                            self.accum_owned(&mut adj, xv, part);
                        }
                        offset += d;
                    }
                }
                Op::Softmax(a) => {
                    let d = *self.nodes[id].shape.last().unwrap();
                    let y = self.value(Var(id));
                    let mut part = vec![T::ZERO; y.len()];
                    for ((yr, dyr), pr) in y
                        .chunks_exact(d)
                        .zip(dy.chunks_exact(d))
                        .zip(part.chunks_exact_mut(d))
                    {
                        let mut dot = 0.0f64;
                        for j in 0..d {
                            dot += (yr[j] * dyr[j]).to_f64();
                        }
                        let dot = T::from_f64(dot);
                        for j in 0..d {
                            pr[j] = yr[j] * (dyr[j] - dot);
                        }
                    }
                    self.accum_owned(&mut adj, *a, part);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let Aux::LayerNorm { mean, inv_std } = &self.nodes[id].aux else {
                        unreachable!("layer_norm saves its statistics");
                    };
                    let d = *self.nodes[id].shape.last().unwrap();
                    let xs = self.value(*x);
                    let gs = self.value(*gamma);
                    let rows = xs.len() / d;
                    let mut dx = vec![T::ZERO; xs.len()];
                    let mut dgamma = vec![T::ZERO; d];
                    let mut dbeta = vec![T::ZERO; d];
                    for r in 0..rows {
                        let xr = &xs[r * d..(r + 1) * d];
                        let dyr = &dy[r * d..(r + 1) * d];
                        let dxr = &mut dx[r * d..(r + 1) * d];
                        let (m, is) = (mean[r], inv_std[r]);
                        let mut sum_dxhat = 0.0f64;
                        let mut sum_dxhat_xhat = 0.0f64;
                        for j in 0..d {
                            let xhat = (xr[j] - m) * is;
                            let dxhat = dyr[j] * gs[j];
                            sum_dxhat += dxhat.to_f64();
                            sum_dxhat_xhat += (dxhat * xhat).to_f64();
                            dgamma[j] = dgamma[j] + dyr[j] * xhat;
                            dbeta[j] = dbeta[j] + dyr[j];
                        }
                        let mean_dxhat = T::from_f64(sum_dxhat / d as f64);
                        let mean_dxhat_xhat = T::from_f64(sum_dxhat_xhat / d as f64);
                        for j in 0..d {
                            let xhat = (xr[j] - m) * is;
                            let dxhat = dyr[j] * gs[j];
                            dxr[j] = is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    self.accum_owned(&mut adj, *x, dx);
                    self.accum_owned(&mut adj, *gamma, dgamma);
                    self.accum_owned(&mut adj, *beta, dbeta);
                }
                Op::Gelu(a) => {
                    let Aux::GeluTanh(tanhs) = &self.nodes[id].aux else {
                        unreachable!("gelu node without saved tanh")
                    };
                    let (c, ca, half) = (
                        T::from_f64(GELU_C),
                        T::from_f64(3.0 * GELU_A),
                        T::from_f64(0.5),
                    );
                    let xs = self.value(*a);
                    let mut part = dy;
                    for ((p, &x), &t) in part.iter_mut().zip(xs).zip(tanhs) {
                        let sech2 = T::ONE - t * t;
                        *p = *p
                            * (half * (T::ONE + t)
                                + half * x * sech2 * c * (T::ONE + ca * x * x));
                    }
                    self.accum_owned(&mut adj, *a, part);
                }
                Op::SumAll(a) => {
                    let g = dy[0];
                    let part = vec![g; self.value(*a).len()];
                    self.accum_owned(&mut adj, *a, part);
                }
                Op::MeanAll(a) => {
                    let n = self.value(*a).len();
                    let g = dy[0] * T::from_f64(1.0 / n as f64);
                    let part = vec![g; n];
                    self.accum_owned(&mut adj, *a, part);
                }
                Op::Embedding { table, ids } => {
                    let d = self.nodes[table.0].shape[1];
                    let ga = adj[table.0]
                        .get_or_insert_with(|| vec![T::ZERO; self.value(*table).len()]);
                    for (i, &row) in ids.iter().enumerate() {
                        add_into(&mut ga[row * d..(row + 1) * d], &dy[i * d..(i + 1) * d]);
                    }
                }
                Op::AddRow(a, row) => {
                    let d = self.nodes[row.0].shape[0];
                    if self.nodes[row.0].needs_grad {
                        let mut dr = vec![T::ZERO; d];
                        for chunk in dy.chunks_exact(d) {
                            add_into(&mut dr, chunk);
                        }
                        self.accum_owned(&mut adj, *row, dr);
                    }
                    self.accum_owned(&mut adj, *a, dy);
                }
                Op::MulRow(a, row) => {
                    let d = self.nodes[row.0].shape[0];
                    let rs = self.value(*row);
                    if self.nodes[row.0].needs_grad {
                        let av = self.value(*a);
                        let mut dr = vec![T::ZERO; d];
                        for (chunk, xchunk) in dy.chunks_exact(d).zip(av.chunks_exact(d)) {
                            for j in 0..d {
                                dr[j] = dr[j] + chunk[j] * xchunk[j];
                            }
                        }
                        self.accum_owned(&mut adj, *row, dr);
                    }
                    if self.nodes[a.0].needs_grad {
                        let mut part = dy;
                        for chunk in part.chunks_exact_mut(d) {
                            for (j, g) in chunk.iter_mut().enumerate() {
                                *g = *g * rs[j];
                            }
                        }
                        self.accum_owned(&mut adj, *a, part);
                    }
                }
                Op::Mha { q, k, v, heads } => {
                    let Aux::Probs(probs) = &self.nodes[id].aux else {
                        unreachable!("mha saves its probabilities");
                    };
                    let d = self.nodes[q.0].shape[1];
                    let (t_q, t_k, dh) = (self.nodes[q.0].shape[0], self.nodes[k.0].shape[0], d / heads);
                    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                    let qs = self.value(*q);
                    let ks = self.value(*k);
                    let vs = self.value(*v);
                    let mut dq = vec![T::ZERO; t_q * d];
                    let mut dk = vec![T::ZERO; t_k * d];
                    let mut dv = vec![T::ZERO; t_k * d];
                    let mut dp = vec![T::ZERO; t_q * t_k];
                    for h in 0..*heads {
                        let p = &probs[h * t_q * t_k..(h + 1) * t_q * t_k];
                        unsafe {
                            // dV_h = P^T dOut_h
                            T::gemm(
                                t_k,
                                t_q,
                                dh,
                                T::ONE,
                                p.as_ptr(),
                                1,
                                t_k as isize,
                                dy.as_ptr().add(h * dh),
                                d as isize,
                                1,
                                T::ZERO,
                                dv.as_mut_ptr().add(h * dh),
                                d as isize,
                                1,
                            );
                            // dP = dOut_h V_h^T
                            T::gemm(
                                t_q,
                                dh,
                                t_k,
                                T::ONE,
                                dy.as_ptr().add(h * dh),
                                d as isize,
                                1,
                                vs.as_ptr().add(h * dh),
                                1,
                                d as isize,
                                T::ZERO,
                                dp.as_mut_ptr(),
                                t_k as isize,
                                1,
                            );
                        }
                        // dS = P o (dP - rowdot(dP, P)), reusing dp in place
                        for (pr, dpr) in p.chunks_exact(t_k).zip(dp.chunks_exact_mut(t_k)) {
                            let mut dot = 0.0f64;
                            for j in 0..t_k {
                                dot += (pr[j] * dpr[j]).to_f64();
                            }
                            let dot = T::from_f64(dot);
                            for j in 0..t_k {
                                dpr[j] = pr[j] * (dpr[j] - dot);
                            }
                        }
                        unsafe {
                            // dQ_h = scale * dS K_h
                            T::gemm(
                                t_q,
                                t_k,
                                dh,
                                scale,
                                dp.as_ptr(),
                                t_k as isize,
                                1,
                                ks.as_ptr().add(h * dh),
                                d as isize,
                                1,
                                T::ZERO,
                                dq.as_mut_ptr().add(h * dh),
                                d as isize,
                                1,
                            );
                            // dK_h = scale * dS^T Q_h
                            T::gemm(
                                t_k,
                                t_q,
                                dh,
                                scale,
                                dp.as_ptr(),
                                1,
                                t_k as isize,
                                qs.as_ptr().add(h * dh),
                                d as isize,
                                1,
                                T::ZERO,
                                dk.as_mut_ptr().add(h * dh),
                                d as isize,
                                1,
                            );
                        }
                    }
                    self.accum_owned(&mut adj, *q, dq);
                    self.accum_owned(&mut adj, *k, dk);
                    self.accum_owned(&mut adj, *v, dv);
                }
            }
        }

        Ok(GradTable { grads: adj })
    }

    fn accum(
        &self,
        adj: &mut [Option<Vec<T>>],
        target: Var,
        part: &[T],
        combine: fn(&mut [T], &[T]),
    ) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let slot = adj[target.0].get_or_insert_with(|| vec![T::ZERO; part.len()]);
        combine(slot, part);
    }

    /// Like [`Graph::accum`] for an owned part: moves the buffer in when the
    /// target has no adjoint yet, which skips the zero-fill-and-add pass.
    fn accum_owned(&self, adj: &mut [Option<Vec<T>>], target: Var, part: Vec<T>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut adj[target.0] {
            Some(slot) => add_into(slot, &part),
            slot => *slot = Some(part),
        }
    }
}

/// The target's adjoint buffer plus the gemm beta that folds new content
/// into it: 1 accumulates onto existing gradients, 0 overwrites the fresh
/// zeroed buffer.
fn adj_slot<T: Scalar>(adj: &mut [Option<Vec<T>>], target: Var, len: usize) -> (&mut Vec<T>, T) {
    let beta = if adj[target.0].is_some() { T::ONE } else { T::ZERO };
    (adj[target.0].get_or_insert_with(|| vec![T::ZERO; len]), beta)
}

fn add_into<T: Scalar>(acc: &mut [T], part: &[T]) {
    debug_assert_eq!(acc.len(), part.len());
    for (a, &p) in acc.iter_mut().zip(part) {
        *a = *a + p;
    }
}

fn sub_into<T: Scalar>(acc: &mut [T], part: &[T]) {
    debug_assert_eq!(acc.len(), part.len());
    for (a, &p) in acc.iter_mut().zip(part) {
        *a = *a - p;
    }
}

fn softmax_row<T: Scalar>(row_in: &[T], row_out: &mut [T]) {
    let mut max = row_in[0];
    for &v in &row_in[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f64;
    for (o, &v) in row_out.iter_mut().zip(row_in) {
        let e = (v - max).exp();
        sum += e.to_f64();
        *o = e;
    }
    let inv = T::from_f64(1.0 / sum);
    for o in row_out.iter_mut() {
        *o = *o * inv;
    }
}

fn softmax_row_inplace<T: Scalar>(row: &mut [T]) {
    let mut max = row[0];
    for &v in &row[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        let e = (*v - max).exp();
        sum += e.to_f64();
        *v = e;
    }
    let inv = T::from_f64(1.0 / sum);
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

fn permute_copy<T: Scalar>(src: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let moved_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src_off = 0usize;
    for _ in 0..n {
        out.push(src[src_off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src_off += moved_strides[ax];
            if idx[ax] < new_shape[ax] {
                break;
            }
            src_off -= moved_strides[ax] * new_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn add_rejects_shape_mismatch_naming_op_and_shapes() {
        let mut g: Graph = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3]), false);
        let b = g.leaf(&Tensor::zeros(&[3, 2]), false);
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn matmul_matches_hand_product() {
        let mut g: Graph = Graph::new();
        let a = g.leaf(&t(&[2, 3], vec![1., 2., 3., 4., 5., 6.]), false);
        let b = g.leaf(&t(&[3, 2], vec![7., 8., 9., 10., 11., 12.]), false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[58., 64., 139., 154.]);
    }

    #[test]
    fn permute_then_inverse_roundtrips() {
        let mut g: Graph = Graph::new();
        let x = g.leaf(&t(&[2, 3, 4], (0..24).map(|i| i as f32).collect()), false);
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn slice_concat_roundtrips_on_every_axis() {
        let mut rng = Rng::new(1);
        let x = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        for axis in 0..3 {
            let mut g: Graph = Graph::new();
            let v = g.leaf(&x, false);
            let n = x.shape()[axis];
            let a = g.slice(v, axis, 0, 1).unwrap();
            let b = g.slice(v, axis, 1, n - 1).unwrap();
            let joined = g.concat(&[a, b], axis).unwrap();
            assert_eq!(g.value(joined), g.value(v), "axis {axis}");
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut g: Graph = Graph::new();
        let x = g.leaf(&Tensor::randn(&[7, 11], 3.0, &mut Rng::new(2)), false);
        let y = g.softmax(x).unwrap();
        for row in g.value(y).chunks_exact(11) {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let base = Tensor::randn(&[1, 9], 1.0, &mut Rng::new(3));
        let shifted = t(
            &[1, 9],
            base.data().iter().map(|v| v + 100.0).collect(),
        );
        let mut g: Graph = Graph::new();
        let a = g.leaf(&base, false);
        let b = g.leaf(&shifted, false);
        let ya = g.softmax(a).unwrap();
        let yb = g.softmax(b).unwrap();
        let (ya, yb) = (g.tensor(ya), g.tensor(yb));
        assert!(ya.max_abs_diff(&yb) < 1e-6);
    }

    #[test]
    fn layer_norm_rows_standardized_before_scale_shift() {
        let mut g: Graph = Graph::new();
        let x = g.leaf(&Tensor::randn(&[5, 64], 2.0, &mut Rng::new(4)), false);
        let gamma = g.leaf(&Tensor::full(&[64], 1.0), false);
        let beta = g.leaf(&Tensor::zeros(&[64]), false);
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for row in g.value(y).chunks_exact(64) {
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
            let var: f64 =
                row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn gelu_fixes_zero_and_is_odd_asymptotic() {
        let mut g: Graph = Graph::new();
        let x = g.leaf(&t(&[3], vec![0.0, 10.0, -10.0]), false);
        let y = g.gelu(x);
        let v = g.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-4);
        assert!(v[2].abs() < 1e-4);
    }

    #[test]
    fn reductions_agree_with_f64_reference() {
        let x = Tensor::randn(&[513], 1.0, &mut Rng::new(5));
        let reference: f64 = x.data().iter().map(|&v| v as f64).sum();
        let mut g: Graph = Graph::new();
        let v = g.leaf(&x, false);
        let s = g.sum_all(v);
        let m = g.mean_all(v);
        assert!((g.value(s)[0] as f64 - reference).abs() < 1e-4);
        assert!((g.value(m)[0] as f64 - reference / 513.0).abs() < 1e-7);
    }

    #[test]
    fn embedding_gathers_rows_and_rejects_oob() {
        let mut g: Graph = Graph::new();
        let table = g.leaf(&t(&[3, 2], vec![0., 1., 10., 11., 20., 21.]), false);
        let e = g.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(e), &[20., 21., 0., 1., 20., 21.]);
        assert!(g.embedding(table, &[3]).is_err());
    }

    #[test]
    fn mha_single_head_matches_explicit_composition() {
        let mut rng = Rng::new(6);
        let q = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let v = Tensor::randn(&[5, 8], 1.0, &mut rng);

        let mut g: Graph = Graph::new();
        let (qv, kv, vv) = (g.leaf(&q, false), g.leaf(&k, false), g.leaf(&v, false));
        let fused = g.mha(qv, kv, vv, 1).unwrap();

        let kt = g.permute(kv, &[1, 0]).unwrap();
        let scores = g.matmul(qv, kt).unwrap();
        let scaled = g.scale(scores, 1.0 / (8.0f32).sqrt());
        let probs = g.softmax(scaled).unwrap();
        let reference = g.matmul(probs, vv).unwrap();

        let (a, b) = (g.tensor(fused), g.tensor(reference));
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn mha_multi_head_matches_per_head_slices() {
        let mut rng = Rng::new(7);
        let q = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let v = Tensor::randn(&[3, 8], 1.0, &mut rng);

        let mut g: Graph = Graph::new();
        let (qv, kv, vv) = (g.leaf(&q, false), g.leaf(&k, false), g.leaf(&v, false));
        let fused = g.mha(qv, kv, vv, 2).unwrap();

        let mut parts = Vec::new();
        for h in 0..2 {
            let qh = g.slice(qv, 1, h * 4, 4).unwrap();
            let kh = g.slice(kv, 1, h * 4, 4).unwrap();
            let vh = g.slice(vv, 1, h * 4, 4).unwrap();
            let kt = g.permute(kh, &[1, 0]).unwrap();
            let scores = g.matmul(qh, kt).unwrap();
            let scaled = g.scale(scores, 0.5);
            let probs = g.softmax(scaled).unwrap();
            parts.push(g.matmul(probs, vh).unwrap());
        }
        let reference = g.concat(&parts, 1).unwrap();

        let (a, b) = (g.tensor(fused), g.tensor(reference));
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g: Graph = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_of_simple_chain_matches_hand_derivative() {
        // loss = mean((2x)^2) = 4/n sum x_i^2, so dloss/dx = 8x/n
        let x = t(&[4], vec![1.0, -2.0, 0.5, 3.0]);
        let mut g: Graph = Graph::new();
        let xv = g.leaf(&x, true);
        let two = g.scale(xv, 2.0);
        let sq = g.mul(two, two).unwrap();
        let loss = g.mean_all(sq);
        let grads = g.backward(loss).unwrap();
        let got = grads.get(xv).unwrap();
        for (i, &xi) in x.data().iter().enumerate() {
            let want = 8.0 * xi / 4.0;
            assert!((got[i] - want).abs() < 1e-6, "coord {i}: {} vs {want}", got[i]);
        }
    }

    #[test]
    fn backward_skips_leaves_without_grad() {
        let mut g: Graph = Graph::new();
        let a = g.leaf(&t(&[2], vec![1.0, 2.0]), true);
        let b = g.leaf(&t(&[2], vec![3.0, 4.0]), false);
        let p = g.mul(a, b).unwrap();
        let loss = g.sum_all(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn shared_f32_leaf_does_not_copy() {
        let x = Tensor::randn(&[128], 1.0, &mut Rng::new(8));
        let mut g: Graph<f32> = Graph::new();
        let v = g.leaf(&x, false);
        assert_eq!(g.value(v).as_ptr(), x.data().as_ptr());
    }
}
