use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::{NumericsError, Result, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Tanh(usize),
    Gelu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Square(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CausalSoftmax(usize),
    LogSoftmax(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    StackRows(Vec<usize>),
    MeanRows(usize),
    Gather {
        x: usize,
        idx: Vec<usize>,
    },
    PermuteRows {
        x: usize,
        perm: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    Minimum(usize, usize),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Wengert list of primitive operations.
///
/// Values are computed when an operation is recorded; [`Tape::backward`]
/// walks the list once in reverse, accumulating vector-Jacobian products.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every recorded value.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    visited: usize,
}

impl Gradients {
    /// Gradient for `v`; zero when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "gradient lookup with a foreign variable");
        let shape = &self.shapes[v.index];
        match self.grads.get(v.index).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(shape.clone(), g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Number of recorded operations replayed during the backward pass.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn binary_shape_check(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable recorded on a different tape");
        v.index
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn ng(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (m, k) = self.val(ai).dims2();
        let (k2, n) = self.val(bi).dims2();
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        kernels::mm_acc(self.val(ai).data(), self.val(bi).data(), &mut out, m, k, n);
        let ng = self.ng(&[ai, bi]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(ai, bi), ng)
    }

    /// `a @ b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (m, k) = self.val(ai).dims2();
        let (n, k2) = self.val(bi).dims2();
        assert_eq!(k, k2, "matmul_nt: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        kernels::mm_nt_acc(self.val(ai).data(), self.val(bi).data(), &mut out, m, k, n);
        let ng = self.ng(&[ai, bi]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(ai, bi), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> (usize, usize, Tensor) {
        let (ai, bi) = (self.idx(a), self.idx(b));
        binary_shape_check(name, self.val(ai), self.val(bi));
        let data = self
            .val(ai)
            .data()
            .iter()
            .zip(self.val(bi).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        (ai, bi, Tensor::from_parts(self.val(ai).shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi, t) = self.zip_with(a, b, "add", |x, y| x + y);
        let ng = self.ng(&[ai, bi]);
        self.push(t, Op::Add(ai, bi), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi, t) = self.zip_with(a, b, "sub", |x, y| x - y);
        let ng = self.ng(&[ai, bi]);
        self.push(t, Op::Sub(ai, bi), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi, t) = self.zip_with(a, b, "mul", |x, y| x * y);
        let ng = self.ng(&[ai, bi]);
        self.push(t, Op::Mul(ai, bi), ng)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi, t) = self.zip_with(a, b, "minimum", f64::min);
        let ng = self.ng(&[ai, bi]);
        self.push(t, Op::Minimum(ai, bi), ng)
    }

    /// Broadcast-add a row vector `[n]` to every row of `[m, n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ai, ri) = (self.idx(a), self.idx(row));
        let (m, n) = self.val(ai).dims2();
        assert_eq!(self.val(ri).len(), n, "add_row: row length");
        let r = self.val(ri).data();
        let mut data = self.val(ai).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        let shape = self.val(ai).shape().to_vec();
        let _ = m;
        let ng = self.ng(&[ai, ri]);
        self.push(Tensor::from_parts(shape, data), Op::AddRow(ai, ri), ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> (usize, Tensor) {
        let ai = self.idx(a);
        let x = self.val(ai);
        let data = x.data().iter().map(|&v| f(v)).collect();
        (ai, Tensor::from_parts(x.shape().to_vec(), data))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (ai, t) = self.map(a, |v| c * v);
        let ng = self.ng(&[ai]);
        self.push(t, Op::Scale(ai, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let (ai, t) = self.map(a, |v| v + c);
        let ng = self.ng(&[ai]);
        self.push(t, Op::Offset(ai), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let (ai, t) = self.map(a, f64::exp);
        let ng = self.ng(&[ai]);
        self.push(t, Op::Exp(ai), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (ai, t) = self.map(a, f64::tanh);
        let ng = self.ng(&[ai]);
        self.push(t, Op::Tanh(ai), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (ai, t) = self.map(a, kernels::gelu);
        let ng = self.ng(&[ai]);
        self.push(t, Op::Gelu(ai), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let (ai, t) = self.map(a, super::softplus);
        let ng = self.ng(&[ai]);
        self.push(t, Op::Softplus(ai), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (ai, t) = self.map(a, super::logistic);
        let ng = self.ng(&[ai]);
        self.push(t, Op::Sigmoid(ai), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let (ai, t) = self.map(a, |v| v * v);
        let ng = self.ng(&[ai]);
        self.push(t, Op::Square(ai), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (ai, t) = self.map(a, |v| v.clamp(lo, hi));
        let ng = self.ng(&[ai]);
        self.push(t, Op::Clamp { x: ai, lo, hi }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let ai = self.idx(a);
        let t = self
            .val(ai)
            .clone()
            .reshaped(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(&[ai]);
        self.push(t, Op::Reshape(ai), ng)
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (xi, gi, bi) = (self.idx(x), self.idx(gain), self.idx(bias));
        let (m, n) = self.val(xi).dims2();
        assert_eq!(self.val(gi).len(), n, "layer_norm: gain length");
        assert_eq!(self.val(bi).len(), n, "layer_norm: bias length");
        let (out, xhat, rstd) = kernels::layer_norm(
            self.val(xi).data(),
            self.val(gi).data(),
            self.val(bi).data(),
            m,
            n,
        );
        let shape = self.val(xi).shape().to_vec();
        let ng = self.ng(&[xi, gi, bi]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Softmax over each row of a square score matrix, with entries above the
    /// diagonal masked out (row `i` attends only to columns `<= i`).
    pub fn causal_softmax(&mut self, scores: Var) -> Var {
        let si = self.idx(scores);
        let (t, t2) = self.val(si).dims2();
        assert_eq!(t, t2, "causal_softmax expects a square matrix");
        let s = self.val(si).data();
        let mut out = vec![0.0; t * t];
        for i in 0..t {
            let row = &s[i * t..i * t + i + 1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                out[i * t + j] = e;
                sum += e;
            }
            for j in 0..=i {
                out[i * t + j] /= sum;
            }
        }
        let ng = self.ng(&[si]);
        self.push(Tensor::from_parts(vec![t, t], out), Op::CausalSoftmax(si), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let (_, n) = self.val(ai).dims2();
        let mut data = self.val(ai).data().to_vec();
        kernels::log_softmax_rows(&mut data, n);
        let shape = self.val(ai).shape().to_vec();
        let ng = self.ng(&[ai]);
        self.push(Tensor::from_parts(shape, data), Op::LogSoftmax(ai), ng)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let ti = self.idx(table);
        let (v, d) = self.val(ti).dims2();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding: id {id} out of range {v}");
            out.extend_from_slice(self.val(ti).row(id));
        }
        let ng = self.ng(&[ti]);
        self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table: ti,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ai = self.idx(a);
        let (m, n) = self.val(ai).dims2();
        assert!(start + len <= n, "slice_cols out of range");
        let x = self.val(ai).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&x[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(&[ai]);
        self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols { x: ai, start },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let m = self.val(idx[0]).dims2().0;
        let widths: Vec<usize> = idx
            .iter()
            .map(|&i| {
                let (mi, ni) = self.val(i).dims2();
                assert_eq!(mi, m, "concat_cols: row count");
                ni
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&i, &w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.val(i).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = self.ng(&idx);
        self.push(Tensor::from_parts(vec![m, total], out), Op::ConcatCols(idx), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ai = self.idx(a);
        let (m, n) = self.val(ai).dims2();
        assert!(start + len <= m, "slice_rows out of range");
        let out = self.val(ai).data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(&[ai]);
        self.push(
            Tensor::from_parts(vec![len, n], out),
            Op::SliceRows { x: ai, start },
            ng,
        )
    }

    /// Concatenate rows of equally wide inputs (vectors count as one row).
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let n = self.val(idx[0]).dims2().1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &i in &idx {
            let (mi, ni) = self.val(i).dims2();
            assert_eq!(ni, n, "stack_rows: width");
            rows += mi;
            out.extend_from_slice(self.val(i).data());
        }
        let ng = self.ng(&idx);
        self.push(Tensor::from_parts(vec![rows, n], out), Op::StackRows(idx), ng)
    }

    /// Column means of `[m, n]`, as a vector `[n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let (m, n) = self.val(ai).dims2();
        assert!(m > 0, "mean_rows of empty matrix");
        let mut out = vec![0.0; n];
        for row in self.val(ai).data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let ng = self.ng(&[ai]);
        self.push(Tensor::from_parts(vec![n], out), Op::MeanRows(ai), ng)
    }

    /// `out[i] = a[i, idx[i]]`
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let ai = self.idx(a);
        let (m, n) = self.val(ai).dims2();
        assert_eq!(idx.len(), m, "gather: one index per row");
        let x = self.val(ai).data();
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < n, "gather index out of range");
                x[i * n + j]
            })
            .collect();
        let ng = self.ng(&[ai]);
        self.push(
            Tensor::from_parts(vec![m], out),
            Op::Gather {
                x: ai,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// `out[i] = a[perm[i]]` row-wise.
    pub fn permute_rows(&mut self, a: Var, perm: &[usize]) -> Var {
        let ai = self.idx(a);
        let (m, n) = self.val(ai).dims2();
        assert_eq!(perm.len(), m, "permute_rows: permutation length");
        let mut out = Vec::with_capacity(m * n);
        for &p in perm {
            out.extend_from_slice(self.val(ai).row(p));
        }
        let shape = self.val(ai).shape().to_vec();
        let ng = self.ng(&[ai]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::PermuteRows {
                x: ai,
                perm: perm.to_vec(),
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let s = self.val(ai).data().iter().sum();
        let ng = self.ng(&[ai]);
        self.push(Tensor::scalar(s), Op::Sum(ai), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ai = self.idx(a);
        let x = self.val(ai);
        assert!(!x.is_empty(), "mean of empty tensor");
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        let ng = self.ng(&[ai]);
        self.push(Tensor::scalar(s), Op::Mean(ai), ng)
    }

    /// Sum of a list of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty(), "add_all of nothing");
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(NumericsError::ForeignVar);
        }
        let root = &self.nodes[loss.index].value;
        if root.len() != 1 {
            return Err(NumericsError::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visited,
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[*a].value.dims2();
                let n = nodes[*b].value.dims2().1;
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                if let Some(da) = slot(nodes, grads, *a) {
                    kernels::mm_nt_acc(g, bv, da, m, n, k);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    kernels::mm_tn_acc(av, g, db, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = nodes[*a].value.dims2();
                let n = nodes[*b].value.dims2().0;
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                if let Some(da) = slot(nodes, grads, *a) {
                    kernels::mm_acc(g, bv, da, m, n, k);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    kernels::mm_tn_acc(g, av, db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    axpy(da, 1.0, g);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    axpy(db, 1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    axpy(da, 1.0, g);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    axpy(db, -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                if let Some(da) = slot(nodes, grads, *a) {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                if let Some(da) = slot(nodes, grads, *a) {
                    for (((d, &gi), &x), &y) in da.iter_mut().zip(g).zip(av).zip(bv) {
                        if x <= y {
                            *d += gi;
                        }
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for (((d, &gi), &x), &y) in db.iter_mut().zip(g).zip(av).zip(bv) {
                        if x > y {
                            *d += gi;
                        }
                    }
                }
            }
            Op::AddRow(a, r) => {
                let n = nodes[*r].value.len();
                if let Some(da) = slot(nodes, grads, *a) {
                    axpy(da, 1.0, g);
                }
                if let Some(dr) = slot(nodes, grads, *r) {
                    for chunk in g.chunks(n) {
                        axpy(dr, 1.0, chunk);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    axpy(da, *c, g);
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    axpy(da, 1.0, g);
                }
            }
            Op::Exp(a) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(out) {
                        *d += gi * y;
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(out) {
                        *d += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(out) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Gelu(a) => {
                let x = nodes[*a].value.data();
                if let Some(da) = slot(nodes, grads, *a) {
                    for ((d, &gi), &xv) in da.iter_mut().zip(g).zip(x) {
                        *d += gi * kernels::gelu_grad(xv);
                    }
                }
            }
            Op::Softplus(a) => {
                let x = nodes[*a].value.data();
                if let Some(da) = slot(nodes, grads, *a) {
                    for ((d, &gi), &xv) in da.iter_mut().zip(g).zip(x) {
                        *d += gi * super::logistic(xv);
                    }
                }
            }
            Op::Square(a) => {
                let x = nodes[*a].value.data();
                if let Some(da) = slot(nodes, grads, *a) {
                    for ((d, &gi), &xv) in da.iter_mut().zip(g).zip(x) {
                        *d += 2.0 * gi * xv;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = nodes[*x].value.data();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v >= *lo && v <= *hi {
                            *d += gi;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = nodes[*x].value.dims2();
                let gv = nodes[*gain].value.data();
                if let Some(dx) = slot(nodes, grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            dxhat[j] = grow[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hrow[j];
                        }
                        let scale = rstd[r] / n as f64;
                        let drow = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            drow[j] += scale * (n as f64 * dxhat[j] - s1 - hrow[j] * s2);
                        }
                    }
                }
                if let Some(dg) = slot(nodes, grads, *gain) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(db) = slot(nodes, grads, *bias) {
                    for grow in g.chunks(n) {
                        axpy(db, 1.0, grow);
                    }
                }
            }
            Op::CausalSoftmax(s) => {
                let (t, _) = nodes[*s].value.dims2();
                if let Some(ds) = slot(nodes, grads, *s) {
                    for r in 0..t {
                        let prow = &out[r * t..r * t + r + 1];
                        let grow = &g[r * t..r * t + r + 1];
                        let inner: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                        for j in 0..=r {
                            ds[r * t + j] += prow[j] * (grow[j] - inner);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let n = nodes[*a].value.dims2().1;
                if let Some(da) = slot(nodes, grads, *a) {
                    for ((drow, grow), lrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let gs: f64 = grow.iter().sum();
                        for j in 0..n {
                            drow[j] += grow[j] - lrow[j].exp() * gs;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[*table].value.dims2().1;
                if let Some(dt) = slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * d..(id + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = nodes[*x].value.dims2();
                let len = nodes[i].value.dims2().1;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for r in 0..m {
                        axpy(
                            &mut dx[r * n + start..r * n + start + len],
                            1.0,
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = nodes[i].value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.dims2().1;
                    if let Some(dp) = slot(nodes, grads, p) {
                        for r in 0..m {
                            axpy(
                                &mut dp[r * w..(r + 1) * w],
                                1.0,
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = nodes[*x].value.dims2().1;
                if let Some(dx) = slot(nodes, grads, *x) {
                    axpy(&mut dx[start * n..start * n + g.len()], 1.0, g);
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if let Some(dp) = slot(nodes, grads, p) {
                        axpy(dp, 1.0, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = nodes[*a].value.dims2();
                if let Some(da) = slot(nodes, grads, *a) {
                    for drow in da.chunks_mut(n) {
                        axpy(drow, 1.0 / m as f64, g);
                    }
                }
            }
            Op::Gather { x, idx } => {
                let n = nodes[*x].value.dims2().1;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (r, &j) in idx.iter().enumerate() {
                        dx[r * n + j] += g[r];
                    }
                }
            }
            Op::PermuteRows { x, perm } => {
                let n = nodes[*x].value.dims2().1;
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (r, &p) in perm.iter().enumerate() {
                        axpy(&mut dx[p * n..(p + 1) * n], 1.0, &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                let len = nodes[*a].value.len() as f64;
                if let Some(da) = slot(nodes, grads, *a) {
                    da.iter_mut().for_each(|d| *d += g[0] / len);
                }
            }
        }
    }
}

/// Lazily allocated accumulator for input `j`, or None if it needs no gradient.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], j: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[j].needs_grad {
        return None;
    }
    let len = nodes[j].value.len();
    Some(grads[j].get_or_insert_with(|| vec![0.0; len]))
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
