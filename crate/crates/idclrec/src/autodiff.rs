//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of a forward pass eagerly (values are
//! computed immediately); [`Tape::backward`] then walks the tape in reverse
//! and accumulates vector-Jacobian products into per-node gradients. One tape
//! is built per training batch and dropped afterwards.
//!
//! The op set is exactly what the model needs; gradient correctness of every
//! op is pinned by finite-difference tests below and by the end-to-end
//! gradient checks in the acceptance suite.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::matrix::{sigmoid, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Boolean mask with matrix shape; `true` marks an allowed entry.
#[derive(Debug, Clone)]
pub struct BoolMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BoolMat {
    pub fn filled(rows: usize, cols: usize, v: bool) -> Self {
        BoolMat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    /// Square mask allowing `j <= i`: position `i` sees itself and the past.
    pub fn causal(n: usize) -> Self {
        let mut m = BoolMat::filled(n, n, false);
        for i in 0..n {
            for j in 0..=i {
                m.set(i, j, true);
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTB(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulElem(Var, Var),
    Affine(Var, f64),
    MulMask(Var, Matrix),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var, Option<BoolMat>),
    LayerNorm(Var, Var, Var, f64),
    ShiftDown(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SumRowsExclDiag(Var),
    RowwiseDot(Var, Var),
    MeanRows(Var),
    MeanAll(Var),
    XentRows(Var, Vec<usize>, Option<BoolMat>),
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
}

/// Gradient tape. Not thread-safe; one per batch.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(nodes.len() - 1)
    }

    /// Register an input (parameter or constant).
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.leaf(Matrix::scalar(v))
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Matrix) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn value_clone(&self, v: Var) -> Matrix {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[v.0].value.rows, nodes[v.0].value.cols)
    }

    pub fn value_at(&self, v: Var, r: usize, c: usize) -> f64 {
        self.nodes.borrow()[v.0].value.get(r, c)
    }

    /// Remove and return the accumulated gradient of `v` (if any path
    /// reached it during the last backward pass).
    pub fn take_grad(&self, v: Var) -> Option<Matrix> {
        self.nodes.borrow_mut()[v.0].grad.take()
    }

    // ---- forward ops -----------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)
        };
        self.push(value, Op::MatMul(a, b))
    }

    /// `a @ b^T`.
    pub fn matmul_tb(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul_tb(&nodes[b.0].value)
        };
        self.push(value, Op::MatMulTB(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            assert!(av.same_shape(bv), "add shape");
            let mut out = av.clone();
            out.add_assign(bv);
            out
        };
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            assert!(av.same_shape(bv), "sub shape");
            let mut out = av.clone();
            out.scaled_add(-1.0, bv);
            out
        };
        self.push(value, Op::Sub(a, b))
    }

    /// `a + row` with `row` a `1 x cols` vector broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, rv) = (&nodes[a.0].value, &nodes[row.0].value);
            assert_eq!(rv.rows, 1, "add_row expects 1 x d row");
            assert_eq!(av.cols, rv.cols, "add_row width");
            let mut out = av.clone();
            for r in 0..out.rows {
                for (o, &b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                    *o += b;
                }
            }
            out
        };
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul_elem(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            assert!(av.same_shape(bv), "mul_elem shape");
            Matrix {
                rows: av.rows,
                cols: av.cols,
                data: av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
            }
        };
        self.push(value, Op::MulElem(a, b))
    }

    /// `alpha * a + beta`, elementwise.
    pub fn affine(&self, a: Var, alpha: f64, beta: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.map(|v| alpha * v + beta)
        };
        self.push(value, Op::Affine(a, alpha))
    }

    pub fn scale(&self, a: Var, alpha: f64) -> Var {
        self.affine(a, alpha, 0.0)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_mask(&self, a: Var, mask: Matrix) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            assert!(av.same_shape(&mask), "mul_mask shape");
            Matrix {
                rows: av.rows,
                cols: av.cols,
                data: av.data.iter().zip(&mask.data).map(|(x, y)| x * y).collect(),
            }
        };
        self.push(value, Op::MulMask(a, mask))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.map(sigmoid)
        };
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.map(|v| v.max(0.0))
        };
        self.push(value, Op::Relu(a))
    }

    /// Row-wise softmax restricted to `mask` entries (disallowed entries get
    /// probability exactly 0). `None` means all entries allowed.
    pub fn softmax_rows(&self, a: Var, mask: Option<BoolMat>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            softmax_rows_value(&nodes[a.0].value, mask.as_ref())
        };
        self.push(value, Op::SoftmaxRows(a, mask))
    }

    /// Per-row layer normalization with learned gain and bias (`1 x d` each).
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            assert_eq!(gv.rows, 1);
            assert_eq!(bv.rows, 1);
            assert_eq!(gv.cols, xv.cols);
            assert_eq!(bv.cols, xv.cols);
            let mut out = Matrix::zeros(xv.rows, xv.cols);
            for r in 0..xv.rows {
                let row = xv.row(r);
                let (mean, inv_std) = row_moments(row, eps);
                for (c, &v) in row.iter().enumerate() {
                    out.set(r, c, gv.data[c] * (v - mean) * inv_std + bv.data[c]);
                }
            }
            out
        };
        self.push(value, Op::LayerNorm(x, gain, bias, eps))
    }

    /// Shift all rows down by one; row 0 becomes the zero vector.
    pub fn shift_down(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let mut out = Matrix::zeros(av.rows, av.cols);
            for r in 1..av.rows {
                out.row_mut(r).copy_from_slice(av.row(r - 1));
            }
            out
        };
        self.push(value, Op::ShiftDown(a))
    }

    /// Select rows by index (duplicates allowed); gradients scatter-add back.
    pub fn gather_rows(&self, a: Var, indices: Vec<usize>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let mut out = Matrix::zeros(indices.len(), av.cols);
            for (r, &idx) in indices.iter().enumerate() {
                out.row_mut(r).copy_from_slice(av.row(idx));
            }
            out
        };
        self.push(value, Op::GatherRows(a, indices))
    }

    /// Stack inputs vertically. All inputs must share the column count.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols;
            let rows: usize = parts.iter().map(|p| nodes[p.0].value.rows).sum();
            let mut out = Matrix::zeros(rows, cols);
            let mut r = 0;
            for p in parts {
                let pv = &nodes[p.0].value;
                assert_eq!(pv.cols, cols, "concat_rows width");
                for pr in 0..pv.rows {
                    out.row_mut(r).copy_from_slice(pv.row(pr));
                    r += 1;
                }
            }
            out
        };
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Columns `[c0, c1)`.
    pub fn slice_cols(&self, a: Var, c0: usize, c1: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            assert!(c0 < c1 && c1 <= av.cols);
            let mut out = Matrix::zeros(av.rows, c1 - c0);
            for r in 0..av.rows {
                out.row_mut(r).copy_from_slice(&av.row(r)[c0..c1]);
            }
            out
        };
        self.push(value, Op::SliceCols(a, c0))
    }

    /// Concatenate inputs horizontally. All inputs must share the row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows;
            let cols: usize = parts.iter().map(|p| nodes[p.0].value.cols).sum();
            let mut out = Matrix::zeros(rows, cols);
            let mut c = 0;
            for p in parts {
                let pv = &nodes[p.0].value;
                assert_eq!(pv.rows, rows, "concat_cols height");
                for r in 0..rows {
                    out.row_mut(r)[c..c + pv.cols].copy_from_slice(pv.row(r));
                }
                c += pv.cols;
            }
            out
        };
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// For square `S`, the `1 x m` vector of row sums excluding the diagonal.
    pub fn sum_rows_excl_diag(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            assert_eq!(av.rows, av.cols, "sum_rows_excl_diag square");
            let mut out = Matrix::zeros(1, av.rows);
            for i in 0..av.rows {
                let mut s = 0.0;
                for j in 0..av.cols {
                    if j != i {
                        s += av.get(i, j);
                    }
                }
                out.data[i] = s;
            }
            out
        };
        self.push(value, Op::SumRowsExclDiag(a))
    }

    /// Row-by-row dot products of two equally shaped matrices (`m x 1` out).
    pub fn rowwise_dot(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            assert!(av.same_shape(bv), "rowwise_dot shape");
            let mut out = Matrix::zeros(av.rows, 1);
            for r in 0..av.rows {
                out.data[r] = crate::matrix::dot(av.row(r), bv.row(r));
            }
            out
        };
        self.push(value, Op::RowwiseDot(a, b))
    }

    /// Mean over rows (`1 x d` out).
    pub fn mean_rows(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let mut out = Matrix::zeros(1, av.cols);
            for r in 0..av.rows {
                for (o, &v) in out.data.iter_mut().zip(av.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / av.rows as f64;
            for o in out.data.iter_mut() {
                *o *= inv;
            }
            out
        };
        self.push(value, Op::MeanRows(a))
    }

    /// Mean over all entries (`1 x 1` out).
    pub fn mean_all(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            Matrix::scalar(av.data.iter().sum::<f64>() / av.data.len() as f64)
        };
        self.push(value, Op::MeanAll(a))
    }

    /// Per-row `-log softmax(logits)[target]`, softmax restricted to `mask`
    /// entries when given. Targets must be allowed. Output is `B x 1`.
    pub fn xent_rows(&self, logits: Var, targets: Vec<usize>, mask: Option<BoolMat>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits.0].value;
            assert_eq!(lv.rows, targets.len(), "xent_rows target count");
            let mut out = Matrix::zeros(lv.rows, 1);
            for r in 0..lv.rows {
                let row = lv.row(r);
                let allowed = |j: usize| mask.as_ref().map_or(true, |m| m.get(r, j));
                debug_assert!(allowed(targets[r]), "xent target masked out");
                let mut mx = f64::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if allowed(j) && v > mx {
                        mx = v;
                    }
                }
                let mut sum = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    if allowed(j) {
                        sum += (v - mx).exp();
                    }
                }
                out.data[r] = mx + sum.ln() - row[targets[r]];
            }
            out
        };
        self.push(value, Op::XentRows(logits, targets, mask))
    }

    // ---- backward --------------------------------------------------------

    /// Backpropagate from a scalar (`1 x 1`) root. Gradients accumulate into
    /// every node reachable from it; read them with [`Tape::take_grad`].
    pub fn backward(&self, root: Var) {
        let mut nodes = self.nodes.borrow_mut();
        {
            let rv = &nodes[root.0].value;
            assert_eq!((rv.rows, rv.cols), (1, 1), "backward root must be scalar");
        }
        nodes[root.0].grad = Some(Matrix::scalar(1.0));

        for id in (0..=root.0).rev() {
            let grad = match nodes[id].grad.take() {
                Some(g) => g,
                None => continue,
            };
            // Leaves keep their gradient for extraction.
            if matches!(nodes[id].op, Op::Leaf) {
                nodes[id].grad = Some(grad);
                continue;
            }
            propagate(&mut nodes, id, grad);
        }
    }

    /// Check that a node's value is finite, for divergence guards.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let m = &nodes[v.0].value;
        if !m.all_finite() {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(m.data[0])
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn softmax_rows_value(x: &Matrix, mask: Option<&BoolMat>) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let allowed = |j: usize| mask.map_or(true, |m| m.get(r, j));
        let mut mx = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > mx {
                mx = v;
            }
        }
        debug_assert!(mx > f64::NEG_INFINITY, "softmax row fully masked");
        let mut sum = 0.0;
        let orow = out.row_mut(r);
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - mx).exp();
                orow[j] = e;
                sum += e;
            }
        }
        let inv = 1.0 / sum;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    out
}

fn add_grad(nodes: &mut [Node], v: Var, delta: &Matrix) {
    let slot = &mut nodes[v.0].grad;
    match slot {
        Some(g) => g.add_assign(delta),
        None => *slot = Some(delta.clone()),
    }
}

fn add_grad_owned(nodes: &mut [Node], v: Var, delta: Matrix) {
    let slot = &mut nodes[v.0].grad;
    match slot {
        Some(g) => g.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

fn propagate(nodes: &mut Vec<Node>, id: usize, grad: Matrix) {
    // Ops only reference earlier nodes, so splitting at `id` lets us read the
    // current node while mutating parents.
    let (before, rest) = nodes.split_at_mut(id);
    let node = &rest[0];
    match &node.op {
        Op::Leaf => unreachable!("leaf handled by caller"),
        Op::MatMul(a, b) => {
            let (av, bv) = (&before[a.0].value, &before[b.0].value);
            let da = grad.matmul_tb(bv);
            let db = av.matmul_ta(&grad);
            add_grad_owned(before, *a, da);
            add_grad_owned(before, *b, db);
        }
        Op::MatMulTB(a, b) => {
            let (av, bv) = (&before[a.0].value, &before[b.0].value);
            let da = grad.matmul(bv);
            let db = grad.matmul_ta(av);
            add_grad_owned(before, *a, da);
            add_grad_owned(before, *b, db);
        }
        Op::Add(a, b) => {
            add_grad(before, *a, &grad);
            add_grad(before, *b, &grad);
        }
        Op::Sub(a, b) => {
            add_grad(before, *a, &grad);
            let mut neg = grad;
            for v in neg.data.iter_mut() {
                *v = -*v;
            }
            add_grad_owned(before, *b, neg);
        }
        Op::AddRow(a, row) => {
            let mut drow = Matrix::zeros(1, grad.cols);
            for r in 0..grad.rows {
                for (o, &g) in drow.data.iter_mut().zip(grad.row(r)) {
                    *o += g;
                }
            }
            add_grad_owned(before, *row, drow);
            add_grad_owned(before, *a, grad);
        }
        Op::MulElem(a, b) => {
            let (av, bv) = (&before[a.0].value, &before[b.0].value);
            let da = Matrix {
                rows: grad.rows,
                cols: grad.cols,
                data: grad.data.iter().zip(&bv.data).map(|(g, v)| g * v).collect(),
            };
            let db = Matrix {
                rows: grad.rows,
                cols: grad.cols,
                data: grad.data.iter().zip(&av.data).map(|(g, v)| g * v).collect(),
            };
            add_grad_owned(before, *a, da);
            add_grad_owned(before, *b, db);
        }
        Op::Affine(a, alpha) => {
            let mut da = grad;
            for v in da.data.iter_mut() {
                *v *= alpha;
            }
            add_grad_owned(before, *a, da);
        }
        Op::MulMask(a, mask) => {
            let da = Matrix {
                rows: grad.rows,
                cols: grad.cols,
                data: grad
                    .data
                    .iter()
                    .zip(&mask.data)
                    .map(|(g, m)| g * m)
                    .collect(),
            };
            add_grad_owned(before, *a, da);
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            let da = Matrix {
                rows: grad.rows,
                cols: grad.cols,
                data: grad
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect(),
            };
            add_grad_owned(before, *a, da);
        }
        Op::Relu(a) => {
            let xv = &before[a.0].value;
            let da = Matrix {
                rows: grad.rows,
                cols: grad.cols,
                data: grad
                    .data
                    .iter()
                    .zip(&xv.data)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            };
            add_grad_owned(before, *a, da);
        }
        Op::SoftmaxRows(a, mask) => {
            let y = &node.value;
            let mut da = Matrix::zeros(grad.rows, grad.cols);
            for r in 0..grad.rows {
                let yr = y.row(r);
                let gr = grad.row(r);
                let allowed = |j: usize| mask.as_ref().map_or(true, |m| m.get(r, j));
                let t: f64 = yr
                    .iter()
                    .zip(gr)
                    .enumerate()
                    .filter(|(j, _)| allowed(*j))
                    .map(|(_, (&yj, &gj))| yj * gj)
                    .sum();
                let dr = da.row_mut(r);
                for j in 0..dr.len() {
                    if allowed(j) {
                        dr[j] = yr[j] * (gr[j] - t);
                    }
                }
            }
            add_grad_owned(before, *a, da);
        }
        Op::LayerNorm(x, gain, bias, eps) => {
            let xv = &before[x.0].value;
            let gv = &before[gain.0].value;
            let d = xv.cols as f64;
            let mut dx = Matrix::zeros(xv.rows, xv.cols);
            let mut dg = Matrix::zeros(1, xv.cols);
            let mut db = Matrix::zeros(1, xv.cols);
            for r in 0..xv.rows {
                let row = xv.row(r);
                let (mean, inv_std) = row_moments(row, *eps);
                let gr = grad.row(r);
                // dxhat_c = grad_c * gain_c; two row means close the VJP.
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for c in 0..row.len() {
                    let xhat = (row[c] - mean) * inv_std;
                    let dxhat = gr[c] * gv.data[c];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dg.data[c] += gr[c] * xhat;
                    db.data[c] += gr[c];
                }
                let m1 = sum_dxhat / d;
                let m2 = sum_dxhat_xhat / d;
                let dr = dx.row_mut(r);
                for c in 0..row.len() {
                    let xhat = (row[c] - mean) * inv_std;
                    dr[c] = inv_std * (gr[c] * gv.data[c] - m1 - xhat * m2);
                }
            }
            add_grad_owned(before, *x, dx);
            add_grad_owned(before, *gain, dg);
            add_grad_owned(before, *bias, db);
        }
        Op::ShiftDown(a) => {
            let av_rows = before[a.0].value.rows;
            let mut da = Matrix::zeros(av_rows, grad.cols);
            for r in 1..grad.rows {
                da.row_mut(r - 1).copy_from_slice(grad.row(r));
            }
            add_grad_owned(before, *a, da);
        }
        Op::GatherRows(a, indices) => {
            let (ar, ac) = (before[a.0].value.rows, before[a.0].value.cols);
            let mut da = Matrix::zeros(ar, ac);
            for (r, &idx) in indices.iter().enumerate() {
                for (o, &g) in da.row_mut(idx).iter_mut().zip(grad.row(r)) {
                    *o += g;
                }
            }
            add_grad_owned(before, *a, da);
        }
        Op::ConcatRows(parts) => {
            let mut r = 0;
            let parts = parts.clone();
            for p in parts {
                let pr = before[p.0].value.rows;
                let mut dp = Matrix::zeros(pr, grad.cols);
                for i in 0..pr {
                    dp.row_mut(i).copy_from_slice(grad.row(r + i));
                }
                r += pr;
                add_grad_owned(before, p, dp);
            }
        }
        Op::SliceCols(a, c0) => {
            let (ar, ac) = (before[a.0].value.rows, before[a.0].value.cols);
            let mut da = Matrix::zeros(ar, ac);
            for r in 0..grad.rows {
                da.row_mut(r)[*c0..*c0 + grad.cols].copy_from_slice(grad.row(r));
            }
            add_grad_owned(before, *a, da);
        }
        Op::ConcatCols(parts) => {
            let mut c = 0;
            let parts = parts.clone();
            for p in parts {
                let pc = before[p.0].value.cols;
                let mut dp = Matrix::zeros(grad.rows, pc);
                for r in 0..grad.rows {
                    dp.row_mut(r).copy_from_slice(&grad.row(r)[c..c + pc]);
                }
                c += pc;
                add_grad_owned(before, p, dp);
            }
        }
        Op::SumRowsExclDiag(a) => {
            let m = before[a.0].value.rows;
            let mut da = Matrix::zeros(m, m);
            for i in 0..m {
                let g = grad.data[i];
                for j in 0..m {
                    if j != i {
                        da.set(i, j, g);
                    }
                }
            }
            add_grad_owned(before, *a, da);
        }
        Op::RowwiseDot(a, b) => {
            let (av, bv) = (&before[a.0].value, &before[b.0].value);
            let mut da = Matrix::zeros(av.rows, av.cols);
            let mut db = Matrix::zeros(av.rows, av.cols);
            for r in 0..av.rows {
                let g = grad.data[r];
                for c in 0..av.cols {
                    da.set(r, c, g * bv.get(r, c));
                    db.set(r, c, g * av.get(r, c));
                }
            }
            add_grad_owned(before, *a, da);
            add_grad_owned(before, *b, db);
        }
        Op::MeanRows(a) => {
            let ar = before[a.0].value.rows;
            let inv = 1.0 / ar as f64;
            let mut da = Matrix::zeros(ar, grad.cols);
            for r in 0..ar {
                for (o, &g) in da.row_mut(r).iter_mut().zip(&grad.data) {
                    *o = g * inv;
                }
            }
            add_grad_owned(before, *a, da);
        }
        Op::MeanAll(a) => {
            let av = &before[a.0].value;
            let g = grad.data[0] / av.data.len() as f64;
            let da = Matrix {
                rows: av.rows,
                cols: av.cols,
                data: vec![g; av.data.len()],
            };
            add_grad_owned(before, *a, da);
        }
        Op::XentRows(logits, targets, mask) => {
            let lv = &before[logits.0].value;
            let probs = softmax_rows_value(lv, mask.as_ref());
            let mut dl = Matrix::zeros(lv.rows, lv.cols);
            for r in 0..lv.rows {
                let g = grad.data[r];
                let pr = probs.row(r);
                let dr = dl.row_mut(r);
                for j in 0..dr.len() {
                    dr[j] = g * pr[j];
                }
                dr[targets[r]] -= g;
            }
            add_grad_owned(before, *logits, dl);
        }
    }
}

// ---- finite-difference gradient checking ----------------------------------

/// Compare analytic gradients against central finite differences
/// `(f(x+eps) - f(x-eps)) / 2 eps` on the sampled coordinates of a flattened
/// parameter vector. Returns the maximum relative error.
pub fn grad_check_flat(
    theta: &mut [f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    epsilon: f64,
    sample: &[usize],
) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::Config("grad check epsilon must be > 0".into()));
    }
    assert_eq!(theta.len(), analytic.len());
    let mut max_rel = 0.0_f64;
    for &i in sample {
        let orig = theta[i];
        theta[i] = orig + epsilon;
        let up = loss(theta);
        theta[i] = orig - epsilon;
        let down = loss(theta);
        theta[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
