//! Tape-based reverse-mode differentiation over [`Tensor`].
//!
//! Define-by-run: every op computes its value eagerly and records itself on
//! the tape; [`Tape::backward`] walks the tape in reverse. The op set is the
//! minimum the model needs — convolution and pooling are expressed through
//! `gather` (im2col) plus matmul rather than dedicated ops.
//!
//! Nonlinearities are smooth on purpose: finite-difference gradient checks
//! are part of the contract, and kinked activations would make them flaky.

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::tensor::Tensor;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    /// a: r×c plus row vector b: 1×c broadcast over rows.
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    SoftmaxRows(usize),
    SumAll(usize),
    MeanAll(usize),
    /// out[i] = src[idx[i]] for idx[i] >= 0, else 0. Backward scatter-adds.
    Gather { src: usize, idx: Vec<i64> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    /// Per-element mean over n same-shape inputs, summed in ascending value
    /// order so any permutation of the inputs gives bit-identical output.
    MeanStack(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation; cheap to create per forward pass and dropped after.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients for every node of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros if the loss never touched it.
    pub fn of(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = v.shape();
                Tensor::zeros(r, c)
            }
        }
    }
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Leaf that is semantically constant. Gradients may still be computed
    /// for it; callers simply never read them.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Tensor::from_vec(1, 1, vec![value]))
    }

    /// Handle to an already-recorded node.
    pub fn var_at(&self, id: usize) -> Var<'_> {
        assert!(id < self.len(), "node id out of range");
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a 1×1 loss node.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.shape(),
            (1, 1),
            "backward expects a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::from_vec(1, 1, vec![1.0]));

        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, &nodes);
                    accumulate(&mut grads, *b, &g, &nodes);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g, &nodes);
                    accumulate(&mut grads, *b, &g.scale(-1.0), &nodes);
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(&nodes[*b].value);
                    let gb = g.mul(&nodes[*a].value);
                    accumulate(&mut grads, *a, &ga, &nodes);
                    accumulate(&mut grads, *b, &gb, &nodes);
                }
                Op::Div(a, b) => {
                    let bv = &nodes[*b].value;
                    let av = &nodes[*a].value;
                    let ga = g.zip(bv, |gi, bi| gi / bi);
                    let gb = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g
                            .data
                            .iter()
                            .zip(av.data.iter().zip(bv.data.iter()))
                            .map(|(gi, (ai, bi))| -gi * ai / (bi * bi))
                            .collect(),
                    };
                    accumulate(&mut grads, *a, &ga, &nodes);
                    accumulate(&mut grads, *b, &gb, &nodes);
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, &g, &nodes),
                Op::MulScalar(a, s) => accumulate(&mut grads, *a, &g.scale(*s), &nodes),
                Op::AddRow(a, b) => {
                    accumulate(&mut grads, *a, &g, &nodes);
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gb.data[c] += g.data[r * g.cols + c];
                        }
                    }
                    accumulate(&mut grads, *b, &gb, &nodes);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&nodes[*b].value.transpose());
                    let gb = nodes[*a].value.transpose().matmul(&g);
                    accumulate(&mut grads, *a, &ga, &nodes);
                    accumulate(&mut grads, *b, &gb, &nodes);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, &g.transpose(), &nodes),
                Op::Tanh(a) => {
                    let ga = g.zip(&node.value, |gi, y| gi * (1.0 - y * y));
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip(&node.value, |gi, y| gi * y * (1.0 - y));
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
                Op::Softplus(a) => {
                    let xv = &nodes[*a].value;
                    let ga = g.zip(xv, |gi, x| gi * crate::mathx::sigmoid(x));
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
                Op::Exp(a) => {
                    let ga = g.mul(&node.value);
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
                Op::Ln(a) => {
                    let xv = &nodes[*a].value;
                    let ga = g.zip(xv, |gi, x| gi / x);
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
                Op::Sqrt(a) => {
                    let ga = g.zip(&node.value, |gi, y| gi * 0.5 / y);
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(yi, gi)| yi * gi).sum();
                        for c in 0..y.cols {
                            ga.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
                Op::SumAll(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    let ga = Tensor::filled(r, c, g.data[0]);
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
                Op::MeanAll(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    let ga = Tensor::filled(r, c, g.data[0] / (r * c) as f64);
                    accumulate(&mut grads, *a, &ga, &nodes);
                }
                Op::Gather { src, idx } => {
                    let (r, c) = nodes[*src].value.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for (out_pos, &i) in idx.iter().enumerate() {
                        if i >= 0 {
                            ga.data[i as usize] += g.data[out_pos];
                        }
                    }
                    accumulate(&mut grads, *src, &ga, &nodes);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = nodes[p].value.shape();
                        let mut gp = Tensor::zeros(r, c);
                        gp.data
                            .copy_from_slice(&g.data[offset * c..(offset + r) * c]);
                        offset += r;
                        accumulate(&mut grads, p, &gp, &nodes);
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows;
                    let mut col_offset = 0;
                    for &p in parts {
                        let (r, c) = nodes[p].value.shape();
                        debug_assert_eq!(r, rows);
                        let mut gp = Tensor::zeros(r, c);
                        for row in 0..rows {
                            for cc in 0..c {
                                gp.data[row * c + cc] = g.data[row * g.cols + col_offset + cc];
                            }
                        }
                        col_offset += c;
                        accumulate(&mut grads, p, &gp, &nodes);
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = &nodes[*x].value;
                    let gv = &nodes[*gamma].value;
                    let (r, c) = xv.shape();
                    let mut gx = Tensor::zeros(r, c);
                    let mut ggamma = Tensor::zeros(1, c);
                    let mut gbeta = Tensor::zeros(1, c);
                    for row in 0..r {
                        let xr = xv.row(row);
                        let mu: f64 = xr.iter().sum::<f64>() / c as f64;
                        let var: f64 =
                            xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                        let s = crate::mathx::sqrt(var + eps);
                        let gr = g.row(row);
                        let mut mean_a = 0.0;
                        let mut mean_ax = 0.0;
                        let mut a = vec![0.0; c];
                        let mut xhat = vec![0.0; c];
                        for i in 0..c {
                            xhat[i] = (xr[i] - mu) / s;
                            a[i] = gr[i] * gv.data[i];
                            mean_a += a[i];
                            mean_ax += a[i] * xhat[i];
                            ggamma.data[i] += gr[i] * xhat[i];
                            gbeta.data[i] += gr[i];
                        }
                        mean_a /= c as f64;
                        mean_ax /= c as f64;
                        for i in 0..c {
                            gx.data[row * c + i] = (a[i] - mean_a - xhat[i] * mean_ax) / s;
                        }
                    }
                    accumulate(&mut grads, *x, &gx, &nodes);
                    accumulate(&mut grads, *gamma, &ggamma, &nodes);
                    accumulate(&mut grads, *beta, &gbeta, &nodes);
                }
                Op::MeanStack(parts) => {
                    let n = parts.len() as f64;
                    let gp = g.scale(1.0 / n);
                    for &p in parts {
                        accumulate(&mut grads, p, &gp, &nodes);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: &Tensor, nodes: &[Node]) {
    debug_assert_eq!(nodes[id].value.shape(), g.shape(), "gradient shape mismatch");
    match &mut grads[id] {
        Some(existing) => existing.add_assign(g),
        slot => *slot = Some(g.clone()),
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].value.shape()
    }

    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        assert_eq!(nodes[self.id].value.shape(), (1, 1), "item on non-scalar");
        nodes[self.id].value.data[0]
    }

    fn same_tape(&self, other: Var<'t>) {
        assert!(core::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let v = self.value().add(&other.value());
        self.tape.push(v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let v = self.value().sub(&other.value());
        self.tape.push(v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let v = self.value().mul(&other.value());
        self.tape.push(v, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let v = self.value().zip(&other.value(), |a, b| a / b);
        self.tape.push(v, Op::Div(self.id, other.id))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.tape.push(v, Op::AddScalar(self.id))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.tape.push(v, Op::MulScalar(self.id, s))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Matrix plus a broadcast row vector.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.same_tape(row);
        let a = self.value();
        let b = row.value();
        assert_eq!(b.rows, 1, "add_row expects a 1xC row");
        assert_eq!(a.cols, b.cols, "add_row width mismatch");
        let mut out = a.clone();
        for r in 0..a.rows {
            for c in 0..a.cols {
                out.data[r * a.cols + c] += b.data[c];
            }
        }
        self.tape.push(out, Op::AddRow(self.id, row.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let v = self.value().matmul(&other.value());
        self.tape.push(v, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().transpose();
        self.tape.push(v, Op::Transpose(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(crate::mathx::tanh);
        self.tape.push(v, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(crate::mathx::sigmoid);
        self.tape.push(v, Op::Sigmoid(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        let v = self.value().map(crate::mathx::softplus);
        self.tape.push(v, Op::Softplus(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(crate::mathx::exp);
        self.tape.push(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().map(crate::mathx::ln);
        self.tape.push(v, Op::Ln(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().map(crate::mathx::sqrt);
        self.tape.push(v, Op::Sqrt(self.id))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let mut out = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = x.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..x.cols {
                let e = crate::mathx::exp(row[c] - m);
                out.data[r * x.cols + c] = e;
                denom += e;
            }
            for c in 0..x.cols {
                out.data[r * x.cols + c] /= denom;
            }
        }
        self.tape.push(out, Op::SoftmaxRows(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let s: f64 = self.value().data.iter().sum();
        self.tape
            .push(Tensor::from_vec(1, 1, vec![s]), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let s: f64 = v.data.iter().sum::<f64>() / v.len() as f64;
        self.tape
            .push(Tensor::from_vec(1, 1, vec![s]), Op::MeanAll(self.id))
    }

    pub fn squared_norm(self) -> Var<'t> {
        self.mul(self).sum()
    }

    /// Element gather from the flattened source; index -1 reads as 0.
    pub fn gather(self, idx: Vec<i64>, rows: usize, cols: usize) -> Var<'t> {
        assert_eq!(idx.len(), rows * cols, "gather index count");
        let src = self.value();
        let n = src.len() as i64;
        let mut out = Tensor::zeros(rows, cols);
        for (pos, &i) in idx.iter().enumerate() {
            assert!(i < n, "gather index out of range");
            if i >= 0 {
                out.data[pos] = src.data[i as usize];
            }
        }
        self.tape.push(out, Op::Gather { src: self.id, idx })
    }

    /// Select a contiguous row range.
    pub fn slice_rows(self, start: usize, len: usize) -> Var<'t> {
        let (_, c) = self.shape();
        let idx: Vec<i64> = (start * c..(start + len) * c).map(|i| i as i64).collect();
        self.gather(idx, len, c)
    }

    /// Select one row as 1×C.
    pub fn row(self, r: usize) -> Var<'t> {
        self.slice_rows(r, 1)
    }

    /// Select a contiguous column range.
    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let (rows, c) = self.shape();
        let mut idx = Vec::with_capacity(rows * len);
        for r in 0..rows {
            for j in 0..len {
                idx.push((r * c + start + j) as i64);
            }
        }
        self.gather(idx, rows, len)
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let cols = parts[0].shape().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            p.same_tape(parts[0]);
            let v = p.value();
            assert_eq!(v.cols, cols, "concat_rows width mismatch");
            rows += v.rows;
            data.extend_from_slice(&v.data);
        }
        tape.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        )
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let rows = parts[0].shape().0;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let total: usize = values.iter().map(|v| v.cols).collect::<Vec<_>>().iter().sum();
        let mut out = Tensor::zeros(rows, total);
        for r in 0..rows {
            let mut off = 0;
            for v in &values {
                assert_eq!(v.rows, rows, "concat_cols height mismatch");
                for c in 0..v.cols {
                    out.data[r * total + off + c] = v.data[r * v.cols + c];
                }
                off += v.cols;
            }
        }
        tape.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Row-wise layer normalization with learnable gain/offset.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        assert_eq!(gv.shape(), (1, x.cols), "layer_norm gamma shape");
        assert_eq!(bv.shape(), (1, x.cols), "layer_norm beta shape");
        let mut out = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = x.row(r);
            let mu: f64 = row.iter().sum::<f64>() / x.cols as f64;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / x.cols as f64;
            let s = crate::mathx::sqrt(var + eps);
            for c in 0..x.cols {
                out.data[r * x.cols + c] = (row[c] - mu) / s * gv.data[c] + bv.data[c];
            }
        }
        self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
        )
    }

    /// Arithmetic mean of same-shape vars with a canonical summation order;
    /// permuting `parts` gives a bit-identical result.
    pub fn mean_stack(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "mean_stack over empty list");
        let tape = parts[0].tape;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let shape = values[0].shape();
        for v in &values {
            assert_eq!(v.shape(), shape, "mean_stack shape mismatch");
        }
        let n = values.len();
        let mut out = Tensor::zeros(shape.0, shape.1);
        let mut scratch: Vec<f64> = Vec::with_capacity(n);
        for pos in 0..out.len() {
            scratch.clear();
            scratch.extend(values.iter().map(|v| v.data[pos]));
            out.data[pos] = crate::util::canonical_sum(&mut scratch) / n as f64;
        }
        tape.push(out, Op::MeanStack(parts.iter().map(|p| p.id).collect()))
    }
}

impl<'t> core::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> core::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> core::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}
