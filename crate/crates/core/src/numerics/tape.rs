//! Reverse-mode gradient tape over matrix-valued nodes.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`GradTape::backward`] simply walks it in reverse.
//! Leaves are either trainable parameters or constants; a node requires a
//! gradient iff one of its inputs does, and the backward pass never computes
//! adjoints for nodes that do not.
//!
//! Primitive set:
//!
//! | op | shape rule |
//! |----|------------|
//! | `matmul(a, b, ta, tb)` | `op(a) * op(b)` |
//! | `add(a, b)` | same shapes |
//! | `scale(a, c)` | constant scalar `c` |
//! | `mul_col(a, w)` | row `r` of `a` times `w[r]`, `w` is `n x 1` |
//! | `row_softmax(a)` | softmax over each row |
//! | `segment_softmax(s, offsets)` | softmax over ragged rows of a column |
//! | `sigmoid`, `log`, `exp` | elementwise |
//! | `row_dot(a, b)` | `n x d, n x d -> n x 1` |
//! | `sum(a)` | `1 x 1` |
//! | `sum_rows(a)` | `n x d -> n x 1` |
//! | `segment_sum(a, offsets)` | sums ragged groups of rows |
//! | `concat(a, b)` | stacks rows |
//! | `gather(a, index)` | row lookup |
//!
//! The segmented operations take CSR offsets; they are the ragged-row forms
//! of `row_softmax` and `sum` and are what keep neighbourhood aggregation
//! linear in the number of edges.

use std::sync::Arc;

use super::tensor::{softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Add(Var, Var),
    Scale(Var, f64),
    MulCol(Var, Var),
    RowSoftmax(Var),
    SegmentSoftmax(Var, Arc<[usize]>),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    RowDot(Var, Var),
    Sum(Var),
    SumRows(Var),
    SegmentSum(Var, Arc<[usize]>),
    Concat(Var, Var),
    Gather(Var, Arc<[u32]>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`GradTape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss or is a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, with unreached variables reported as zeros of the right shape.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn check_segments(offsets: &[usize], rows: usize) -> Result<()> {
    let ok = !offsets.is_empty()
        && offsets[0] == 0
        && *offsets.last().unwrap() == rows
        && offsets.windows(2).all(|w| w[0] <= w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "segment offsets do not partition {rows} rows"
        )))
    }
}

fn finite(t: Tensor, what: &str) -> Result<Tensor> {
    t.ensure_finite(what)?;
    Ok(t)
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose trainability is decided by the caller.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b), trans_a, trans_b)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `a - b`, recorded as `add(a, scale(b, -1))`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::Numeric(format!("scale factor {c}")));
        }
        let value = self.value(a).scale(c)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Scale(a, c), rg))
    }

    pub fn mul_col(&mut self, a: Var, w: Var) -> Result<Var> {
        let (av, wv) = (self.value(a), self.value(w));
        if wv.cols() != 1 || wv.rows() != av.rows() {
            return Err(Error::Shape(format!(
                "mul_col: {:?} by {:?}",
                av.shape(),
                wv.shape()
            )));
        }
        let cols = av.cols();
        let mut data = av.as_slice().to_vec();
        if cols > 0 {
            for (row, &s) in data.chunks_mut(cols).zip(wv.as_slice()) {
                row.iter_mut().for_each(|x| *x *= s);
            }
        }
        let value = finite(Tensor::from_raw(av.rows(), cols, data), "mul_col")?;
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(value, Op::MulCol(a, w), rg))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).row_softmax()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::RowSoftmax(a), rg))
    }

    /// Softmax of a column vector within each segment `offsets[s]..offsets[s+1]`.
    pub fn segment_softmax(&mut self, s: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let sv = self.value(s);
        if sv.cols() != 1 {
            return Err(Error::Shape(format!(
                "segment_softmax needs a column, got {:?}",
                sv.shape()
            )));
        }
        check_segments(&offsets, sv.rows())?;
        let mut data = sv.as_slice().to_vec();
        for w in offsets.windows(2) {
            softmax_in_place(&mut data[w[0]..w[1]]);
        }
        let value = Tensor::from_raw(sv.rows(), 1, data);
        let rg = self.rg(s);
        Ok(self.push(value, Op::SegmentSoftmax(s, offsets), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, what: &str) -> Result<Var> {
        let av = self.value(a);
        let data = av.as_slice().iter().map(|&x| f(x)).collect();
        let value = finite(Tensor::from_raw(av.rows(), av.cols(), data), what)?;
        let rg = self.rg(a);
        Ok(self.push(value, op, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a), "sigmoid")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).as_slice().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        self.unary(a, f64::ln, Op::Log(a), "log")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a), "exp")
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "row_dot: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = (0..av.rows())
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        let value = finite(Tensor::from_raw(av.rows(), 1, data), "row_dot")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::RowDot(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = finite(Tensor::from_raw(1, 1, vec![self.value(a).sum()]), "sum")?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let data = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        let value = finite(Tensor::from_raw(av.rows(), 1, data), "sum_rows")?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SumRows(a), rg))
    }

    /// Sums each group of rows `offsets[s]..offsets[s+1]`; empty groups give zero rows.
    pub fn segment_sum(&mut self, a: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let av = self.value(a);
        check_segments(&offsets, av.rows())?;
        let cols = av.cols();
        let n_seg = offsets.len() - 1;
        let mut data = vec![0.0; n_seg * cols];
        for (s, w) in offsets.windows(2).enumerate() {
            let out = &mut data[s * cols..(s + 1) * cols];
            for r in w[0]..w[1] {
                for (o, x) in out.iter_mut().zip(av.row(r)) {
                    *o += x;
                }
            }
        }
        let value = finite(Tensor::from_raw(n_seg, cols, data), "segment_sum")?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SegmentSum(a, offsets), rg))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_rows(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    pub fn gather(&mut self, a: Var, index: Arc<[u32]>) -> Result<Var> {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            let i = i as usize;
            if i >= av.rows() {
                return Err(Error::Range(format!("gather row {i} of {}", av.rows())));
            }
            data.extend_from_slice(av.row(i));
        }
        let value = Tensor::from_raw(index.len(), cols, data);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gather(a, index), rg))
    }

    /// Reverse pass from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward from a non-scalar node of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::from_raw(1, 1, vec![1.0]));
        }
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }
        for g in grads.iter().flatten() {
            g.ensure_finite("gradient")?;
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..n].iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.rg(a) {
                    // C = op(A) op(B); dop(A) = G op(B)^T
                    let ga = if trans_a {
                        // A^T = ... so dA = op(B) G^T
                        bv.matmul(g, trans_b, true)?
                    } else {
                        g.matmul(bv, false, !trans_b)?
                    };
                    self.accumulate(grads, a, ga);
                }
                if self.rg(b) {
                    let gb = if trans_b {
                        g.matmul(av, true, trans_a)?
                    } else {
                        av.matmul(g, !trans_a, false)?
                    };
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Scale(a, c) => {
                self.accumulate(grads, a, g.scale(c)?);
            }
            &Op::MulCol(a, w) => {
                let (av, wv) = (self.value(a), self.value(w));
                let cols = av.cols();
                if self.rg(a) {
                    let mut data = g.as_slice().to_vec();
                    if cols > 0 {
                        for (row, &s) in data.chunks_mut(cols).zip(wv.as_slice()) {
                            row.iter_mut().for_each(|x| *x *= s);
                        }
                    }
                    self.accumulate(grads, a, Tensor::from_raw(av.rows(), cols, data));
                }
                if self.rg(w) {
                    let data = (0..av.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, w, Tensor::from_raw(av.rows(), 1, data));
                }
            }
            &Op::RowSoftmax(a) => {
                let cols = y.cols();
                let mut data = vec![0.0; y.len()];
                if cols > 0 {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..cols {
                            data[r * cols + c] = yr[c] * (gr[c] - inner);
                        }
                    }
                }
                self.accumulate(grads, a, Tensor::from_raw(y.rows(), cols, data));
            }
            Op::SegmentSoftmax(a, offsets) => {
                let (ys, gs) = (y.as_slice(), g.as_slice());
                let mut data = vec![0.0; ys.len()];
                for w in offsets.windows(2) {
                    let inner: f64 = (w[0]..w[1]).map(|e| ys[e] * gs[e]).sum();
                    for e in w[0]..w[1] {
                        data[e] = ys[e] * (gs[e] - inner);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_raw(y.rows(), 1, data));
            }
            &Op::Sigmoid(a) => {
                let data = y
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(s, q)| q * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, a, Tensor::from_raw(y.rows(), y.cols(), data));
            }
            &Op::Log(a) => {
                let x = self.value(a);
                let data = x
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(x, q)| q / x)
                    .collect();
                let t = finite(Tensor::from_raw(y.rows(), y.cols(), data), "log gradient")?;
                self.accumulate(grads, a, t);
            }
            &Op::Exp(a) => {
                let data = y
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(e, q)| q * e)
                    .collect();
                self.accumulate(grads, a, Tensor::from_raw(y.rows(), y.cols(), data));
            }
            &Op::RowDot(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let scaled = |src: &Tensor| {
                    let cols = src.cols();
                    let mut data = src.as_slice().to_vec();
                    if cols > 0 {
                        for (row, &s) in data.chunks_mut(cols).zip(g.as_slice()) {
                            row.iter_mut().for_each(|x| *x *= s);
                        }
                    }
                    Tensor::from_raw(src.rows(), cols, data)
                };
                if self.rg(a) {
                    self.accumulate(grads, a, scaled(bv));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, scaled(av));
                }
            }
            &Op::Sum(a) => {
                let av = self.value(a);
                let s = g.as_slice()[0];
                self.accumulate(grads, a, Tensor::filled(av.rows(), av.cols(), s));
            }
            &Op::SumRows(a) => {
                let av = self.value(a);
                let cols = av.cols();
                let mut data = Vec::with_capacity(av.len());
                for &s in g.as_slice() {
                    data.extend(std::iter::repeat_n(s, cols));
                }
                self.accumulate(grads, a, Tensor::from_raw(av.rows(), cols, data));
            }
            Op::SegmentSum(a, offsets) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut data = Vec::with_capacity(av.len());
                for (s, w) in offsets.windows(2).enumerate() {
                    for _ in w[0]..w[1] {
                        data.extend_from_slice(g.row(s));
                    }
                }
                self.accumulate(grads, *a, Tensor::from_raw(av.rows(), cols, data));
            }
            &Op::Concat(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let cols = y.cols();
                let split = av.rows() * cols;
                if self.rg(a) {
                    let t = Tensor::from_raw(av.rows(), av.cols(), g.as_slice()[..split].to_vec());
                    self.accumulate(grads, a, t);
                }
                if self.rg(b) {
                    let t = Tensor::from_raw(bv.rows(), bv.cols(), g.as_slice()[split..].to_vec());
                    self.accumulate(grads, b, t);
                }
            }
            Op::Gather(a, index) => {
                let av = self.value(*a);
                let cols = av.cols();
                let mut data = vec![0.0; av.len()];
                for (r, &i) in index.iter().enumerate() {
                    let dst = &mut data[i as usize * cols..(i as usize + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_raw(av.rows(), cols, data));
            }
        }
        Ok(())
    }
}

/// Logistic function evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
