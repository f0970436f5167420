//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation executed on it, in execution order,
//! which makes the record topologically sorted by construction. [`Graph::backward`]
//! replays the record in exact reverse order and accumulates gradients into
//! every node that transitively depends on a tracked leaf. The graph is meant
//! to be rebuilt for every forward pass of a training loop.

use crate::error::{Error, Result};
use crate::ndcore::tensor::Tensor;

/// Epsilon guarding divisions and norm denominators against zero.
pub const EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    DivEps(NodeId, NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceBlock { input: NodeId, r0: usize, c0: usize },
    Relu(NodeId),
    LogSumExp(NodeId),
    SoftmaxLogProb(NodeId),
    BatchColumnNorm(NodeId),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Reverse-mode tape over [`Tensor`] values.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf node, copying its data. The leaf is
    /// tracked for gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> NodeId {
        self.push(Node {
            rows: tensor.rows(),
            cols: tensor.cols(),
            value: tensor.data().to_vec(),
            needs_grad: tensor.requires_grad(),
            op: Op::Leaf,
        })
    }

    /// Untracked leaf holding constant values.
    pub fn constant(&mut self, tensor: &Tensor) -> NodeId {
        self.push(Node {
            rows: tensor.rows(),
            cols: tensor.cols(),
            value: tensor.data().to_vec(),
            needs_grad: false,
            op: Op::Leaf,
        })
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.rows, n.cols, n.value.clone()).expect("graph values are finite")
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if (n.rows, n.cols) != (1, 1) {
            return Err(Error::contract(format!(
                "expected scalar node, got {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.value[0])
    }

    /// Gradient buffer of a node after [`Graph::backward`]; `None` for
    /// untracked nodes or before any backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a tracked node as a tensor.
    pub fn grad_tensor(&self, id: NodeId) -> Result<Tensor> {
        let n = &self.nodes[id.0];
        let g = self
            .grad(id)
            .ok_or_else(|| Error::contract(format!("node {} has no gradient", id.0)))?;
        Tensor::new(n.rows, n.cols, g.to_vec())
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    fn finish(&mut self, op: &'static str, node: Node) -> Result<NodeId> {
        if !node.value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(self.push(node))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// `a @ b` for `(m,k) x (k,n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::dim(
                "matmul",
                format!("inner dims disagree: {m}x{ka} vs {kb}x{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        for i in 0..m {
            for k in 0..ka {
                let aik = av[i * ka + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let needs = self.needs(&[a, b]);
        self.finish(
            "matmul",
            Node {
                rows: m,
                cols: n,
                value: out,
                needs_grad: needs,
                op: Op::Matmul(a, b),
            },
        )
    }

    fn broadcast_binop(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let (bm, bn) = self.shape(b);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let value = if (bm, bn) == (m, n) {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else if (bm, bn) == (1, n) {
            // row vector broadcast over rows of a
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    out.push(f(av[i * n + j], bv[j]));
                }
            }
            out
        } else if (bm, bn) == (m, 1) {
            // column vector broadcast over columns of a
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    out.push(f(av[i * n + j], bv[i]));
                }
            }
            out
        } else {
            return Err(Error::dim(
                op_name,
                format!("shape mismatch: {m}x{n} vs {bm}x{bn}"),
            ));
        };
        let needs = self.needs(&[a, b]);
        self.finish(
            op_name,
            Node {
                rows: m,
                cols: n,
                value,
                needs_grad: needs,
                op,
            },
        )
    }

    /// Elementwise `a + b`; `b` may be a broadcast row `(1,n)` or column `(m,1)`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_binop("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise `a - b`; same broadcasting rules as [`Graph::add`].
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_binop("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            let (bm, bn) = self.shape(b);
            return Err(Error::dim(
                "elementwise-mul",
                format!("shape mismatch: {m}x{n} vs {bm}x{bn}"),
            ));
        }
        self.broadcast_binop("elementwise-mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `c * a` for a plain f64 constant `c`.
    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let value = self.nodes[a.0].value.iter().map(|&x| c * x).collect();
        let needs = self.needs(&[a]);
        self.finish(
            "scalar-mul",
            Node {
                rows: m,
                cols: n,
                value,
                needs_grad: needs,
                op: Op::ScalarMul(a, c),
            },
        )
    }

    /// Elementwise `a / d` with the denominator guarded away from zero:
    /// `d` is replaced by `copysign(max(|d|, EPS), d)`.
    pub fn div_eps(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (m, n) {
            let (bm, bn) = self.shape(b);
            return Err(Error::dim(
                "div-with-epsilon",
                format!("shape mismatch: {m}x{n} vs {bm}x{bn}"),
            ));
        }
        self.broadcast_binop(
            "div-with-epsilon",
            a,
            b,
            |x, y| x / guard_denom(y),
            Op::DivEps(a, b),
        )
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let needs = self.needs(&[a]);
        self.finish(
            op_name,
            Node {
                rows: m,
                cols: n,
                value,
                needs_grad: needs,
                op,
            },
        )
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let value = vec![self.nodes[a.0].value.iter().sum()];
        let needs = self.needs(&[a]);
        self.finish(
            "sum",
            Node {
                rows: 1,
                cols: 1,
                value,
                needs_grad: needs,
                op: Op::Sum(a),
            },
        )
    }

    /// Mean of all entries, as a 1x1 node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let len = self.nodes[a.0].value.len();
        if len == 0 {
            return Err(Error::dim("mean", "empty tensor".to_string()));
        }
        let value = vec![self.nodes[a.0].value.iter().sum::<f64>() / len as f64];
        let needs = self.needs(&[a]);
        self.finish(
            "mean",
            Node {
                rows: 1,
                cols: 1,
                value,
                needs_grad: needs,
                op: Op::Mean(a),
            },
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = av[i * n + j];
            }
        }
        let needs = self.needs(&[a]);
        self.finish(
            "transpose",
            Node {
                rows: n,
                cols: m,
                value,
                needs_grad: needs,
                op: Op::Transpose(a),
            },
        )
    }

    /// Concatenates inputs side by side, in argument order. All inputs must
    /// share a row count.
    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::dim("concat-cols", "no inputs".to_string()));
        }
        let (rows, _) = self.shape(inputs[0]);
        let mut total_cols = 0;
        for &id in inputs {
            let (r, c) = self.shape(id);
            if r != rows {
                return Err(Error::dim(
                    "concat-cols",
                    format!("row counts disagree: {rows} vs {r}"),
                ));
            }
            total_cols += c;
        }
        let mut value = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for &id in inputs {
            let (_, c) = self.shape(id);
            let v = &self.nodes[id.0].value;
            for i in 0..rows {
                value[i * total_cols + offset..i * total_cols + offset + c]
                    .copy_from_slice(&v[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let needs = self.needs(inputs);
        self.finish(
            "concat-cols",
            Node {
                rows,
                cols: total_cols,
                value,
                needs_grad: needs,
                op: Op::ConcatCols(inputs.to_vec()),
            },
        )
    }

    /// Extracts the rectangular block starting at `(r0, c0)` with shape
    /// `(rows, cols)`. Its gradient scatters into a zero tensor of the
    /// parent's shape.
    pub fn slice_block(
        &mut self,
        a: NodeId,
        r0: usize,
        c0: usize,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if r0 + rows > m || c0 + cols > n || rows == 0 || cols == 0 {
            return Err(Error::dim(
                "slice-block",
                format!("block ({r0},{c0})+{rows}x{cols} out of bounds for {m}x{n}"),
            ));
        }
        let av = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let src = (r0 + i) * n + c0;
            value.extend_from_slice(&av[src..src + cols]);
        }
        let needs = self.needs(&[a]);
        self.finish(
            "slice-block",
            Node {
                rows,
                cols,
                value,
                needs_grad: needs,
                op: Op::SliceBlock { input: a, r0, c0 },
            },
        )
    }

    /// Row-wise log-sum-exp, `(m,n) -> (m,1)`, computed with max shifting so
    /// large magnitudes do not overflow.
    pub fn log_sum_exp(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if n == 0 {
            return Err(Error::dim("log-sum-exp", "zero columns".to_string()));
        }
        let av = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(m);
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            value.push(log_sum_exp_row(row));
        }
        let needs = self.needs(&[a]);
        self.finish(
            "log-sum-exp",
            Node {
                rows: m,
                cols: 1,
                value,
                needs_grad: needs,
                op: Op::LogSumExp(a),
            },
        )
    }

    /// Row-wise log-softmax: `y_ij = a_ij - logsumexp(a_i)`. Each output row
    /// exponentiates to a probability vector.
    pub fn softmax_log_prob(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if n == 0 {
            return Err(Error::dim("softmax-log-prob", "zero columns".to_string()));
        }
        let av = &self.nodes[a.0].value;
        let mut value = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let lse = log_sum_exp_row(row);
            value.extend(row.iter().map(|&x| x - lse));
        }
        let needs = self.needs(&[a]);
        self.finish(
            "softmax-log-prob",
            Node {
                rows: m,
                cols: n,
                value,
                needs_grad: needs,
                op: Op::SoftmaxLogProb(a),
            },
        )
    }

    /// Column-wise L2 norms over the batch dimension, `(m,n) -> (1,n)`.
    pub fn batch_column_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut value = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                let x = av[i * n + j];
                value[j] += x * x;
            }
        }
        for v in value.iter_mut() {
            *v = v.sqrt();
        }
        let needs = self.needs(&[a]);
        self.finish(
            "batch-column-norm",
            Node {
                rows: 1,
                cols: n,
                value,
                needs_grad: needs,
                op: Op::BatchColumnNorm(a),
            },
        )
    }

    /// Reverse pass from a scalar loss node. Gradients accumulate into every
    /// node that transitively depends on a tracked leaf; tracked leaves the
    /// loss does not depend on receive an exactly-zero gradient buffer.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got {r}x{c}"
            )));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| {
                if n.needs_grad {
                    Some(vec![0.0; n.value.len()])
                } else {
                    None
                }
            })
            .collect();
        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any tracked tensor; nothing to do.
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            self.propagate(id);
        }
        Ok(())
    }

    fn take_grad(&mut self, id: usize) -> Vec<f64> {
        self.grads[id].take().expect("grad present")
    }

    fn restore_grad(&mut self, id: usize, g: Vec<f64>) {
        self.grads[id] = Some(g);
    }

    fn add_into(&mut self, target: NodeId, contribution: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.grads[target.0].as_mut() {
            contribution(g);
        }
    }

    fn propagate(&mut self, id: usize) {
        let op = self.nodes[id].op.clone();
        let g = self.take_grad(id);
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, ka) = self.shape(a);
                let (_, n) = self.shape(b);
                if self.nodes[a.0].needs_grad {
                    let bv = &self.nodes[b.0].value;
                    let mut ga = vec![0.0; m * ka];
                    for i in 0..m {
                        for k in 0..ka {
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &bv[k * n..(k + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            ga[i * ka + k] = acc;
                        }
                    }
                    self.add_into(a, |dst| axpy(dst, &ga));
                }
                if self.nodes[b.0].needs_grad {
                    let av = &self.nodes[a.0].value;
                    let mut gb = vec![0.0; ka * n];
                    for i in 0..m {
                        for k in 0..ka {
                            let aik = av[i * ka + k];
                            if aik == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            let brow = &mut gb[k * n..(k + 1) * n];
                            for j in 0..n {
                                brow[j] += aik * grow[j];
                            }
                        }
                    }
                    self.add_into(b, |dst| axpy(dst, &gb));
                }
            }
            Op::Add(a, b) => {
                self.add_into(a, |dst| axpy(dst, &g));
                let reduced = self.reduce_broadcast(a, b, &g);
                self.add_into(b, |dst| axpy(dst, &reduced));
            }
            Op::Sub(a, b) => {
                self.add_into(a, |dst| axpy(dst, &g));
                let reduced = self.reduce_broadcast(a, b, &g);
                self.add_into(b, |dst| axpy_neg(dst, &reduced));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let bv = self.nodes[b.0].value.clone();
                    self.add_into(a, |dst| {
                        for ((d, &gi), &bi) in dst.iter_mut().zip(&g).zip(&bv) {
                            *d += gi * bi;
                        }
                    });
                }
                if self.nodes[b.0].needs_grad {
                    let av = self.nodes[a.0].value.clone();
                    self.add_into(b, |dst| {
                        for ((d, &gi), &ai) in dst.iter_mut().zip(&g).zip(&av) {
                            *d += gi * ai;
                        }
                    });
                }
            }
            Op::ScalarMul(a, c) => {
                self.add_into(a, |dst| {
                    for (d, &gi) in dst.iter_mut().zip(&g) {
                        *d += c * gi;
                    }
                });
            }
            Op::DivEps(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let bv = self.nodes[b.0].value.clone();
                    self.add_into(a, |dst| {
                        for ((d, &gi), &bi) in dst.iter_mut().zip(&g).zip(&bv) {
                            *d += gi / guard_denom(bi);
                        }
                    });
                }
                if self.nodes[b.0].needs_grad {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    self.add_into(b, |dst| {
                        for i in 0..dst.len() {
                            // Inside the guard band the denominator is clamped
                            // to a constant, so the derivative w.r.t. it is 0.
                            if bv[i].abs() > EPS {
                                let d = guard_denom(bv[i]);
                                dst[i] += -g[i] * av[i] / (d * d);
                            }
                        }
                    });
                }
            }
            Op::Square(a) => {
                let av = self.nodes[a.0].value.clone();
                self.add_into(a, |dst| {
                    for ((d, &gi), &ai) in dst.iter_mut().zip(&g).zip(&av) {
                        *d += 2.0 * ai * gi;
                    }
                });
            }
            Op::Sqrt(a) => {
                let out = self.nodes[id].value.clone();
                self.add_into(a, |dst| {
                    for ((d, &gi), &oi) in dst.iter_mut().zip(&g).zip(&out) {
                        *d += gi / (2.0 * oi.max(EPS));
                    }
                });
            }
            Op::Sum(a) => {
                let gi = g[0];
                self.add_into(a, |dst| {
                    for d in dst.iter_mut() {
                        *d += gi;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gi = g[0] / n;
                self.add_into(a, |dst| {
                    for d in dst.iter_mut() {
                        *d += gi;
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.shape(a);
                self.add_into(a, |dst| {
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::ConcatCols(inputs) => {
                let (rows, total_cols) = {
                    let n = &self.nodes[id];
                    (n.rows, n.cols)
                };
                let mut offset = 0;
                for inp in inputs {
                    let (_, c) = self.shape(inp);
                    if self.nodes[inp.0].needs_grad {
                        let mut gi = vec![0.0; rows * c];
                        for i in 0..rows {
                            gi[i * c..(i + 1) * c].copy_from_slice(
                                &g[i * total_cols + offset..i * total_cols + offset + c],
                            );
                        }
                        self.add_into(inp, |dst| axpy(dst, &gi));
                    }
                    offset += c;
                }
            }
            Op::SliceBlock { input, r0, c0 } => {
                let (rows, cols) = {
                    let n = &self.nodes[id];
                    (n.rows, n.cols)
                };
                let (_, parent_cols) = self.shape(input);
                self.add_into(input, |dst| {
                    for i in 0..rows {
                        for j in 0..cols {
                            dst[(r0 + i) * parent_cols + (c0 + j)] += g[i * cols + j];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.clone();
                self.add_into(a, |dst| {
                    for ((d, &gi), &ai) in dst.iter_mut().zip(&g).zip(&av) {
                        if ai > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::LogSumExp(a) => {
                let (m, n) = self.shape(a);
                let av = self.nodes[a.0].value.clone();
                let lse = self.nodes[id].value.clone();
                self.add_into(a, |dst| {
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] += g[i] * (av[i * n + j] - lse[i]).exp();
                        }
                    }
                });
            }
            Op::SoftmaxLogProb(a) => {
                let (m, n) = self.shape(a);
                let out = self.nodes[id].value.clone();
                self.add_into(a, |dst| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..n {
                            let p = out[i * n + j].exp();
                            dst[i * n + j] += grow[j] - p * gsum;
                        }
                    }
                });
            }
            Op::BatchColumnNorm(a) => {
                let (m, n) = self.shape(a);
                let av = self.nodes[a.0].value.clone();
                let norms = self.nodes[id].value.clone();
                self.add_into(a, |dst| {
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] += g[j] * av[i * n + j] / norms[j].max(EPS);
                        }
                    }
                });
            }
        }
        self.restore_grad(id, g);
    }

    /// Reduces an upstream gradient of `a`'s shape down to `b`'s shape when
    /// `b` was broadcast in an add/sub.
    fn reduce_broadcast(&self, a: NodeId, b: NodeId, g: &[f64]) -> Vec<f64> {
        let (m, n) = self.shape(a);
        let (bm, bn) = self.shape(b);
        if (bm, bn) == (m, n) {
            g.to_vec()
        } else if (bm, bn) == (1, n) {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += g[i * n + j];
                }
            }
            out
        } else {
            debug_assert_eq!((bm, bn), (m, 1));
            let mut out = vec![0.0; m];
            for i in 0..m {
                for j in 0..n {
                    out[i] += g[i * n + j];
                }
            }
            out
        }
    }
}

fn guard_denom(d: f64) -> f64 {
    f64::copysign(d.abs().max(EPS), d)
}

fn log_sum_exp_row(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axpy_neg(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut g = Graph::new();
        let a = g.leaf(&t(2, 2, &[3.0, -1.0, 0.5, 7.0]));
        let id2 = g.leaf(&Tensor::identity(2));
        let out = g.matmul(id2, a).unwrap();
        assert_eq!(g.value(out), &[3.0, -1.0, 0.5, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(2, 3));
        let b = g.leaf(&Tensor::zeros(2, 3));
        assert!(matches!(
            g.matmul(a, b),
            Err(Error::Dimension { op: "matmul", .. })
        ));
    }

    #[test]
    fn concat_cols_matches_definition() {
        let mut g = Graph::new();
        let a = g.leaf(&t(1, 2, &[1.0, 2.0]));
        let b = g.leaf(&t(1, 1, &[3.0]));
        let out = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(out), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn log_sum_exp_does_not_overflow() {
        // Oracle: shift by the max, lse = max + ln(sum exp(x - max)).
        let mut g = Graph::new();
        let a = g.leaf(&t(1, 2, &[1000.0, 1000.0]));
        let out = g.log_sum_exp(a).unwrap();
        let expected = 1000.0 + 2.0f64.ln();
        assert!((g.value(out)[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(&t(1, 3, &[1.0, 2.0, 3.0]).with_grad());
        let sq = g.square(x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_mean_spreads_evenly() {
        let mut g = Graph::new();
        let x = g.leaf(&t(1, 4, &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let loss = g.mean(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(&t(1, 2, &[1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn independent_tracked_leaf_gets_exact_zero_grad() {
        let mut g = Graph::new();
        let unused = g.leaf(&t(2, 2, &[1.0; 4]).with_grad());
        let x = g.leaf(&t(1, 2, &[1.0, 2.0]).with_grad());
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn slice_block_gradient_scatters() {
        let mut g = Graph::new();
        let x = g.leaf(&t(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).with_grad());
        let block = g.slice_block(x, 1, 1, 2, 2).unwrap();
        assert_eq!(g.value(block), &[5.0, 6.0, 8.0, 9.0]);
        let loss = g.sum(block).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(
            g.grad(x).unwrap(),
            &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(&t(2, 2, &[0.3, -0.7, 1.9, 2.2]));
            let y = g.square(x).unwrap();
            let z = g.softmax_log_prob(y).unwrap();
            let s = g.sum(z).unwrap();
            g.scalar_value(s).unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn non_finite_output_names_op() {
        let mut g = Graph::new();
        let x = g.leaf(&t(1, 1, &[1e308]));
        let err = g.square(x).unwrap_err();
        match err {
            Error::NonFinite { op } => assert_eq!(op, "square"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn add_broadcasts_row_vector() {
        let mut g = Graph::new();
        let a = g.leaf(&t(2, 2, &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let b = g.leaf(&t(1, 2, &[10.0, 20.0]).with_grad());
        let out = g.add(a, b).unwrap();
        assert_eq!(g.value(out), &[11.0, 22.0, 13.0, 24.0]);
        let loss = g.sum(out).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);
    }
}
