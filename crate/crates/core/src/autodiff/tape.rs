//! Reverse-mode autodiff on an append-only operation tape.
//!
//! A `Tape` records every forward operation together with its output value.
//! `backward` replays the record in strictly decreasing node order and
//! accumulates vector-Jacobian products. Tapes are rebuilt per training step;
//! a tape can run backward once and is then consumed.
//!
//! The one non-standard primitive is [`Tape::grad_reverse`]: identity in the
//! forward pass, exact negation of the upstream gradient in the backward
//! pass. It carries no scale factor; loss weighting stays in the loss terms.

use super::math;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: NodeId,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// a(m x k) * b(k x n)
    Matmul { a: NodeId, b: NodeId },
    /// a(m x k) * b(n x k)^T
    MatmulBt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// x(n x d) + row(1 x d), broadcast over rows
    AddRow { x: NodeId, row: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    /// Row-wise layer norm with affine gain/bias; saved per-row mean and 1/std.
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu { x: NodeId },
    Tanh { x: NodeId },
    /// Rows of an embedding table.
    Gather { table: NodeId, ids: Vec<u32> },
    /// Row softmax over the causal prefix: row i spans columns 0..=i.
    CausalSoftmax { x: NodeId },
    SliceRows { x: NodeId, r0: usize },
    SliceCols { x: NodeId, c0: usize, src_cols: usize },
    ConcatRows { parts: Vec<(NodeId, usize)> },
    ConcatCols { parts: Vec<(NodeId, usize)> },
    /// Weighted mean over rows: sum_i w_i x_i / sum_i w_i.
    MeanPoolRows { x: NodeId, weights: Vec<f64>, wsum: f64 },
    /// sum_i w_i * nll_i / divisor over rows of logits.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        weights: Vec<f64>,
        divisor: f64,
    },
    GradReverse { x: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients keyed by node id, produced by [`Tape::backward`].
///
/// Only gradients for leaves (and any node the backward sweep reached) are
/// retained; intermediate buffers are dropped as soon as their producing op
/// has consumed them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zeros if nothing flowed to it.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(t) => t.clone(),
            None => Tensor::zeros(var.rows(), var.cols()),
        }
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

/// Cross-entropy normalization mode.
#[derive(Debug, Clone, Copy)]
pub enum CeNorm {
    /// Mean over mask weight (divides by the weight sum).
    Mean,
    /// Divide by an externally chosen constant, e.g. a whole-batch token count.
    Div(f64),
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.id].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        let (rows, cols) = value.shape();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var { id, rows, cols }
    }

    /// Register a trainable leaf. Copies the data onto the tape.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push(Op::Leaf, value.clone(), true)
    }

    /// Register a non-trainable leaf (inputs, frozen parameters).
    pub fn input(&mut self, value: &Tensor) -> Var {
        self.push(Op::Leaf, value.clone(), false)
    }

    fn shape_err(op: &'static str, lhs: &Var, rhs: &Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: lhs.shape_str(),
            rhs: rhs.shape_str(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Self::shape_err("matmul", &a, &b));
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut out = vec![0.0; m * n];
        math::gemm_nn(
            m,
            k,
            n,
            1.0,
            self.nodes[a.id].value.data(),
            self.nodes[b.id].value.data(),
            0.0,
            &mut out,
        );
        Ok(self.push(
            Op::Matmul { a: a.id, b: b.id },
            Tensor::new(m, n, out)?,
            false,
        ))
    }

    /// a * b^T without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.cols {
            return Err(Self::shape_err("matmul_bt", &a, &b));
        }
        let (m, k, n) = (a.rows, a.cols, b.rows);
        let mut out = vec![0.0; m * n];
        math::gemm_nt(
            m,
            k,
            n,
            1.0,
            self.nodes[a.id].value.data(),
            self.nodes[b.id].value.data(),
            0.0,
            &mut out,
        );
        Ok(self.push(
            Op::MatmulBt { a: a.id, b: b.id },
            Tensor::new(m, n, out)?,
            false,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(Self::shape_err("add", &a, &b));
        }
        let out: Vec<f64> = self.nodes[a.id]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.id].value.data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(
            Op::Add { a: a.id, b: b.id },
            Tensor::new(a.rows, a.cols, out)?,
            false,
        ))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        if row.rows != 1 || row.cols != x.cols {
            return Err(Self::shape_err("add_row", &x, &row));
        }
        let r = self.nodes[row.id].value.data().to_vec();
        let mut out = self.nodes[x.id].value.data().to_vec();
        for chunk in out.chunks_mut(x.cols) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        Ok(self.push(
            Op::AddRow { x: x.id, row: row.id },
            Tensor::new(x.rows, x.cols, out)?,
            false,
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(Self::shape_err("mul", &a, &b));
        }
        let out: Vec<f64> = self.nodes[a.id]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.id].value.data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(
            Op::Mul { a: a.id, b: b.id },
            Tensor::new(a.rows, a.cols, out)?,
            false,
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.id].value.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(x.rows, x.cols, out).expect("same shape");
        self.push(Op::Scale { x: x.id, c }, t, false)
    }

    pub const LAYER_NORM_EPS: f64 = 1e-5;

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        if gain.rows != 1 || gain.cols != x.cols {
            return Err(Self::shape_err("layer_norm", &x, &gain));
        }
        if bias.rows != 1 || bias.cols != x.cols {
            return Err(Self::shape_err("layer_norm", &x, &bias));
        }
        let d = x.cols;
        let mut out = vec![0.0; x.rows * d];
        let mut means = vec![0.0; x.rows];
        let mut rstds = vec![0.0; x.rows];
        {
            let xv = self.nodes[x.id].value.data();
            let g = self.nodes[gain.id].value.data();
            let b = self.nodes[bias.id].value.data();
            for r in 0..x.rows {
                let src = &xv[r * d..(r + 1) * d];
                let mean = src.iter().sum::<f64>() / d as f64;
                let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rstd = 1.0 / (var + Self::LAYER_NORM_EPS).sqrt();
                means[r] = mean;
                rstds[r] = rstd;
                let dst = &mut out[r * d..(r + 1) * d];
                for i in 0..d {
                    dst[i] = (src[i] - mean) * rstd * g[i] + b[i];
                }
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
                mean: means,
                rstd: rstds,
            },
            Tensor::new(x.rows, d, out)?,
            false,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.id]
            .value
            .data()
            .iter()
            .map(|&v| math::gelu(v))
            .collect();
        let t = Tensor::new(x.rows, x.cols, out).expect("same shape");
        self.push(Op::Gelu { x: x.id }, t, false)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.id]
            .value
            .data()
            .iter()
            .map(|v| v.tanh())
            .collect();
        let t = Tensor::new(x.rows, x.cols, out).expect("same shape");
        self.push(Op::Tanh { x: x.id }, t, false)
    }

    /// Look up rows of an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let vocab = table.rows as u32;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!(
                "gather: id {bad} out of range for table with {vocab} rows"
            )));
        }
        let d = table.cols;
        let mut out = vec![0.0; ids.len() * d];
        {
            let tv = self.nodes[table.id].value.data();
            for (r, &id) in ids.iter().enumerate() {
                out[r * d..(r + 1) * d].copy_from_slice(&tv[id as usize * d..(id as usize + 1) * d]);
            }
        }
        Ok(self.push(
            Op::Gather {
                table: table.id,
                ids: ids.to_vec(),
            },
            Tensor::new(ids.len(), d, out)?,
            false,
        ))
    }

    /// Row softmax restricted to the causal prefix of a square score matrix.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        if x.rows != x.cols {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax",
                lhs: x.shape_str(),
                rhs: "square".into(),
            });
        }
        let n = x.rows;
        let mut out = self.nodes[x.id].value.data().to_vec();
        for r in 0..n {
            math::softmax_prefix(&mut out[r * n..(r + 1) * n], r + 1);
        }
        Ok(self.push(Op::CausalSoftmax { x: x.id }, Tensor::new(n, n, out)?, false))
    }

    pub fn slice_rows(&mut self, x: Var, r0: usize, r1: usize) -> Result<Var> {
        if r0 >= r1 || r1 > x.rows {
            return Err(Error::Contract(format!(
                "slice_rows: range {r0}..{r1} invalid for {} rows",
                x.rows
            )));
        }
        let d = x.cols;
        let out = self.nodes[x.id].value.data()[r0 * d..r1 * d].to_vec();
        Ok(self.push(
            Op::SliceRows { x: x.id, r0 },
            Tensor::new(r1 - r0, d, out)?,
            false,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, c0: usize, c1: usize) -> Result<Var> {
        if c0 >= c1 || c1 > x.cols {
            return Err(Error::Contract(format!(
                "slice_cols: range {c0}..{c1} invalid for {} cols",
                x.cols
            )));
        }
        let w = c1 - c0;
        let mut out = vec![0.0; x.rows * w];
        {
            let xv = self.nodes[x.id].value.data();
            for r in 0..x.rows {
                out[r * w..(r + 1) * w].copy_from_slice(&xv[r * x.cols + c0..r * x.cols + c1]);
            }
        }
        Ok(self.push(
            Op::SliceCols {
                x: x.id,
                c0,
                src_cols: x.cols,
            },
            Tensor::new(x.rows, w, out)?,
            false,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows: empty input".into()))?
            .cols;
        if let Some(bad) = parts.iter().find(|p| p.cols != cols) {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: format!("{cols} cols"),
                rhs: bad.shape_str(),
            });
        }
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(self.nodes[p.id].value.data());
        }
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.iter().map(|p| (p.id, p.rows)).collect(),
            },
            Tensor::new(rows, cols, out)?,
            false,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols: empty input".into()))?
            .rows;
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: format!("{rows} rows"),
                rhs: bad.shape_str(),
            });
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = vec![0.0; rows * cols];
        let mut off = 0;
        for p in parts {
            let pv = self.nodes[p.id].value.data();
            for r in 0..rows {
                out[r * cols + off..r * cols + off + p.cols]
                    .copy_from_slice(&pv[r * p.cols..(r + 1) * p.cols]);
            }
            off += p.cols;
        }
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.iter().map(|p| (p.id, p.cols)).collect(),
            },
            Tensor::new(rows, cols, out)?,
            false,
        ))
    }

    /// Weighted mean over rows. Errors if all weights are zero.
    pub fn mean_pool_rows(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != x.rows {
            return Err(Error::ShapeMismatch {
                op: "mean_pool_rows",
                lhs: x.shape_str(),
                rhs: format!("{} weights", weights.len()),
            });
        }
        let wsum: f64 = weights.iter().sum();
        if wsum == 0.0 {
            return Err(Error::DegenerateBatch(
                "mean_pool_rows: all weights are zero".into(),
            ));
        }
        let d = x.cols;
        let mut out = vec![0.0; d];
        {
            let xv = self.nodes[x.id].value.data();
            for (r, &w) in weights.iter().enumerate() {
                if w != 0.0 {
                    for (o, v) in out.iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                        *o += w * v;
                    }
                }
            }
        }
        for o in out.iter_mut() {
            *o /= wsum;
        }
        Ok(self.push(
            Op::MeanPoolRows {
                x: x.id,
                weights: weights.to_vec(),
                wsum,
            },
            Tensor::new(1, d, out)?,
            false,
        ))
    }

    /// Per-row next-token cross-entropy, softmax stabilized by row max.
    ///
    /// Row i contributes `weights[i] * (-log softmax(logits[i])[targets[i]])`;
    /// the total is divided by the weight sum (`CeNorm::Mean`) or a caller
    /// constant (`CeNorm::Div`). Errors when the mask is all zero.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        weights: &[f64],
        norm: CeNorm,
    ) -> Result<Var> {
        if targets.len() != logits.rows || weights.len() != logits.rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: logits.shape_str(),
                rhs: format!("{} targets / {} weights", targets.len(), weights.len()),
            });
        }
        let vocab = logits.cols as u32;
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Contract(format!(
                "cross_entropy: target {bad} out of range for {vocab} classes"
            )));
        }
        let wsum: f64 = weights.iter().sum();
        if wsum == 0.0 {
            return Err(Error::DegenerateBatch(
                "cross_entropy: mask has no nonzero entries".into(),
            ));
        }
        let divisor = match norm {
            CeNorm::Mean => wsum,
            CeNorm::Div(d) => d,
        };
        let v = logits.cols;
        let mut total = 0.0;
        {
            let lv = self.nodes[logits.id].value.data();
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if w == 0.0 {
                    continue;
                }
                let row = &lv[r * v..(r + 1) * v];
                total += w * (math::log_sum_exp(row) - row[t as usize]);
            }
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                divisor,
            },
            Tensor::scalar(total / divisor),
            false,
        ))
    }

    /// Gradient reversal: forward is the identity (bit for bit), backward
    /// negates the upstream gradient exactly.
    pub fn grad_reverse(&mut self, x: Var) -> Var {
        let value = self.nodes[x.id].value.clone();
        self.push(Op::GradReverse { x: x.id }, value, false)
    }

    /// Run the backward sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; rebuild the tape to differentiate again".into(),
            ));
        }
        if !loss.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {}",
                loss.shape_str()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            // Take this node's accumulated gradient; leaves keep theirs.
            if matches!(self.nodes[id].op, Op::Leaf) {
                if !self.nodes[id].requires_grad {
                    grads[id] = None;
                }
                continue;
            }
            let Some(d_out) = grads[id].take() else {
                continue;
            };
            self.backward_op(id, &d_out, &mut grads);
        }

        Ok(Gradients { grads })
    }

    fn backward_op(&self, id: NodeId, d_out: &Tensor, grads: &mut [Option<Tensor>]) {
        fn buf<'g>(grads: &'g mut [Option<Tensor>], id: NodeId, rows: usize, cols: usize) -> &'g mut Tensor {
            grads[id].get_or_insert_with(|| Tensor::zeros(rows, cols))
        }

        match &self.nodes[id].op {
            Op::Leaf => unreachable!("leaves are skipped"),

            Op::Matmul { a, b } => {
                let (m, n) = d_out.shape();
                let k = self.nodes[*a].value.cols();
                {
                    let bv = self.nodes[*b].value.data();
                    let ga = buf(grads, *a, m, k);
                    math::gemm_nt(m, n, k, 1.0, d_out.data(), bv, 1.0, ga.data_mut());
                }
                {
                    let av = self.nodes[*a].value.data();
                    let gb = buf(grads, *b, k, n);
                    math::gemm_tn(k, m, n, 1.0, av, d_out.data(), 1.0, gb.data_mut());
                }
            }

            Op::MatmulBt { a, b } => {
                // out = a * b^T; d_a = d_out * b; d_b = d_out^T * a
                let (m, n) = d_out.shape();
                let k = self.nodes[*a].value.cols();
                {
                    let bv = self.nodes[*b].value.data();
                    let ga = buf(grads, *a, m, k);
                    math::gemm_nn(m, n, k, 1.0, d_out.data(), bv, 1.0, ga.data_mut());
                }
                {
                    let av = self.nodes[*a].value.data();
                    let gb = buf(grads, *b, n, k);
                    math::gemm_tn(n, m, k, 1.0, d_out.data(), av, 1.0, gb.data_mut());
                }
            }

            Op::Add { a, b } => {
                for &src in &[*a, *b] {
                    let g = buf(grads, src, d_out.rows(), d_out.cols());
                    for (gv, dv) in g.data_mut().iter_mut().zip(d_out.data()) {
                        *gv += dv;
                    }
                }
            }

            Op::AddRow { x, row } => {
                {
                    let g = buf(grads, *x, d_out.rows(), d_out.cols());
                    for (gv, dv) in g.data_mut().iter_mut().zip(d_out.data()) {
                        *gv += dv;
                    }
                }
                {
                    let d = d_out.cols();
                    let g = buf(grads, *row, 1, d);
                    for chunk in d_out.data().chunks(d) {
                        for (gv, dv) in g.data_mut().iter_mut().zip(chunk) {
                            *gv += dv;
                        }
                    }
                }
            }

            Op::Mul { a, b } => {
                {
                    let bv = self.nodes[*b].value.data();
                    let ga = buf(grads, *a, d_out.rows(), d_out.cols());
                    for ((gv, dv), bv) in ga.data_mut().iter_mut().zip(d_out.data()).zip(bv) {
                        *gv += dv * bv;
                    }
                }
                {
                    let av = self.nodes[*a].value.data();
                    let gb = buf(grads, *b, d_out.rows(), d_out.cols());
                    for ((gv, dv), av) in gb.data_mut().iter_mut().zip(d_out.data()).zip(av) {
                        *gv += dv * av;
                    }
                }
            }

            Op::Scale { x, c } => {
                let g = buf(grads, *x, d_out.rows(), d_out.cols());
                for (gv, dv) in g.data_mut().iter_mut().zip(d_out.data()) {
                    *gv += dv * c;
                }
            }

            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let d = d_out.cols();
                let xv = self.nodes[*x].value.data();
                let gv = self.nodes[*gain].value.data();
                // d_bias and d_gain
                {
                    let gb = buf(grads, *bias, 1, d);
                    for chunk in d_out.data().chunks(d) {
                        for (g, dv) in gb.data_mut().iter_mut().zip(chunk) {
                            *g += dv;
                        }
                    }
                }
                {
                    let gg = buf(grads, *gain, 1, d);
                    for (r, chunk) in d_out.data().chunks(d).enumerate() {
                        let src = &xv[r * d..(r + 1) * d];
                        for i in 0..d {
                            let xhat = (src[i] - mean[r]) * rstd[r];
                            gg.data_mut()[i] += chunk[i] * xhat;
                        }
                    }
                }
                {
                    let gx = buf(grads, *x, d_out.rows(), d);
                    let inv_d = 1.0 / d as f64;
                    for (r, chunk) in d_out.data().chunks(d).enumerate() {
                        let src = &xv[r * d..(r + 1) * d];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for i in 0..d {
                            let xhat = (src[i] - mean[r]) * rstd[r];
                            let dxhat = chunk[i] * gv[i];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let dst = &mut gx.data_mut()[r * d..(r + 1) * d];
                        for i in 0..d {
                            let xhat = (src[i] - mean[r]) * rstd[r];
                            let dxhat = chunk[i] * gv[i];
                            dst[i] += rstd[r]
                                * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                        }
                    }
                }
            }

            Op::Gelu { x } => {
                let xv = self.nodes[*x].value.data();
                let g = buf(grads, *x, d_out.rows(), d_out.cols());
                for ((gv, dv), xv) in g.data_mut().iter_mut().zip(d_out.data()).zip(xv) {
                    *gv += dv * math::gelu_grad(*xv);
                }
            }

            Op::Tanh { x } => {
                let yv = self.nodes[id].value.data();
                let g = buf(grads, *x, d_out.rows(), d_out.cols());
                for ((gv, dv), yv) in g.data_mut().iter_mut().zip(d_out.data()).zip(yv) {
                    *gv += dv * (1.0 - yv * yv);
                }
            }

            Op::Gather { table, ids } => {
                let d = d_out.cols();
                let (rows, cols) = self.nodes[*table].value.shape();
                let g = buf(grads, *table, rows, cols);
                for (r, &tid) in ids.iter().enumerate() {
                    let dst = &mut g.data_mut()[tid as usize * d..(tid as usize + 1) * d];
                    for (gv, dv) in dst.iter_mut().zip(&d_out.data()[r * d..(r + 1) * d]) {
                        *gv += dv;
                    }
                }
            }

            Op::CausalSoftmax { x } => {
                let n = d_out.rows();
                let yv = self.nodes[id].value.data();
                let g = buf(grads, *x, n, n);
                for r in 0..n {
                    let limit = r + 1;
                    let y = &yv[r * n..r * n + limit];
                    let dy = &d_out.data()[r * n..r * n + limit];
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    let dst = &mut g.data_mut()[r * n..r * n + limit];
                    for i in 0..limit {
                        dst[i] += y[i] * (dy[i] - dot);
                    }
                }
            }

            Op::SliceRows { x, r0 } => {
                let d = d_out.cols();
                let (rows, cols) = self.nodes[*x].value.shape();
                let g = buf(grads, *x, rows, cols);
                let dst = &mut g.data_mut()[r0 * d..r0 * d + d_out.len()];
                for (gv, dv) in dst.iter_mut().zip(d_out.data()) {
                    *gv += dv;
                }
            }

            Op::SliceCols { x, c0, src_cols } => {
                let w = d_out.cols();
                let (rows, cols) = self.nodes[*x].value.shape();
                let g = buf(grads, *x, rows, cols);
                for r in 0..d_out.rows() {
                    let dst = &mut g.data_mut()[r * src_cols + c0..r * src_cols + c0 + w];
                    for (gv, dv) in dst.iter_mut().zip(&d_out.data()[r * w..(r + 1) * w]) {
                        *gv += dv;
                    }
                }
            }

            Op::ConcatRows { parts } => {
                let d = d_out.cols();
                let mut off = 0;
                for &(pid, prows) in parts {
                    let g = buf(grads, pid, prows, d);
                    for (gv, dv) in g
                        .data_mut()
                        .iter_mut()
                        .zip(&d_out.data()[off * d..(off + prows) * d])
                    {
                        *gv += dv;
                    }
                    off += prows;
                }
            }

            Op::ConcatCols { parts } => {
                let rows = d_out.rows();
                let cols = d_out.cols();
                let mut off = 0;
                for &(pid, pcols) in parts {
                    let g = buf(grads, pid, rows, pcols);
                    for r in 0..rows {
                        let src = &d_out.data()[r * cols + off..r * cols + off + pcols];
                        for (gv, dv) in g.data_mut()[r * pcols..(r + 1) * pcols]
                            .iter_mut()
                            .zip(src)
                        {
                            *gv += dv;
                        }
                    }
                    off += pcols;
                }
            }

            Op::MeanPoolRows { x, weights, wsum } => {
                let wsum = *wsum;
                let d = d_out.cols();
                let (rows, cols) = self.nodes[*x].value.shape();
                let g = buf(grads, *x, rows, cols);
                for (r, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let scale = w / wsum;
                    let dst = &mut g.data_mut()[r * d..(r + 1) * d];
                    for (gv, dv) in dst.iter_mut().zip(d_out.data()) {
                        *gv += scale * dv;
                    }
                }
            }

            Op::CrossEntropy {
                logits,
                targets,
                weights,
                divisor,
            } => {
                let up = d_out.item();
                let divisor = *divisor;
                let lv = self.nodes[*logits].value.data();
                let (rows, v) = self.nodes[*logits].value.shape();
                let g = buf(grads, *logits, rows, v);
                let mut prob = vec![0.0; v];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    prob.copy_from_slice(&lv[r * v..(r + 1) * v]);
                    math::softmax_prefix(&mut prob, v);
                    let coef = up * w / divisor;
                    let dst = &mut g.data_mut()[r * v..(r + 1) * v];
                    for (gv, p) in dst.iter_mut().zip(&prob) {
                        *gv += coef * p;
                    }
                    dst[t as usize] -= coef;
                }
            }

            Op::GradReverse { x } => {
                let g = buf(grads, *x, d_out.rows(), d_out.cols());
                for (gv, dv) in g.data_mut().iter_mut().zip(d_out.data()) {
                    *gv -= dv;
                }
            }
        }
    }
}
