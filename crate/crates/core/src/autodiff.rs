//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive executed during one forward pass.
//! Nodes are appended in execution order, so the node vector is already a
//! topological order; [`Tape::backward`] walks it in exact reverse.
//!
//! Each primitive checks its output for NaN/Inf and fails the forward pass
//! with [`Error::NonFinite`] instead of letting the value propagate.
//!
//! ```
//! use avsr_core::autodiff::Tape;
//! use avsr_core::tensor::Matrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Matrix::scalar(3.0));
//! let y = tape.matmul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
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
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    SoftmaxRows(usize),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    Conv1d { x: usize, kernel: usize, width: usize, seg_len: usize, cols: Matrix },
    SegmentMean { x: usize, seg_len: usize },
    BceWithLogits { logits: usize, labels: Vec<f64> },
    Mse(usize, usize),
    StopGradient,
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Matrix },
    MeanAll(usize),
    SumAll(usize),
    Combine(Vec<(usize, f64)>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::ConcatCols(..) => "concat_channels",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Conv1d { .. } => "conv1d_temporal",
            Op::SegmentMean { .. } => "segment_mean",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Mse(..) => "mse",
            Op::StopGradient => "stop_gradient",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MeanAll(..) => "mean",
            Op::SumAll(..) => "sum",
            Op::Combine(..) => "combine",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of the primitives executed in one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    trace: Option<Vec<usize>>,
    /// Values of every stop-gradient node, in creation order.
    stopped: Vec<Matrix>,
    /// When set, stop-gradient nodes return these values instead of their input.
    replay: Option<Vec<Matrix>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// `None` when no gradient reached the node.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of the loss w.r.t. `v`; all zeros when nothing reached it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Gradients for every bound parameter, keyed by parameter name.
    pub fn collect(&self, bindings: &Bindings) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, var) in bindings.iter() {
            out.insert(name.to_string(), self.wrt(var));
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the order in which backward visits nodes (for tests).
    pub fn with_trace() -> Self {
        Self {
            trace: Some(Vec::new()),
            ..Self::default()
        }
    }

    /// Node indices in the order the last backward pass visited them.
    pub fn backward_trace(&self) -> Option<&[usize]> {
        self.trace.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clears every node so the tape can record a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.stopped.clear();
        self.backward_done = false;
        if let Some(t) = self.trace.as_mut() {
            t.clear();
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that does not take part in differentiation.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds every parameter in `store` as a leaf. Parameters for which
    /// `trainable` returns false are bound as constants.
    pub fn bind(&mut self, store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Bindings {
        let mut b = Bindings::default();
        for (name, m) in store.iter() {
            let v = self.leaf(m.clone(), trainable(name));
            b.insert(name.to_string(), v);
        }
        b
    }

    fn push(&mut self, value: Matrix, inputs: &[usize], op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let out = va.matmul(vb);
        self.push(out, &[a.0, b.0], Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, &[a.0], Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(out, &[a.0, b.0], Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("sub", format!("{:?} - {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.scaled_add_assign(-1.0, vb);
        self.push(out, &[a.0, b.0], Op::Sub(a.0, b.0))
    }

    /// `x + 1 * row`, broadcasting a `1 x n` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.rows() != 1 || vr.cols() != vx.cols() {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + row {:?}", vx.shape(), vr.shape()),
            ));
        }
        let mut out = vx.clone();
        let bias = vr.as_slice();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        self.push(out, &[x.0, row.0], Op::AddRow(x.0, row.0))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, &[x.0], Op::Scale(x.0, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, &[x.0], Op::Relu(x.0))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`.
    pub fn softmax_rows_causal(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let vx = self.value(x);
        if !vx.all_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut out = Matrix::zeros(vx.rows(), vx.cols());
        for r in 0..vx.rows() {
            let limit = if causal { (r + 1).min(vx.cols()) } else { vx.cols() };
            let row = &vx.row(r)[..limit];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = out.row_mut(r);
            let mut total = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in orow[..limit].iter_mut() {
                *o /= total;
            }
        }
        self.push(out, &[x.0], Op::SoftmaxRows(x.0))
    }

    /// Column-wise concatenation in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat_channels", "no inputs"))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &x in xs {
            let v = self.value(x);
            if v.rows() != rows {
                return Err(Error::dim(
                    "concat_channels",
                    format!("row counts {} and {}", rows, v.rows()),
                ));
            }
            total += v.cols();
        }
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &x in xs {
            let v = self.value(x);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push(out, &ids, Op::ConcatCols(ids.clone()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + width > vx.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {}..{} of {}", start, start + width, vx.cols()),
            ));
        }
        let mut out = Matrix::zeros(vx.rows(), width);
        for r in 0..vx.rows() {
            out.row_mut(r).copy_from_slice(&vx.row(r)[start..start + width]);
        }
        self.push(out, &[x.0], Op::SliceCols { x: x.0, start })
    }

    /// Rows of `x` picked (with repetition allowed) by `idx`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.rows()) {
            return Err(Error::dim(
                "gather_rows",
                format!("row {} of {}", bad, vx.rows()),
            ));
        }
        let mut out = Matrix::zeros(idx.len(), vx.cols());
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(vx.row(i));
        }
        self.push(
            out,
            &[x.0],
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
        )
    }

    /// Cross-correlation along time with zero "same" padding.
    ///
    /// `kernel` is `(width * D) x D_out`: rows `s*D..(s+1)*D` hold tap `s`.
    /// `x` is treated as consecutive independent segments of `seg_len` rows;
    /// padding applies at every segment boundary. Pass `seg_len = T` for a
    /// single sequence.
    pub fn conv1d_temporal(
        &mut self,
        x: Var,
        kernel: Var,
        width: usize,
        seg_len: usize,
    ) -> Result<Var> {
        if width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv1d kernel width must be odd, got {width}"
            )));
        }
        let (vx, vk) = (self.value(x), self.value(kernel));
        let (n, d) = vx.shape();
        if seg_len == 0 || n % seg_len != 0 {
            return Err(Error::dim(
                "conv1d_temporal",
                format!("{n} rows do not split into segments of {seg_len}"),
            ));
        }
        if vk.rows() != width * d {
            return Err(Error::dim(
                "conv1d_temporal",
                format!("kernel has {} rows, expected {}x{}", vk.rows(), width, d),
            ));
        }
        let half = width / 2;
        let mut cols = Matrix::zeros(n, width * d);
        for seg_start in (0..n).step_by(seg_len) {
            for p in 0..seg_len {
                let dst = cols.row_mut(seg_start + p);
                for s in 0..width {
                    let src = p as isize + s as isize - half as isize;
                    if src < 0 || src >= seg_len as isize {
                        continue;
                    }
                    dst[s * d..(s + 1) * d].copy_from_slice(vx.row(seg_start + src as usize));
                }
            }
        }
        let out = cols.matmul(vk);
        self.push(
            out,
            &[x.0, kernel.0],
            Op::Conv1d {
                x: x.0,
                kernel: kernel.0,
                width,
                seg_len,
                cols,
            },
        )
    }

    /// Mean over rows within each consecutive segment of `seg_len` rows.
    pub fn segment_mean(&mut self, x: Var, seg_len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (n, d) = vx.shape();
        if seg_len == 0 || n % seg_len != 0 {
            return Err(Error::dim(
                "segment_mean",
                format!("{n} rows do not split into segments of {seg_len}"),
            ));
        }
        let mut out = Matrix::zeros(n / seg_len, d);
        let inv = 1.0 / seg_len as f64;
        for r in 0..n {
            let orow = out.row_mut(r / seg_len);
            for (o, v) in orow.iter_mut().zip(vx.row(r)) {
                *o += v * inv;
            }
        }
        self.push(out, &[x.0], Op::SegmentMean { x: x.0, seg_len })
    }

    /// Mean binary cross-entropy of a column of logits against 0/1 labels,
    /// in the stable form `max(z,0) - z*y + ln(1 + e^-|z|)`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let vz = self.value(logits);
        if vz.cols() != 1 || vz.rows() != labels.len() || labels.is_empty() {
            return Err(Error::dim(
                "bce_with_logits",
                format!("{:?} logits for {} labels", vz.shape(), labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Domain(format!("BCE label {bad} is not 0 or 1")));
        }
        let total: f64 = vz
            .as_slice()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| bce_scalar(z, y))
            .sum();
        let out = Matrix::scalar(total / labels.len() as f64);
        self.push(
            out,
            &[logits.0],
            Op::BceWithLogits {
                logits: logits.0,
                labels: labels.to_vec(),
            },
        )
    }

    /// Mean over all entries of the squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("mse", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let n = va.len().max(1) as f64;
        let total: f64 = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Matrix::scalar(total / n), &[a.0, b.0], Op::Mse(a.0, b.0))
    }

    /// Identity forward; contributes nothing backward.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let k = self.stopped.len();
        let out = match self.replay.as_ref().and_then(|r| r.get(k)) {
            Some(frozen) if frozen.shape() == self.value(x).shape() => frozen.clone(),
            Some(_) => return Err(Error::dim("stop_gradient", "replayed value has a different shape")),
            None => self.value(x).clone(),
        };
        self.stopped.push(out.clone());
        // no inputs listed: the result never requires grad
        self.push(out, &[], Op::StopGradient)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vz = self.value(logits);
        if vz.rows() != targets.len() || targets.is_empty() {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} logit rows for {} targets", vz.rows(), targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vz.cols()) {
            return Err(Error::Domain(format!(
                "target {bad} outside vocabulary of {}",
                vz.cols()
            )));
        }
        let mut probs = Matrix::zeros(vz.rows(), vz.cols());
        let mut nll = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = vz.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll += lse - row[t];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let out = Matrix::scalar(nll / targets.len() as f64);
        self.push(
            out,
            &[logits.0],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let out = Matrix::scalar(vx.sum() / vx.len().max(1) as f64);
        self.push(out, &[x.0], Op::MeanAll(x.0))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Matrix::scalar(self.value(x).sum());
        self.push(out, &[x.0], Op::SumAll(x.0))
    }

    /// `sum_i c_i * x_i` over scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            let m = self.value(v);
            if m.shape() != (1, 1) {
                return Err(Error::dim("combine", format!("non-scalar term {:?}", m.shape())));
            }
            total += c * m.item();
        }
        let ids: Vec<usize> = terms.iter().map(|(v, _)| v.0).collect();
        let op = Op::Combine(terms.iter().map(|&(v, c)| (v.0, c)).collect());
        self.push(Matrix::scalar(total), &ids, op)
    }

    /// Reverse pass from a scalar `loss`. Fails if backward already ran
    /// since the last [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::dim("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Matrix::scalar(1.0));
        }
        for idx in (0..=loss.0).rev() {
            if let Some(t) = self.trace.as_mut() {
                t.push(idx);
            }
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        macro_rules! acc {
            ($i:expr) => {
                grad_slot(grads, nodes, $i)
            };
        }
        match &nodes[idx].op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    g.matmul_t_acc(&nodes[*b].value, acc!(*a));
                }
                if wants(*b) {
                    nodes[*a].value.t_matmul_acc(g, acc!(*b));
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    acc!(*a).add_assign(&g.transpose());
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc!(*a).add_assign(g);
                }
                if wants(*b) {
                    acc!(*b).add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc!(*a).add_assign(g);
                }
                if wants(*b) {
                    acc!(*b).scaled_add_assign(-1.0, g);
                }
            }
            Op::AddRow(x, row) => {
                if wants(*x) {
                    acc!(*x).add_assign(g);
                }
                if wants(*row) {
                    let dst = acc!(*row);
                    for r in 0..g.rows() {
                        for (d, v) in dst.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    acc!(*x).scaled_add_assign(*s, g);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let src = &nodes[*x].value;
                    let dst = acc!(*x);
                    for ((d, gv), xv) in dst
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(src.as_slice())
                    {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(*x) {
                    let y = &nodes[idx].value;
                    let dst = acc!(*x);
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dst.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    if wants(p) {
                        let dst = acc!(p);
                        for r in 0..g.rows() {
                            for (d, v) in dst.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *d += v;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let dst = acc!(*x);
                    for r in 0..g.rows() {
                        for (d, v) in dst.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
            }
            Op::GatherRows { x, idx: rows } => {
                if wants(*x) {
                    let dst = acc!(*x);
                    for (o, &i) in rows.iter().enumerate() {
                        for (d, v) in dst.row_mut(i).iter_mut().zip(g.row(o)) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                kernel,
                width,
                seg_len,
                cols,
            } => {
                if wants(*kernel) {
                    cols.t_matmul_acc(g, acc!(*kernel));
                }
                if wants(*x) {
                    let k = &nodes[*kernel].value;
                    let mut dcols = Matrix::zeros(cols.rows(), cols.cols());
                    g.matmul_t_acc(k, &mut dcols);
                    let d = nodes[*x].value.cols();
                    let half = width / 2;
                    let dst = acc!(*x);
                    let n = dst.rows();
                    for seg_start in (0..n).step_by(*seg_len) {
                        for p in 0..*seg_len {
                            let src_row = dcols.row(seg_start + p);
                            for s in 0..*width {
                                let src = p as isize + s as isize - half as isize;
                                if src < 0 || src >= *seg_len as isize {
                                    continue;
                                }
                                let target = dst.row_mut(seg_start + src as usize);
                                for (t, v) in target.iter_mut().zip(&src_row[s * d..(s + 1) * d]) {
                                    *t += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::SegmentMean { x, seg_len } => {
                if wants(*x) {
                    let inv = 1.0 / *seg_len as f64;
                    let dst = acc!(*x);
                    for r in 0..dst.rows() {
                        for (d, v) in dst.row_mut(r).iter_mut().zip(g.row(r / seg_len)) {
                            *d += v * inv;
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, labels } => {
                if wants(*logits) {
                    let scale = g.item() / labels.len() as f64;
                    let z = &nodes[*logits].value;
                    let dst = acc!(*logits);
                    for ((d, &zv), &y) in dst.as_mut_slice().iter_mut().zip(z.as_slice()).zip(labels) {
                        *d += scale * (sigmoid(zv) - y);
                    }
                }
            }
            Op::Mse(a, b) => {
                let va = &nodes[*a].value;
                let vb = &nodes[*b].value;
                let scale = 2.0 * g.item() / va.len().max(1) as f64;
                if wants(*a) {
                    let dst = acc!(*a);
                    for ((d, x), y) in dst.as_mut_slice().iter_mut().zip(va.as_slice()).zip(vb.as_slice()) {
                        *d += scale * (x - y);
                    }
                }
                if wants(*b) {
                    let dst = acc!(*b);
                    for ((d, x), y) in dst.as_mut_slice().iter_mut().zip(va.as_slice()).zip(vb.as_slice()) {
                        *d -= scale * (x - y);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if wants(*logits) {
                    let scale = g.item() / targets.len() as f64;
                    let dst = acc!(*logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for (c, (d, p)) in dst.row_mut(r).iter_mut().zip(probs.row(r)).enumerate() {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            *d += scale * (p - onehot);
                        }
                    }
                }
            }
            Op::MeanAll(x) => {
                if wants(*x) {
                    let dst = acc!(*x);
                    let v = g.item() / dst.len().max(1) as f64;
                    dst.as_mut_slice().iter_mut().for_each(|d| *d += v);
                }
            }
            Op::SumAll(x) => {
                if wants(*x) {
                    let v = g.item();
                    acc!(*x).as_mut_slice().iter_mut().for_each(|d| *d += v);
                }
            }
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    if wants(v) {
                        acc!(v).as_mut_slice()[0] += c * g.item();
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Matrix>], nodes: &[Node], i: usize) -> &'a mut Matrix {
    let (r, c) = nodes[i].value.shape();
    grads[i].get_or_insert_with(|| Matrix::zeros(r, c))
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn bce_scalar(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// max over coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_relative_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub coordinates: usize,
    /// Sum of |analytic| over all coordinates; zero means no gradient flowed.
    pub analytic_l1: f64,
}

/// Compares the tape gradient of `f` with central differences at every
/// coordinate of the selected parameters (all of `point` when `only` is
/// `None`). Stop-gradient outputs are held at their values at `point`, so
/// the differences measure the same surrogate the tape differentiates.
///
/// `f` must rebuild its whole computation from the bindings it receives.
pub fn finite_diff_check<F>(
    point: &ParamStore,
    eps: f64,
    only: Option<&[&str]>,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let selected = |name: &str| only.is_none_or(|names| names.contains(&name));

    let mut tape = Tape::new();
    let bindings = tape.bind(point, selected);
    let loss = f(&mut tape, &bindings)?;
    let grads = tape.backward(loss)?;
    let stopped = std::mem::take(&mut tape.stopped);

    let mut probe = point.clone();
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape {
            replay: Some(stopped.clone()),
            ..Tape::default()
        };
        let b = t.bind(store, |_| false);
        let out = f(&mut t, &b)?;
        let v = t.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_check" });
        }
        Ok(v)
    };

    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst_param: None,
        worst_index: 0,
        coordinates: 0,
        analytic_l1: 0.0,
    };
    let names: Vec<String> = point.names().filter(|n| selected(n)).map(str::to_string).collect();
    for name in names {
        let var = bindings.get(&name)?;
        let analytic = grads.wrt(var);
        for i in 0..analytic.len() {
            let orig = point.get(&name)?.as_slice()[i];
            probe.get_mut(&name)?.as_mut_slice()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(&name)?.as_mut_slice()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(&name)?.as_mut_slice()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.as_slice()[i];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            report.analytic_l1 += a.abs();
            if rel > report.max_relative_error || report.worst_param.is_none() {
                report.max_relative_error = rel.max(report.max_relative_error);
                report.worst_param = Some(name.clone());
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_small_case() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = t.constant(m(&[&[5.0], &[6.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &m(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut t = Tape::new();
        let i = t.constant(Matrix::identity(2));
        let x = t.constant(m(&[&[1.5, -2.0], &[0.25, 7.0]]));
        let z = t.constant(Matrix::zeros(2, 3));
        let ix = t.matmul(i, x).unwrap();
        let xz = t.matmul(x, z).unwrap();
        assert_eq!(t.value(ix), t.value(x));
        assert_eq!(t.value(xz), &Matrix::zeros(2, 3));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 1.0, 1.0]]));
        let y = t.softmax_rows(x).unwrap();
        for &v in t.value(y).as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(m(&[&[0.0, 2f64.ln()]]));
        let y = t.softmax_rows(x).unwrap();
        assert!((t.value(y)[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.value(y)[(0, 1)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[0.3, -1.2, 2.5]]));
        let shifted = t.constant(m(&[&[100.3, 98.8, 102.5]]));
        let a = t.softmax_rows(x).unwrap();
        let b = t.softmax_rows(shifted).unwrap();
        assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[0.0, f64::NAN]]));
        assert!(matches!(t.softmax_rows(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[1.0, 5.0, 5.0], &[2.0, 2.0, 9.0]]));
        let y = t.softmax_rows_causal(x).unwrap();
        let v = t.value(y);
        assert_eq!(v[(0, 0)], 1.0);
        assert_eq!(v[(0, 1)], 0.0);
        assert!((v[(1, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(v[(1, 2)], 0.0);
    }

    #[test]
    fn concat_shapes_and_values() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1.0]]));
        let b = t.constant(m(&[&[2.0]]));
        let c = t.concat_channels(&[a, b]).unwrap();
        assert_eq!(t.value(c), &m(&[&[1.0, 2.0]]));
        let single = t.concat_channels(&[a]).unwrap();
        assert_eq!(t.value(single), t.value(a));
        let p = t.constant(Matrix::zeros(1, 2));
        let q = t.constant(Matrix::zeros(1, 3));
        let pq = t.concat_channels(&[p, q]).unwrap();
        assert_eq!(t.shape(pq), (1, 5));
        let r = t.constant(Matrix::zeros(2, 3));
        assert!(t.concat_channels(&[p, r]).is_err());
    }

    #[test]
    fn conv_sliding_window_sum() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]));
        let k = t.constant(Matrix::from_vec(3, 1, vec![1.0, 1.0, 1.0]));
        let y = t.conv1d_temporal(x, k, 3, 4).unwrap();
        assert_eq!(t.value(y).as_slice(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut t = Tape::new();
        let d = 3;
        let mut kernel = Matrix::zeros(3 * d, d);
        for i in 0..d {
            kernel[(d + i, i)] = 1.0;
        }
        let xm = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0], &[0.5, 0.1, 0.2]]);
        let x = t.constant(xm.clone());
        let k = t.constant(kernel);
        let y = t.conv1d_temporal(x, k, 3, 4).unwrap();
        assert_eq!(t.value(y), &xm);
    }

    #[test]
    fn conv_single_frame_uses_center_tap() {
        let mut t = Tape::new();
        let x = t.constant(m(&[&[2.0]]));
        let k = t.constant(Matrix::from_vec(3, 1, vec![10.0, 3.0, 10.0]));
        let y = t.conv1d_temporal(x, k, 3, 1).unwrap();
        assert_eq!(t.value(y).item(), 6.0);
    }

    #[test]
    fn conv_rejects_even_width() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::zeros(4, 1));
        let k = t.constant(Matrix::zeros(2, 1));
        assert!(matches!(t.conv1d_temporal(x, k, 2, 4), Err(Error::Config(_))));
    }

    #[test]
    fn bce_reference_values() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::scalar(0.0));
        let l = t.bce_with_logits(z, &[1.0]).unwrap();
        assert!((t.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let z = t.constant(Matrix::scalar(1.0));
        let l = t.bce_with_logits(z, &[0.0]).unwrap();
        assert!((t.value(l).item() - 1.313_261_687_518_222_7).abs() < 1e-12);
        let z = t.constant(Matrix::scalar(800.0));
        let l = t.bce_with_logits(z, &[1.0]).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let z = t.constant(Matrix::scalar(0.0));
        assert!(matches!(t.bce_with_logits(z, &[0.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn mse_reference_values() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1.0]]));
        let b = t.constant(m(&[&[3.0]]));
        let l = t.mse(a, b).unwrap();
        assert_eq!(t.value(l).item(), 4.0);
        let a = t.constant(m(&[&[0.0, 0.0]]));
        let b = t.constant(m(&[&[3.0, 4.0]]));
        let l = t.mse(a, b).unwrap();
        assert_eq!(t.value(l).item(), 12.5);
        let same = t.mse(a, a).unwrap();
        assert_eq!(t.value(same).item(), 0.0);
        let c = t.constant(Matrix::zeros(2, 1));
        assert!(t.mse(a, c).is_err());
    }

    #[test]
    fn stop_gradient_contract() {
        let xm = m(&[&[0.1, -2.0], &[3.5, 1e-9]]);
        let mut t = Tape::new();
        let x = t.param(xm.clone());
        let s = t.stop_gradient(x).unwrap();
        assert_eq!(t.value(s), &xm);
        let total = t.sum_all(s).unwrap();
        let g = t.backward(total).unwrap();
        assert!(g.wrt(x).as_slice().iter().all(|&v| v == 0.0));

        let mut t = Tape::new();
        let x = t.param(xm);
        let s = t.stop_gradient(x).unwrap();
        let y = t.add(x, s).unwrap();
        let total = t.sum_all(y).unwrap();
        let g = t.backward(total).unwrap();
        assert!(g.wrt(x).as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn finite_differences_hold_stopped_values_fixed() {
        let mut point = ParamStore::new();
        point.insert("x".into(), Matrix::scalar(1.5));
        let report = finite_diff_check(&point, 1e-6, None, |t, b| {
            let x = b.get("x")?;
            let s = t.stop_gradient(x)?;
            let p = t.matmul(x, s)?;
            t.sum_all(p)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
        assert!((report.analytic_l1 - 1.5).abs() < 1e-12);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(2.0));
        let y = t.sum_all(x).unwrap();
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(Error::BackwardTwice)));
        t.reset();
        let x = t.param(Matrix::scalar(2.0));
        let y = t.sum_all(x).unwrap();
        assert!(t.backward(y).is_ok());
    }

    #[test]
    fn backward_visits_in_reverse_recording_order() {
        let mut t = Tape::with_trace();
        let a = t.param(Matrix::scalar(1.5));
        let b = t.param(Matrix::scalar(-0.5));
        let c = t.matmul(a, b).unwrap();
        let d = t.add(c, a).unwrap();
        let e = t.sum_all(d).unwrap();
        t.backward(e).unwrap();
        assert_eq!(t.backward_trace().unwrap(), &[4, 3, 2, 1, 0]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(3.0));
        let y = t.add(x, x).unwrap();
        let z = t.add(y, x).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.wrt(x).item(), 3.0);
    }

    #[test]
    fn non_finite_forward_aborts() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::scalar(1e200));
        assert!(matches!(t.matmul(x, x), Err(Error::NonFinite { op: "matmul" })));
    }

    #[test]
    fn constants_never_accumulate_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::scalar(2.0));
        let x = t.param(Matrix::scalar(3.0));
        let y = t.matmul(c, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).item(), 2.0);
    }

    #[test]
    fn gradcheck_square_and_constant() {
        let mut point = ParamStore::new();
        point.insert("x".into(), Matrix::scalar(3.0));
        let report = finite_diff_check(&point, 1e-6, None, |t, b| {
            let x = b.get("x")?;
            t.matmul(x, x)
        })
        .unwrap();
        assert!((report.analytic_l1 - 6.0).abs() < 1e-12);
        assert!(report.max_relative_error < 1e-7);

        let report = finite_diff_check(&point, 1e-6, None, |t, _| Ok(t.constant(Matrix::scalar(4.0))))
            .unwrap();
        assert_eq!(report.max_relative_error, 0.0);
        assert_eq!(report.analytic_l1, 0.0);
    }

    #[test]
    fn gradcheck_rejects_bad_eps() {
        let point = ParamStore::new();
        let r = finite_diff_check(&point, 0.0, None, |t, _| Ok(t.constant(Matrix::scalar(0.0))));
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
