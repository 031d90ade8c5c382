use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, b_index, Broadcast, BinaryOp, UnaryOp};
use super::Tensor;
use crate::error::{GmlpError, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`]. Only valid for the tape that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Biased batch statistics produced by [`Tape::batch_norm`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, p: usize, q: usize, r: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Binary { op: BinaryOp, a: usize, b: usize, kind: Broadcast },
    Unary { op: UnaryOp, a: usize },
    Scale { a: usize, factor: f64 },
    Sum { a: usize },
    SoftmaxRows { a: usize, cols: usize, temperature: f64 },
    LogSoftmaxRows { a: usize, cols: usize, temperature: f64 },
    Reshape { a: usize },
    GatherCols { a: usize, index: Vec<usize> },
    GroupLinear { z: usize, w: usize, bias: usize, batch: usize, groups: usize, fan_in: usize, fan_out: usize },
    BatchNorm { x: usize, inv_std: Vec<f64> },
    PickRows { a: usize, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of primitive ops. Nodes are stored in creation order,
/// which is a topological order by construction.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward
    /// fills its gradient slot.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = value.requires_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("variable from another tape");
        &self.nodes[v.index].value
    }

    /// Gradient of the last backward pass for a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.check(v).ok()?;
        self.nodes[v.index].value.grad()
    }

    /// Clears every gradient slot so [`Tape::backward`] may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        self.backward_done = false;
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(GmlpError::Backward("variable belongs to a different tape".into()));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn record(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[usize]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GmlpError::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GmlpError::Dimension(format!("matmul {sa:?} x {sb:?}")));
        }
        let (p, q, r) = (sa[0], sa[1], sb[1]);
        let out = ops::matmul(self.value(a).data(), self.value(b).data(), p, q, r);
        self.record(
            "matmul",
            vec![p, r],
            out,
            Op::MatMul { a: a.index, b: b.index, p, q, r },
            &[a.index, b.index],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(GmlpError::Dimension(format!("transpose needs a matrix, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let out = ops::transpose(self.value(a).data(), rows, cols);
        self.record("transpose", vec![cols, rows], out, Op::Transpose { a: a.index, rows, cols }, &[a.index])
    }

    /// Elementwise binary op. `b` may match `a`'s shape, be a single value,
    /// or be one row broadcast over `a`'s leading axis.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = ops::broadcast_kind(ta.shape(), ta.len(), tb.shape(), tb.len())?;
        if op == BinaryOp::Max && kind != Broadcast::Same {
            return Err(GmlpError::Dimension("max requires equal shapes".into()));
        }
        let out = ops::binary(op, ta.data(), tb.data(), kind)?;
        let shape = ta.shape().to_vec();
        self.record("binary op", shape, out, Op::Binary { op, a: a.index, b: b.index, kind }, &[a.index, b.index])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Max, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let out = ops::unary(op, t.data())?;
        let shape = t.shape().to_vec();
        self.record("unary op", shape, out, Op::Unary { op, a: a.index }, &[a.index])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * factor).collect();
        let shape = t.shape().to_vec();
        self.record("scale", shape, out, Op::Scale { a: a.index, factor }, &[a.index])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let total = self.value(a).data().iter().sum();
        self.record("sum", vec![1], vec![total], Op::Sum { a: a.index }, &[a.index])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum of squares of every element.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum(sq)
    }

    fn temperature_ok(temperature: f64) -> Result<()> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(GmlpError::Config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(())
    }

    /// Softmax of each row of `a / temperature`; the temperature is a
    /// constant of the op.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        self.check(a)?;
        Self::temperature_ok(temperature)?;
        let t = self.value(a);
        let cols = t.cols();
        let out = ops::softmax_rows(t.data(), cols, temperature);
        let shape = t.shape().to_vec();
        self.record("softmax_rows", shape, out, Op::SoftmaxRows { a: a.index, cols, temperature }, &[a.index])
    }

    pub fn log_softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        self.check(a)?;
        Self::temperature_ok(temperature)?;
        let t = self.value(a);
        let cols = t.cols();
        let out = ops::log_softmax_rows(t.data(), cols, temperature);
        let shape = t.shape().to_vec();
        self.record(
            "log_softmax_rows",
            shape,
            out,
            Op::LogSoftmaxRows { a: a.index, cols, temperature },
            &[a.index],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(GmlpError::Dimension(format!("cannot reshape {:?} into {shape:?}", t.shape())));
        }
        let data = t.data().to_vec();
        self.record("reshape", shape, data, Op::Reshape { a: a.index }, &[a.index])
    }

    /// `out[r, c] = a[r, index[c]]` with `a` viewed as `rows × cols`; the
    /// result is reshaped to `[rows, tail...]`.
    pub fn gather_cols(&mut self, a: Var, index: &[usize], tail: &[usize]) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if tail.iter().product::<usize>() != index.len() {
            return Err(GmlpError::Dimension(format!(
                "gather of {} columns cannot fill {tail:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return Err(GmlpError::Dimension(format!("column {bad} out of range for {cols} columns")));
        }
        let mut out = Vec::with_capacity(rows * index.len());
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            out.extend(index.iter().map(|&i| row[i]));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        self.record(
            "gather_cols",
            shape,
            out,
            Op::GatherCols { a: a.index, index: index.to_vec() },
            &[a.index],
        )
    }

    /// Independent affine map per group: `z` is `[B, g, in]`, `w` is
    /// `[g, out, in]`, `bias` is `[g, out]`; result is `[B, g, out]`.
    pub fn group_linear(&mut self, z: Var, w: Var, bias: Var) -> Result<Var> {
        self.check(z)?;
        self.check(w)?;
        self.check(bias)?;
        let (sz, sw, sb) = (self.value(z).shape(), self.value(w).shape(), self.value(bias).shape());
        if sz.len() != 3 || sw.len() != 3 || sb.len() != 2 {
            return Err(GmlpError::Dimension(format!(
                "group_linear expects z[B,g,in], w[g,out,in], b[g,out]; got {sz:?}, {sw:?}, {sb:?}"
            )));
        }
        let (batch, groups, fan_in) = (sz[0], sz[1], sz[2]);
        let fan_out = sw[1];
        if sw[0] != groups || sw[2] != fan_in || sb[0] != groups || sb[1] != fan_out {
            return Err(GmlpError::Dimension(format!(
                "group_linear shapes disagree: z{sz:?}, w{sw:?}, b{sb:?}"
            )));
        }
        let out = ops::group_linear(
            self.value(z).data(),
            self.value(w).data(),
            self.value(bias).data(),
            batch,
            groups,
            fan_in,
            fan_out,
        );
        self.record(
            "group_linear",
            vec![batch, groups, fan_out],
            out,
            Op::GroupLinear { z: z.index, w: w.index, bias: bias.index, batch, groups, fan_in, fan_out },
            &[z.index, w.index, bias.index],
        )
    }

    /// Standardizes each column of `x` (viewed as `B × F`) by its batch mean
    /// and biased variance. Returns the standardized values and the moments.
    pub fn batch_norm(&mut self, x: Var, epsilon: f64) -> Result<(Var, BatchMoments)> {
        self.check(x)?;
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if rows < 2 {
            return Err(GmlpError::Config("batch norm in training mode needs at least 2 rows".into()));
        }
        let n = rows as f64;
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(t.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let mut out = Vec::with_capacity(t.len());
        for r in 0..rows {
            for (c, v) in t.row(r).iter().enumerate() {
                out.push((v - mean[c]) * inv_std[c]);
            }
        }
        let shape = t.shape().to_vec();
        let var_out = self.record("batch_norm", shape, out, Op::BatchNorm { x: x.index, inv_std }, &[x.index])?;
        Ok((var_out, BatchMoments { mean, var }))
    }

    /// Picks `a[i, labels[i]]` from each row, giving a `[B]` vector.
    pub fn pick_rows(&mut self, a: Var, labels: &[usize]) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        if labels.len() != rows {
            return Err(GmlpError::Dimension(format!("{} labels for {rows} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(GmlpError::Label { label: bad, classes: cols });
        }
        let out = labels.iter().enumerate().map(|(r, &l)| t.data()[r * cols + l]).collect();
        self.record("pick_rows", vec![rows], out, Op::PickRows { a: a.index, labels: labels.to_vec() }, &[a.index])
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every `requires_grad`
    /// leaf holds d(loss)/d(leaf). Calling it again without
    /// [`Tape::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.backward_done {
            return Err(GmlpError::Backward("backward already ran on this tape; reset grads first".into()));
        }
        if self.nodes[loss.index].value.len() != 1 {
            return Err(GmlpError::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        if !self.nodes[loss.index].needs_grad {
            return Err(GmlpError::Backward("loss is detached from every requires_grad leaf".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.set_grad(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |j: usize| self.nodes[j].needs_grad;
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, p, q, r } => {
                let (p, q, r) = (*p, *q, *r);
                if needs(*a) {
                    // dA = G · Bᵀ
                    let bt = ops::transpose(val(*b), q, r);
                    accumulate(grads, *a, ops::matmul(g, &bt, p, r, q));
                }
                if needs(*b) {
                    // dB = Aᵀ · G
                    let at = ops::transpose(val(*a), p, q);
                    accumulate(grads, *b, ops::matmul(&at, g, q, p, r));
                }
            }
            Op::Transpose { a, rows, cols } => {
                accumulate(grads, *a, ops::transpose(g, *cols, *rows));
            }
            Op::Binary { op, a, b, kind } => {
                let (av, bv) = (val(*a), val(*b));
                let n_b = bv.len();
                let mut ga = needs(*a).then(|| vec![0.0; av.len()]);
                let mut gb = needs(*b).then(|| vec![0.0; n_b]);
                for (idx, &gi) in g.iter().enumerate() {
                    let bi = b_index(*kind, idx);
                    let (x, y) = (av[idx], bv[bi]);
                    let (da, db) = match op {
                        BinaryOp::Add => (gi, gi),
                        BinaryOp::Sub => (gi, -gi),
                        BinaryOp::Mul => (gi * y, gi * x),
                        BinaryOp::Div => (gi / y, -gi * x / (y * y)),
                        BinaryOp::Max => {
                            if x >= y {
                                (gi, 0.0)
                            } else {
                                (0.0, gi)
                            }
                        }
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[idx] += da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[bi] += db;
                    }
                }
                if let Some(ga) = ga {
                    accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *b, gb);
                }
            }
            Op::Unary { op, a } => {
                let av = val(*a);
                let out = node.value.data();
                let ga = match op {
                    UnaryOp::Exp => g.iter().zip(out).map(|(gi, y)| gi * y).collect(),
                    UnaryOp::Log => g.iter().zip(av).map(|(gi, x)| gi / x).collect(),
                    UnaryOp::Relu => g
                        .iter()
                        .zip(av)
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect(),
                    UnaryOp::Neg => g.iter().map(|gi| -gi).collect(),
                };
                accumulate(grads, *a, ga);
            }
            Op::Scale { a, factor } => {
                accumulate(grads, *a, g.iter().map(|gi| gi * factor).collect());
            }
            Op::Sum { a } => {
                accumulate(grads, *a, vec![g[0]; val(*a).len()]);
            }
            Op::SoftmaxRows { a, cols, temperature } => {
                let y = node.value.data();
                let mut ga = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks_exact(*cols).zip(g.chunks_exact(*cols)).zip(ga.chunks_exact_mut(*cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot) / temperature;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows { a, cols, temperature } => {
                let y = node.value.data();
                let mut ga = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks_exact(*cols).zip(g.chunks_exact(*cols)).zip(ga.chunks_exact_mut(*cols)) {
                    let total: f64 = gr.iter().sum();
                    for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (gi - yi.exp() * total) / temperature;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Reshape { a } => accumulate(grads, *a, g.to_vec()),
            Op::GatherCols { a, index } => {
                let src = &self.nodes[*a].value;
                let (rows, cols) = (src.rows(), src.cols());
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gr = &g[r * index.len()..(r + 1) * index.len()];
                    for (&c, gi) in index.iter().zip(gr) {
                        ga[r * cols + c] += gi;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::GroupLinear { z, w, bias, batch, groups, fan_in, fan_out } => {
                let (batch, groups, fan_in, fan_out) = (*batch, *groups, *fan_in, *fan_out);
                let (zv, wv) = (val(*z), val(*w));
                let mut gz = needs(*z).then(|| vec![0.0; zv.len()]);
                let mut gw = needs(*w).then(|| vec![0.0; wv.len()]);
                let mut gb = needs(*bias).then(|| vec![0.0; groups * fan_out]);
                for b in 0..batch {
                    for grp in 0..groups {
                        let zoff = (b * groups + grp) * fan_in;
                        let goff = (b * groups + grp) * fan_out;
                        for o in 0..fan_out {
                            let go = g[goff + o];
                            if go == 0.0 {
                                continue;
                            }
                            let woff = (grp * fan_out + o) * fan_in;
                            if let Some(gz) = gz.as_mut() {
                                for j in 0..fan_in {
                                    gz[zoff + j] += wv[woff + j] * go;
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                for j in 0..fan_in {
                                    gw[woff + j] += zv[zoff + j] * go;
                                }
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[grp * fan_out + o] += go;
                            }
                        }
                    }
                }
                if let Some(gz) = gz {
                    accumulate(grads, *z, gz);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, gw);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *bias, gb);
                }
            }
            Op::BatchNorm { x, inv_std } => {
                let xhat = node.value.data();
                let cols = inv_std.len();
                let rows = xhat.len() / cols;
                let n = rows as f64;
                let mut sum_g = vec![0.0; cols];
                let mut sum_gx = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        sum_g[c] += g[r * cols + c];
                        sum_gx[c] += g[r * cols + c] * xhat[r * cols + c];
                    }
                }
                let mut gx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        let k = r * cols + c;
                        gx[k] = inv_std[c] / n * (n * g[k] - sum_g[c] - xhat[k] * sum_gx[c]);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::PickRows { a, labels } => {
                let src = &self.nodes[*a].value;
                let cols = src.cols();
                let mut ga = vec![0.0; src.len()];
                for (r, &l) in labels.iter().enumerate() {
                    ga[r * cols + l] = g[r];
                }
                accumulate(grads, *a, ga);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], index: usize, g: Vec<f64>) {
    match &mut grads[index] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
        slot => *slot = Some(g),
    }
}
