//! Forward kernels shared by the tape ops. All work on flat row-major slices.

use crate::error::{GmlpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise maximum; ties route the gradient to the left operand.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    /// Subgradient 0 at 0.
    Relu,
    Neg,
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    Scalar,
    /// Right operand has `cols` elements repeated for every row.
    Row { cols: usize },
}

pub(crate) fn broadcast_kind(a_shape: &[usize], a_len: usize, b_shape: &[usize], b_len: usize) -> Result<Broadcast> {
    if a_shape == b_shape {
        return Ok(Broadcast::Same);
    }
    if b_len == 1 {
        return Ok(Broadcast::Scalar);
    }
    let cols = a_len / a_shape[0];
    if b_len == cols && a_shape.len() >= 2 {
        return Ok(Broadcast::Row { cols });
    }
    Err(GmlpError::Dimension(format!(
        "cannot broadcast {b_shape:?} against {a_shape:?}"
    )))
}

#[inline]
pub(crate) fn b_index(kind: Broadcast, i: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Row { cols } => i % cols,
    }
}

pub(crate) fn binary(op: BinaryOp, a: &[f64], b: &[f64], kind: Broadcast) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(a.len());
    for (i, &x) in a.iter().enumerate() {
        let y = b[b_index(kind, i)];
        let v = match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => {
                if y == 0.0 {
                    return Err(GmlpError::Domain("division by zero".into()));
                }
                x / y
            }
            BinaryOp::Max => {
                if x >= y {
                    x
                } else {
                    y
                }
            }
        };
        out.push(v);
    }
    Ok(out)
}

pub(crate) fn unary(op: UnaryOp, a: &[f64]) -> Result<Vec<f64>> {
    match op {
        UnaryOp::Exp => Ok(a.iter().map(|x| x.exp()).collect()),
        UnaryOp::Log => {
            if let Some(bad) = a.iter().find(|&&x| x <= 0.0) {
                return Err(GmlpError::Domain(format!("log of non-positive value {bad}")));
            }
            Ok(a.iter().map(|x| x.ln()).collect())
        }
        UnaryOp::Relu => Ok(a.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()),
        UnaryOp::Neg => Ok(a.iter().map(|x| -x).collect()),
    }
}

/// `out[p×r] = a[p×q] · b[q×r]`
pub(crate) fn matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let out_row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-wise softmax of `a / temperature` with max subtraction.
pub(crate) fn softmax_rows(a: &[f64], cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for (src, dst) in a.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s - max) / temperature).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(a: &[f64], cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for (src, dst) in a.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_total = src
            .iter()
            .map(|&s| ((s - max) / temperature).exp())
            .sum::<f64>()
            .ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max) / temperature - log_total;
        }
    }
    out
}

/// Per-group affine map. `z` is `[batch, groups, fan_in]`, `w` is
/// `[groups, fan_out, fan_in]`, `bias` is `[groups, fan_out]`.
pub(crate) fn group_linear(
    z: &[f64],
    w: &[f64],
    bias: &[f64],
    batch: usize,
    groups: usize,
    fan_in: usize,
    fan_out: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * groups * fan_out];
    for b in 0..batch {
        for g in 0..groups {
            let zin = &z[(b * groups + g) * fan_in..(b * groups + g + 1) * fan_in];
            let dst = &mut out[(b * groups + g) * fan_out..(b * groups + g + 1) * fan_out];
            for (o, d) in dst.iter_mut().enumerate() {
                let wrow = &w[(g * fan_out + o) * fan_in..(g * fan_out + o + 1) * fan_in];
                let mut acc = bias[g * fan_out + o];
                for (wv, zv) in wrow.iter().zip(zin) {
                    acc += wv * zv;
                }
                *d = acc;
            }
        }
    }
    out
}
