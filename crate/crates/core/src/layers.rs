//! Layer vocabulary of group-connected networks: Group-Select, Group-FC and
//! Group-Pool, plus the dense, batch-norm, dropout and concat blocks that
//! surround them.
//!
//! Grouped activations are `[batch, groups, group_size]` tensors. Every
//! function here records onto a caller-supplied [`Tape`]; parameters are
//! passed in as tape variables so the caller decides what is trainable.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmlpError, Result};
use crate::tensor::{BatchMoments, Tape, Tensor, Var};

/// Real-valued routing logits `psi` (`km × d`) and the softmax temperature
/// that turns them into a relaxed routing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingParams {
    pub psi: Tensor,
    pub temperature: f64,
    pub k: usize,
    pub m: usize,
    pub d: usize,
}

impl RoutingParams {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn new(psi: Tensor, temperature: f64, k: usize, m: usize) -> Result<Self> {
        let shape = psi.shape();
        if shape.len() != 2 || shape[0] != k * m {
            return Err(GmlpError::Dimension(format!(
                "routing logits must be ({}, d), got {shape:?}",
                k * m
            )));
        }
        if !(temperature > 0.0) {
            return Err(GmlpError::Config(format!("temperature must be positive, got {temperature}")));
        }
        let d = shape[1];
        Ok(Self { psi, temperature, k, m, d })
    }

    /// Row-softmax of `psi / temperature`.
    pub fn probabilities(&self) -> Vec<f64> {
        crate::tensor::softmax_rows(self.psi.data(), self.d, self.temperature)
    }
}

/// How Group-Select maps inputs to slots.
#[derive(Debug, Clone, Copy)]
pub enum SelectMode<'a> {
    /// `x · softmax(psi / tau)ᵀ`
    Relaxed { temperature: f64 },
    /// One input feature per slot, given as a slot → feature table.
    Hard(&'a [usize]),
}

/// Group-Select: `[B, d]` inputs to `[B, k, m]` grouped slots.
pub fn group_select_forward(tape: &mut Tape, x: Var, psi: Var, k: usize, m: usize, mode: SelectMode<'_>) -> Result<Var> {
    let d = tape.value(psi).shape()[1];
    let xs = tape.value(x).shape();
    if xs.len() != 2 || xs[1] != d {
        return Err(GmlpError::Dimension(format!("group select expects [B, {d}] inputs, got {xs:?}")));
    }
    match mode {
        SelectMode::Relaxed { temperature } => {
            let routing = tape.softmax_rows(psi, temperature)?;
            let routing_t = tape.transpose(routing)?;
            let flat = tape.matmul(x, routing_t)?;
            let batch = tape.value(flat).rows();
            tape.reshape(flat, vec![batch, k, m])
        }
        SelectMode::Hard(table) => {
            if table.len() != k * m {
                return Err(GmlpError::Dimension(format!(
                    "routing table has {} slots, expected {}",
                    table.len(),
                    k * m
                )));
            }
            tape.gather_cols(x, table, &[k, m])
        }
    }
}

/// Per-group `m × m` weights and `m` biases, stacked along the group axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupFcParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl GroupFcParams {
    pub fn identity(k: usize, m: usize) -> Self {
        let mut weight = Tensor::zeros(&[k, m, m]);
        for g in 0..k {
            for i in 0..m {
                weight.data_mut()[(g * m + i) * m + i] = 1.0;
            }
        }
        Self {
            weight,
            bias: Tensor::zeros(&[k, m]),
        }
    }

    /// Xavier-uniform weights with fan-in and fan-out both `m`.
    pub fn xavier<R: Rng>(k: usize, m: usize, rng: &mut R) -> Self {
        Self {
            weight: xavier_uniform(&[k, m, m], m, m, rng),
            bias: Tensor::zeros(&[k, m]),
        }
    }

    pub fn groups(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Group-FC: `z_i ← W_i z_i + b_i` for every group independently.
pub fn group_fc_forward(tape: &mut Tape, z: Var, weight: Var, bias: Var) -> Result<Var> {
    let groups = tape.value(z).shape().get(1).copied().unwrap_or(0);
    let have = tape.value(weight).shape()[0];
    if groups != have {
        return Err(GmlpError::Dimension(format!("{groups} groups but {have} group weight matrices")));
    }
    tape.group_linear(z, weight, bias)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Mean,
    Linear,
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::Max => "max",
            PoolKind::Mean => "mean",
            PoolKind::Linear => "linear",
        })
    }
}

impl FromStr for PoolKind {
    type Err = GmlpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(PoolKind::Max),
            "mean" | "avg" | "average" => Ok(PoolKind::Mean),
            "linear" => Ok(PoolKind::Linear),
            other => Err(GmlpError::Config(format!("unknown pooling kind `{other}`"))),
        }
    }
}

/// Slot indices (into the flattened `groups · m` axis) of every source group
/// merged into output group `i`, for each stratum `s`. Output group `i`
/// draws from groups `i, i + g/b, i + 2g/b, …`.
pub fn pool_strata(groups: usize, m: usize, branching: usize) -> Result<Vec<Vec<usize>>> {
    if branching < 2 {
        return Err(GmlpError::Config(format!("branching factor must be at least 2, got {branching}")));
    }
    if !groups.is_multiple_of(branching) {
        return Err(GmlpError::Config(format!("{groups} groups cannot be pooled {branching} at a time")));
    }
    let out = groups / branching;
    Ok((0..branching)
        .map(|s| (0..out).flat_map(|i| ((i + s * out) * m..(i + s * out + 1) * m).collect::<Vec<_>>()).collect())
        .collect())
}

/// Group-Pool: merges `branching` groups into one, shrinking the group axis
/// by that factor. `linear` carries `([g/b, m, b·m], [g/b, m])` weights when
/// `kind` is [`PoolKind::Linear`].
pub fn group_pool_forward(
    tape: &mut Tape,
    z: Var,
    kind: PoolKind,
    branching: usize,
    linear: Option<(Var, Var)>,
) -> Result<Var> {
    let shape = tape.value(z).shape().to_vec();
    if shape.len() != 3 {
        return Err(GmlpError::Dimension(format!("group pool expects [B, g, m], got {shape:?}")));
    }
    let (groups, m) = (shape[1], shape[2]);
    let strata = pool_strata(groups, m, branching)?;
    let out_groups = groups / branching;
    match kind {
        PoolKind::Max | PoolKind::Mean => {
            let mut acc = tape.gather_cols(z, &strata[0], &[out_groups, m])?;
            for stratum in &strata[1..] {
                let next = tape.gather_cols(z, stratum, &[out_groups, m])?;
                acc = match kind {
                    PoolKind::Max => tape.maximum(acc, next)?,
                    _ => tape.add(acc, next)?,
                };
            }
            if kind == PoolKind::Mean {
                acc = tape.scale(acc, 1.0 / branching as f64)?;
            }
            Ok(acc)
        }
        PoolKind::Linear => {
            let (w, b) = linear.ok_or_else(|| GmlpError::Config("linear pooling needs weights".into()))?;
            // Interleave so that merged group i holds [stratum 0 | stratum 1 | …].
            let mut index = Vec::with_capacity(groups * m);
            for i in 0..out_groups {
                for stratum in &strata {
                    index.extend_from_slice(&stratum[i * m..(i + 1) * m]);
                }
            }
            let merged = tape.gather_cols(z, &index, &[out_groups, branching * m])?;
            tape.group_linear(merged, w, b)
        }
    }
}

/// Running moments and hyperparameters of one batch-norm layer. The affine
/// scale and shift are trainable parameters kept by the owning model.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn new(features: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(GmlpError::Config(format!("batch norm momentum must be in (0,1), got {momentum}")));
        }
        if !(epsilon > 0.0) {
            return Err(GmlpError::Config(format!("batch norm epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum,
            epsilon,
        })
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving update from one batch. The variance is stored with
    /// the unbiased `n / (n - 1)` correction.
    pub fn update(&mut self, moments: &BatchMoments, batch: usize) {
        let correction = batch as f64 / (batch as f64 - 1.0);
        let mo = self.momentum;
        for (r, m) in self.running_mean.iter_mut().zip(&moments.mean) {
            *r = (1.0 - mo) * *r + mo * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&moments.var) {
            *r = (1.0 - mo) * *r + mo * v * correction;
        }
    }
}

/// Batch norm over the flattened feature axis. In training mode the batch
/// moments are returned for the caller to fold into `state`.
pub fn batchnorm_forward(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &BatchNormState,
    training: bool,
) -> Result<(Var, Option<BatchMoments>)> {
    let features = tape.value(x).cols();
    if features != state.features() {
        return Err(GmlpError::Dimension(format!(
            "batch norm has {} features, input has {features}",
            state.features()
        )));
    }
    let (normalized, moments) = if training {
        let (v, m) = tape.batch_norm(x, state.epsilon)?;
        (v, Some(m))
    } else {
        let mean = tape.constant(Tensor::new(vec![features], state.running_mean.clone())?);
        let inv_std = state.running_var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
        let inv_std = tape.constant(Tensor::new(vec![features], inv_std)?);
        let centered = tape.sub(x, mean)?;
        (tape.mul(centered, inv_std)?, None)
    };
    let scaled = tape.mul(normalized, gamma)?;
    Ok((tape.add(scaled, beta)?, moments))
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` so that eval
/// mode is the identity.
pub fn dropout_forward<R: Rng>(tape: &mut Tape, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(GmlpError::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let t = tape.value(x);
    let shape = t.shape().to_vec();
    let mask = (0..t.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, mask)
}

/// `[B, g, m]` → `[B, g·m]`, group-major.
pub fn concat_groups(tape: &mut Tape, z: Var) -> Result<Var> {
    let t = tape.value(z);
    let (b, c) = (t.rows(), t.cols());
    tape.reshape(z, vec![b, c])
}

/// Inverse of [`concat_groups`].
pub fn split_groups(tape: &mut Tape, flat: Var, groups: usize, m: usize) -> Result<Var> {
    let b = tape.value(flat).rows();
    tape.reshape(flat, vec![b, groups, m])
}

/// `x · W + b` with `W` stored `[in, out]`.
pub fn dense_forward(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let h = tape.matmul(x, weight)?;
    tape.add(h, bias)
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-limit..limit);
    }
    t
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn hard_select_gathers() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let psi = tape.constant(Tensor::zeros(&[2, 3]));
        let z = group_select_forward(&mut tape, x, psi, 1, 2, SelectMode::Hard(&[2, 0])).unwrap();
        assert_eq!(tape.value(z).shape(), &[1, 1, 2]);
        assert_eq!(tape.value(z).data(), &[3.0, 1.0]);
    }

    #[test]
    fn saturated_relaxed_matches_hard() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 4.0, -1.0]));
        let mut psi = Tensor::zeros(&[2, 3]);
        psi.data_mut()[2] = 1e6;
        psi.data_mut()[3] = 1e6;
        let psi = tape.constant(psi);
        let relaxed = group_select_forward(&mut tape, x, psi, 1, 2, SelectMode::Relaxed { temperature: 1.0 }).unwrap();
        let hard = group_select_forward(&mut tape, x, psi, 1, 2, SelectMode::Hard(&[2, 0])).unwrap();
        for (a, b) in tape.value(relaxed).data().iter().zip(tape.value(hard).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_routing_averages() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[3.0, 6.0, 9.0]));
        let psi = tape.constant(Tensor::zeros(&[4, 3]));
        let z = group_select_forward(&mut tape, x, psi, 2, 2, SelectMode::Relaxed { temperature: 1.0 }).unwrap();
        for v in tape.value(z).data() {
            assert!((v - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn select_rejects_wrong_width() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let psi = tape.constant(Tensor::zeros(&[2, 3]));
        let err = group_select_forward(&mut tape, x, psi, 1, 2, SelectMode::Relaxed { temperature: 1.0 });
        assert!(matches!(err, Err(GmlpError::Dimension(_))));
    }

    #[test]
    fn group_fc_identity_and_locality() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = GroupFcParams::identity(2, 2);
        let w = tape.constant(p.weight.clone());
        let b = tape.constant(p.bias.clone());
        let out = group_fc_forward(&mut tape, z, w, b).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let mut zeroed = p.weight.clone();
        zeroed.data_mut()[..4].fill(0.0);
        let w = tape.constant(zeroed);
        let out = group_fc_forward(&mut tape, z, w, b).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 3.0, 4.0]);
        assert_eq!(p.param_count(), 2 * (4 + 2));
    }

    #[test]
    fn group_fc_rejects_group_mismatch() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 3, 2]));
        let p = GroupFcParams::identity(2, 2);
        let w = tape.constant(p.weight);
        let b = tape.constant(p.bias);
        assert!(group_fc_forward(&mut tape, z, w, b).is_err());
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 2, 2], &[1.0, 4.0, 3.0, 2.0]));
        let max = group_pool_forward(&mut tape, z, PoolKind::Max, 2, None).unwrap();
        assert_eq!(tape.value(max).data(), &[3.0, 4.0]);
        let mean = group_pool_forward(&mut tape, z, PoolKind::Mean, 2, None).unwrap();
        assert_eq!(tape.value(mean).data(), &[2.0, 3.0]);

        // [I | 0] keeps the first source group.
        let w = tape.constant(t(&[1, 2, 4], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
        let b = tape.constant(Tensor::zeros(&[1, 2]));
        let lin = group_pool_forward(&mut tape, z, PoolKind::Linear, 2, Some((w, b))).unwrap();
        assert_eq!(tape.value(lin).data(), &[1.0, 4.0]);
    }

    #[test]
    fn pooling_pairs_halves() {
        // group i merges with group i + g/2
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 4, 1], &[1.0, 2.0, 10.0, 20.0]));
        let out = group_pool_forward(&mut tape, z, PoolKind::Mean, 2, None).unwrap();
        assert_eq!(tape.value(out).data(), &[5.5, 11.0]);
        let out = group_pool_forward(&mut tape, z, PoolKind::Max, 4, None).unwrap();
        assert_eq!(tape.value(out).data(), &[20.0]);
    }

    #[test]
    fn pooling_errors() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(group_pool_forward(&mut tape, z, PoolKind::Max, 2, None).is_err());
        let z = tape.constant(Tensor::zeros(&[1, 4, 2]));
        assert!(group_pool_forward(&mut tape, z, PoolKind::Linear, 2, None).is_err());
        assert!(group_pool_forward(&mut tape, z, PoolKind::Max, 1, None).is_err());
    }

    #[test]
    fn batchnorm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[1.0, 3.0]));
        let gamma = tape.constant(Tensor::filled(&[1], 1.0));
        let beta = tape.constant(Tensor::zeros(&[1]));
        let mut state = BatchNormState::new(1, 0.1, 1e-5).unwrap();
        let (y, moments) = batchnorm_forward(&mut tape, x, gamma, beta, &state, true).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-3 && (d[1] - 1.0).abs() < 1e-3);
        state.update(&moments.unwrap(), 2);
        assert!((state.running_mean[0] - 0.2).abs() < 1e-12);
        // biased var 1, unbiased 2
        assert!((state.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);

        let zero = tape.constant(Tensor::zeros(&[1]));
        let shift = tape.constant(Tensor::filled(&[1], 0.7));
        let (y, _) = batchnorm_forward(&mut tape, x, zero, shift, &state, true).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, 0.7]);
    }

    #[test]
    fn batchnorm_eval_ignores_batch_composition() {
        let mut state = BatchNormState::new(2, 0.1, 1e-5).unwrap();
        state.running_mean = vec![1.0, -1.0];
        state.running_var = vec![4.0, 0.25];
        let rows = [[1.0, 2.0], [5.0, -3.0], [0.0, 0.0]];
        let mut tape = Tape::new();
        let gamma = tape.constant(t(&[2], &[1.5, 0.5]));
        let beta = tape.constant(t(&[2], &[0.1, -0.1]));
        let alone = tape.constant(t(&[1, 2], &rows[0]));
        let (a, _) = batchnorm_forward(&mut tape, alone, gamma, beta, &state, false).unwrap();
        let batch = tape.constant(Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap());
        let (b, _) = batchnorm_forward(&mut tape, batch, gamma, beta, &state, false).unwrap();
        assert_eq!(tape.value(a).data(), &tape.value(b).data()[..2]);
    }

    #[test]
    fn batchnorm_training_needs_two_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let g = tape.constant(Tensor::filled(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let state = BatchNormState::new(3, 0.1, 1e-5).unwrap();
        assert!(matches!(
            batchnorm_forward(&mut tape, x, g, b, &state, true),
            Err(GmlpError::Config(_))
        ));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[100_000], 1.0));
        let same = dropout_forward(&mut tape, x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(x).data());
        let same = dropout_forward(&mut tape, x, 0.9, false, &mut rng).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(x).data());

        let dropped = dropout_forward(&mut tape, x, 0.3, true, &mut rng).unwrap();
        let kept = tape.value(dropped).data().iter().filter(|&&v| v != 0.0).count();
        let frac = kept as f64 / 100_000.0;
        assert!((frac - 0.7).abs() < 0.01, "kept fraction {frac}");
        for &v in tape.value(dropped).data() {
            assert!(v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12);
        }
        assert!(dropout_forward(&mut tape, x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn concat_flattens_group_major() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let flat = concat_groups(&mut tape, z).unwrap();
        assert_eq!(tape.value(flat).shape(), &[1, 4]);
        assert_eq!(tape.value(flat).data(), &[1.0, 2.0, 3.0, 4.0]);
        let back = split_groups(&mut tape, flat, 2, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(z));

        let z3 = tape.constant(Tensor::new(vec![3, 2, 2], (0..12).map(f64::from).collect()).unwrap());
        let flat = concat_groups(&mut tape, z3).unwrap();
        assert_eq!(tape.value(flat).shape(), &[3, 4]);
        assert_eq!(tape.value(flat).row(2), &[8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn xavier_respects_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = xavier_uniform(&[8, 6], 6, 8, &mut rng);
        let limit = (6.0f64 / 14.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
    }
}
