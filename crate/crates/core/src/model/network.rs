use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::{ArchSpec, Block, NetKind};
use crate::error::{GmlpError, Result};
use crate::layers::{
    self, batchnorm_forward, concat_groups, dense_forward, dropout_forward, group_fc_forward, group_pool_forward,
    group_select_forward, xavier_uniform, BatchNormState, PoolKind, RoutingParams, SelectMode,
};
use crate::tensor::{BatchMoments, Tape, Tensor, Var};

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Select { psi: usize },
    GroupFc { weight: usize, bias: usize },
    Pool { kind: PoolKind, linear: Option<(usize, usize)> },
    Dense { weight: usize, bias: usize },
    Relu,
    BatchNorm { gamma: usize, beta: usize, state: usize },
    Dropout(f64),
    Concat,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub training: bool,
    /// Route with the discretized table instead of the tempered softmax.
    pub hard_routing: bool,
}

impl ForwardOptions {
    pub const TRAIN: Self = Self {
        training: true,
        hard_routing: false,
    };
    pub const EVAL: Self = Self {
        training: false,
        hard_routing: false,
    };
    pub const EVAL_HARD: Self = Self {
        training: false,
        hard_routing: true,
    };
}

/// Tape handles produced by one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// One variable per model parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Group-Select output `[B, k, m]` (GMLP only).
    pub selected: Option<Var>,
    /// `(batch-norm index, batch moments, batch size)` in training mode.
    pub bn_moments: Vec<(usize, BatchMoments, usize)>,
}

/// A built network: parameters, batch-norm running state, routing
/// temperature and (optionally) a discretized routing table.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: ArchSpec,
    params: Vec<Param>,
    layers: Vec<Layer>,
    bn: Vec<BatchNormState>,
    temperature: f64,
    routing_table: Option<Vec<usize>>,
}

impl Model {
    pub fn build(arch: &ArchSpec) -> Result<Self> {
        Self::build_with_bn(arch, BatchNormState::DEFAULT_MOMENTUM, BatchNormState::DEFAULT_EPSILON)
    }

    /// Instantiates every layer with seeded initialization: routing logits
    /// are Xavier-uniform with fan-in `d` and fan-out `km`, Group-FC weights
    /// with fan-in and fan-out `m`, dense layers with their own widths.
    pub fn build_with_bn(arch: &ArchSpec, bn_momentum: f64, bn_epsilon: f64) -> Result<Self> {
        arch.validate()?;
        if arch.d == 0 {
            return Err(GmlpError::Config("input dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let mut params = Vec::new();
        let mut layers = Vec::new();
        let mut bn = Vec::new();
        let push = |params: &mut Vec<Param>, name: String, tensor: Tensor| {
            params.push(Param { name, tensor });
            params.len() - 1
        };

        // Width bookkeeping: grouped (groups, m) before Concat, flat width after.
        let mut groups = arch.k;
        let mut width = arch.d;
        let mut grouped = arch.kind == NetKind::Gmlp;
        if grouped {
            let km = arch.k * arch.m;
            let psi = xavier_uniform(&[km, arch.d], arch.d, km, &mut rng);
            let psi = push(&mut params, "gsel.psi".into(), psi);
            layers.push(Layer::Select { psi });
            width = km;
        }

        let (mut n_gfc, mut n_pool, mut n_fc) = (0, 0, 0);
        for block in &arch.blocks {
            match *block {
                Block::Gfc => {
                    let p = layers::GroupFcParams::xavier(groups, arch.m, &mut rng);
                    let weight = push(&mut params, format!("gfc{n_gfc}.weight"), p.weight);
                    let bias = push(&mut params, format!("gfc{n_gfc}.bias"), p.bias);
                    layers.push(Layer::GroupFc { weight, bias });
                    n_gfc += 1;
                }
                Block::Pool(_) => {
                    let kind = arch.pool_kind_of(block).expect("pool block");
                    let out_groups = groups / arch.branching;
                    let linear = if kind == PoolKind::Linear {
                        let fan_in = arch.branching * arch.m;
                        let w = xavier_uniform(&[out_groups, arch.m, fan_in], fan_in, arch.m, &mut rng);
                        let w = push(&mut params, format!("pool{n_pool}.weight"), w);
                        let b = push(&mut params, format!("pool{n_pool}.bias"), Tensor::zeros(&[out_groups, arch.m]));
                        Some((w, b))
                    } else {
                        None
                    };
                    layers.push(Layer::Pool { kind, linear });
                    groups = out_groups;
                    width = groups * arch.m;
                    n_pool += 1;
                }
                Block::Dense(out) | Block::Output(out) => {
                    let name = if matches!(block, Block::Output(_)) {
                        "output".to_string()
                    } else {
                        let n = format!("fc{n_fc}");
                        n_fc += 1;
                        n
                    };
                    let w = xavier_uniform(&[width, out], width, out, &mut rng);
                    let weight = push(&mut params, format!("{name}.weight"), w);
                    let bias = push(&mut params, format!("{name}.bias"), Tensor::zeros(&[out]));
                    layers.push(Layer::Dense { weight, bias });
                    width = out;
                }
                Block::Relu => layers.push(Layer::Relu),
                Block::BatchNorm => {
                    let i = bn.len();
                    bn.push(BatchNormState::new(width, bn_momentum, bn_epsilon)?);
                    let gamma = push(&mut params, format!("bn{i}.gamma"), Tensor::filled(&[width], 1.0));
                    let beta = push(&mut params, format!("bn{i}.beta"), Tensor::zeros(&[width]));
                    layers.push(Layer::BatchNorm { gamma, beta, state: i });
                }
                Block::Dropout(rate) => layers.push(Layer::Dropout(rate)),
                Block::Concat => {
                    layers.push(Layer::Concat);
                    grouped = false;
                }
            }
        }
        debug_assert!(!grouped);

        Ok(Self {
            arch: arch.clone(),
            params,
            layers,
            bn,
            temperature: 1.0,
            routing_table: None,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn batch_norms(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn batch_norms_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bn
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(GmlpError::Config(format!("temperature must be positive, got {tau}")));
        }
        self.temperature = tau;
        Ok(())
    }

    /// Index of the routing logits in [`Model::params`], for GMLPs.
    pub fn psi_index(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Select { psi } => Some(*psi),
            _ => None,
        })
    }

    pub fn routing(&self) -> Option<RoutingParams> {
        let psi = self.psi_index()?;
        RoutingParams::new(self.params[psi].tensor.clone(), self.temperature, self.arch.k, self.arch.m).ok()
    }

    pub fn routing_table(&self) -> Option<&[usize]> {
        self.routing_table.as_deref()
    }

    pub fn set_routing_table(&mut self, table: Option<Vec<usize>>) -> Result<()> {
        if let Some(t) = &table {
            if t.len() != self.arch.k * self.arch.m || t.iter().any(|&f| f >= self.arch.d) {
                return Err(GmlpError::Dimension(format!(
                    "routing table needs {} entries below {}",
                    self.arch.k * self.arch.m,
                    self.arch.d
                )));
            }
        }
        self.routing_table = table;
        Ok(())
    }

    /// Records the network on `tape`, registering every parameter as a
    /// trainable leaf. Returns logits `[B, classes]`.
    pub fn forward_on<R: Rng>(&self, tape: &mut Tape, x: Var, opts: ForwardOptions, rng: &mut R) -> Result<ForwardPass> {
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p.tensor.clone())).collect();
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != self.arch.d {
            return Err(GmlpError::Dimension(format!(
                "model expects [B, {}] inputs, got {xs:?}",
                self.arch.d
            )));
        }
        let mut h = x;
        let mut selected = None;
        let mut bn_moments = Vec::new();
        for layer in &self.layers {
            h = match *layer {
                Layer::Select { psi } => {
                    let mode = if opts.hard_routing {
                        let table = self.routing_table.as_deref().ok_or_else(|| {
                            GmlpError::Config("hard routing requested but the routing was never discretized".into())
                        })?;
                        SelectMode::Hard(table)
                    } else {
                        SelectMode::Relaxed {
                            temperature: self.temperature,
                        }
                    };
                    let z = group_select_forward(tape, h, vars[psi], self.arch.k, self.arch.m, mode)?;
                    selected = Some(z);
                    z
                }
                Layer::GroupFc { weight, bias } => group_fc_forward(tape, h, vars[weight], vars[bias])?,
                Layer::Pool { kind, linear } => {
                    let linear = linear.map(|(w, b)| (vars[w], vars[b]));
                    group_pool_forward(tape, h, kind, self.arch.branching, linear)?
                }
                Layer::Dense { weight, bias } => dense_forward(tape, h, vars[weight], vars[bias])?,
                Layer::Relu => tape.relu(h)?,
                Layer::BatchNorm { gamma, beta, state } => {
                    let (out, moments) =
                        batchnorm_forward(tape, h, vars[gamma], vars[beta], &self.bn[state], opts.training)?;
                    if let Some(m) = moments {
                        bn_moments.push((state, m, tape.value(h).rows()));
                    }
                    out
                }
                Layer::Dropout(rate) => dropout_forward(tape, h, rate, opts.training, rng)?,
                Layer::Concat => concat_groups(tape, h)?,
            };
        }
        Ok(ForwardPass {
            logits: h,
            params: vars,
            selected,
            bn_moments,
        })
    }

    /// Folds training-mode batch moments into the running statistics.
    pub fn apply_bn_moments(&mut self, moments: &[(usize, BatchMoments, usize)]) {
        for (i, m, batch) in moments {
            self.bn[*i].update(m, *batch);
        }
    }

    /// Eval-mode logits for a batch of inputs.
    pub fn predict(&self, x: &Tensor, hard_routing: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let opts = ForwardOptions {
            training: false,
            hard_routing,
        };
        let pass = self.forward_on(&mut tape, xv, opts, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Eval-mode Group-Select outputs, flattened to `[B, k·m]`.
    pub fn select_outputs(&self, x: &Tensor, hard_routing: bool) -> Result<Tensor> {
        let psi = self
            .psi_index()
            .ok_or_else(|| GmlpError::Config("model has no Group-Select layer".into()))?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let psi = tape.constant(self.params[psi].tensor.clone());
        let mode = if hard_routing {
            SelectMode::Hard(
                self.routing_table
                    .as_deref()
                    .ok_or_else(|| GmlpError::Config("routing was never discretized".into()))?,
            )
        } else {
            SelectMode::Relaxed {
                temperature: self.temperature,
            }
        };
        let z = group_select_forward(&mut tape, xv, psi, self.arch.k, self.arch.m, mode)?;
        let t = tape.value(z);
        t.clone().reshaped(vec![t.rows(), t.cols()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic() -> ArchSpec {
        ArchSpec::parse("GSel-4-2, GFC, ReLU, BNorm, Concat, FC-2, Softmax", 6)
            .unwrap()
            .with_seed(7)
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn synthetic_build_has_expected_layout() {
        let model = Model::build(&synthetic()).unwrap();
        let names: Vec<&str> = model.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            ["gsel.psi", "gfc0.weight", "gfc0.bias", "bn0.gamma", "bn0.beta", "output.weight", "output.bias"]
        );
        // Output layer reads the k·m = 8 concatenated features.
        assert_eq!(model.params()[5].tensor.shape(), &[8, 2]);
        assert_eq!(model.params()[0].tensor.shape(), &[8, 6]);
        assert_eq!(model.param_count(), 48 + 16 + 8 + 8 + 8 + 16 + 2);
    }

    #[test]
    fn seeded_build_is_bitwise_reproducible() {
        let a = Model::build(&synthetic()).unwrap();
        let b = Model::build(&synthetic()).unwrap();
        assert_eq!(a, b);
        let c = Model::build(&synthetic().with_seed(8)).unwrap();
        assert_ne!(a.params()[0], c.params()[0]);
    }

    #[test]
    fn xavier_fans_follow_routing_and_group_rules() {
        let model = Model::build(&synthetic()).unwrap();
        let psi_limit = (6.0f64 / (6.0 + 8.0)).sqrt();
        assert!(model.params()[0].tensor.data().iter().all(|v| v.abs() <= psi_limit));
        let gfc_limit = (6.0f64 / 4.0).sqrt();
        assert!(model.params()[1].tensor.data().iter().all(|v| v.abs() <= gfc_limit));
    }

    #[test]
    fn untrained_logits_are_finite() {
        let model = Model::build(&synthetic()).unwrap();
        let x = random_input(5, 6, 1);
        let logits = model.predict(&x, false).unwrap();
        assert_eq!(logits.shape(), &[5, 2]);
        assert!(logits.is_finite());
    }

    #[test]
    fn input_width_is_checked() {
        let model = Model::build(&synthetic()).unwrap();
        assert!(matches!(model.predict(&random_input(2, 5, 1), false), Err(GmlpError::Dimension(_))));
    }

    #[test]
    fn hard_routing_requires_table() {
        let mut model = Model::build(&synthetic()).unwrap();
        assert!(model.predict(&random_input(2, 6, 1), true).is_err());
        model.set_routing_table(Some(vec![0, 1, 2, 3, 4, 5, 0, 1])).unwrap();
        assert!(model.predict(&random_input(2, 6, 1), true).is_ok());
        assert!(model.set_routing_table(Some(vec![9; 8])).is_err());
    }

    #[test]
    fn single_slot_hard_net_is_a_dense_layer_on_one_feature() {
        let arch = ArchSpec::parse("GSel-1-1, Concat, FC-3", 4).unwrap().with_seed(3);
        let mut model = Model::build(&arch).unwrap();
        model.set_routing_table(Some(vec![2])).unwrap();
        let x = random_input(4, 4, 9);
        let logits = model.predict(&x, true).unwrap();
        let w = model.params()[1].tensor.data().to_vec();
        let b = model.params()[2].tensor.data().to_vec();
        for r in 0..4 {
            for c in 0..3 {
                let expect = x.row(r)[2] * w[c] + b[c];
                assert!((logits.row(r)[c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooled_tree_shrinks_groups() {
        let arch = ArchSpec::gmlp_tree(10, 3, 8, 2, 4, PoolKind::Linear, 2).unwrap();
        let model = Model::build(&arch).unwrap();
        // Output reads final_groups · m features.
        let out = model.params().iter().find(|p| p.name == "output.weight").unwrap();
        assert_eq!(out.tensor.shape(), &[2, 3]);
        let logits = model.predict(&random_input(3, 10, 2), false).unwrap();
        assert_eq!(logits.shape(), &[3, 3]);
    }

    #[test]
    fn mlp_builds_and_runs() {
        let arch = ArchSpec::mlp(5, 3, &[7, 4]).unwrap();
        let model = Model::build(&arch).unwrap();
        assert!(model.psi_index().is_none());
        let logits = model.predict(&random_input(6, 5, 4), false).unwrap();
        assert_eq!(logits.shape(), &[6, 3]);
    }
}
