#![allow(dead_code)]

use gmlp::model::{ForwardOptions, Model};
use gmlp::objective::loss;
use gmlp::optim::TrainConfig;
use gmlp::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Full training-mode loss and its analytic gradient per parameter.
pub fn loss_and_grads(model: &Model, x: &Tensor, y: &[usize], cfg: &TrainConfig) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pass = model
        .forward_on(&mut tape, xv, ForwardOptions::TRAIN, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let psi = model.psi_index().map(|i| pass.params[i]);
    let terms = loss(&mut tape, pass.logits, y, psi, &pass.params, cfg).unwrap();
    let value = tape.value(terms.total).data()[0];
    tape.backward(terms.total).unwrap();
    let grads = pass
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.tensor.len()], <[f64]>::to_vec))
        .collect();
    (value, grads)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter entry, with the offending parameter.
pub fn max_gradient_error(model: &Model, x: &Tensor, y: &[usize], cfg: &TrainConfig, eps: f64) -> (f64, String) {
    let (_, analytic) = loss_and_grads(model, x, y, cfg);
    let mut worst = (0.0, String::new());
    let mut probe = model.clone();
    for (pi, grads) in analytic.iter().enumerate() {
        for (i, &g) in grads.iter().enumerate() {
            let orig = probe.params()[pi].tensor.data()[i];
            probe.params_mut()[pi].tensor.data_mut()[i] = orig + eps;
            let (plus, _) = loss_and_grads(&probe, x, y, cfg);
            probe.params_mut()[pi].tensor.data_mut()[i] = orig - eps;
            let (minus, _) = loss_and_grads(&probe, x, y, cfg);
            probe.params_mut()[pi].tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(g, numeric);
            if err > worst.0 {
                worst = (err, format!("{}[{i}]: analytic {} numeric {numeric}", model.params()[pi].name, g));
            }
        }
    }
    worst
}

use gmlp::data::{normalize, split, Dataset};
use gmlp::model::ArchSpec;
use gmlp::train::{accuracy, current_sparsity, train};

/// Settings shared by the synthetic-task experiments. The learning-rate
/// plateau is long because shrinking the rate while the temperature keeps
/// falling freezes the routing mid-way.
pub fn synthetic_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lambda: 0.1,
        alpha: 1e-4,
        lr0: 1e-3,
        plateau_patience: 100,
        epochs: 300,
        batch_size: 64,
        seed,
        ..TrainConfig::default()
    }
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// 80/20 train/test split, 10% of train held out for validation, and
/// normalization fitted on what remains.
pub fn prepare(ds: &Dataset, seed: u64) -> Splits {
    let (rest, mut test) = split(ds, 0.2, seed).unwrap();
    let (mut train, mut val) = split(&rest, 0.1, seed ^ 0x5851_F42D_4C95_7F2D).unwrap();
    normalize(&mut train, &mut [&mut val, &mut test]).unwrap();
    Splits { train, val, test }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub accuracy: f64,
    pub hard_accuracy: f64,
    pub sparsity: f64,
    pub routing: Option<Vec<usize>>,
}

pub fn fit(arch: &ArchSpec, data: &Splits, cfg: &TrainConfig) -> Outcome {
    let model = Model::build(&arch.clone().with_seed(cfg.seed)).unwrap();
    let result = train(model, &data.train, &data.val, None, cfg, false, |_, _| Ok(())).unwrap();
    let model = result.model;
    Outcome {
        accuracy: accuracy(&model, &data.test, false).unwrap(),
        hard_accuracy: if model.routing_table().is_some() {
            accuracy(&model, &data.test, true).unwrap()
        } else {
            f64::NAN
        },
        sparsity: current_sparsity(&model),
        routing: model.routing_table().map(<[usize]>::to_vec),
    }
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n.max(1) as f64
}
