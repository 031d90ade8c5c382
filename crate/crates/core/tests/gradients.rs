mod common;

use common::{max_gradient_error, random_tensor};
use gmlp::model::{ArchSpec, Model};
use gmlp::optim::TrainConfig;

fn check(arch: &str, d: usize, seed: u64) -> (f64, String) {
    let spec = ArchSpec::parse(arch, d).unwrap().with_seed(seed);
    let mut model = Model::build(&spec).unwrap();
    model.set_temperature(0.7).unwrap();
    let x = random_tensor(&[8, d], seed + 100);
    let y: Vec<usize> = (0..8).map(|i| i % spec.classes).collect();
    let cfg = TrainConfig {
        lambda: 1.0,
        alpha: 1e-4,
        ..TrainConfig::default()
    };
    max_gradient_error(&model, &x, &y, &cfg, 1e-5)
}

#[test]
fn max_pool_tree() {
    let (err, at) = check("GSel-4-2, GFC, ReLU, BNorm, GPool-max, GFC, Concat, FC-2", 6, 1);
    assert!(err < 1e-4, "{err} at {at}");
}

#[test]
fn mean_pool_tree() {
    let (err, at) = check("GSel-4-2, GFC, ReLU, BNorm, GPool-mean, Concat, FC-3", 6, 2);
    assert!(err < 1e-4, "{err} at {at}");
}

#[test]
fn linear_pool_tree_with_dense_head() {
    let (err, at) = check("GSel-4-2, GFC, ReLU, GPool-linear, GFC, BNorm, Concat, FC-5, ReLU, FC-2", 7, 3);
    assert!(err < 1e-4, "{err} at {at}");
}

#[test]
fn four_way_pool() {
    let (err, at) = check("GSel-4-3, GFC, ReLU, GPool-linear-4, Concat, FC-2", 5, 4);
    assert!(err < 1e-4, "{err} at {at}");
}

#[test]
fn plain_mlp() {
    let (err, at) = check("FC-6, ReLU, BNorm, FC-3", 4, 5);
    assert!(err < 1e-4, "{err} at {at}");
}
