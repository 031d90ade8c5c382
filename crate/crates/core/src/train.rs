//! The training loop and accuracy evaluation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{discretize_routing, sparsity_fraction, DEFAULT_SPARSITY_THRESHOLD};
use crate::data::{batches, BatchMode, Dataset};
use crate::error::{GmlpError, Result};
use crate::metrics::EpochRecord;
use crate::model::{ForwardOptions, Model};
use crate::objective::loss;
use crate::optim::{schedule_step, AdamState, TrainConfig};
use crate::tensor::{Tape, Tensor};

/// Sub-seed offsets so initialization, shuffling and dropout draw from
/// unrelated streams of the run seed.
const SHUFFLE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
const DROPOUT_SALT: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Model after the last epoch, routing discretized.
    pub model: Model,
    /// Snapshot at the best validation accuracy (the initial model when no
    /// epoch ran).
    pub best: Model,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Sets the model's discrete routing table from its current logits.
pub fn discretize(model: &mut Model) -> Result<()> {
    if let Some(r) = model.routing() {
        model.set_routing_table(Some(discretize_routing(&r).slot_to_feature))?;
    }
    Ok(())
}

pub fn current_sparsity(model: &Model) -> f64 {
    model
        .routing()
        .map_or(0.0, |r| sparsity_fraction(&r, DEFAULT_SPARSITY_THRESHOLD))
}

/// Trains `model` with Adam on mini-batches of `train`, scheduling the
/// learning rate on `val` accuracy and annealing the routing temperature.
/// `on_epoch` sees every record as soon as the epoch finishes.
pub fn train(
    mut model: Model,
    train: &Dataset,
    val: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
    log_wall_time: bool,
    mut on_epoch: impl FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<TrainResult> {
    cfg.validate()?;
    train.ensure_nonempty()?;
    val.ensure_nonempty()?;
    if train.len() < cfg.batch_size {
        return Err(GmlpError::Config(format!(
            "training set has {} rows, fewer than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let arch = model.arch().clone();
    for ds in [Some(train), Some(val), test].into_iter().flatten() {
        if ds.d() != arch.d {
            return Err(GmlpError::Dimension(format!("model expects {} features, data has {}", arch.d, ds.d())));
        }
        if ds.classes() > arch.classes {
            return Err(GmlpError::Label {
                label: ds.classes() - 1,
                classes: arch.classes,
            });
        }
    }

    let started = Instant::now();
    let psi_index = model.psi_index();
    let lens: Vec<usize> = model.params().iter().map(|p| p.tensor.len()).collect();
    let mut adam = AdamState::new(&lens);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_SALT);
    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut val_history: Vec<f64> = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    discretize(&mut best)?;
    let mut best_epoch = None;
    let mut best_val: Option<f64> = None;

    for epoch in 0..cfg.epochs {
        let (lr, tau) = schedule_step(epoch, &val_history, cfg);
        model.set_temperature(tau)?;
        let diverged = |e: GmlpError| match e {
            GmlpError::NonFinite(what) => GmlpError::Diverged {
                epoch,
                message: format!("non-finite value in {what}"),
            },
            other => other,
        };

        let (mut sum_total, mut sum_ce, mut sum_entropy) = (0.0, 0.0, 0.0);
        let epoch_batches = batches(train, cfg.batch_size, cfg.seed ^ SHUFFLE_SALT, epoch as u64, BatchMode::Train)?;
        for (x, y) in &epoch_batches {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let pass = model
                .forward_on(&mut tape, xv, ForwardOptions::TRAIN, &mut dropout_rng)
                .map_err(diverged)?;
            let psi = psi_index.map(|i| pass.params[i]);
            let terms = loss(&mut tape, pass.logits, y, psi, &pass.params, cfg).map_err(diverged)?;
            let total = tape.value(terms.total).data()[0];
            if !total.is_finite() {
                return Err(GmlpError::Diverged {
                    epoch,
                    message: format!("loss became {total}"),
                });
            }
            tape.backward(terms.total).map_err(diverged)?;
            let grads: Vec<Vec<f64>> = pass
                .params
                .iter()
                .zip(&lens)
                .map(|(&v, &n)| tape.grad(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
                .collect();
            adam.step(model.params_mut().iter_mut().map(|p| &mut p.tensor), &grads, lr)?;
            model.apply_bn_moments(&pass.bn_moments);
            sum_total += total;
            sum_ce += terms.cross_entropy;
            sum_entropy += terms.entropy;
        }
        if model.params().iter().any(|p| !p.tensor.is_finite()) {
            return Err(GmlpError::Diverged {
                epoch,
                message: "parameters became non-finite".into(),
            });
        }

        let n = epoch_batches.len() as f64;
        let val_acc = accuracy(&model, val, false)?;
        let test_acc = test.map(|t| accuracy(&model, t, false)).transpose()?;
        let record = EpochRecord {
            epoch,
            train_loss: sum_total / n,
            ce_loss: sum_ce / n,
            entropy_term: sum_entropy / n,
            val_accuracy: val_acc,
            test_accuracy: test_acc,
            lr,
            tau,
            sparsity_fraction: current_sparsity(&model),
            wall_time: if log_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
        };
        val_history.push(val_acc);
        if best_val.is_none_or(|b| val_acc > b) {
            best_val = Some(val_acc);
            best_epoch = Some(epoch);
            best = model.clone();
            discretize(&mut best)?;
        }
        on_epoch(&record, &model)?;
        history.push(record);
    }

    discretize(&mut model)?;
    Ok(TrainResult {
        model,
        best,
        best_epoch,
        best_val_accuracy: best_val,
        history,
    })
}

/// Class with the largest logit per row (lowest index on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode predictions, optionally fanned out over `threads` row chunks.
pub fn predict_classes(model: &Model, x: &Tensor, hard_routing: bool, threads: usize) -> Result<Vec<usize>> {
    let n = x.rows();
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return Ok(argmax_rows(&model.predict(x, hard_routing)?));
    }
    let chunk = n.div_ceil(threads);
    let ranges: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(chunk).map(<[usize]>::to_vec).collect();
    let parts: Vec<Result<Vec<usize>>> = std::thread::scope(|s| {
        let handles: Vec<_> = ranges
            .iter()
            .map(|rows| {
                s.spawn(move || {
                    let xs = x.select_rows(rows)?;
                    Ok(argmax_rows(&model.predict(&xs, hard_routing)?))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn accuracy(model: &Model, ds: &Dataset, hard_routing: bool) -> Result<f64> {
    ds.ensure_nonempty()?;
    let pred = predict_classes(model, ds.x(), hard_routing, 1)?;
    Ok(fraction_correct(&pred, ds.y()))
}

pub fn fraction_correct(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;
    use rand::Rng;

    fn separable(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            y.push(usize::from(row[1] + 0.5 * row[3] > 0.0));
            x.extend(row);
        }
        Dataset::new(Tensor::new(vec![n, 4], x).unwrap(), y, 2).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            lr0: 0.02,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn arch() -> ArchSpec {
        ArchSpec::parse("GSel-2-2, GFC, ReLU, BNorm, Concat, FC-2", 4).unwrap().with_seed(3)
    }

    #[test]
    fn learns_a_linear_rule() {
        let data = separable(400, 1);
        let val = separable(200, 2);
        let result = train(Model::build(&arch()).unwrap(), &data, &val, None, &cfg(30), false, |_, _| Ok(())).unwrap();
        assert_eq!(result.history.len(), 30);
        let last = result.history.last().unwrap();
        assert!(last.val_accuracy > 0.9, "{last:?}");
        assert!((last.tau - 0.01).abs() < 1e-12);
        assert!(result.model.routing_table().is_some());
        assert!(result.best_val_accuracy.unwrap() >= last.val_accuracy);
    }

    #[test]
    fn zero_epochs_returns_untrained_model() {
        let model = Model::build(&arch()).unwrap();
        let data = separable(40, 1);
        let result = train(model.clone(), &data, &data, None, &cfg(0), false, |_, _| Ok(())).unwrap();
        assert!(result.history.is_empty());
        assert_eq!(result.model.params(), model.params());
        assert!(result.best_epoch.is_none());
    }

    #[test]
    fn runs_are_identical() {
        let data = separable(100, 1);
        let run = || train(Model::build(&arch()).unwrap(), &data, &data, Some(&data), &cfg(3), false, |_, _| Ok(())).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn divergence_reports_epoch() {
        let data = separable(64, 1);
        let bad = TrainConfig {
            lr0: 1e300,
            ..cfg(5)
        };
        let err = train(Model::build(&arch()).unwrap(), &data, &data, None, &bad, false, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, GmlpError::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn threaded_prediction_matches_serial() {
        let model = Model::build(&arch()).unwrap();
        let data = separable(101, 4);
        let serial = predict_classes(&model, data.x(), false, 1).unwrap();
        assert_eq!(predict_classes(&model, data.x(), false, 4).unwrap(), serial);
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
