//! Adam, the plateau learning-rate rule and exponential temperature
//! annealing.

use crate::error::{GmlpError, Result};
use crate::tensor::Tensor;

/// Optimization and schedule settings for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the routing entropy term.
    pub lambda: f64,
    /// Weight of the L2 penalty.
    pub alpha: f64,
    pub lr0: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Ablation switch: include the entropy term.
    pub anneal_entropy: bool,
    /// Ablation switch: anneal the temperature (otherwise it stays at
    /// `tau_start`).
    pub anneal_temperature: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 1e-4,
            lr0: 1e-3,
            plateau_patience: 10,
            plateau_factor: 5.0,
            tau_start: 1.0,
            tau_end: 0.01,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            anneal_entropy: true,
            anneal_temperature: true,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GmlpError::Config(msg));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(self.plateau_factor > 1.0) {
            return bad(format!("plateau_factor must be > 1, got {}", self.plateau_factor));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0 && self.tau_end <= self.tau_start) {
            return bad(format!(
                "need 0 < tau_end <= tau_start, got tau_start={} tau_end={}",
                self.tau_start, self.tau_end
            ));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be >= 1".into());
        }
        Ok(())
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.anneal_entropy {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Temperature for `epoch`: geometric interpolation from `tau_start` at
/// epoch 0 to `tau_end` at the last epoch.
pub fn temperature_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if !cfg.anneal_temperature || cfg.epochs <= 1 {
        return cfg.tau_start;
    }
    let t = epoch.min(cfg.epochs - 1) as f64 / (cfg.epochs - 1) as f64;
    cfg.tau_start * (cfg.tau_end / cfg.tau_start).powf(t)
}

/// Learning rate after replaying the validation accuracies observed so far:
/// divided by `plateau_factor` each time `plateau_patience` epochs pass
/// without beating the best accuracy.
pub fn learning_rate_after(val_history: &[f64], cfg: &TrainConfig) -> f64 {
    let mut lr = cfg.lr0;
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for &acc in val_history {
        if acc > best {
            best = acc;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                lr /= cfg.plateau_factor;
                stale = 0;
            }
        }
    }
    lr
}

/// `(lr, tau)` to use for `epoch`, given validation accuracies of the epochs
/// before it.
pub fn schedule_step(epoch: usize, val_history: &[f64], cfg: &TrainConfig) -> (f64, f64) {
    (learning_rate_after(val_history, cfg), temperature_at(epoch, cfg))
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_lens: &[usize]) -> Self {
        Self {
            first: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<'a, I>(&mut self, params: I, grads: &[Vec<f64>], lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Tensor>,
    {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(GmlpError::Dimension(format!(
                "adam tracks {} parameters, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != p.len() {
                return Err(GmlpError::Dimension(format!(
                    "parameter {i}: {} values, {} grads, {} moments",
                    p.len(),
                    g.len(),
                    self.first[i].len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
