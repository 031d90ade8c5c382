//! Training objective: mean cross-entropy, the routing entropy penalty and
//! an L2 penalty over every parameter (routing logits included).

use crate::error::{GmlpError, Result};
use crate::optim::TrainConfig;
use crate::tensor::{Tape, Var};

/// Scalar pieces of one loss evaluation. `total` is the differentiable sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub cross_entropy: f64,
    pub entropy: f64,
    pub l2: f64,
}

/// Mean negative log-likelihood of `labels` under row-softmax `logits`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = tape.value(logits).cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(GmlpError::Label { label: bad, classes });
    }
    let log_probs = tape.log_softmax_rows(logits, 1.0)?;
    let picked = tape.pick_rows(log_probs, labels)?;
    let mean = tape.mean(picked)?;
    tape.neg(mean)
}

/// Routing entropy at unit temperature,
/// `-(1/d) Σ_i Σ_j p_ij log p_ij` with `p = softmax_rows(psi)`.
///
/// The `1/d` factor is applied as written even though it does not
/// normalize per row; the entropy weight absorbs the scale.
pub fn entropy_term(tape: &mut Tape, psi: Var) -> Result<Var> {
    let d = tape.value(psi).cols() as f64;
    let p = tape.softmax_rows(psi, 1.0)?;
    let log_p = tape.log_softmax_rows(psi, 1.0)?;
    let plogp = tape.mul(p, log_p)?;
    let total = tape.sum(plogp)?;
    tape.scale(total, -1.0 / d)
}

/// Σ‖ω‖² over the given parameters.
pub fn l2_term(tape: &mut Tape, params: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &p in params {
        let sq = tape.sum_squares(p)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, sq)?,
            None => sq,
        });
    }
    Ok(acc)
}

/// `CE + λ·H(psi) + α·Σ‖ω‖²`. The entropy term is dropped when the config
/// disables it or there is no routing matrix (plain MLPs).
pub fn loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    psi: Option<Var>,
    params: &[Var],
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    let ce = cross_entropy(tape, logits, labels)?;
    let ce_value = tape.value(ce).data()[0];
    let mut total = ce;

    let mut entropy_value = 0.0;
    if let Some(psi) = psi {
        let h = entropy_term(tape, psi)?;
        entropy_value = tape.value(h).data()[0];
        let lambda = cfg.effective_lambda();
        if lambda > 0.0 {
            let weighted = tape.scale(h, lambda)?;
            total = tape.add(total, weighted)?;
        }
    }

    let mut l2_value = 0.0;
    if cfg.alpha > 0.0 {
        if let Some(l2) = l2_term(tape, params)? {
            l2_value = tape.value(l2).data()[0];
            let weighted = tape.scale(l2, cfg.alpha)?;
            total = tape.add(total, weighted)?;
        }
    }

    Ok(LossTerms {
        total,
        cross_entropy: ce_value,
        entropy: entropy_value,
        l2: l2_value,
    })
}
