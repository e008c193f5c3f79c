use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::balance::BalanceStats;
use super::gate::softmax;

/// Weight of the balance loss when none is configured.
pub const DEFAULT_BALANCE_WEIGHT: f64 = 0.01;

/// `total = ce_loss + lambda · balance_loss`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    /// Mean token cross-entropy in nats.
    pub ce_loss: f64,
    pub balance_loss: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(ce_loss: f64, balance_loss: f64, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::invalid(
                "balance weight",
                "lambda must be finite and >= 0",
            ));
        }
        Ok(LossBundle {
            ce_loss,
            balance_loss,
            lambda,
            total: ce_loss + lambda * balance_loss,
        })
    }
}

/// Cross-entropy of one row of logits against `target`, in nats.
pub fn token_cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Gradient of `scale · token_cross_entropy(logits, target)`.
pub fn token_cross_entropy_grad(logits: &[f64], target: usize, scale: f64) -> Vec<f64> {
    let mut g = softmax(logits);
    g[target] -= 1.0;
    g.iter_mut().for_each(|v| *v *= scale);
    g
}

/// Mean cross-entropy over tokens plus the weighted balance loss.
pub fn total_loss<L: AsRef<[f64]>>(
    logits: &[L],
    targets: &[usize],
    balance: &BalanceStats,
    lambda: f64,
) -> Result<LossBundle> {
    if logits.len() != targets.len() {
        return Err(Error::invalid(
            "loss inputs",
            format!("{} logit rows but {} targets", logits.len(), targets.len()),
        ));
    }
    if logits.is_empty() {
        return Err(Error::invalid("loss inputs", "no tokens"));
    }
    let mut ce = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let row = row.as_ref();
        if t >= row.len() {
            return Err(Error::invalid(
                "loss inputs",
                format!("target {t} out of range for {} classes", row.len()),
            ));
        }
        ce += token_cross_entropy(row, t);
    }
    LossBundle::new(ce / logits.len() as f64, balance.balance_loss, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(loss: f64) -> BalanceStats {
        BalanceStats {
            load_counts: vec![1, 1],
            load_fraction: vec![0.5, 0.5],
            mean_score: vec![0.5, 0.5],
            balance_loss: loss,
            batch_size: 2,
        }
    }

    #[test]
    fn arithmetic_of_total() {
        let b = LossBundle::new(2.0, 1.5, 0.01).unwrap();
        assert!((b.total - 2.015).abs() < 1e-15);
        assert!(LossBundle::new(2.0, 1.5, -0.1).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let logits = vec![vec![0.3; 10]; 4];
        let b = total_loss(&logits, &[0, 3, 9, 2], &stats(1.0), 0.0).unwrap();
        assert!((b.ce_loss - 10f64.ln()).abs() < 1e-12);
        assert_eq!(b.total, b.ce_loss);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let logits = vec![vec![0.0; 3]; 2];
        assert!(total_loss(&logits, &[0], &stats(1.0), 0.1).is_err());
        assert!(total_loss(&logits, &[0, 3], &stats(1.0), 0.1).is_err());
    }
}
