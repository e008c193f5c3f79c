//! Batch routing statistics and the auxiliary load-balance loss
//! `L_balance = E · Σ_i f_i · p_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::gate::GateOutput;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceStats {
    /// Tokens routed to each expert; sums to `K · batch_size`.
    pub load_counts: Vec<u64>,
    /// `f_i`: fraction of tokens that selected expert `i`.
    pub load_fraction: Vec<f64>,
    /// `p_i`: mean softmax score of expert `i`.
    pub mean_score: Vec<f64>,
    pub balance_loss: f64,
    pub batch_size: usize,
}

impl BalanceStats {
    pub fn experts(&self) -> usize {
        self.load_counts.len()
    }

    /// Gradient of `λ·L_balance` with respect to one token's scores, holding
    /// `f` fixed: `λ·E·f_i / |B|`.
    pub fn score_grad(&self, lambda: f64) -> Vec<f64> {
        let e = self.experts() as f64;
        let b = self.batch_size as f64;
        self.load_fraction
            .iter()
            .map(|f| lambda * e * f / b)
            .collect()
    }

    /// Coefficient of variation of the per-expert token counts.
    pub fn load_cv(&self) -> f64 {
        load_cv(&self.load_counts)
    }
}

/// Population coefficient of variation of a load histogram.
pub fn load_cv(counts: &[u64]) -> f64 {
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<u64>() as f64 / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = counts
        .iter()
        .map(|&c| (c as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    var.sqrt() / mean
}

/// Routing statistics of a batch of gate outputs.
pub fn balance_stats<'a, I>(gates: I) -> Result<BalanceStats>
where
    I: IntoIterator<Item = &'a GateOutput>,
{
    let mut gates = gates.into_iter().peekable();
    let experts = match gates.peek() {
        Some(g) => g.experts(),
        None => return Err(Error::invalid("balance batch", "batch is empty")),
    };
    let mut counts = vec![0u64; experts];
    let mut score_sum = vec![0.0; experts];
    let mut batch = 0usize;
    for g in gates {
        if g.experts() != experts {
            return Err(Error::invalid(
                "balance batch",
                format!("inconsistent expert count ({} vs {experts})", g.experts()),
            ));
        }
        for &i in &g.selected {
            counts[i] += 1;
        }
        for (acc, s) in score_sum.iter_mut().zip(&g.scores) {
            *acc += s;
        }
        batch += 1;
    }
    let b = batch as f64;
    let load_fraction: Vec<f64> = counts.iter().map(|&c| c as f64 / b).collect();
    let mean_score: Vec<f64> = score_sum.iter().map(|s| s / b).collect();
    let balance_loss = experts as f64
        * load_fraction
            .iter()
            .zip(&mean_score)
            .map(|(f, p)| f * p)
            .sum::<f64>();
    Ok(BalanceStats {
        load_counts: counts,
        load_fraction,
        mean_score,
        balance_loss,
        batch_size: batch,
    })
}
