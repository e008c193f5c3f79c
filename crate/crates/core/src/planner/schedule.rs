use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tokens affordable at training compute `compute` for a model costing
/// `fwd_flops` forward FLOPs per token: `floor(C / (3·M_fwd))`.
pub fn tokens_for_compute(compute: f64, fwd_flops: f64) -> Result<u64> {
    if !(fwd_flops.is_finite() && fwd_flops > 0.0) {
        return Err(Error::invalid(
            "forward FLOPs",
            "must be positive and finite",
        ));
    }
    if !(compute.is_finite() && compute >= 0.0) {
        return Err(Error::invalid("compute", "must be non-negative and finite"));
    }
    let d = (compute / (3.0 * fwd_flops)).floor();
    if d >= u64::MAX as f64 {
        return Err(Error::invalid("compute", "token count overflows 64 bits"));
    }
    Ok(d as u64)
}

/// `round(D / (B·S))`, halves rounded up.
pub fn iterations(tokens: u64, batch: u64, seq_len: u64) -> Result<u64> {
    if batch == 0 || seq_len == 0 {
        return Err(Error::invalid(
            "iterations",
            "batch size and sequence length must be >= 1",
        ));
    }
    let per_step = batch as u128 * seq_len as u128;
    Ok(((tokens as u128 + per_step / 2) / per_step) as u64)
}

pub const WARMUP_MIN: u64 = 200;
pub const WARMUP_MAX: u64 = 2000;

/// `clip(round(0.01·iters), 200, 2000)`.
pub fn warmup_iters(total_iters: u64) -> u64 {
    total_iters
        .saturating_add(50)
        .div_euclid(100)
        .clamp(WARMUP_MIN, WARMUP_MAX)
}

/// Training recipe shared by every plan row. Carried as metadata; only the
/// warmup rule is evaluated here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub optimizer: String,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub lr_schedule: String,
    pub min_lr: f64,
    pub warmup_rule: String,
    pub vocab: u64,
}

impl Default for Recipe {
    fn default() -> Self {
        Recipe {
            optimizer: "Adam".into(),
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            lr_schedule: "cosine".into(),
            min_lr: 1e-5,
            warmup_rule: "clip(0.01 * Iters, 200, 2000)".into(),
            vocab: 65536,
        }
    }
}
