use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::fixtures::ReuseScheme;

/// Multi-epoch schedule over a unique-token subset `D̂`. Data is reshuffled
/// every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReusePlan {
    pub scheme: ReuseScheme,
    #[serde(rename = "D_hat")]
    pub unique_tokens: u64,
    #[serde(rename = "D")]
    pub consumed_tokens: u64,
    pub epochs: f64,
    pub shuffled_each_epoch: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Fixed unique set, epochs `D / D̂` set by the compute budget.
pub fn strict_reuse(tokens: u64, unique_tokens: u64) -> Result<ReusePlan> {
    if unique_tokens == 0 {
        return Err(Error::invalid("unique tokens", "D_hat must be positive"));
    }
    let warning = (unique_tokens > tokens)
        .then(|| format!("D_hat={unique_tokens} exceeds D={tokens}: less than one epoch"));
    Ok(ReusePlan {
        scheme: ReuseScheme::Strict,
        unique_tokens,
        consumed_tokens: tokens,
        epochs: tokens as f64 / unique_tokens as f64,
        shuffled_each_epoch: true,
        warning,
    })
}

/// Two epochs over `D̂ = D/2`. An odd `D` is floored to the even count
/// actually consumed.
pub fn loose_reuse(tokens: u64) -> ReusePlan {
    let unique = tokens / 2;
    ReusePlan {
        scheme: ReuseScheme::Loose,
        unique_tokens: unique,
        consumed_tokens: 2 * unique,
        epochs: 2.0,
        shuffled_each_epoch: true,
        warning: None,
    }
}
