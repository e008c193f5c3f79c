//! Trains the toy MoE model with and without the balance loss, then
//! compares normalized and non-normalized gating.

use moebudget::toy_lab::{compare_gating, run_toy_training, ToyConfig};

fn main() -> moebudget::Result<()> {
    let steps = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("steps must be an integer"))
        .unwrap_or(2000);
    for lambda in [0.01, 0.0] {
        let cfg = ToyConfig {
            lambda,
            steps,
            ..ToyConfig::default()
        };
        let r = run_toy_training(&cfg)?;
        let (first, last) = (r.first(), r.last());
        println!(
            "lambda={lambda:<5} ce {:.4} -> {:.4} nats ({:.3} bits/token), load CV {:.3} -> {:.3}, load {:?}",
            first.ce_loss, last.ce_loss, last.bits_per_token, first.load_cv, last.load_cv, last.expert_load
        );
    }

    let cmp = compare_gating(&ToyConfig {
        steps: steps.min(500),
        ..ToyConfig::default()
    })?;
    println!(
        "mean balance loss: normalized {:.4}, non-normalized {:.4}",
        cmp.mean_balance_normalized, cmp.mean_balance_non_normalized
    );
    Ok(())
}
