//! Finite-difference check of the MoE block backward pass across gating
//! variants.

use moebudget::kernel::{grad_check, GradCheckConfig};

fn main() -> moebudget::Result<()> {
    for normalized in [false, true] {
        for shared_dim in [0, 3] {
            for top_k in [1, 2, 4] {
                if normalized && top_k == 1 {
                    continue;
                }
                let cfg = GradCheckConfig {
                    top_k,
                    shared_dim,
                    normalized,
                    trials: 10,
                    seed: 42,
                    ..GradCheckConfig::default()
                };
                let r = grad_check(&cfg)?;
                println!(
                    "normalized={normalized:<5} D_se={shared_dim} K={top_k}: {} scalars, max rel err {:.2e} ({}) {}",
                    r.checked,
                    r.max_rel_error,
                    r.worst_tensor,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
        }
    }
    Ok(())
}
