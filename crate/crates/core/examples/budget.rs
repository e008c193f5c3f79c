//! Parameter and FLOP budgets of the 7B MoE and dense shapes, and their
//! compute ratio.

use moebudget::arch::{compute_ratio, Arrangement, DenseShape, MoeShape};

fn main() -> moebudget::Result<()> {
    let dense = DenseShape {
        layers: 32,
        model_dim: 4096,
        ffn_dim: 11008,
        heads: 32,
        head_dim: 128,
        seq_len: 2048,
    };
    let moe = MoeShape::with_arrangement(
        DenseShape {
            layers: 24,
            model_dim: 2048,
            ffn_dim: 5464,
            heads: 16,
            head_dim: 128,
            seq_len: 2048,
        },
        Arrangement::OneDense,
        78,
        6,
        512,
        3072,
        false,
    )?;

    let d = dense.budget(130_000_000_000)?;
    let m = moe.budget(316_000_000_000)?;
    for (name, b) in [("dense", d), ("moe", m)] {
        println!(
            "{name:>5}: N={:.3e} N_a={:.3e} r_a={:.2}% M_train={:.3e} D={:.3e} C={:.3e} D/N={:.1}",
            b.total_params as f64,
            b.active_params as f64,
            100.0 * b.activation_rate,
            b.train_flops_per_token as f64,
            b.tokens as f64,
            b.train_compute,
            b.tokens_per_param
        );
    }
    println!(
        "moe shape ratios: mu={:.2} beta={:.2} zeta={:.1}",
        moe.mu(),
        moe.beta(),
        moe.base.zeta()
    );

    let r = compute_ratio(&moe, &dense)?;
    println!(
        "compute ratio: closed form {:.4}, direct {:.4}",
        r.formula, r.direct
    );
    println!("{}", serde_json::to_string_pretty(&moe)?);
    Ok(())
}
