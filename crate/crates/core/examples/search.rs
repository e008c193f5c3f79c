//! Searches for MoE shapes at the published (N, r_a) targets and checks the
//! best candidate against every MoE row of the bundled tables.

use moebudget::fixtures::{default_fixture_dir, load_fixture_dir};
use moebudget::search::{search, SearchSpec};

fn main() -> moebudget::Result<()> {
    let spec = SearchSpec {
        zeta: 85.3,
        mu: 21.0,
        ..SearchSpec::new(6_520_000_000, 0.20)
    };
    let report = search(&spec)?;
    println!("7B, r_a=20%: {} candidates", report.candidates.len());
    for c in report.candidates.iter().take(5) {
        let s = &c.shape;
        println!(
            "  L={} D_m={} E={} K={} D_e={} D_se={}  N={:.3e} r_a={:.2}%  score={:.4}",
            s.base.layers,
            s.base.model_dim,
            s.experts,
            s.top_k,
            s.expert_dim,
            s.shared_expert_dim,
            c.budget.total_params as f64,
            100.0 * c.budget.activation_rate,
            c.score
        );
    }

    println!("\nround trip over table rows (worst relative residual of N, N_a, M):");
    let mut worst = 0.0f64;
    for table in load_fixture_dir(default_fixture_dir())? {
        if table.is_dense() {
            continue;
        }
        for i in 0..table.rows.len() {
            let row = &table.rows[i];
            let shape = table.shape(i)?;
            let moe = shape.as_moe().expect("MoE table");
            let spec = SearchSpec {
                zeta: moe.base.zeta(),
                mu: moe.mu(),
                alpha: moe.base.alpha(),
                ..SearchSpec::new(
                    table.nominal_params(i)? as u64,
                    row.get("r_a").unwrap() / 100.0,
                )
            };
            let Some(top) = search(&spec)?.candidates.into_iter().next() else {
                println!("  {} row {}: no candidate", table.name, i + 1);
                continue;
            };
            let b = top.budget;
            let res = [
                b.total_params as f64 / table.nominal_params(i)? - 1.0,
                b.active_params as f64 / row.get("N_a").unwrap() - 1.0,
                b.train_flops_per_token as f64 / row.get("M").unwrap() - 1.0,
            ];
            let r = res.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            worst = worst.max(r);
            let s = top.shape;
            println!(
                "  {:<15} row {:>2}: E={:>3} K={:>2} D_e={:>3} (table E={} K={} D_e={})  {:.2}%",
                table.name,
                i + 1,
                s.experts,
                s.top_k,
                s.expert_dim,
                row.get("E").unwrap(),
                row.get("K").unwrap(),
                row.get("D_e").unwrap(),
                100.0 * r
            );
        }
    }
    println!("worst: {:.2}%", 100.0 * worst);
    Ok(())
}
