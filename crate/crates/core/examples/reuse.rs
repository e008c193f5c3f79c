//! Strict and loose data-reuse schedules for the 7B fixed-C sweep.

use moebudget::fixtures::{default_fixture_dir, Fixed, FixtureTable};
use moebudget::planner::{build_sweep, table_shapes, HparamSource, ReuseSpec};

fn main() -> moebudget::Result<()> {
    let table = FixtureTable::load(default_fixture_dir().join("7B_data_reuse.csv"))?;
    let (shapes, hparams) = table_shapes(&table)?;
    let source = HparamSource::PerRow(hparams);
    let strict = ReuseSpec::Strict {
        unique_tokens: 68_000_000_000,
    };
    for (name, reuse) in [
        ("strict, D_hat=6.8e10", strict),
        ("loose", ReuseSpec::Loose),
    ] {
        let plan = build_sweep(Fixed::C, 2.86e21, &shapes, Some(&source), Some(reuse))?;
        println!("{name}:");
        for row in &plan.rows {
            let r = row.reuse.as_ref().expect("reuse plan");
            println!(
                "  r_a={:5.2}%  D={:.3e}  D_hat={:.3e}  epochs={:.2}",
                100.0 * row.budget.activation_rate,
                r.consumed_tokens as f64,
                r.unique_tokens as f64,
                r.epochs
            );
        }
    }
    Ok(())
}
