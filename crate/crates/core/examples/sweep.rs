//! Regenerates the 7B fixed-C sweep from the table shapes and compares
//! tokens and iterations with the published rows. Then builds a fixed-D
//! sweep using fitted learning-rate and batch-size laws.

use moebudget::fixtures::{default_fixture_dir, Fixed, FixtureTable};
use moebudget::planner::{
    build_sweep, fit_hparam_power_law, points_from_table, table_shapes, HparamSource, HparamTarget,
    ParamBasis,
};

fn main() -> moebudget::Result<()> {
    let dir = default_fixture_dir();
    let table = FixtureTable::load(dir.join("7B_moe_ra.csv"))?;
    let (shapes, hparams) = table_shapes(&table)?;
    let plan = build_sweep(
        Fixed::C,
        2.86e21,
        &shapes,
        Some(&HparamSource::PerRow(hparams)),
        None,
    )?;
    println!(
        "fixed C = 2.86e21, C spread {:.3}%",
        100.0 * plan.compute_spread()
    );
    for (row, published) in plan.rows.iter().zip(&table.rows) {
        println!(
            "  r_a={:5.2}%  D={:.3e} (table {:.2e})  Iters={} (table {})  warmup={}",
            100.0 * row.budget.activation_rate,
            row.budget.tokens as f64,
            published.get("D").unwrap(),
            row.iterations,
            published.get("Iters").unwrap(),
            row.warmup_iters
        );
    }

    let source = FixtureTable::load(dir.join("2B_keepD.csv"))?;
    let eta = fit_hparam_power_law(&points_from_table(
        &source,
        HparamTarget::Eta,
        ParamBasis::Total,
    )?)?;
    let batch = fit_hparam_power_law(&points_from_table(
        &source,
        HparamTarget::Batch,
        ParamBasis::Total,
    )?)?;
    let fitted = HparamSource::Fit {
        eta,
        batch,
        basis: ParamBasis::Total,
    };
    let keep_d = FixtureTable::load(dir.join("2B_keepD.csv"))?;
    let (mut shapes, _) = table_shapes(&keep_d)?;
    shapes.dedup();
    let plan = build_sweep(Fixed::D, 1.14e11, &shapes, Some(&fitted), None)?;
    println!("\nfixed D = 1.14e11 with fitted eta and B:");
    print!("{}", plan.to_csv()?);
    Ok(())
}
