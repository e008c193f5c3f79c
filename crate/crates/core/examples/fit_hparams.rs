//! Refits the learning-rate and batch-size power laws from the 2B fixed-D
//! table and predicts a held-out row.

use moebudget::fixtures::{default_fixture_dir, FixtureTable};
use moebudget::planner::{
    compare_param_basis, fit_hparam_power_law, points_from_table, snap_batch, HparamTarget,
    ParamBasis,
};

fn main() -> moebudget::Result<()> {
    let table = FixtureTable::load(default_fixture_dir().join("2B_keepD.csv"))?;
    for target in [HparamTarget::Eta, HparamTarget::Batch] {
        let points = points_from_table(&table, target, ParamBasis::Total)?;
        // Rows 1 and 4 share one shape at D = 1.14e11 and 5.41e11; row 2 is held out.
        let fit = fit_hparam_power_law(&[points[0], points[3]])?;
        let held_out = points[1];
        let predicted = fit.predict(held_out.params, held_out.tokens);
        let shown = match target {
            HparamTarget::Eta => format!("{predicted:.4e}"),
            HparamTarget::Batch => format!("{predicted:.1} (snapped {})", snap_batch(predicted)),
        };
        println!(
            "{target:?}: two-point exponent on D = {:.4}; at D={:.3e} predicted {shown}, table {}",
            fit.exponent_d, held_out.tokens, held_out.value
        );

        let all = fit_hparam_power_law(&points)?;
        println!(
            "  all {} rows: exponent on D = {:.4}, log-residual RMS {:.4}, fixed {:?}",
            all.n_points, all.exponent_d, all.residual_rms, all.fixed_exponents
        );
        let cmp = compare_param_basis(&table, target)?;
        println!("  N vs N_a basis: better = {:?}", cmp.better);
    }
    Ok(())
}
