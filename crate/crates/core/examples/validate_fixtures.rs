//! Recomputes every bundled table and prints the worst residual per column.

use std::collections::BTreeMap;

use moebudget::fixtures::{default_fixture_dir, validate_fixture_tables, ResidualKind};

fn main() -> moebudget::Result<()> {
    let report = validate_fixture_tables(default_fixture_dir())?;
    println!(
        "{} tables, {} rows",
        report.tables.len(),
        report.row_count()
    );

    let mut worst: BTreeMap<&str, (f64, ResidualKind, String)> = BTreeMap::new();
    for (table, row, check) in report.checks() {
        let entry = worst
            .entry(check.column.as_str())
            .or_insert((0.0, check.kind, String::new()));
        if check.residual.abs() >= entry.0 {
            *entry = (
                check.residual.abs(),
                check.kind,
                format!("{table} row {row}"),
            );
        }
    }
    for (column, (residual, kind, at)) in worst {
        let shown = match kind {
            ResidualKind::Relative => format!("{:.3}%", 100.0 * residual),
            ResidualKind::Absolute => format!("{residual:.4}"),
        };
        println!("{column:>6}: worst {shown} ({at})");
    }
    for (table, row, check) in report.failures() {
        println!("FAIL {table} row {row} {}: {:?}", check.column, check);
    }
    println!(
        "{}",
        if report.pass {
            "all rows pass"
        } else {
            "some rows fail"
        }
    );
    Ok(())
}
