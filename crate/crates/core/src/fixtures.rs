//! Published configuration tables shipped as CSV fixtures, and their
//! recomputation against [`crate::arch`].
//!
//! A fixture file starts with `#` lines of whitespace-separated `key=value`
//! metadata (table name, shared shape fields, reuse scheme), followed by a
//! CSV header and numeric rows. `r_a` is stored in percent as printed.
//! Headers may use the printed symbols (`η`, `μ`, `D̂`) or the ASCII
//! aliases `eta`, `mu`, `D_hat`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{AnyShape, Arrangement, DenseShape, DerivedBudget, MoeShape};
use crate::error::{Error, Result};

/// Table names expected in a fixture directory, one `<name>.csv` each.
pub const TABLE_NAMES: [&str; 9] = [
    "2B_keepD",
    "2B_moe_ra",
    "7B_keepD",
    "7B_moe_ra",
    "dense_baseline",
    "7B_data_reuse",
    "3B_reuse_65B",
    "3B_reuse_114B",
    "7B_loose_reuse",
];

/// Fixture directory: `$MOEBUDGET_FIXTURES` if set, else the one bundled
/// with this crate.
pub fn default_fixture_dir() -> PathBuf {
    std::env::var_os("MOEBUDGET_FIXTURES")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures")))
}

fn canonical_column(name: &str) -> &str {
    match name.trim() {
        "eta" | "lr" => "η",
        "mu" => "μ",
        "D_hat" | "Dhat" => "D̂",
        "iters" | "Iterations" => "Iters",
        "epoch" | "Epochs" => "Epoch",
        "D_over_N" => "D/N",
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReuseScheme {
    Strict,
    Loose,
}

impl std::str::FromStr for ReuseScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(ReuseScheme::Strict),
            "loose" => Ok(ReuseScheme::Loose),
            other => Err(Error::invalid(
                "reuse scheme",
                format!("{other:?} (expected strict or loose)"),
            )),
        }
    }
}

/// Which quantity a sweep holds fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Fixed {
    C,
    D,
}

impl std::str::FromStr for Fixed {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "C" | "c" => Ok(Fixed::C),
            "D" | "d" => Ok(Fixed::D),
            other => Err(Error::invalid(
                "fixed",
                format!("{other:?} (expected c or d)"),
            )),
        }
    }
}

/// One parsed table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FixtureTable {
    pub name: String,
    pub path: PathBuf,
    pub meta: BTreeMap<String, String>,
    /// Canonical column names in file order.
    pub columns: Vec<String>,
    pub rows: Vec<FixtureRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FixtureRow {
    pub cells: BTreeMap<String, f64>,
}

impl FixtureRow {
    pub fn get(&self, column: &str) -> Option<f64> {
        self.cells.get(column).copied()
    }
}

fn parse_count(s: &str) -> Option<u64> {
    let v: f64 = s.parse().ok()?;
    (v.is_finite() && v >= 0.0 && v < u64::MAX as f64).then(|| v.round() as u64)
}

impl FixtureTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Fixture {
            path: path.to_path_buf(),
            reason,
        };
        let mut meta = BTreeMap::new();
        let mut body = String::new();
        for line in text.lines() {
            if let Some(comment) = line.trim_start().strip_prefix('#') {
                for token in comment.split_whitespace() {
                    if let Some((k, v)) = token.split_once('=') {
                        meta.insert(k.to_string(), v.to_string());
                    }
                }
            } else if !line.trim().is_empty() {
                body.push_str(line);
                body.push('\n');
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(body.as_bytes());
        let columns: Vec<String> = reader
            .headers()
            .map_err(|e| fail(format!("bad header: {e}")))?
            .iter()
            .map(|h| canonical_column(h).to_string())
            .collect();
        if columns.is_empty() {
            return Err(fail("no header row".into()));
        }
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| fail(format!("row {}: {e}", i + 1)))?;
            let mut cells = BTreeMap::new();
            for (col, raw) in columns.iter().zip(record.iter()) {
                let v: f64 = raw.parse().map_err(|_| {
                    fail(format!(
                        "row {}: column {col}: {raw:?} is not a number",
                        i + 1
                    ))
                })?;
                if !v.is_finite() {
                    return Err(fail(format!("row {}: column {col} is not finite", i + 1)));
                }
                cells.insert(col.clone(), v);
            }
            rows.push(FixtureRow { cells });
        }
        let name = meta.get("table").cloned().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
        let table = FixtureTable {
            name,
            path: path.to_path_buf(),
            meta,
            columns,
            rows,
        };
        for i in 0..table.rows.len() {
            table.shape(i)?;
            table.tokens(i)?;
        }
        Ok(table)
    }

    fn fail(&self, reason: String) -> Error {
        Error::Fixture {
            path: self.path.clone(),
            reason,
        }
    }

    fn meta_count(&self, key: &str) -> Result<u64> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| self.fail(format!("missing metadata {key}")))?;
        parse_count(raw).ok_or_else(|| self.fail(format!("metadata {key}={raw} is not a count")))
    }

    fn cell(&self, row: usize, column: &str) -> Result<f64> {
        self.rows
            .get(row)
            .ok_or_else(|| self.fail(format!("no row {row}")))?
            .get(column)
            .ok_or_else(|| self.fail(format!("row {}: missing column {column}", row + 1)))
    }

    fn cell_count(&self, row: usize, column: &str) -> Result<u64> {
        let v = self.cell(row, column)?;
        if v < 0.0 {
            return Err(self.fail(format!("row {}: column {column} is negative", row + 1)));
        }
        Ok(v.round() as u64)
    }

    pub fn is_dense(&self) -> bool {
        self.columns.iter().any(|c| c == "L")
    }

    pub fn fixed(&self) -> Option<Fixed> {
        self.meta.get("fixed").and_then(|s| s.parse().ok())
    }

    pub fn reuse(&self) -> Option<ReuseScheme> {
        self.meta.get("reuse").and_then(|s| s.parse().ok())
    }

    /// Unique-token budget `D̂` shared by a strict-reuse table.
    pub fn unique_tokens(&self) -> Option<u64> {
        self.meta.get("D̂").and_then(|s| parse_count(s))
    }

    /// Nominal total parameters quoted for the whole table (MoE tables) or
    /// the row's own `N` (dense table).
    pub fn nominal_params(&self, row: usize) -> Result<f64> {
        if self.is_dense() {
            self.cell(row, "N")
        } else {
            Ok(self.meta_count("N")? as f64)
        }
    }

    pub fn seq_len(&self) -> Result<u64> {
        self.meta_count("S")
    }

    /// Reconstructs the architecture of row `row`.
    pub fn shape(&self, row: usize) -> Result<AnyShape> {
        let seq_len = self.meta_count("S")?;
        let head_dim = self.meta_count("D_h")?;
        if self.is_dense() {
            let shape = DenseShape {
                layers: self.cell_count(row, "L")?,
                model_dim: self.cell_count(row, "D_m")?,
                ffn_dim: self.cell_count(row, "D_ffn")?,
                heads: self.cell_count(row, "H")?,
                head_dim,
                seq_len,
            };
            shape
                .validate()
                .map_err(|e| self.fail(format!("row {}: {e}", row + 1)))?;
            return Ok(shape.into());
        }
        let base = DenseShape {
            layers: self.meta_count("L")?,
            model_dim: self.meta_count("D_m")?,
            ffn_dim: self.meta_count("D_ffn")?,
            heads: self.meta_count("H")?,
            head_dim,
            seq_len,
        };
        let arrangement: Arrangement = self
            .meta
            .get("arrangement")
            .map(|s| s.parse())
            .transpose()?
            .unwrap_or(Arrangement::OneDense);
        let dense_layers = match self.meta.get("L_d") {
            Some(_) => self.meta_count("L_d")?,
            None => arrangement.split(base.layers).1,
        };
        let shape = MoeShape {
            base,
            moe_layers: base.layers.saturating_sub(dense_layers),
            dense_layers,
            experts: self.cell_count(row, "E")?,
            top_k: self.cell_count(row, "K")?,
            expert_dim: self.cell_count(row, "D_e")?,
            shared_expert_dim: self.cell_count(row, "D_se")?,
            arrangement,
            gate_normalized: false,
        };
        shape
            .validate()
            .map_err(|e| self.fail(format!("row {}: {e}", row + 1)))?;
        Ok(shape.into())
    }

    /// Consumed tokens `D`. Loose-reuse tables print only `D̂ = D/2`.
    pub fn tokens(&self, row: usize) -> Result<u64> {
        if self.columns.iter().any(|c| c == "D") {
            self.cell_count(row, "D")
        } else if self.reuse() == Some(ReuseScheme::Loose) {
            Ok(2 * self.cell_count(row, "D̂")?)
        } else {
            Err(self.fail("no D column".into()))
        }
    }

    pub fn budget(&self, row: usize) -> Result<DerivedBudget> {
        self.shape(row)?.budget(self.tokens(row)?)
    }
}

/// Loads every table in [`TABLE_NAMES`] from `dir`.
pub fn load_fixture_dir(dir: impl AsRef<Path>) -> Result<Vec<FixtureTable>> {
    let dir = dir.as_ref();
    TABLE_NAMES
        .iter()
        .map(|name| FixtureTable::load(dir.join(format!("{name}.csv"))))
        .collect()
}

/// Comparison tolerances for table recomputation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative, for `N`, `N_a`, `M`, `C`, `D/N`.
    pub relative: f64,
    /// Absolute, in percentage points.
    pub activation_pp: f64,
    /// Absolute.
    pub epoch: f64,
    /// Relative.
    pub iterations: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            relative: 0.02,
            activation_pp: 0.5,
            epoch: 0.02,
            iterations: 0.005,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    Relative,
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub column: String,
    pub table_value: f64,
    pub recomputed: f64,
    pub residual: f64,
    pub kind: ResidualKind,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn relative(column: &str, table_value: f64, recomputed: f64, tolerance: f64) -> Self {
        let residual = recomputed / table_value - 1.0;
        Check {
            column: column.to_string(),
            table_value,
            recomputed,
            residual,
            kind: ResidualKind::Relative,
            tolerance,
            pass: residual.abs() <= tolerance,
        }
    }

    fn absolute(column: &str, table_value: f64, recomputed: f64, tolerance: f64) -> Self {
        let residual = recomputed - table_value;
        Check {
            column: column.to_string(),
            table_value,
            recomputed,
            residual,
            kind: ResidualKind::Absolute,
            tolerance,
            pass: residual.abs() <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    /// 1-based row number within the table.
    pub row: usize,
    pub checks: Vec<Check>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub table: String,
    pub rows: Vec<RowReport>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub tolerances: Tolerances,
    pub tables: Vec<TableReport>,
    pub pass: bool,
}

impl ValidationReport {
    pub fn checks(&self) -> impl Iterator<Item = (&str, usize, &Check)> {
        self.tables.iter().flat_map(|t| {
            t.rows
                .iter()
                .flat_map(move |r| r.checks.iter().map(move |c| (t.table.as_str(), r.row, c)))
        })
    }

    pub fn row_count(&self) -> usize {
        self.tables.iter().map(|t| t.rows.len()).sum()
    }

    pub fn failures(&self) -> impl Iterator<Item = (&str, usize, &Check)> {
        self.checks().filter(|(_, _, c)| !c.pass)
    }

    /// One line per check: `table,row,column,table_value,recomputed,residual,kind,tolerance,pass`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "table",
            "row",
            "column",
            "table_value",
            "recomputed",
            "residual",
            "kind",
            "tolerance",
            "pass",
        ])?;
        for (table, row, c) in self.checks() {
            w.write_record([
                table.to_string(),
                row.to_string(),
                c.column.clone(),
                format!("{:e}", c.table_value),
                format!("{:e}", c.recomputed),
                format!("{:e}", c.residual),
                match c.kind {
                    ResidualKind::Relative => "relative".into(),
                    ResidualKind::Absolute => "absolute".into(),
                },
                c.tolerance.to_string(),
                c.pass.to_string(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Recomputes one table row. Missing optional columns are skipped.
pub fn validate_row(table: &FixtureTable, row: usize, tol: &Tolerances) -> Result<RowReport> {
    let shape = table.shape(row)?;
    let tokens = table.tokens(row)?;
    let b = shape.budget(tokens)?;
    let r = &table.rows[row];
    let mut checks = vec![Check::relative(
        "N",
        table.nominal_params(row)?,
        b.total_params as f64,
        tol.relative,
    )];
    if let Some(v) = r.get("N_a") {
        checks.push(Check::relative(
            "N_a",
            v,
            b.active_params as f64,
            tol.relative,
        ));
    }
    if let Some(v) = r.get("r_a") {
        checks.push(Check::absolute(
            "r_a",
            v,
            100.0 * b.activation_rate,
            tol.activation_pp,
        ));
    }
    if let Some(v) = r.get("M") {
        checks.push(Check::relative(
            "M",
            v,
            b.train_flops_per_token as f64,
            tol.relative,
        ));
    }
    if let Some(v) = r.get("C") {
        checks.push(Check::relative("C", v, b.train_compute, tol.relative));
    }
    if let Some(v) = r.get("D/N") {
        checks.push(Check::relative("D/N", v, b.tokens_per_param, tol.relative));
    }
    if let (Some(v), Some(batch)) = (r.get("Iters"), r.get("B")) {
        let iters = crate::planner::iterations(tokens, batch.round() as u64, table.seq_len()?)?;
        checks.push(Check::relative("Iters", v, iters as f64, tol.iterations));
    }
    if let Some(v) = r.get("Epoch") {
        let unique = table
            .unique_tokens()
            .ok_or_else(|| table.fail("Epoch column without D̂ metadata".into()))?;
        let plan = crate::planner::strict_reuse(tokens, unique)?;
        checks.push(Check::absolute("Epoch", v, plan.epochs, tol.epoch));
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(RowReport {
        row: row + 1,
        checks,
        pass,
    })
}

pub fn validate_table(table: &FixtureTable, tol: &Tolerances) -> Result<TableReport> {
    let rows = (0..table.rows.len())
        .map(|i| validate_row(table, i, tol))
        .collect::<Result<Vec<_>>>()?;
    Ok(TableReport {
        table: table.name.clone(),
        pass: rows.iter().all(|r| r.pass),
        rows,
    })
}

/// Validates every bundled table in `dir`. Missing or malformed files are
/// errors; out-of-tolerance rows are reported with `pass = false`.
pub fn validate_fixture_tables(dir: impl AsRef<Path>) -> Result<ValidationReport> {
    let tol = Tolerances::default();
    let tables = load_fixture_dir(dir)?
        .iter()
        .map(|t| validate_table(t, &tol))
        .collect::<Result<Vec<_>>>()?;
    Ok(ValidationReport {
        tolerances: tol,
        pass: tables.iter().all(|t| t.pass),
        tables,
    })
}
