//! The `moebudget` command line.
//!
//! Payloads (JSON or CSV) go to standard output and diagnostics to standard
//! error. Exit codes: 0 success, 1 validation or usage error, 2 infeasible
//! request, 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::arch::{AnyShape, Arrangement, DerivedBudget};
use crate::error::{Error, Result};
use crate::fixtures::{default_fixture_dir, validate_fixture_tables, Fixed, FixtureTable};
use crate::kernel::{grad_check, GradCheckConfig};
use crate::planner::{
    build_sweep, compare_param_basis, fit_hparam_power_law, loose_reuse, points_from_table,
    strict_reuse, table_shapes, tokens_for_compute, HparamSource, HparamTarget, ParamBasis,
    ReusePlan, ReuseScheme, ReuseSpec, RowHparams, SweepPlan,
};
use crate::search::{dense_baseline, search, SearchSpec};
use crate::toy_lab::{compare_gating, run_toy_training, ToyConfig, TrainReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Infeasible(_) => EXIT_INFEASIBLE,
        Error::Numerical(_) | Error::Diverged { .. } => EXIT_NUMERICAL,
        Error::Invalid { .. }
        | Error::Identifiability(_)
        | Error::Fixture { .. }
        | Error::Io { .. }
        | Error::Json(_)
        | Error::Csv(_) => EXIT_INVALID,
    }
}

/// Parses a count written as an integer or in scientific notation
/// (`6.52e9`). The value must be a non-negative whole number.
pub fn parse_count(s: &str) -> std::result::Result<u64, String> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if !v.is_finite() || v < 0.0 || v.fract() != 0.0 || v >= u64::MAX as f64 {
        return Err(format!("{s:?} is not a non-negative whole number"));
    }
    Ok(v as u64)
}

fn parse_nonneg(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{s:?} must be non-negative and finite"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(
    name = "moebudget",
    version,
    about = "Budgets, configuration search and experiment plans for MoE vs dense transformers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan one training run for a shape file.
    Plan(PlanArgs),
    /// Search MoE shapes for a target N and activation rate, or a dense baseline.
    Search(SearchArgs),
    /// Build a fixed-C or fixed-D activation-rate sweep.
    Sweep(SweepArgs),
    /// Parameter and FLOP budget of a shape.
    Budget(BudgetArgs),
    /// Strict or loose data-reuse schedule.
    Reuse(ReuseArgs),
    /// Fit a learning-rate or batch-size power law to a table.
    FitHparams(FitArgs),
    /// Finite-difference check of the MoE block backward pass.
    GradCheck(GradCheckArgs),
    /// Train the toy MoE model on the synthetic task.
    TrainToy(TrainToyArgs),
    /// Recompute the bundled tables and report residuals.
    ValidateFixtures(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct FormatArg {
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct TokensOrCompute {
    /// Training tokens D.
    #[arg(long, value_parser = parse_count, conflicts_with = "compute")]
    pub tokens: Option<u64>,
    /// Training compute C in FLOPs; D = C / (3·M_fwd).
    #[arg(long, value_parser = parse_nonneg)]
    pub compute: Option<f64>,
}

impl TokensOrCompute {
    fn resolve(&self, budget: &DerivedBudget) -> Result<Option<u64>> {
        match (self.tokens, self.compute) {
            (Some(d), _) => Ok(Some(d)),
            (None, Some(c)) => tokens_for_compute(c, budget.fwd_flops_per_token as f64).map(Some),
            (None, None) => Ok(None),
        }
    }
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    #[arg(long)]
    pub shape_file: PathBuf,
    #[command(flatten)]
    pub amount: TokensOrCompute,
    #[command(flatten)]
    pub format: FormatArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Moe,
    Dense,
}

#[derive(Debug, Args)]
pub struct HparamArgs {
    /// Learning rate for every row.
    #[arg(long, requires = "batch", conflicts_with = "fit_from")]
    pub eta: Option<f64>,
    /// Batch size in sequences for every row.
    #[arg(long, value_parser = parse_count, requires = "eta")]
    pub batch: Option<u64>,
    /// Fit η and B power laws to this table (path or bundled table name).
    #[arg(long)]
    pub fit_from: Option<String>,
    /// Parameter count used by the fitted laws.
    #[arg(long, value_enum, default_value = "total")]
    pub basis: BasisArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    Total,
    Active,
}

impl From<BasisArg> for ParamBasis {
    fn from(b: BasisArg) -> Self {
        match b {
            BasisArg::Total => ParamBasis::Total,
            BasisArg::Active => ParamBasis::Active,
        }
    }
}

#[derive(Debug, Args)]
pub struct ReuseOpts {
    /// Train for several epochs over a subset of unique tokens.
    #[arg(long, value_enum)]
    pub reuse: Option<SchemeArg>,
    /// Unique tokens D̂ for strict reuse.
    #[arg(long, value_parser = parse_count)]
    pub unique_tokens: Option<u64>,
}

impl ReuseOpts {
    fn spec(&self) -> Result<Option<ReuseSpec>> {
        match (self.reuse, self.unique_tokens) {
            (None, None) => Ok(None),
            (None, Some(_)) => Err(Error::invalid(
                "arguments",
                "--unique-tokens needs --reuse strict",
            )),
            (Some(SchemeArg::Loose), _) => Ok(Some(ReuseSpec::Loose)),
            (Some(SchemeArg::Strict), Some(u)) => Ok(Some(ReuseSpec::Strict { unique_tokens: u })),
            (Some(SchemeArg::Strict), None) => Err(Error::invalid(
                "arguments",
                "--reuse strict needs --unique-tokens",
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Strict,
    Loose,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(value_enum)]
    pub kind: ModelKind,
    #[arg(long)]
    pub shape_file: PathBuf,
    #[command(flatten)]
    pub amount: TokensOrCompute,
    #[command(flatten)]
    pub hparams: HparamArgs,
    #[command(flatten)]
    pub reuse: ReuseOpts,
    #[command(flatten)]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long, value_parser = parse_count)]
    pub target_n: u64,
    /// Target activation rate as a fraction (ignored with --dense).
    #[arg(long, default_value_t = 0.2)]
    pub target_ra: f64,
    #[arg(long, default_value_t = 88.0)]
    pub zeta: f64,
    #[arg(long, default_value_t = 22.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 2.77)]
    pub alpha: f64,
    #[arg(long, default_value_t = 128)]
    pub head_dim: u64,
    #[arg(long, default_value_t = 2048)]
    pub seq_len: u64,
    #[arg(long, default_value = "one_dense")]
    pub arrangement: Arrangement,
    #[arg(long, default_value_t = 2)]
    pub k_min: u64,
    #[arg(long, default_value_t = 16)]
    pub k_max: u64,
    /// Routed experts without a shared expert.
    #[arg(long)]
    pub no_shared_expert: bool,
    /// Number of candidates to print.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Search a dense baseline instead.
    #[arg(long)]
    pub dense: bool,
    #[arg(long, conflicts_with_all = ["csv", "format"])]
    pub json: bool,
    #[arg(long, conflicts_with = "format")]
    pub csv: bool,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub fixed: FixedArg,
    /// The fixed C (FLOPs) or D (tokens).
    #[arg(long, value_parser = parse_nonneg)]
    pub value: f64,
    /// Take shapes (and per-row η, B) from this table (path or bundled name).
    #[arg(
        long,
        conflicts_with = "shapes_file",
        required_unless_present = "shapes_file"
    )]
    pub from_fixture: Option<String>,
    /// JSON array of shapes.
    #[arg(long)]
    pub shapes_file: Option<PathBuf>,
    #[command(flatten)]
    pub hparams: HparamArgs,
    #[command(flatten)]
    pub reuse: ReuseOpts,
    #[command(flatten)]
    pub format: FormatArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FixedArg {
    C,
    D,
}

#[derive(Debug, Args)]
pub struct ReuseArgs {
    #[arg(long, value_enum)]
    pub scheme: SchemeArg,
    /// Unique tokens D̂ (strict).
    #[arg(long, value_parser = parse_count)]
    pub unique_tokens: Option<u64>,
    /// Consumed tokens D.
    #[arg(long, value_parser = parse_count, conflicts_with = "compute")]
    pub tokens: Option<u64>,
    /// Compute budget; needs --shape-file.
    #[arg(long, value_parser = parse_nonneg, requires = "shape_file")]
    pub compute: Option<f64>,
    #[arg(long)]
    pub shape_file: Option<PathBuf>,
    #[command(flatten)]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Table path or bundled table name.
    #[arg(long)]
    pub from_fixture: String,
    #[arg(long, value_enum)]
    pub target: TargetArg,
    #[arg(long, value_enum, default_value = "total")]
    pub basis: BasisArg,
    /// Restrict to these 1-based rows.
    #[arg(long, value_delimiter = ',')]
    pub rows: Vec<usize>,
    #[arg(long, value_parser = parse_nonneg, requires = "predict_d")]
    pub predict_n: Option<f64>,
    #[arg(long, value_parser = parse_nonneg, requires = "predict_n")]
    pub predict_d: Option<f64>,
    #[command(flatten)]
    pub format: FormatArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TargetArg {
    Eta,
    Batch,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long = "E", default_value_t = 4)]
    pub experts: usize,
    #[arg(long = "K", default_value_t = 2)]
    pub top_k: usize,
    #[arg(long = "D_m", default_value_t = 5)]
    pub model_dim: usize,
    #[arg(long = "D_e", default_value_t = 3)]
    pub expert_dim: usize,
    #[arg(long = "D_se", default_value_t = 0)]
    pub shared_dim: usize,
    #[arg(long)]
    pub normalized: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 4)]
    pub tokens: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[command(flatten)]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for steps.jsonl and summary.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Run normalized and non-normalized gating side by side.
    #[arg(long)]
    pub compare_gating: bool,
    #[command(flatten)]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Fixture directory (default: $MOEBUDGET_FIXTURES or the bundled tables).
    #[arg(long)]
    pub dir: Option<PathBuf>,
    #[command(flatten)]
    pub format: FormatArg,
}

/// Output of one command.
struct Outcome {
    payload: String,
    /// Non-zero when the command ran but its check failed.
    code: i32,
    notes: Vec<String>,
}

impl Outcome {
    fn ok(payload: String) -> Self {
        Outcome {
            payload,
            code: EXIT_OK,
            notes: Vec::new(),
        }
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn csv_string(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Fixture {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// A path, or the name of a bundled table such as `7B_moe_ra`.
fn resolve_table(arg: &str) -> Result<FixtureTable> {
    let path = Path::new(arg);
    if path.exists() {
        return FixtureTable::load(path);
    }
    let bundled = default_fixture_dir().join(format!("{arg}.csv"));
    if !arg.contains(['/', '\\']) && bundled.exists() {
        return FixtureTable::load(bundled);
    }
    FixtureTable::load(path)
}

const BUDGET_COLUMNS: [&str; 8] = ["N", "N_a", "r_a", "M_fwd", "M_train", "C", "D", "D_over_N"];

fn budget_cells(b: &DerivedBudget) -> Vec<String> {
    vec![
        b.total_params.to_string(),
        b.active_params.to_string(),
        b.activation_rate.to_string(),
        b.fwd_flops_per_token.to_string(),
        b.train_flops_per_token.to_string(),
        format!("{:e}", b.train_compute),
        b.tokens.to_string(),
        b.tokens_per_param.to_string(),
    ]
}

fn cmd_budget(a: &BudgetArgs) -> Result<Outcome> {
    let shape: AnyShape = read_json(&a.shape_file)?;
    shape.validate()?;
    let zero = shape.budget(0)?;
    let tokens = a.amount.resolve(&zero)?.unwrap_or(0);
    let budget = zero.with_tokens(tokens);
    let payload = match a.format.format {
        Format::Json => {
            #[derive(Serialize)]
            struct Payload<'a> {
                shape: &'a AnyShape,
                budget: &'a DerivedBudget,
            }
            json(&Payload {
                shape: &shape,
                budget: &budget,
            })?
        }
        Format::Csv => csv_string(&BUDGET_COLUMNS, &[budget_cells(&budget)])?,
    };
    Ok(Outcome::ok(payload))
}

fn fitted_source(table_arg: &str, basis: ParamBasis) -> Result<HparamSource> {
    let table = resolve_table(table_arg)?;
    let eta = fit_hparam_power_law(&points_from_table(&table, HparamTarget::Eta, basis)?)?;
    let batch = fit_hparam_power_law(&points_from_table(&table, HparamTarget::Batch, basis)?)?;
    Ok(HparamSource::Fit { eta, batch, basis })
}

fn hparam_source(h: &HparamArgs) -> Result<Option<HparamSource>> {
    if let (Some(eta), Some(batch)) = (h.eta, h.batch) {
        return Ok(Some(HparamSource::Constant(RowHparams { eta, batch })));
    }
    h.fit_from
        .as_deref()
        .map(|t| fitted_source(t, h.basis.into()))
        .transpose()
}

fn plan_payload(plan: &SweepPlan, format: Format) -> Result<String> {
    match format {
        Format::Json => json(plan),
        Format::Csv => plan.to_csv(),
    }
}

fn cmd_plan(a: &PlanArgs) -> Result<Outcome> {
    let shape: AnyShape = read_json(&a.shape_file)?;
    match (a.kind, &shape) {
        (ModelKind::Moe, AnyShape::Moe(_)) | (ModelKind::Dense, AnyShape::Dense(_)) => {}
        _ => {
            return Err(Error::invalid(
                "shape file",
                format!(
                    "{} does not hold a {:?} shape",
                    a.shape_file.display(),
                    a.kind
                ),
            ))
        }
    }
    let (fixed, value) = match (a.amount.tokens, a.amount.compute) {
        (Some(d), _) => (Fixed::D, d as f64),
        (None, Some(c)) => (Fixed::C, c),
        (None, None) => return Err(Error::invalid("arguments", "give --tokens or --compute")),
    };
    let source = hparam_source(&a.hparams)?;
    let plan = build_sweep(fixed, value, &[shape], source.as_ref(), a.reuse.spec()?)?;
    Ok(Outcome::ok(plan_payload(&plan, a.format.format)?))
}

fn cmd_search(a: &SearchArgs) -> Result<Outcome> {
    let format = match (a.json, a.csv, a.format) {
        (_, true, _) => Format::Csv,
        (_, _, Some(f)) => f,
        _ => Format::Json,
    };
    if a.dense {
        let shape = dense_baseline(a.target_n, a.zeta, a.alpha, a.head_dim, a.seq_len)?;
        let budget = shape.budget(0)?;
        let payload = match format {
            Format::Json => {
                #[derive(Serialize)]
                struct Payload {
                    shape: AnyShape,
                    budget: DerivedBudget,
                }
                json(&Payload {
                    shape: shape.into(),
                    budget,
                })?
            }
            Format::Csv => csv_string(
                &["L", "D_m", "D_ffn", "H", "D_h", "S", "N", "M_train"],
                &[vec![
                    shape.layers.to_string(),
                    shape.model_dim.to_string(),
                    shape.ffn_dim.to_string(),
                    shape.heads.to_string(),
                    shape.head_dim.to_string(),
                    shape.seq_len.to_string(),
                    budget.total_params.to_string(),
                    budget.train_flops_per_token.to_string(),
                ]],
            )?,
        };
        return Ok(Outcome::ok(payload));
    }
    let spec = SearchSpec {
        target_n: a.target_n,
        target_ra: a.target_ra,
        zeta: a.zeta,
        mu: a.mu,
        alpha: a.alpha,
        head_dim: a.head_dim,
        seq_len: a.seq_len,
        arrangement: a.arrangement,
        k_min: a.k_min,
        k_max: a.k_max,
        shared_expert: !a.no_shared_expert,
        ..SearchSpec::default()
    };
    let mut report = search(&spec)?;
    if report.candidates.is_empty() {
        return Err(Error::Infeasible(report.diagnostic.unwrap_or_default()));
    }
    report.candidates.truncate(a.top);
    let payload = match format {
        Format::Json => json(&report)?,
        Format::Csv => {
            let rows: Vec<Vec<String>> = report
                .candidates
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let s = &c.shape;
                    vec![
                        (i + 1).to_string(),
                        s.base.layers.to_string(),
                        s.base.model_dim.to_string(),
                        s.base.ffn_dim.to_string(),
                        s.base.heads.to_string(),
                        s.experts.to_string(),
                        s.top_k.to_string(),
                        s.expert_dim.to_string(),
                        s.shared_expert_dim.to_string(),
                        c.budget.total_params.to_string(),
                        c.budget.active_params.to_string(),
                        c.budget.activation_rate.to_string(),
                        c.budget.train_flops_per_token.to_string(),
                        c.residuals.n_rel.to_string(),
                        c.residuals.ra_abs.to_string(),
                        c.score.to_string(),
                    ]
                })
                .collect();
            csv_string(
                &[
                    "rank", "L", "D_m", "D_ffn", "H", "E", "K", "D_e", "D_se", "N", "N_a", "r_a",
                    "M", "dN_rel", "dr_a", "score",
                ],
                &rows,
            )?
        }
    };
    Ok(Outcome::ok(payload))
}

fn cmd_sweep(a: &SweepArgs) -> Result<Outcome> {
    let fixed = match a.fixed {
        FixedArg::C => Fixed::C,
        FixedArg::D => Fixed::D,
    };
    let (shapes, per_row) = match (&a.from_fixture, &a.shapes_file) {
        (Some(t), _) => {
            let (s, h) = table_shapes(&resolve_table(t)?)?;
            (s, Some(h))
        }
        (None, Some(p)) => (read_json::<Vec<AnyShape>>(p)?, None),
        (None, None) => {
            return Err(Error::invalid(
                "arguments",
                "give --from-fixture or --shapes-file",
            ))
        }
    };
    let source = match hparam_source(&a.hparams)? {
        Some(s) => Some(s),
        None => per_row.map(HparamSource::PerRow),
    };
    let plan = build_sweep(fixed, a.value, &shapes, source.as_ref(), a.reuse.spec()?)?;
    Ok(Outcome::ok(plan_payload(&plan, a.format.format)?))
}

fn cmd_reuse(a: &ReuseArgs) -> Result<Outcome> {
    let tokens = match (a.tokens, a.compute, &a.shape_file) {
        (Some(d), _, _) => d,
        (None, Some(c), Some(p)) => {
            let shape: AnyShape = read_json(p)?;
            tokens_for_compute(c, shape.budget(0)?.fwd_flops_per_token as f64)?
        }
        _ => {
            return Err(Error::invalid(
                "arguments",
                "give --tokens or --compute with --shape-file",
            ))
        }
    };
    let plan: ReusePlan = match a.scheme {
        SchemeArg::Strict => {
            let unique = a
                .unique_tokens
                .ok_or_else(|| Error::invalid("arguments", "strict reuse needs --unique-tokens"))?;
            strict_reuse(tokens, unique)?
        }
        SchemeArg::Loose => loose_reuse(tokens),
    };
    let mut out = Outcome::ok(match a.format.format {
        Format::Json => json(&plan)?,
        Format::Csv => csv_string(
            &["scheme", "D_hat", "D", "Epoch"],
            &[vec![
                match plan.scheme {
                    ReuseScheme::Strict => "strict".into(),
                    ReuseScheme::Loose => "loose".into(),
                },
                plan.unique_tokens.to_string(),
                plan.consumed_tokens.to_string(),
                plan.epochs.to_string(),
            ]],
        )?,
    });
    out.notes.extend(plan.warning.clone());
    Ok(out)
}

fn cmd_fit(a: &FitArgs) -> Result<Outcome> {
    let table = resolve_table(&a.from_fixture)?;
    let target = match a.target {
        TargetArg::Eta => HparamTarget::Eta,
        TargetArg::Batch => HparamTarget::Batch,
    };
    let basis: ParamBasis = a.basis.into();
    let mut points = points_from_table(&table, target, basis)?;
    if !a.rows.is_empty() {
        let n = points.len();
        if let Some(bad) = a.rows.iter().find(|&&r| r == 0 || r > n) {
            return Err(Error::invalid(
                "arguments",
                format!("row {bad} out of 1..={n}"),
            ));
        }
        points = a.rows.iter().map(|&r| points[r - 1]).collect();
    }
    let fit = fit_hparam_power_law(&points)?;
    let comparison = compare_param_basis(&table, target)?;
    let prediction = match (a.predict_n, a.predict_d) {
        (Some(n), Some(d)) => Some(fit.predict(n, d)),
        _ => None,
    };
    let payload = match a.format.format {
        Format::Json => {
            #[derive(Serialize)]
            struct Payload<'a> {
                table: &'a str,
                target: HparamTarget,
                basis: ParamBasis,
                fit: &'a crate::planner::PowerLawFit,
                basis_comparison: &'a crate::planner::BasisComparison,
                #[serde(skip_serializing_if = "Option::is_none")]
                prediction: Option<f64>,
            }
            json(&Payload {
                table: &table.name,
                target,
                basis,
                fit: &fit,
                basis_comparison: &comparison,
                prediction,
            })?
        }
        Format::Csv => csv_string(
            &[
                "a",
                "b_N",
                "c_D",
                "residual_rms",
                "n_points",
                "fixed",
                "prediction",
            ],
            &[vec![
                fit.log_coefficient.to_string(),
                fit.exponent_n.to_string(),
                fit.exponent_d.to_string(),
                fit.residual_rms.to_string(),
                fit.n_points.to_string(),
                fit.fixed_exponents.join(" "),
                prediction.map(|p| p.to_string()).unwrap_or_default(),
            ]],
        )?,
    };
    Ok(Outcome::ok(payload))
}

fn cmd_grad_check(a: &GradCheckArgs) -> Result<Outcome> {
    let report = grad_check(&GradCheckConfig {
        experts: a.experts,
        top_k: a.top_k,
        model_dim: a.model_dim,
        expert_dim: a.expert_dim,
        shared_dim: a.shared_dim,
        normalized: a.normalized,
        seed: a.seed,
        trials: a.trials,
        tolerance: a.tolerance,
        tokens: a.tokens,
        lambda: a.lambda,
        ..GradCheckConfig::default()
    })?;
    let payload = match a.format.format {
        Format::Json => json(&report)?,
        Format::Csv => csv_string(
            &[
                "trials",
                "checked",
                "resampled",
                "max_rel_error",
                "worst_tensor",
                "tolerance",
                "passed",
            ],
            &[vec![
                report.trials.to_string(),
                report.checked.to_string(),
                report.resampled.to_string(),
                report.max_rel_error.to_string(),
                report.worst_tensor.clone(),
                report.tolerance.to_string(),
                report.passed.to_string(),
            ]],
        )?,
    };
    let mut out = Outcome::ok(payload);
    if !report.passed {
        out.code = EXIT_NUMERICAL;
        out.notes.push(format!(
            "gradient check failed: max relative error {:.3e} > {:.1e} in {}",
            report.max_rel_error, report.tolerance, report.worst_tensor
        ));
    }
    Ok(out)
}

fn records_csv(report: &TrainReport) -> Result<String> {
    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.ce_loss.to_string(),
                r.balance_loss.to_string(),
                r.total_loss.to_string(),
                r.load_cv.to_string(),
                r.bits_per_token.to_string(),
            ]
        })
        .collect();
    csv_string(
        &[
            "step",
            "ce_loss",
            "balance_loss",
            "total_loss",
            "load_cv",
            "bits_per_token",
        ],
        &rows,
    )
}

fn cmd_train_toy(a: &TrainToyArgs) -> Result<Outcome> {
    let mut cfg: ToyConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ToyConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        cfg.task.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if a.compare_gating {
        let cmp = compare_gating(&cfg)?;
        if let Some(dir) = &a.out {
            cmp.normalized.write(dir.join("normalized"))?;
            cmp.non_normalized.write(dir.join("non_normalized"))?;
        }
        #[derive(Serialize)]
        struct Payload {
            normalized: crate::toy_lab::TrainSummary,
            non_normalized: crate::toy_lab::TrainSummary,
            mean_balance_normalized: f64,
            mean_balance_non_normalized: f64,
        }
        let payload = match a.format.format {
            Format::Json => json(&Payload {
                normalized: cmp.normalized.summary(),
                non_normalized: cmp.non_normalized.summary(),
                mean_balance_normalized: cmp.mean_balance_normalized,
                mean_balance_non_normalized: cmp.mean_balance_non_normalized,
            })?,
            Format::Csv => csv_string(
                &[
                    "variant",
                    "mean_balance_loss",
                    "final_ce_loss",
                    "final_load_cv",
                ],
                &[&cmp.normalized, &cmp.non_normalized]
                    .iter()
                    .zip(["normalized", "non_normalized"])
                    .map(|(r, name)| {
                        vec![
                            name.to_string(),
                            r.mean_balance_loss().to_string(),
                            r.last().ce_loss.to_string(),
                            r.last().load_cv.to_string(),
                        ]
                    })
                    .collect::<Vec<_>>(),
            )?,
        };
        return Ok(Outcome::ok(payload));
    }
    let report = run_toy_training(&cfg)?;
    if let Some(dir) = &a.out {
        report.write(dir)?;
    }
    let payload = match a.format.format {
        Format::Json => json(&report.summary())?,
        Format::Csv => records_csv(&report)?,
    };
    Ok(Outcome::ok(payload))
}

fn cmd_validate(a: &ValidateArgs) -> Result<Outcome> {
    let dir = a.dir.clone().unwrap_or_else(default_fixture_dir);
    let report = validate_fixture_tables(&dir)?;
    let payload = match a.format.format {
        Format::Json => json(&report)?,
        Format::Csv => report.to_csv()?,
    };
    let mut out = Outcome::ok(payload);
    out.notes.push(format!(
        "{} tables, {} rows checked in {}",
        report.tables.len(),
        report.row_count(),
        dir.display()
    ));
    if !report.pass {
        out.code = EXIT_INVALID;
        for (table, row, c) in report.failures() {
            out.notes.push(format!(
                "{table} row {row} {}: table {} recomputed {} residual {:.4} exceeds {}",
                c.column, c.table_value, c.recomputed, c.residual, c.tolerance
            ));
        }
    }
    Ok(out)
}

fn dispatch(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Search(a) => cmd_search(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Budget(a) => cmd_budget(a),
        Command::Reuse(a) => cmd_reuse(a),
        Command::FitHparams(a) => cmd_fit(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::ValidateFixtures(a) => cmd_validate(a),
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    EXIT_INVALID
                }
            };
        }
    };
    match dispatch(&cli) {
        Ok(out) => {
            let _ = stdout.write_all(out.payload.as_bytes());
            for note in &out.notes {
                let _ = writeln!(stderr, "{note}");
            }
            out.code
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_accept_scientific_notation() {
        assert_eq!(parse_count("6.52e9"), Ok(6_520_000_000));
        assert_eq!(parse_count("1024"), Ok(1024));
        assert!(parse_count("1.5").is_err());
        assert!(parse_count("-3").is_err());
        assert!(parse_count("abc").is_err());
    }

    #[test]
    fn error_codes() {
        assert_eq!(exit_code(&Error::Infeasible(String::new())), 2);
        assert_eq!(exit_code(&Error::Numerical(String::new())), 3);
        assert_eq!(exit_code(&Error::invalid("x", "y")), 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
