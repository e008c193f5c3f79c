use serde::{Deserialize, Serialize};

use super::fit::{snap_batch, ParamBasis, PowerLawFit};
use super::reuse::{loose_reuse, strict_reuse, ReusePlan};
use super::schedule::{iterations, tokens_for_compute, warmup_iters, Recipe};
use crate::arch::{AnyShape, DerivedBudget};
use crate::error::{Error, Result};
use crate::fixtures::{Fixed, FixtureTable};

/// Largest spread of `C` tolerated inside a fixed-C sweep.
pub const FIXED_C_BAND: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowHparams {
    pub eta: f64,
    pub batch: u64,
}

/// Where a sweep's learning rate and batch size come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HparamSource {
    /// Power laws in `(N, D)`. `B` is snapped to a multiple of 8.
    Fit {
        eta: PowerLawFit,
        batch: PowerLawFit,
        basis: ParamBasis,
    },
    /// One entry per shape, in input order.
    PerRow(Vec<RowHparams>),
    /// Same values for every row.
    Constant(RowHparams),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum ReuseSpec {
    Strict {
        #[serde(rename = "D_hat")]
        unique_tokens: u64,
    },
    Loose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub shape: AnyShape,
    pub budget: DerivedBudget,
    pub eta: f64,
    pub batch: u64,
    pub iterations: u64,
    pub warmup_iters: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reuse: Option<ReusePlan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub fixed: Fixed,
    /// The fixed `C` (FLOPs) or `D` (tokens).
    pub value: f64,
    pub rows: Vec<SweepRow>,
    pub recipe: Recipe,
}

impl SweepPlan {
    /// `max C / min C - 1` over the rows.
    pub fn compute_spread(&self) -> f64 {
        let cs = self.rows.iter().map(|r| r.budget.train_compute);
        let (lo, hi) = cs.fold((f64::INFINITY, 0.0f64), |(lo, hi), c| {
            (lo.min(c), hi.max(c))
        });
        if self.rows.is_empty() || lo == 0.0 {
            0.0
        } else {
            hi / lo - 1.0
        }
    }

    /// CSV in table column order, with `r_a` in percent and trailing
    /// warmup, `D̂` and epoch columns. MoE-only cells are empty for dense rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(PLAN_COLUMNS)?;
        for r in &self.rows {
            w.write_record(row_cells(r))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Numerical(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub const PLAN_COLUMNS: [&str; 23] = [
    "N",
    "N_a",
    "r_a",
    "M",
    "D",
    "C",
    "D/N",
    "L",
    "H",
    "D_m",
    "D_ffn",
    "μ",
    "E",
    "K",
    "D_e",
    "D_se",
    "η",
    "B",
    "Iters",
    "Warmup",
    "D̂",
    "Epoch",
    "arrangement",
];

fn row_cells(r: &SweepRow) -> Vec<String> {
    let b = &r.budget;
    let d = r.shape.dense();
    let moe = r.shape.as_moe();
    let opt = |v: Option<String>| v.unwrap_or_default();
    vec![
        b.total_params.to_string(),
        b.active_params.to_string(),
        format!("{:.2}", 100.0 * b.activation_rate),
        b.train_flops_per_token.to_string(),
        b.tokens.to_string(),
        format!("{:.4e}", b.train_compute),
        format!("{:.2}", b.tokens_per_param),
        d.layers.to_string(),
        d.heads.to_string(),
        d.model_dim.to_string(),
        d.ffn_dim.to_string(),
        opt(moe.map(|m| format!("{:.2}", m.mu()))),
        opt(moe.map(|m| m.experts.to_string())),
        opt(moe.map(|m| m.top_k.to_string())),
        opt(moe.map(|m| m.expert_dim.to_string())),
        opt(moe.map(|m| m.shared_expert_dim.to_string())),
        format!("{:.3e}", r.eta),
        r.batch.to_string(),
        r.iterations.to_string(),
        r.warmup_iters.to_string(),
        opt(r.reuse.as_ref().map(|p| p.unique_tokens.to_string())),
        opt(r.reuse.as_ref().map(|p| format!("{:.2}", p.epochs))),
        opt(moe.map(|m| m.arrangement.as_str().to_string())),
    ]
}

/// Builds a sweep over `shapes` holding `C` or `D` at `value`. Rows are
/// sorted by activation rate.
pub fn build_sweep(
    fixed: Fixed,
    value: f64,
    shapes: &[AnyShape],
    hparams: Option<&HparamSource>,
    reuse: Option<ReuseSpec>,
) -> Result<SweepPlan> {
    let hparams =
        hparams.ok_or_else(|| Error::invalid("sweep", "no learning-rate/batch-size source"))?;
    if let HparamSource::PerRow(v) = hparams {
        if v.len() != shapes.len() {
            return Err(Error::invalid(
                "sweep",
                format!(
                    "{} hyperparameter rows for {} shapes",
                    v.len(),
                    shapes.len()
                ),
            ));
        }
    }
    if !(value.is_finite() && value >= 0.0) {
        return Err(Error::invalid(
            "sweep",
            "fixed value must be non-negative and finite",
        ));
    }
    let mut rows = Vec::with_capacity(shapes.len());
    for (i, shape) in shapes.iter().enumerate() {
        shape.validate()?;
        let probe = shape.budget(0)?;
        let tokens = match fixed {
            Fixed::C => tokens_for_compute(value, probe.fwd_flops_per_token as f64)?,
            Fixed::D => {
                if value >= u64::MAX as f64 {
                    return Err(Error::invalid("sweep", "token count overflows 64 bits"));
                }
                value.round() as u64
            }
        };
        let reuse_plan = match reuse {
            None => None,
            Some(ReuseSpec::Strict { unique_tokens }) => Some(strict_reuse(tokens, unique_tokens)?),
            Some(ReuseSpec::Loose) => Some(loose_reuse(tokens)),
        };
        let tokens = reuse_plan.as_ref().map_or(tokens, |p| p.consumed_tokens);
        let budget = probe.with_tokens(tokens);
        let hp = match hparams {
            HparamSource::PerRow(v) => v[i],
            HparamSource::Constant(h) => *h,
            HparamSource::Fit { eta, batch, basis } => {
                let n = match basis {
                    ParamBasis::Total => budget.total_params,
                    ParamBasis::Active => budget.active_params,
                } as f64;
                RowHparams {
                    eta: eta.predict(n, tokens as f64),
                    batch: snap_batch(batch.predict(n, tokens as f64)),
                }
            }
        };
        if !(hp.eta.is_finite() && hp.eta > 0.0) || hp.batch == 0 {
            return Err(Error::invalid(
                "sweep",
                format!("row {}: bad η or B", i + 1),
            ));
        }
        let iters = iterations(tokens, hp.batch, shape.dense().seq_len)?;
        rows.push(SweepRow {
            shape: *shape,
            budget,
            eta: hp.eta,
            batch: hp.batch,
            iterations: iters,
            warmup_iters: warmup_iters(iters),
            reuse: reuse_plan,
        });
    }
    rows.sort_by(|a, b| {
        a.budget
            .activation_rate
            .total_cmp(&b.budget.activation_rate)
    });
    let plan = SweepPlan {
        fixed,
        value,
        rows,
        recipe: Recipe::default(),
    };
    if fixed == Fixed::C && plan.compute_spread() > FIXED_C_BAND {
        return Err(Error::Numerical(format!(
            "fixed-C sweep spread {:.4} exceeds {FIXED_C_BAND}",
            plan.compute_spread()
        )));
    }
    Ok(plan)
}

/// Shapes and printed `(η, B)` of every row of a fixture table.
pub fn table_shapes(table: &FixtureTable) -> Result<(Vec<AnyShape>, Vec<RowHparams>)> {
    let mut shapes = Vec::new();
    let mut hps = Vec::new();
    for (i, row) in table.rows.iter().enumerate() {
        shapes.push(table.shape(i)?);
        let (Some(eta), Some(batch)) = (row.get("η"), row.get("B")) else {
            return Err(Error::Fixture {
                path: table.path.clone(),
                reason: format!("row {}: missing η or B", i + 1),
            });
        };
        hps.push(RowHparams {
            eta,
            batch: batch.round() as u64,
        });
    }
    Ok((shapes, hps))
}
