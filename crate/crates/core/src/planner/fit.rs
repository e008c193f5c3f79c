//! Log-space least-squares fits of `value = exp(a)·N^b·D^c` for the optimal
//! learning rate and batch size.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixtures::FixtureTable;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HparamPoint {
    #[serde(rename = "N")]
    pub params: f64,
    #[serde(rename = "D")]
    pub tokens: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// `a` in `ln value = a + b·ln N + c·ln D`.
    pub log_coefficient: f64,
    pub exponent_n: f64,
    pub exponent_d: f64,
    /// RMS of the log-space residuals.
    pub residual_rms: f64,
    pub max_abs_log_residual: f64,
    pub n_points: usize,
    /// Exponents pinned to zero because the points do not vary along them.
    pub fixed_exponents: Vec<String>,
}

impl PowerLawFit {
    pub fn predict(&self, params: f64, tokens: f64) -> f64 {
        (self.log_coefficient + self.exponent_n * params.ln() + self.exponent_d * tokens.ln()).exp()
    }
}

/// Smallest tolerated ratio of the least to the greatest singular value of
/// the centred design.
const COLLINEAR_RATIO: f64 = 1e-7;

fn varies(xs: &[f64]) -> bool {
    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    hi - lo > 1e-9 * lo.abs().max(1.0)
}

/// Fits `ln value = a + b·ln N + c·ln D`. An exponent whose variable is
/// constant across the points is fixed to 0 and listed in
/// `fixed_exponents`. Needs at least two points and at least as many points
/// as free coefficients.
pub fn fit_hparam_power_law(points: &[HparamPoint]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::Identifiability(format!(
            "{} point(s); at least 2 are needed",
            points.len()
        )));
    }
    for p in points {
        if !(p.params > 0.0 && p.tokens > 0.0 && p.value > 0.0)
            || !(p.params.is_finite() && p.tokens.is_finite() && p.value.is_finite())
        {
            return Err(Error::invalid(
                "power-law point",
                format!("N, D and value must be positive and finite, got {p:?}"),
            ));
        }
    }
    let ln_n: Vec<f64> = points.iter().map(|p| p.params.ln()).collect();
    let ln_d: Vec<f64> = points.iter().map(|p| p.tokens.ln()).collect();
    let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.value.ln()));

    let mut fixed = Vec::new();
    let mut cols: Vec<&[f64]> = Vec::new();
    if varies(&ln_n) {
        cols.push(&ln_n);
    } else {
        fixed.push("N".to_string());
    }
    if varies(&ln_d) {
        cols.push(&ln_d);
    } else {
        fixed.push("D".to_string());
    }
    let free = cols.len() + 1;
    if points.len() < free {
        return Err(Error::Identifiability(format!(
            "{} points for {free} free coefficients",
            points.len()
        )));
    }

    // Centred regressors are orthogonal to the intercept column, so the
    // intercept is the mean of ln value and the slopes come from a QR solve.
    let means: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let y_mean = y.mean();
    let z = DMatrix::from_fn(points.len(), cols.len(), |i, j| cols[j][i] - means[j]);
    let slopes = if cols.is_empty() {
        DVector::zeros(0)
    } else {
        let eig = (z.transpose() * &z).symmetric_eigenvalues();
        if eig.min() <= COLLINEAR_RATIO * COLLINEAR_RATIO * eig.max() {
            return Err(Error::Identifiability(
                "ln N and ln D are collinear across the points; vary them independently".into(),
            ));
        }
        let qr = z.clone().qr();
        let qty = qr.q().transpose() * y.add_scalar(-y_mean);
        qr.r()
            .solve_upper_triangular(&qty)
            .ok_or_else(|| Error::Numerical("singular least-squares system".into()))?
    };
    let mut beta = DVector::zeros(free);
    beta[0] = y_mean;
    beta.rows_mut(1, cols.len()).copy_from(&slopes);
    let x = DMatrix::from_fn(
        points.len(),
        free,
        |i, j| if j == 0 { 1.0 } else { z[(i, j - 1)] },
    );

    let mut exps = [0.0, 0.0];
    let mut k = 1;
    if varies(&ln_n) {
        exps[0] = beta[k];
        k += 1;
    }
    if varies(&ln_d) {
        exps[1] = beta[k];
    }
    let mut a = beta[0];
    for (j, m) in means.iter().enumerate() {
        a -= beta[j + 1] * m;
    }
    let resid = &y - &x * &beta;
    let rms = (resid.norm_squared() / points.len() as f64).sqrt();
    Ok(PowerLawFit {
        log_coefficient: a,
        exponent_n: exps[0],
        exponent_d: exps[1],
        residual_rms: rms,
        max_abs_log_residual: resid.amax(),
        n_points: points.len(),
        fixed_exponents: fixed,
    })
}

/// Which fixture column supplies the fitted quantity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HparamTarget {
    Eta,
    Batch,
}

impl HparamTarget {
    pub fn column(self) -> &'static str {
        match self {
            HparamTarget::Eta => "η",
            HparamTarget::Batch => "B",
        }
    }
}

impl std::str::FromStr for HparamTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eta" | "lr" | "η" => Ok(HparamTarget::Eta),
            "batch" | "B" => Ok(HparamTarget::Batch),
            other => Err(Error::invalid(
                "target",
                format!("{other:?} (expected eta or batch)"),
            )),
        }
    }
}

/// Parameter count used as the `N` regressor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamBasis {
    /// The table's total `N`.
    Total,
    /// The row's activated `N_a`.
    Active,
}

impl std::str::FromStr for ParamBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" | "N" => Ok(ParamBasis::Total),
            "active" | "N_a" => Ok(ParamBasis::Active),
            other => Err(Error::invalid(
                "basis",
                format!("{other:?} (expected total or active)"),
            )),
        }
    }
}

/// Points `(N, D, value)` from a fixture table, with `N` taken as printed.
pub fn points_from_table(
    table: &FixtureTable,
    target: HparamTarget,
    basis: ParamBasis,
) -> Result<Vec<HparamPoint>> {
    let missing = |col: &str| Error::Fixture {
        path: table.path.clone(),
        reason: format!("no {col} column"),
    };
    (0..table.rows.len())
        .map(|i| {
            let row = &table.rows[i];
            let params = match basis {
                ParamBasis::Total => table.nominal_params(i)?,
                ParamBasis::Active if table.is_dense() => table.nominal_params(i)?,
                ParamBasis::Active => row.get("N_a").ok_or_else(|| missing("N_a"))?,
            };
            Ok(HparamPoint {
                params,
                tokens: table.tokens(i)? as f64,
                value: row
                    .get(target.column())
                    .ok_or_else(|| missing(target.column()))?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisComparison {
    pub total: Option<PowerLawFit>,
    pub active: Option<PowerLawFit>,
    /// Basis with the lower residual RMS, if both fits succeeded. When `N`
    /// is constant across the table the `N_a` fit has one more free
    /// coefficient, so a tie or small margin favours it.
    pub better: Option<ParamBasis>,
}

/// Fits with `N` and with `N_a` as the parameter regressor and reports which
/// explains the column better. A fit that is not identifiable is `None`.
pub fn compare_param_basis(table: &FixtureTable, target: HparamTarget) -> Result<BasisComparison> {
    let fit = |basis| -> Result<Option<PowerLawFit>> {
        match fit_hparam_power_law(&points_from_table(table, target, basis)?) {
            Ok(f) => Ok(Some(f)),
            Err(Error::Identifiability(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let total = fit(ParamBasis::Total)?;
    let active = fit(ParamBasis::Active)?;
    let better = match (&total, &active) {
        (Some(t), Some(a)) => Some(if a.residual_rms < t.residual_rms {
            ParamBasis::Active
        } else {
            ParamBasis::Total
        }),
        _ => None,
    };
    Ok(BasisComparison {
        total,
        active,
        better,
    })
}

/// Nearest multiple of 8, at least 8.
pub fn snap_batch(batch: f64) -> u64 {
    ((batch / 8.0).round().max(1.0) as u64) * 8
}
