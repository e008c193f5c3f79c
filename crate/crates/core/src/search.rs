//! Integer configuration search for MoE stacks at a target total parameter
//! count and activation rate, plus matched dense baselines.
//!
//! For each layer count `L` the model width is the multiple of `D_h` nearest
//! to `ζ·L`. The active width `β` is solved from the target `r_a` using the
//! exact `N_a/N` ratio of the stack (dense layers included), then split as
//! `D_se = K·D_e` and integerized. The expert count follows from `μ`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::{Arrangement, DenseShape, DerivedBudget, MoeShape};
use crate::error::{Error, Result};

/// Constraints and targets for [`search`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpec {
    pub target_n: u64,
    pub target_ra: f64,
    /// Aspect ratio `ζ = D_m / L`.
    pub zeta: f64,
    /// Total expert width ratio `μ`.
    pub mu: f64,
    /// FFN ratio `α` of the dense layers.
    pub alpha: f64,
    pub head_dim: u64,
    pub arrangement: Arrangement,
    pub seq_len: u64,
    /// Smallest preferred `K`. `K = 1` is only used when nothing with
    /// `K >= k_min` meets the tolerances.
    pub k_min: u64,
    pub k_max: u64,
    /// `K` closest to this wins ties in score.
    pub preferred_k: u64,
    pub expert_dim_multiple: u64,
    pub max_experts: u64,
    pub shared_expert: bool,
    /// Weight of the absolute `r_a` residual against the relative `N` residual.
    pub ra_penalty: f64,
    /// Largest accepted `|N / target_n - 1|`.
    pub n_tolerance: f64,
    /// Largest accepted `|r_a / target_ra - 1|`.
    pub ra_tolerance: f64,
}

impl Default for SearchSpec {
    fn default() -> Self {
        SearchSpec {
            target_n: 0,
            target_ra: 0.2,
            zeta: 88.0,
            mu: 22.0,
            alpha: 2.77,
            head_dim: 128,
            arrangement: Arrangement::OneDense,
            seq_len: 2048,
            k_min: 2,
            k_max: 16,
            preferred_k: 6,
            expert_dim_multiple: 32,
            max_experts: 128,
            shared_expert: true,
            ra_penalty: 1.0,
            n_tolerance: 0.02,
            ra_tolerance: 0.01,
        }
    }
}

impl SearchSpec {
    pub fn new(target_n: u64, target_ra: f64) -> Self {
        SearchSpec {
            target_n,
            target_ra,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid("search spec", reason));
        if self.target_n == 0 {
            return bad("target N must be positive");
        }
        if !(self.target_ra > 0.0 && self.target_ra <= 1.0) {
            return bad("target r_a must lie in (0, 1]");
        }
        for (name, v) in [("zeta", self.zeta), ("mu", self.mu), ("alpha", self.alpha)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(
                    "search spec",
                    format!("{name} must be positive and finite"),
                ));
            }
        }
        if self.head_dim == 0 || self.seq_len == 0 || self.expert_dim_multiple == 0 {
            return bad("head_dim, seq_len and expert_dim_multiple must be positive");
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return bad("need 1 <= k_min <= k_max");
        }
        if !(self.ra_penalty >= 0.0 && self.n_tolerance >= 0.0 && self.ra_tolerance >= 0.0) {
            return bad("penalty and tolerances must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `N / target_n - 1`.
    pub n_rel: f64,
    /// `r_a - target_ra`, as a fraction.
    pub ra_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigCandidate {
    pub shape: MoeShape,
    pub budget: DerivedBudget,
    pub residuals: Residuals,
    pub score: f64,
}

/// Ranked candidates, best first. When empty, `diagnostic` says which
/// constraint removed everything.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub candidates: Vec<ConfigCandidate>,
    pub diagnostic: Option<String>,
}

#[derive(Default)]
struct Rejections {
    layers: u64,
    no_moe_layer: u64,
    beta: u64,
    expert_count: u64,
    n_residual: u64,
    ra_residual: u64,
}

impl fmt::Display for Rejections {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} layer counts tried; rejected: {} without an MoE layer, \
             {} with non-positive active width, {} with no expert count in [K, max_experts], \
             {} outside the N tolerance, {} outside the r_a tolerance",
            self.layers,
            self.no_moe_layer,
            self.beta,
            self.expert_count,
            self.n_residual,
            self.ra_residual
        )
    }
}

/// Multiple of `step` nearest to `x`, at least `step`.
fn snap(x: f64, step: u64) -> u64 {
    ((x / step as f64).round() as u64).max(1) * step
}

fn layer_width(zeta: f64, layers: u64, head_dim: u64) -> u64 {
    snap(zeta * layers as f64, head_dim)
}

fn dense_ffn(alpha: f64, model_dim: u64) -> u64 {
    snap(alpha * model_dim as f64, 8)
}

/// Upper bound on layer counts worth trying: past this even the attention
/// weights alone exceed the target.
fn max_layers(target_n: u64, zeta: f64, head_dim: u64, tolerance: f64) -> u64 {
    let limit = target_n as f64 * (1.0 + tolerance);
    let mut l = 1;
    loop {
        let d = layer_width(zeta, l, head_dim) as f64;
        if 4.0 * d * d * l as f64 > limit || l > 100_000 {
            return l;
        }
        l += 1;
    }
}

fn base_shape(
    layers: u64,
    model_dim: u64,
    ffn_dim: u64,
    head_dim: u64,
    seq_len: u64,
) -> DenseShape {
    DenseShape {
        layers,
        model_dim,
        ffn_dim,
        heads: model_dim / head_dim,
        head_dim,
        seq_len,
    }
}

/// Searches for MoE shapes near `(target_n, target_ra)`. Deterministic.
pub fn search(spec: &SearchSpec) -> Result<SearchReport> {
    spec.validate()?;
    let smallest = layer_width(spec.zeta, 1, spec.head_dim).pow(2) * 4;
    if smallest as f64 > spec.target_n as f64 * (1.0 + spec.n_tolerance) {
        return Ok(SearchReport {
            candidates: Vec::new(),
            diagnostic: Some(format!(
                "target N={} is below the attention weights of a single layer ({smallest})",
                spec.target_n
            )),
        });
    }
    let mut rej = Rejections::default();
    let mut found = enumerate(spec, spec.k_min..=spec.k_max, &mut rej);
    if found.is_empty() && spec.k_min > 1 {
        found = enumerate(spec, 1..=1, &mut rej);
    }
    let candidates = rank(spec, found);
    let diagnostic = candidates
        .is_empty()
        .then(|| format!("no configuration meets the constraints: {rej}"));
    Ok(SearchReport {
        candidates,
        diagnostic,
    })
}

fn enumerate(
    spec: &SearchSpec,
    ks: std::ops::RangeInclusive<u64>,
    rej: &mut Rejections,
) -> Vec<ConfigCandidate> {
    let mut out = Vec::new();
    let max_l = max_layers(spec.target_n, spec.zeta, spec.head_dim, spec.n_tolerance);
    let step = spec.expert_dim_multiple;
    for layers in 1..=max_l {
        rej.layers += 1;
        let d_m = layer_width(spec.zeta, layers, spec.head_dim);
        let d_ffn = dense_ffn(spec.alpha, d_m);
        let base = base_shape(layers, d_m, d_ffn, spec.head_dim, spec.seq_len);
        let (moe_layers, dense_layers) = spec.arrangement.split(layers);
        if moe_layers == 0 {
            rej.no_moe_layer += 1;
            continue;
        }
        let dm = d_m as f64;
        let dense_n = dense_layers as f64 * dm * (4.0 * dm + 3.0 * d_ffn as f64);
        let total_n = moe_layers as f64 * dm * dm * (4.0 + 3.0 * spec.mu) + dense_n;
        let beta =
            ((spec.target_ra * total_n - dense_n) / (dm * dm * moe_layers as f64) - 4.0) / 3.0;
        if beta <= 0.0 {
            rej.beta += 1;
            continue;
        }
        for k in ks.clone() {
            let per_expert = beta * dm / if spec.shared_expert { 2 * k } else { k } as f64;
            let lo = ((per_expert / step as f64).floor() as u64).max(1) * step;
            let hi = ((per_expert / step as f64).ceil() as u64).max(1) * step;
            let mut widths = vec![lo];
            if hi != lo {
                widths.push(hi);
            }
            for d_e in widths {
                let d_se = if spec.shared_expert { k * d_e } else { 0 };
                let routed = (spec.mu * dm - d_se as f64) / d_e as f64;
                let mut counts = vec![routed.floor(), routed.ceil()];
                counts.dedup();
                let mut any = false;
                for e in counts {
                    if !(e >= k as f64 && e <= spec.max_experts as f64) {
                        continue;
                    }
                    any = true;
                    let Ok(shape) = MoeShape::with_arrangement(
                        base,
                        spec.arrangement,
                        e as u64,
                        k,
                        d_e,
                        d_se,
                        false,
                    ) else {
                        continue;
                    };
                    let Ok(budget) = shape.budget(0) else {
                        continue;
                    };
                    let n_rel = budget.total_params as f64 / spec.target_n as f64 - 1.0;
                    let ra_abs = budget.activation_rate - spec.target_ra;
                    if n_rel.abs() > spec.n_tolerance {
                        rej.n_residual += 1;
                        continue;
                    }
                    if ra_abs.abs() > spec.ra_tolerance * spec.target_ra {
                        rej.ra_residual += 1;
                        continue;
                    }
                    out.push(ConfigCandidate {
                        shape,
                        budget,
                        residuals: Residuals { n_rel, ra_abs },
                        score: n_rel.abs() + spec.ra_penalty * ra_abs.abs(),
                    });
                }
                if !any {
                    rej.expert_count += 1;
                }
            }
        }
    }
    out
}

fn rank(spec: &SearchSpec, mut found: Vec<ConfigCandidate>) -> Vec<ConfigCandidate> {
    let key = |c: &ConfigCandidate| {
        let s = &c.shape;
        (
            s.top_k.abs_diff(spec.preferred_k),
            s.base.layers,
            s.top_k,
            s.expert_dim,
            s.experts,
        )
    };
    found.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then_with(|| key(a).cmp(&key(b)))
    });
    found.dedup_by(|a, b| a.shape == b.shape);
    found
}

/// Dense shape with `N` within 2% of `target_n`, width `D_m` the multiple of
/// `head_dim` nearest `ζ·L` and `D_ffn` the multiple of 8 nearest `α·D_m`.
/// Picks the smallest `|ΔN|`, then the smallest `L`.
pub fn dense_baseline(
    target_n: u64,
    zeta: f64,
    alpha: f64,
    head_dim: u64,
    seq_len: u64,
) -> Result<DenseShape> {
    const TOLERANCE: f64 = 0.02;
    if target_n == 0 || head_dim == 0 || seq_len == 0 {
        return Err(Error::invalid(
            "dense baseline",
            "target N, head_dim and seq_len must be positive",
        ));
    }
    if !(zeta.is_finite() && zeta > 0.0 && alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid(
            "dense baseline",
            "zeta and alpha must be positive and finite",
        ));
    }
    let mut best: Option<(f64, DenseShape)> = None;
    for layers in 1..=max_layers(target_n, zeta, head_dim, TOLERANCE) {
        let d_m = layer_width(zeta, layers, head_dim);
        let shape = base_shape(layers, d_m, dense_ffn(alpha, d_m), head_dim, seq_len);
        let n = crate::arch::dense_params(&shape)?;
        let dn = (n as f64 / target_n as f64 - 1.0).abs();
        if dn <= TOLERANCE && best.as_ref().is_none_or(|(b, _)| dn < *b) {
            best = Some((dn, shape));
        }
    }
    best.map(|(_, s)| s).ok_or_else(|| {
        Error::Infeasible(format!(
            "no dense shape within 2% of N={target_n} at zeta={zeta}, alpha={alpha}, D_h={head_dim}"
        ))
    })
}
