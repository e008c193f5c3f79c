//! Closed-form parameter and FLOP accounting for dense and MoE transformer
//! shapes.
//!
//! Counts exclude embeddings, norms and the router. For a dense stack
//! `N = (4 + 3α)·D_m²·L` and the per-token forward cost is
//! `M_fwd = 2N + 4·D_m·S·L`. For an MoE stack the routed layers contribute
//! `(4 + 3μ)·D_m²` total and `(4 + 3β)·D_m²` active parameters per layer, and
//! `M_fwd = 2·N_a + 4·D_m·S·L`. Training cost per token is `3·M_fwd`.
//!
//! Because `α·D_m = D_ffn`, `μ·D_m = D_se + E·D_e` and `β·D_m = D_se + K·D_e`,
//! every count here is an exact integer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layout of MoE and dense layers through the stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// Every layer is an MoE layer.
    Full,
    /// The first layer is dense, the rest are MoE.
    OneDense,
    /// Dense and MoE layers alternate.
    Interleave,
}

impl Arrangement {
    /// `(moe_layers, dense_layers)` for a stack of `layers` layers.
    pub fn split(self, layers: u64) -> (u64, u64) {
        match self {
            Arrangement::Full => (layers, 0),
            Arrangement::OneDense => (layers.saturating_sub(1), layers.min(1)),
            Arrangement::Interleave => {
                let moe = layers.div_ceil(2);
                (moe, layers - moe)
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arrangement::Full => "full",
            Arrangement::OneDense => "one_dense",
            Arrangement::Interleave => "interleave",
        }
    }
}

impl std::str::FromStr for Arrangement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Arrangement::Full),
            "one_dense" | "1dense" => Ok(Arrangement::OneDense),
            "interleave" => Ok(Arrangement::Interleave),
            other => Err(Error::invalid(
                "arrangement",
                format!("unknown arrangement {other:?} (expected full, one_dense or interleave)"),
            )),
        }
    }
}

/// Hyperparameters of a dense decoder stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ShapeRecord", into = "ShapeRecord")]
pub struct DenseShape {
    pub layers: u64,
    pub model_dim: u64,
    pub ffn_dim: u64,
    pub heads: u64,
    pub head_dim: u64,
    pub seq_len: u64,
}

impl DenseShape {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("dense shape", reason));
        if self.layers < 1 {
            return bad("L must be >= 1".into());
        }
        if self.model_dim < 1 {
            return bad("D_m must be >= 1".into());
        }
        if self.ffn_dim < 1 {
            return bad("D_ffn must be >= 1".into());
        }
        if self.seq_len < 1 {
            return bad("S must be >= 1".into());
        }
        if self.heads.checked_mul(self.head_dim) != Some(self.model_dim) {
            return bad(format!(
                "H * D_h must equal D_m (H={}, D_h={}, D_m={})",
                self.heads, self.head_dim, self.model_dim
            ));
        }
        Ok(())
    }

    /// `α = D_ffn / D_m`
    pub fn alpha(&self) -> f64 {
        self.ffn_dim as f64 / self.model_dim as f64
    }

    /// `γ = S / D_m`
    pub fn gamma(&self) -> f64 {
        self.seq_len as f64 / self.model_dim as f64
    }

    /// Aspect ratio `ζ = D_m / L`.
    pub fn zeta(&self) -> f64 {
        self.model_dim as f64 / self.layers as f64
    }

    pub fn budget(&self, tokens: u64) -> Result<DerivedBudget> {
        let n = dense_params(self)?;
        let m = dense_fwd_flops(self)?;
        Ok(DerivedBudget::new(n, n, m, tokens))
    }
}

/// Hyperparameters of an MoE decoder stack. `base.ffn_dim` is the width of
/// the dense layers only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ShapeRecord", into = "ShapeRecord")]
pub struct MoeShape {
    pub base: DenseShape,
    pub moe_layers: u64,
    pub dense_layers: u64,
    pub experts: u64,
    pub top_k: u64,
    pub expert_dim: u64,
    /// 0 means no shared expert.
    pub shared_expert_dim: u64,
    pub arrangement: Arrangement,
    pub gate_normalized: bool,
}

impl MoeShape {
    /// Builds a shape whose `L_e`/`L_d` split follows `arrangement`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_arrangement(
        base: DenseShape,
        arrangement: Arrangement,
        experts: u64,
        top_k: u64,
        expert_dim: u64,
        shared_expert_dim: u64,
        gate_normalized: bool,
    ) -> Result<Self> {
        let (moe_layers, dense_layers) = arrangement.split(base.layers);
        let shape = MoeShape {
            base,
            moe_layers,
            dense_layers,
            experts,
            top_k,
            expert_dim,
            shared_expert_dim,
            arrangement,
            gate_normalized,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let bad = |reason: String| Err(Error::invalid("moe shape", reason));
        if self.moe_layers < 1 {
            return bad("L_e must be >= 1".into());
        }
        if self.moe_layers + self.dense_layers != self.base.layers {
            return bad(format!(
                "L_e + L_d must equal L ({} + {} != {})",
                self.moe_layers, self.dense_layers, self.base.layers
            ));
        }
        if self.top_k < 1 || self.top_k > self.experts {
            return bad(format!(
                "K must satisfy 1 <= K <= E (K={}, E={})",
                self.top_k, self.experts
            ));
        }
        if self.expert_dim < 1 {
            return bad("D_e must be >= 1".into());
        }
        if self.gate_normalized && self.top_k < 2 {
            return bad(
                "normalized gating requires K >= 2 (K=1 gives a zero gate gradient)".into(),
            );
        }
        Ok(())
    }

    /// Total expert width ratio `μ = (D_se + E·D_e) / D_m`.
    pub fn mu(&self) -> f64 {
        self.total_expert_width() as f64 / self.base.model_dim as f64
    }

    /// Active expert width ratio `β = (D_se + K·D_e) / D_m`.
    pub fn beta(&self) -> f64 {
        self.active_expert_width() as f64 / self.base.model_dim as f64
    }

    pub fn total_expert_width(&self) -> u64 {
        self.shared_expert_dim + self.experts * self.expert_dim
    }

    pub fn active_expert_width(&self) -> u64 {
        self.shared_expert_dim + self.top_k * self.expert_dim
    }

    pub fn budget(&self, tokens: u64) -> Result<DerivedBudget> {
        let p = moe_params(self)?;
        let m = moe_fwd_flops(self)?;
        Ok(DerivedBudget::new(p.total, p.active, m, tokens))
    }
}

/// Either kind of shape, as read from a shape file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ShapeRecord", into = "ShapeRecord")]
pub enum AnyShape {
    Dense(DenseShape),
    Moe(MoeShape),
}

impl AnyShape {
    pub fn dense(&self) -> &DenseShape {
        match self {
            AnyShape::Dense(d) => d,
            AnyShape::Moe(m) => &m.base,
        }
    }

    pub fn budget(&self, tokens: u64) -> Result<DerivedBudget> {
        match self {
            AnyShape::Dense(d) => d.budget(tokens),
            AnyShape::Moe(m) => m.budget(tokens),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AnyShape::Dense(d) => d.validate(),
            AnyShape::Moe(m) => m.validate(),
        }
    }

    pub fn as_moe(&self) -> Option<&MoeShape> {
        match self {
            AnyShape::Moe(m) => Some(m),
            AnyShape::Dense(_) => None,
        }
    }
}

impl From<DenseShape> for AnyShape {
    fn from(d: DenseShape) -> Self {
        AnyShape::Dense(d)
    }
}

impl From<MoeShape> for AnyShape {
    fn from(m: MoeShape) -> Self {
        AnyShape::Moe(m)
    }
}

/// Flat JSON form shared by all shapes. MoE-only keys are absent for dense
/// shapes.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct ShapeRecord {
    L: u64,
    D_m: u64,
    D_ffn: u64,
    H: u64,
    D_h: u64,
    S: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    L_e: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    L_d: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    E: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    K: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    D_e: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    D_se: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arrangement: Option<Arrangement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gate_normalized: Option<bool>,
}

impl ShapeRecord {
    fn dense(&self) -> DenseShape {
        DenseShape {
            layers: self.L,
            model_dim: self.D_m,
            ffn_dim: self.D_ffn,
            heads: self.H,
            head_dim: self.D_h,
            seq_len: self.S,
        }
    }

    fn has_moe_keys(&self) -> bool {
        self.L_e.is_some()
            || self.L_d.is_some()
            || self.E.is_some()
            || self.K.is_some()
            || self.D_e.is_some()
            || self.D_se.is_some()
            || self.arrangement.is_some()
            || self.gate_normalized.is_some()
    }

    fn into_any(self) -> Result<AnyShape> {
        let base = self.dense();
        if !self.has_moe_keys() {
            base.validate()?;
            return Ok(AnyShape::Dense(base));
        }
        let missing = |k: &str| Error::invalid("moe shape", format!("missing key {k:?}"));
        let arrangement = self.arrangement.ok_or_else(|| missing("arrangement"))?;
        let (split_e, split_d) = arrangement.split(base.layers);
        let shape = MoeShape {
            base,
            moe_layers: self.L_e.unwrap_or(split_e),
            dense_layers: self.L_d.unwrap_or(split_d),
            experts: self.E.ok_or_else(|| missing("E"))?,
            top_k: self.K.ok_or_else(|| missing("K"))?,
            expert_dim: self.D_e.ok_or_else(|| missing("D_e"))?,
            shared_expert_dim: self.D_se.unwrap_or(0),
            arrangement,
            gate_normalized: self.gate_normalized.unwrap_or(false),
        };
        shape.validate()?;
        Ok(AnyShape::Moe(shape))
    }
}

impl TryFrom<ShapeRecord> for AnyShape {
    type Error = Error;
    fn try_from(r: ShapeRecord) -> Result<Self> {
        r.into_any()
    }
}

impl TryFrom<ShapeRecord> for DenseShape {
    type Error = Error;
    fn try_from(r: ShapeRecord) -> Result<Self> {
        match r.into_any()? {
            AnyShape::Dense(d) => Ok(d),
            AnyShape::Moe(_) => Err(Error::invalid(
                "dense shape",
                "unexpected MoE keys in a dense shape",
            )),
        }
    }
}

impl TryFrom<ShapeRecord> for MoeShape {
    type Error = Error;
    fn try_from(r: ShapeRecord) -> Result<Self> {
        match r.into_any()? {
            AnyShape::Moe(m) => Ok(m),
            AnyShape::Dense(_) => Err(Error::invalid("moe shape", "missing MoE keys")),
        }
    }
}

impl From<DenseShape> for ShapeRecord {
    fn from(d: DenseShape) -> Self {
        ShapeRecord {
            L: d.layers,
            D_m: d.model_dim,
            D_ffn: d.ffn_dim,
            H: d.heads,
            D_h: d.head_dim,
            S: d.seq_len,
            L_e: None,
            L_d: None,
            E: None,
            K: None,
            D_e: None,
            D_se: None,
            arrangement: None,
            gate_normalized: None,
        }
    }
}

impl From<MoeShape> for ShapeRecord {
    fn from(m: MoeShape) -> Self {
        ShapeRecord {
            L_e: Some(m.moe_layers),
            L_d: Some(m.dense_layers),
            E: Some(m.experts),
            K: Some(m.top_k),
            D_e: Some(m.expert_dim),
            D_se: Some(m.shared_expert_dim),
            arrangement: Some(m.arrangement),
            gate_normalized: Some(m.gate_normalized),
            ..ShapeRecord::from(m.base)
        }
    }
}

impl From<AnyShape> for ShapeRecord {
    fn from(s: AnyShape) -> Self {
        match s {
            AnyShape::Dense(d) => d.into(),
            AnyShape::Moe(m) => m.into(),
        }
    }
}

/// Budget derived from a shape and a token count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedBudget {
    #[serde(rename = "N")]
    pub total_params: u64,
    #[serde(rename = "N_a")]
    pub active_params: u64,
    #[serde(rename = "r_a")]
    pub activation_rate: f64,
    #[serde(rename = "M_fwd")]
    pub fwd_flops_per_token: u64,
    #[serde(rename = "M_train")]
    pub train_flops_per_token: u64,
    #[serde(rename = "C")]
    pub train_compute: f64,
    #[serde(rename = "D")]
    pub tokens: u64,
    #[serde(rename = "D_over_N")]
    pub tokens_per_param: f64,
}

impl DerivedBudget {
    fn new(total: u64, active: u64, fwd: u64, tokens: u64) -> Self {
        let train = 3 * fwd;
        DerivedBudget {
            total_params: total,
            active_params: active,
            activation_rate: active as f64 / total as f64,
            fwd_flops_per_token: fwd,
            train_flops_per_token: train,
            train_compute: train as f64 * tokens as f64,
            tokens,
            tokens_per_param: tokens as f64 / total as f64,
        }
    }

    /// Same shape, different token count.
    pub fn with_tokens(&self, tokens: u64) -> Self {
        DerivedBudget::new(
            self.total_params,
            self.active_params,
            self.fwd_flops_per_token,
            tokens,
        )
    }
}

/// Total and activated non-embedding parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    #[serde(rename = "N")]
    pub total: u64,
    #[serde(rename = "N_a")]
    pub active: u64,
}

fn to_u64(v: u128, what: &'static str) -> Result<u64> {
    u64::try_from(v).map_err(|_| Error::invalid(what, "count overflows 64 bits"))
}

/// Per-layer parameters of a block with FFN (or expert) width `width`:
/// `D_m·(4·D_m + 3·width)`.
fn layer_params(model_dim: u64, width: u64) -> u128 {
    let d = model_dim as u128;
    d * (4 * d + 3 * width as u128)
}

fn attention_flops(shape: &DenseShape) -> u128 {
    4 * shape.model_dim as u128 * shape.seq_len as u128 * shape.layers as u128
}

/// Non-embedding parameters of a dense stack, `(4 + 3α)·D_m²·L`.
pub fn dense_params(shape: &DenseShape) -> Result<u64> {
    shape.validate()?;
    to_u64(
        layer_params(shape.model_dim, shape.ffn_dim) * shape.layers as u128,
        "dense shape",
    )
}

/// Forward FLOPs per token of a dense stack, `2N + 4·D_m·S·L`.
pub fn dense_fwd_flops(shape: &DenseShape) -> Result<u64> {
    let n = dense_params(shape)? as u128;
    to_u64(2 * n + attention_flops(shape), "dense shape")
}

/// Total and activated parameters of an MoE stack. Router weights are not
/// counted.
pub fn moe_params(shape: &MoeShape) -> Result<ParamCounts> {
    shape.validate()?;
    let d = shape.base.model_dim;
    let dense = layer_params(d, shape.base.ffn_dim) * shape.dense_layers as u128;
    let total = layer_params(d, shape.total_expert_width()) * shape.moe_layers as u128 + dense;
    let active = layer_params(d, shape.active_expert_width()) * shape.moe_layers as u128 + dense;
    Ok(ParamCounts {
        total: to_u64(total, "moe shape")?,
        active: to_u64(active, "moe shape")?,
    })
}

/// `N_a / N`.
pub fn activation_rate(shape: &MoeShape) -> Result<f64> {
    let p = moe_params(shape)?;
    Ok(p.active as f64 / p.total as f64)
}

/// Forward FLOPs per token of an MoE stack, `2·N_a + 4·D_m·S·L`.
pub fn moe_fwd_flops(shape: &MoeShape) -> Result<u64> {
    let p = moe_params(shape)?;
    to_u64(
        2 * p.active as u128 + attention_flops(&shape.base),
        "moe shape",
    )
}

/// Training compute `C = 3·M_fwd·D`.
pub fn training_compute(fwd_flops_per_token: f64, tokens: u64) -> f64 {
    3.0 * fwd_flops_per_token * tokens as f64
}

/// Per-token compute of an MoE stack relative to a dense stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeRatio {
    /// Shape-ratio estimate, exact when both stacks have the same `N`.
    pub formula: f64,
    /// `moe_fwd_flops / dense_fwd_flops` evaluated on the actual shapes.
    pub direct: f64,
}

/// Compute ratio `R_c` of `moe` against `dense`.
///
/// The estimate divides the MoE closed form `2·r_a·N·(1 + 2γ_m/(4+3β))` by
/// the dense closed form `2·N·(1 + 2γ_d/(4+3α))` at a common `N`:
/// `R_c = r_a · (4+3β+2γ_m)/(4+3β) · (4+3α)/(4+3α+2γ_d)`.
pub fn compute_ratio(moe: &MoeShape, dense: &DenseShape) -> Result<ComputeRatio> {
    moe.validate()?;
    dense.validate()?;
    if moe.base.seq_len != dense.seq_len {
        return Err(Error::invalid(
            "compute ratio",
            format!(
                "shapes must share S (moe S={}, dense S={})",
                moe.base.seq_len, dense.seq_len
            ),
        ));
    }
    let ra = activation_rate(moe)?;
    let moe_term = 4.0 + 3.0 * moe.beta();
    let dense_term = 4.0 + 3.0 * dense.alpha();
    let formula = ra * (moe_term + 2.0 * moe.base.gamma()) / moe_term * dense_term
        / (dense_term + 2.0 * dense.gamma());
    let direct = moe_fwd_flops(moe)? as f64 / dense_fwd_flops(dense)? as f64;
    Ok(ComputeRatio { formula, direct })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(layers: u64, d_m: u64, d_ffn: u64) -> DenseShape {
        DenseShape {
            layers,
            model_dim: d_m,
            ffn_dim: d_ffn,
            heads: d_m / 128,
            head_dim: 128,
            seq_len: 2048,
        }
    }

    fn green_7b() -> MoeShape {
        MoeShape {
            base: dense(24, 2048, 5464),
            moe_layers: 23,
            dense_layers: 1,
            experts: 78,
            top_k: 6,
            expert_dim: 512,
            shared_expert_dim: 3072,
            arrangement: Arrangement::OneDense,
            gate_normalized: false,
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a / b - 1.0).abs()
    }

    #[test]
    fn unit_dense_shape_has_seven_params() {
        let s = DenseShape {
            layers: 1,
            model_dim: 1,
            ffn_dim: 1,
            heads: 1,
            head_dim: 1,
            seq_len: 1,
        };
        assert_eq!(dense_params(&s).unwrap(), 7);
    }

    #[test]
    fn dense_7b_matches_table() {
        let s = dense(32, 4096, 11008);
        assert!(rel(dense_params(&s).unwrap() as f64, 6.48e9) <= 0.02);
        let m = dense_fwd_flops(&s).unwrap() as f64;
        assert!(rel(m, 1.403e10) <= 0.01);
        assert!(rel(3.0 * m, 4.21e10) <= 0.01);
    }

    #[test]
    fn dense_2b_matches_table() {
        let s = dense(28, 2176, 8848);
        assert!(rel(dense_params(&s).unwrap() as f64, 2.15e9) <= 0.02);
        assert!(rel(3.0 * dense_fwd_flops(&s).unwrap() as f64, 1.44e10) <= 0.02);
    }

    #[test]
    fn head_product_must_match_model_dim() {
        let mut s = dense(2, 256, 512);
        s.heads = 3;
        let err = dense_params(&s).unwrap_err().to_string();
        assert!(err.contains("H * D_h"), "{err}");
    }

    #[test]
    fn moe_green_rows() {
        let p = moe_params(&green_7b()).unwrap();
        assert!(rel(p.total as f64, 6.52e9) <= 0.02);
        assert!(rel(p.active as f64, 1.31e9) <= 0.02);
        assert!((activation_rate(&green_7b()).unwrap() - 0.2007).abs() <= 0.005);
        assert!(rel(3.0 * moe_fwd_flops(&green_7b()).unwrap() as f64, 9.07e9) <= 0.01);

        let two_b = MoeShape {
            base: dense(16, 1408, 3904),
            moe_layers: 15,
            dense_layers: 1,
            experts: 92,
            top_k: 7,
            expert_dim: 320,
            shared_expert_dim: 2240,
            arrangement: Arrangement::OneDense,
            gate_normalized: false,
        };
        let p = moe_params(&two_b).unwrap();
        assert!(rel(p.total as f64, 2.15e9) <= 0.02);
        assert!(rel(p.active as f64, 4.29e8) <= 0.02);
        assert!(rel(3.0 * moe_fwd_flops(&two_b).unwrap() as f64, 3.13e9) <= 0.01);
    }

    #[test]
    fn pure_moe_closed_form_rate() {
        // β = 2, μ = 16 → (4 + 6) / (4 + 48)
        let s = MoeShape {
            base: dense(4, 2048, 5504),
            moe_layers: 4,
            dense_layers: 0,
            experts: 64,
            top_k: 8,
            expert_dim: 512,
            shared_expert_dim: 0,
            arrangement: Arrangement::Full,
            gate_normalized: false,
        };
        let ra = activation_rate(&s).unwrap();
        assert!((ra - 10.0 / 52.0).abs() < 1e-12);
        assert!((ra - 0.19231).abs() < 1e-5);
    }

    #[test]
    fn all_active_experts_give_full_rate() {
        let mut s = green_7b();
        s.experts = s.top_k;
        s.shared_expert_dim = 0;
        let p = moe_params(&s).unwrap();
        assert_eq!(p.total, p.active);
    }

    #[test]
    fn degenerate_moe_equals_dense() {
        let d = DenseShape {
            layers: 6,
            model_dim: 512,
            ffn_dim: 1536,
            heads: 4,
            head_dim: 128,
            seq_len: 1024,
        };
        let m = MoeShape {
            base: d,
            moe_layers: 6,
            dense_layers: 0,
            experts: 4,
            top_k: 4,
            expert_dim: 384,
            shared_expert_dim: 0,
            arrangement: Arrangement::Full,
            gate_normalized: false,
        };
        assert_eq!(m.budget(1_000_000).unwrap(), d.budget(1_000_000).unwrap());
        let rc = compute_ratio(&m, &d).unwrap();
        assert!((rc.formula - 1.0).abs() < 1e-12);
        assert!((rc.direct - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compute_ratio_7b_green_vs_dense() {
        let rc = compute_ratio(&green_7b(), &dense(32, 4096, 11008)).unwrap();
        assert!(rel(rc.direct, 9.07e9 / 4.21e10) <= 0.01, "{rc:?}");
        assert!(rel(rc.formula, rc.direct) <= 0.05, "{rc:?}");
    }

    #[test]
    fn compute_ratio_increases_with_top_k() {
        let d = dense(32, 4096, 11008);
        let mut prev = (0.0, 0.0);
        for k in 1..=78 {
            let mut m = green_7b();
            m.top_k = k;
            let rc = compute_ratio(&m, &d).unwrap();
            assert!(rc.formula > prev.0 && rc.direct > prev.1, "K={k}");
            prev = (rc.formula, rc.direct);
        }
    }

    #[test]
    fn compute_ratio_rejects_mismatched_seq_len() {
        let mut d = dense(32, 4096, 11008);
        d.seq_len = 4096;
        assert!(compute_ratio(&green_7b(), &d).is_err());
    }

    #[test]
    fn training_compute_examples() {
        assert!(rel(9.07e9 * 3.16e11, 2.86e21) <= 0.01);
        assert!(rel(training_compute(9.07e9 / 3.0, 316_000_000_000), 2.86e21) <= 0.01);
        assert!(rel(training_compute(4.21e10 / 3.0, 130_000_000_000), 5.45e21) <= 0.01);
        assert_eq!(training_compute(1e9, 0), 0.0);
    }

    #[test]
    fn invariants_reject_bad_moe() {
        let mut s = green_7b();
        s.top_k = 0;
        assert!(s.validate().is_err());
        let mut s = green_7b();
        s.top_k = 79;
        assert!(s.validate().is_err());
        let mut s = green_7b();
        s.dense_layers = 2;
        assert!(s.validate().is_err());
        let mut s = green_7b();
        s.top_k = 1;
        s.gate_normalized = true;
        assert!(s.validate().unwrap_err().to_string().contains("K >= 2"));
    }

    #[test]
    fn json_keys_are_exact() {
        let v = serde_json::to_value(green_7b()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        let mut want = vec![
            "L",
            "D_m",
            "D_ffn",
            "H",
            "D_h",
            "S",
            "L_e",
            "L_d",
            "E",
            "K",
            "D_e",
            "D_se",
            "arrangement",
            "gate_normalized",
        ];
        want.sort();
        assert_eq!(keys, want);
        assert_eq!(v["arrangement"], "one_dense");

        let d = serde_json::to_value(dense(32, 4096, 11008)).unwrap();
        assert_eq!(d.as_object().unwrap().len(), 6);

        let b = serde_json::to_value(green_7b().budget(10).unwrap()).unwrap();
        let mut keys: Vec<_> = b.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["C", "D", "D_over_N", "M_fwd", "M_train", "N", "N_a", "r_a"]
        );
    }

    #[test]
    fn any_shape_dispatches_on_keys() {
        let m: AnyShape =
            serde_json::from_value(serde_json::to_value(green_7b()).unwrap()).unwrap();
        assert_eq!(m, AnyShape::Moe(green_7b()));
        let d: AnyShape =
            serde_json::from_str(r#"{"L":2,"D_m":256,"D_ffn":512,"H":2,"D_h":128,"S":16}"#)
                .unwrap();
        assert!(matches!(d, AnyShape::Dense(_)));
        let bad = serde_json::from_str::<AnyShape>(
            r#"{"L":2,"D_m":256,"D_ffn":512,"H":3,"D_h":128,"S":16}"#,
        );
        assert!(bad.is_err());
    }
}
