//! Softmax router with Top-K selection.

use crate::error::{Error, Result};

use super::linalg::Mat;

/// Scores closer than this at the K/K+1 boundary count as a tie.
pub const TIE_EPS: f64 = 1e-9;

/// Top-K routing rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Routing {
    top_k: usize,
    normalized: bool,
}

impl Routing {
    /// Normalized gating with `K = 1` is rejected: the single selected weight
    /// is identically 1 and the router never receives a gradient.
    pub fn new(top_k: usize, normalized: bool) -> Result<Self> {
        if top_k == 0 {
            return Err(Error::invalid("routing", "K must be >= 1"));
        }
        if normalized && top_k < 2 {
            return Err(Error::invalid(
                "routing",
                "normalized gating requires K >= 2 (K=1 gives a zero gate gradient)",
            ));
        }
        Ok(Routing { top_k, normalized })
    }

    /// Skips the `normalized ⇒ K ≥ 2` check. Only useful for demonstrating the
    /// zero-gradient pathology.
    #[doc(hidden)]
    pub fn new_unchecked(top_k: usize, normalized: bool) -> Self {
        Routing { top_k, normalized }
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub(crate) fn check_experts(&self, experts: usize) -> Result<()> {
        if self.top_k == 0 || self.top_k > experts {
            return Err(Error::invalid(
                "routing",
                format!("K must satisfy 1 <= K <= E (K={}, E={experts})", self.top_k),
            ));
        }
        Ok(())
    }
}

/// Router weights `W_g` of shape `E × D_m`. No bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub weight: Mat,
}

impl GateParams {
    pub fn experts(&self) -> usize {
        self.weight.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Routing decision for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct GateOutput {
    /// Softmax scores over all experts.
    pub scores: Vec<f64>,
    /// Selected experts in ascending index order.
    pub selected: Vec<usize>,
    /// Combination weights, zero off the selected set.
    pub weights: Vec<f64>,
    pub normalized: bool,
}

impl GateOutput {
    pub fn experts(&self) -> usize {
        self.scores.len()
    }

    pub fn top_k(&self) -> usize {
        self.selected.len()
    }

    /// Gap between the K-th and (K+1)-th largest scores; infinite when every
    /// expert is selected.
    pub fn selection_margin(&self) -> f64 {
        let k = self.selected.len();
        if k >= self.scores.len() {
            return f64::INFINITY;
        }
        let mut sorted = self.scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        sorted[k - 1] - sorted[k]
    }

    pub fn near_tie(&self, eps: f64) -> bool {
        self.selection_margin() <= eps
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Indices of the `k` largest values, lowest index first on ties, returned
/// in ascending index order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut picked = order[..k.min(values.len())].to_vec();
    picked.sort_unstable();
    picked
}

/// Routes one token given its router logits.
///
/// Selection runs on the logits: softmax is monotone so the selected set is
/// the same as on the scores, and it stays exact when scores underflow.
pub fn gate_from_logits(logits: &[f64], routing: Routing) -> Result<GateOutput> {
    routing.check_experts(logits.len())?;
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numerical("non-finite router logit".into()));
    }
    let scores = softmax(logits);
    let selected = top_k_indices(logits, routing.top_k);
    let mut weights = vec![0.0; scores.len()];
    if routing.normalized {
        let mass: f64 = selected.iter().map(|&i| scores[i]).sum();
        for &i in &selected {
            weights[i] = scores[i] / mass;
        }
    } else {
        for &i in &selected {
            weights[i] = scores[i];
        }
    }
    Ok(GateOutput {
        scores,
        selected,
        weights,
        normalized: routing.normalized,
    })
}

/// `s = softmax(W_g·x)`, Top-K selection and (optionally normalized) weights.
pub fn gate_forward(gate: &GateParams, x: &[f64], routing: Routing) -> Result<GateOutput> {
    if x.len() != gate.model_dim() {
        return Err(Error::invalid(
            "gate input",
            format!("expected length {}, got {}", gate.model_dim(), x.len()),
        ));
    }
    gate_from_logits(&gate.weight.matvec(x), routing)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_normalized_example() {
        let g = gate_from_logits(&[2.0, 1.0, 0.0, -1.0], Routing::new(2, false).unwrap()).unwrap();
        assert_eq!(g.selected, vec![0, 1]);
        // e^2, e^1 over e^2 + e + 1 + e^-1
        let z: f64 = [2.0f64, 1.0, 0.0, -1.0].iter().map(|v| v.exp()).sum();
        assert!((g.weights[0] - 2f64.exp() / z).abs() < 1e-15);
        assert!((g.weights[0] - 0.6439).abs() < 5e-5);
        assert!((g.weights[1] - 0.2369).abs() < 5e-5);
        assert_eq!(&g.weights[2..], &[0.0, 0.0]);
    }

    #[test]
    fn normalized_example() {
        let g = gate_from_logits(&[2.0, 1.0, 0.0, -1.0], Routing::new(2, true).unwrap()).unwrap();
        assert!((g.weights[0] - 0.7311).abs() < 5e-5);
        assert!((g.weights[1] - 0.2689).abs() < 5e-5);
        assert!((g.weights[0] + g.weights[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        for k in 1..=5 {
            let g = gate_from_logits(&[0.5; 5], Routing::new(k, false).unwrap()).unwrap();
            assert_eq!(g.selected, (0..k).collect::<Vec<_>>());
            for &i in &g.selected {
                assert!((g.scores[i] - 0.2).abs() < 1e-15);
            }
            assert!(g.near_tie(TIE_EPS) || k == 5);
        }
    }

    #[test]
    fn routing_preconditions() {
        assert!(Routing::new(0, false).is_err());
        assert!(Routing::new(1, true).is_err());
        assert!(Routing::new(1, false).is_ok());
        assert!(gate_from_logits(&[0.0, 1.0], Routing::new(3, false).unwrap()).is_err());
    }

    #[test]
    fn margin_of_full_selection_is_infinite() {
        let g = gate_from_logits(&[0.0, 1.0], Routing::new(2, false).unwrap()).unwrap();
        assert!(g.selection_margin().is_infinite());
    }
}
