//! One MoE block: router, routed SwiGLU experts and an optional shared
//! expert.
//!
//! `y = Σ_{i∈T} g_i·E_i(x) + E_se(x)`. The shared expert is always active
//! and ungated. Only the K selected experts are evaluated.
//!
//! The backward pass treats the selected set `T` as constant. Gradients
//! reach the router through the selected weights `g_i` (and, for
//! normalized gating, through the renormalization), plus any extra score
//! gradient supplied by the caller, e.g. from the load-balance loss.

use rand::Rng;

use crate::error::{Error, Result};

use super::expert::{ExpertCache, SwiGluExpert};
use super::gate::{gate_from_logits, GateOutput, GateParams, Routing, TIE_EPS};
use super::linalg::{axpy, dot, Mat};

/// Dimensions of an MoE block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub model_dim: usize,
    pub experts: usize,
    pub expert_dim: usize,
    /// 0 disables the shared expert.
    pub shared_dim: usize,
}

/// Parameters of one block. The same type holds gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeParams {
    pub gate: GateParams,
    pub experts: Vec<SwiGluExpert>,
    pub shared: Option<SwiGluExpert>,
}

impl MoeParams {
    pub fn zeros(dims: BlockDims) -> Self {
        MoeParams {
            gate: GateParams {
                weight: Mat::zeros(dims.experts, dims.model_dim),
            },
            experts: (0..dims.experts)
                .map(|_| SwiGluExpert::zeros(dims.model_dim, dims.expert_dim))
                .collect(),
            shared: (dims.shared_dim > 0)
                .then(|| SwiGluExpert::zeros(dims.model_dim, dims.shared_dim)),
        }
    }

    /// Gaussian init with standard deviation `std` for every tensor.
    pub fn random<R: Rng + ?Sized>(dims: BlockDims, std: f64, rng: &mut R) -> Self {
        MoeParams {
            gate: GateParams {
                weight: Mat::random(dims.experts, dims.model_dim, std, rng),
            },
            experts: (0..dims.experts)
                .map(|_| SwiGluExpert::random(dims.model_dim, dims.expert_dim, std, rng))
                .collect(),
            shared: (dims.shared_dim > 0)
                .then(|| SwiGluExpert::random(dims.model_dim, dims.shared_dim, std, rng)),
        }
    }

    pub fn dims(&self) -> BlockDims {
        BlockDims {
            model_dim: self.gate.model_dim(),
            experts: self.gate.experts(),
            expert_dim: self.experts.first().map_or(0, SwiGluExpert::width),
            shared_dim: self.shared.as_ref().map_or(0, SwiGluExpert::width),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.gate.model_dim();
        if self.experts.len() != self.gate.experts() {
            return Err(Error::invalid(
                "moe params",
                format!(
                    "router has {} rows but there are {} experts",
                    self.gate.experts(),
                    self.experts.len()
                ),
            ));
        }
        let width = self.experts.first().map_or(0, SwiGluExpert::width);
        if self
            .experts
            .iter()
            .any(|e| !e.dims_ok(d) || e.width() != width)
        {
            return Err(Error::invalid(
                "moe params",
                "routed experts must share dimensions",
            ));
        }
        if let Some(se) = &self.shared {
            if !se.dims_ok(d) {
                return Err(Error::invalid(
                    "moe params",
                    "shared expert dimension mismatch",
                ));
            }
        }
        if self.tensors().iter().any(|(_, m)| !m.is_finite()) {
            return Err(Error::invalid("moe params", "non-finite weight"));
        }
        Ok(())
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![("gate.weight".to_string(), &self.gate.weight)];
        for (i, e) in self.experts.iter().enumerate() {
            out.push((format!("expert.{i}.gate_proj"), &e.gate_proj));
            out.push((format!("expert.{i}.up_proj"), &e.up_proj));
            out.push((format!("expert.{i}.down_proj"), &e.down_proj));
        }
        if let Some(se) = &self.shared {
            out.push(("shared.gate_proj".to_string(), &se.gate_proj));
            out.push(("shared.up_proj".to_string(), &se.up_proj));
            out.push(("shared.down_proj".to_string(), &se.down_proj));
        }
        out
    }

    /// Mutable tensors in the same order as [`MoeParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.gate.weight];
        for e in &mut self.experts {
            out.push(&mut e.gate_proj);
            out.push(&mut e.up_proj);
            out.push(&mut e.down_proj);
        }
        if let Some(se) = &mut self.shared {
            out.push(&mut se.gate_proj);
            out.push(&mut se.up_proj);
            out.push(&mut se.down_proj);
        }
        out
    }

    pub fn router_logits(&self, x: &[f64]) -> Vec<f64> {
        self.gate.weight.matvec(x)
    }

    /// Forward pass for one token.
    pub fn forward(&self, x: &[f64], routing: Routing) -> Result<BlockForward> {
        self.check_input(x)?;
        self.forward_from_logits(x, &self.router_logits(x), routing)
    }

    /// Forward pass with caller-supplied router logits.
    pub fn forward_from_logits(
        &self,
        x: &[f64],
        logits: &[f64],
        routing: Routing,
    ) -> Result<BlockForward> {
        self.check_input(x)?;
        if logits.len() != self.experts.len() {
            return Err(Error::invalid(
                "router logits",
                format!(
                    "expected {} logits, got {}",
                    self.experts.len(),
                    logits.len()
                ),
            ));
        }
        let gate = gate_from_logits(logits, routing)?;
        let mut y = vec![0.0; x.len()];
        let mut routed = Vec::with_capacity(gate.selected.len());
        for &i in &gate.selected {
            let (out, cache) = self.experts[i].forward_cached(x);
            axpy(gate.weights[i], &out, &mut y);
            routed.push(RoutedEval {
                expert: i,
                out,
                cache,
            });
        }
        let shared = self.shared.as_ref().map(|se| {
            let (out, cache) = se.forward_cached(x);
            axpy(1.0, &out, &mut y);
            cache
        });
        Ok(BlockForward {
            y,
            gate,
            routed,
            shared,
        })
    }

    /// Accumulates parameter gradients into `grads` and returns `∂/∂x`.
    ///
    /// `dy` is the upstream gradient on the block output; `dscores`, when
    /// present, is an extra gradient on the softmax scores of all experts.
    pub fn backward_into(
        &self,
        x: &[f64],
        fwd: &BlockForward,
        dy: &[f64],
        dscores: Option<&[f64]>,
        grads: &mut MoeParams,
    ) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if dy.len() != x.len() {
            return Err(Error::invalid("upstream gradient", "length must equal D_m"));
        }
        let e = self.experts.len();
        if let Some(ds) = dscores {
            if ds.len() != e {
                return Err(Error::invalid("score gradient", "length must equal E"));
            }
        }
        let gate = &fwd.gate;
        let mut dx = vec![0.0; x.len()];

        // d/d(weight_i) = <dy, E_i(x)>; expert paths get weight_i·dy.
        let mut dweights = vec![0.0; e];
        for r in &fwd.routed {
            let i = r.expert;
            dweights[i] = dot(dy, &r.out);
            let d_out: Vec<f64> = dy.iter().map(|v| v * gate.weights[i]).collect();
            self.experts[i].backward(x, &r.cache, &d_out, &mut grads.experts[i], &mut dx);
        }
        if let (Some(se), Some(cache)) = (&self.shared, &fwd.shared) {
            let g = grads
                .shared
                .as_mut()
                .expect("gradient buffer has a shared expert");
            se.backward(x, cache, dy, g, &mut dx);
        }

        let mut dscore = dscores.map_or_else(|| vec![0.0; e], <[f64]>::to_vec);
        if gate.normalized {
            // w_j = s_j / Σ_T s  ⇒  ∂L/∂s_j = (dw_j − Σ_T dw_i·w_i) / Σ_T s
            let mass: f64 = gate.selected.iter().map(|&i| gate.scores[i]).sum();
            let mean: f64 = gate
                .selected
                .iter()
                .map(|&i| dweights[i] * gate.weights[i])
                .sum();
            for &j in &gate.selected {
                dscore[j] += (dweights[j] - mean) / mass;
            }
        } else {
            for &j in &gate.selected {
                dscore[j] += dweights[j];
            }
        }

        // Softmax Jacobian: dz = s ⊙ (ds − <ds, s>)
        let inner = dot(&dscore, &gate.scores);
        let dlogits: Vec<f64> = gate
            .scores
            .iter()
            .zip(&dscore)
            .map(|(s, ds)| s * (ds - inner))
            .collect();
        grads.gate.weight.add_outer(&dlogits, x);
        self.gate.weight.add_matvec_t(&dlogits, &mut dx);
        Ok(dx)
    }

    /// Allocating wrapper around [`MoeParams::backward_into`].
    pub fn backward(
        &self,
        x: &[f64],
        fwd: &BlockForward,
        dy: &[f64],
        dscores: Option<&[f64]>,
    ) -> Result<BlockGrads> {
        let mut params = MoeParams::zeros(self.dims());
        let input = self.backward_into(x, fwd, dy, dscores, &mut params)?;
        Ok(BlockGrads {
            params,
            input,
            near_tie: fwd.gate.near_tie(TIE_EPS),
        })
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.gate.model_dim() {
            return Err(Error::invalid(
                "block input",
                format!("expected length {}, got {}", self.gate.model_dim(), x.len()),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("block input", "non-finite entry"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct RoutedEval {
    expert: usize,
    out: Vec<f64>,
    cache: ExpertCache,
}

/// Result of a block forward pass.
#[derive(Clone, Debug)]
pub struct BlockForward {
    pub y: Vec<f64>,
    pub gate: GateOutput,
    routed: Vec<RoutedEval>,
    shared: Option<ExpertCache>,
}

impl BlockForward {
    /// Number of routed experts that were evaluated.
    pub fn expert_evaluations(&self) -> usize {
        self.routed.len()
    }
}

/// Gradients of one token's backward pass.
#[derive(Clone, Debug)]
pub struct BlockGrads {
    pub params: MoeParams,
    pub input: Vec<f64>,
    /// The selected set sits within [`TIE_EPS`] of a tie, so the frozen-
    /// selection gradient may disagree with finite differences.
    pub near_tie: bool,
}

/// Forward one token, returning the block output and its routing decision.
pub fn moe_block_forward(
    params: &MoeParams,
    x: &[f64],
    routing: Routing,
) -> Result<(Vec<f64>, GateOutput)> {
    let f = params.forward(x, routing)?;
    Ok((f.y, f.gate))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn dims() -> BlockDims {
        BlockDims {
            model_dim: 3,
            experts: 4,
            expert_dim: 2,
            shared_dim: 2,
        }
    }

    #[test]
    fn zero_routed_experts_leave_only_shared_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = MoeParams::random(dims(), 0.7, &mut rng);
        for e in &mut p.experts {
            for m in [&mut e.gate_proj, &mut e.up_proj, &mut e.down_proj] {
                m.fill(0.0);
            }
        }
        let x = [0.3, -1.2, 0.8];
        let r = Routing::new(2, false).unwrap();
        let (y, _) = moe_block_forward(&p, &x, r).unwrap();
        assert_eq!(y, p.shared.as_ref().unwrap().forward(&x));

        p.shared = None;
        let (y, _) = moe_block_forward(&p, &x, r).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dyadic_logit_shift_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MoeParams::random(dims(), 0.7, &mut rng);
        let x = [0.25, -0.5, 1.0];
        let logits = [0.5, -1.25, 2.0, 0.125];
        let shifted: Vec<f64> = logits.iter().map(|z| z + 8.0).collect();
        for normalized in [false, true] {
            let r = Routing::new(2, normalized).unwrap();
            let a = p.forward_from_logits(&x, &logits, r).unwrap();
            let b = p.forward_from_logits(&x, &shifted, r).unwrap();
            assert_eq!(a.y, b.y);
            assert_eq!(a.gate, b.gate);
        }
    }

    #[test]
    fn evaluates_exactly_k_experts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = MoeParams::random(dims(), 0.7, &mut rng);
        for k in 1..=4 {
            let f = p
                .forward(&[1.0, 2.0, -1.0], Routing::new(k, false).unwrap())
                .unwrap();
            assert_eq!(f.expert_evaluations(), k);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = MoeParams::random(dims(), 0.7, &mut rng);
        assert!(p
            .forward(&[1.0, 2.0], Routing::new(2, false).unwrap())
            .is_err());
        let f = p
            .forward(&[1.0, 2.0, 3.0], Routing::new(2, false).unwrap())
            .unwrap();
        assert!(p.backward(&[1.0, 2.0, 3.0], &f, &[1.0], None).is_err());
    }

    #[test]
    fn normalized_single_expert_gate_gradient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = MoeParams::random(dims(), 0.7, &mut rng);
        let x = [0.4, -0.9, 1.3];
        let r = Routing::new_unchecked(1, true);
        let f = p.forward(&x, r).unwrap();
        let g = p.backward(&x, &f, &[0.3, -0.2, 1.1], None).unwrap();
        assert!(g.params.gate.weight.as_slice().iter().all(|&v| v == 0.0));
    }
}
