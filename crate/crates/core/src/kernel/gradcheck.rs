//! Central finite-difference check of [`MoeParams::backward_into`].
//!
//! The probe objective for a batch of tokens is
//! `mean_t CE(y_t, target_t) + λ·L_balance`, treating each block output as
//! a row of logits over `D_m` classes. Every parameter scalar and every
//! input entry is perturbed by `h = 1e-5·max(1, |θ|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::balance::balance_stats;
use super::block::{BlockDims, BlockForward, MoeParams};
use super::gate::Routing;
use super::linalg::Mat;
use super::loss::{token_cross_entropy, token_cross_entropy_grad, DEFAULT_BALANCE_WEIGHT};

/// Minimum K/K+1 score gap for a sampled point to count as away from a tie.
/// A perturbation of size `h` moves scores by at most about `h`, so this
/// keeps the selected set fixed during differencing.
pub const FD_MARGIN: f64 = 1e-4;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-4;

const STEP: f64 = 1e-5;
const MAX_RESAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub experts: usize,
    pub top_k: usize,
    pub model_dim: usize,
    pub expert_dim: usize,
    /// 0 disables the shared expert.
    pub shared_dim: usize,
    pub normalized: bool,
    pub seed: u64,
    pub trials: usize,
    pub tolerance: f64,
    /// Tokens per trial batch.
    pub tokens: usize,
    pub lambda: f64,
    pub init_std: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            experts: 4,
            top_k: 2,
            model_dim: 5,
            expert_dim: 3,
            shared_dim: 0,
            normalized: false,
            seed: 0,
            trials: 100,
            tolerance: 1e-5,
            tokens: 4,
            lambda: DEFAULT_BALANCE_WEIGHT,
            init_std: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub trials: usize,
    /// Checked scalars across all trials.
    pub checked: usize,
    /// Sampled points discarded for sitting near a Top-K tie.
    pub resampled: usize,
    pub max_rel_error: f64,
    /// Tensor holding the worst entry (`input.{t}` for token inputs).
    pub worst_tensor: String,
    pub tolerance: f64,
    pub passed: bool,
}

/// Probe batch: inputs and class targets.
#[derive(Clone, Debug)]
pub struct ProbeBatch {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
}

/// Probe objective value.
pub fn probe_objective(
    params: &MoeParams,
    batch: &ProbeBatch,
    routing: Routing,
    lambda: f64,
) -> Result<f64> {
    let fwds = forward_batch(params, &batch.inputs, routing)?;
    let stats = balance_stats(fwds.iter().map(|f| &f.gate))?;
    let ce: f64 = fwds
        .iter()
        .zip(&batch.targets)
        .map(|(f, &t)| token_cross_entropy(&f.y, t))
        .sum::<f64>()
        / fwds.len() as f64;
    Ok(ce + lambda * stats.balance_loss)
}

/// Analytic gradient of [`probe_objective`]: parameter gradients and one
/// input gradient per token.
pub fn probe_gradient(
    params: &MoeParams,
    batch: &ProbeBatch,
    routing: Routing,
    lambda: f64,
) -> Result<(MoeParams, Vec<Vec<f64>>)> {
    let fwds = forward_batch(params, &batch.inputs, routing)?;
    let stats = balance_stats(fwds.iter().map(|f| &f.gate))?;
    let dscores = stats.score_grad(lambda);
    let scale = 1.0 / fwds.len() as f64;
    let mut grads = MoeParams::zeros(params.dims());
    let mut dx = Vec::with_capacity(fwds.len());
    for ((f, x), &t) in fwds.iter().zip(&batch.inputs).zip(&batch.targets) {
        let dy = token_cross_entropy_grad(&f.y, t, scale);
        dx.push(params.backward_into(x, f, &dy, Some(&dscores), &mut grads)?);
    }
    Ok((grads, dx))
}

fn forward_batch(
    params: &MoeParams,
    inputs: &[Vec<f64>],
    routing: Routing,
) -> Result<Vec<BlockForward>> {
    inputs.iter().map(|x| params.forward(x, routing)).collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn step(theta: f64) -> f64 {
    STEP * theta.abs().max(1.0)
}

fn central_difference(f: impl Fn(f64) -> Result<f64>, theta: f64) -> Result<f64> {
    let h = step(theta);
    let plus = f(theta + h)?;
    let minus = f(theta - h)?;
    Ok((plus - minus) / ((theta + h) - (theta - h)))
}

fn sample_point(
    cfg: &GradCheckConfig,
    routing: Routing,
    rng: &mut ChaCha8Rng,
) -> Result<(MoeParams, ProbeBatch, usize)> {
    let dims = BlockDims {
        model_dim: cfg.model_dim,
        experts: cfg.experts,
        expert_dim: cfg.expert_dim,
        shared_dim: cfg.shared_dim,
    };
    for attempt in 0..MAX_RESAMPLES {
        let params = MoeParams::random(dims, cfg.init_std, rng);
        let inputs: Vec<Vec<f64>> = (0..cfg.tokens)
            .map(|_| {
                (0..cfg.model_dim)
                    .map(|_| rng.gen_range(-1.5..1.5))
                    .collect()
            })
            .collect();
        let targets = (0..cfg.tokens)
            .map(|_| rng.gen_range(0..cfg.model_dim))
            .collect();
        let fwds = forward_batch(&params, &inputs, routing)?;
        if fwds.iter().all(|f| f.gate.selection_margin() > FD_MARGIN) {
            return Ok((params, ProbeBatch { inputs, targets }, attempt));
        }
    }
    Err(Error::Numerical(format!(
        "no non-tie point found in {MAX_RESAMPLES} draws"
    )))
}

/// Runs `cfg.trials` independent checks and reports the worst relative error.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.experts == 0 || cfg.model_dim == 0 || cfg.expert_dim == 0 || cfg.tokens == 0 {
        return Err(Error::invalid(
            "grad-check config",
            "dimensions must be >= 1",
        ));
    }
    let routing = Routing::new(cfg.top_k, cfg.normalized)?;
    routing.check_experts(cfg.experts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        trials: cfg.trials,
        checked: 0,
        resampled: 0,
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        tolerance: cfg.tolerance,
        passed: true,
    };
    for _ in 0..cfg.trials {
        let (params, batch, resampled) = sample_point(cfg, routing, &mut rng)?;
        report.resampled += resampled;
        let (grads, dx) = probe_gradient(&params, &batch, routing, cfg.lambda)?;

        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Mat> = grads
            .tensors()
            .into_iter()
            .map(|(_, m)| m.clone())
            .collect();
        for (ti, name) in names.iter().enumerate() {
            for idx in 0..analytic[ti].as_slice().len() {
                let theta = params.tensors()[ti].1.as_slice()[idx];
                let numeric = central_difference(
                    |v| {
                        let mut p = params.clone();
                        p.tensors_mut()[ti].as_mut_slice()[idx] = v;
                        probe_objective(&p, &batch, routing, cfg.lambda)
                    },
                    theta,
                )?;
                record(&mut report, analytic[ti].as_slice()[idx], numeric, name);
            }
        }
        for (t, grad_x) in dx.iter().enumerate() {
            for (j, &a) in grad_x.iter().enumerate() {
                let numeric = central_difference(
                    |v| {
                        let mut b = batch.clone();
                        b.inputs[t][j] = v;
                        probe_objective(&params, &b, routing, cfg.lambda)
                    },
                    batch.inputs[t][j],
                )?;
                record(&mut report, a, numeric, &format!("input.{t}"));
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tolerance;
    Ok(report)
}

fn record(report: &mut GradCheckReport, analytic: f64, numeric: f64, tensor: &str) {
    let err = relative_error(analytic, numeric);
    report.checked += 1;
    if err.is_nan() || err > report.max_rel_error {
        report.max_rel_error = err;
        report.worst_tensor = tensor.to_string();
    }
}
