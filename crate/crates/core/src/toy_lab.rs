//! Small synthetic training runs of a one-block MoE language model.
//!
//! The task is next-token prediction on sequences whose tokens are drawn
//! i.i.d. from one of several cluster distributions, each concentrated on
//! its own slice of the vocabulary. The current token identifies the cluster,
//! so a router has structure to find.
//!
//! The model is `logits = W_out·(h + MoE(h))` with `h = Emb[token]`, trained
//! with momentum SGD on `mean CE + λ·L_balance`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{
    balance_stats, grad_check, load_cv, token_cross_entropy, token_cross_entropy_grad, BlockDims,
    GradCheckConfig, GradCheckReport, Mat, MoeParams, Routing,
};

/// Synthetic clustered-unigram token source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTask {
    pub vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub cluster_count: usize,
    /// Probability mass a cluster spreads over the whole vocabulary rather
    /// than its own slice.
    pub leak: f64,
}

impl Default for ToyTask {
    fn default() -> Self {
        ToyTask {
            vocab: 32,
            seq_len: 17,
            seed: 0,
            cluster_count: 4,
            leak: 0.1,
        }
    }
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("toy task", r));
        if self.cluster_count < 2 {
            return bad("cluster_count must be >= 2");
        }
        if self.vocab < self.cluster_count {
            return bad("vocab must be >= cluster_count");
        }
        if self.seq_len < 2 {
            return bad("seq_len must be >= 2");
        }
        if !(0.0..=1.0).contains(&self.leak) {
            return bad("leak must lie in [0, 1]");
        }
        Ok(())
    }

    /// Token distribution of each cluster.
    pub fn cluster_distributions(&self) -> Vec<Vec<f64>> {
        let v = self.vocab;
        let c = self.cluster_count;
        (0..c)
            .map(|k| {
                let (lo, hi) = (k * v / c, (k + 1) * v / c);
                (0..v)
                    .map(|t| {
                        let own = if (lo..hi).contains(&t) {
                            (1.0 - self.leak) / (hi - lo) as f64
                        } else {
                            0.0
                        };
                        own + self.leak / v as f64
                    })
                    .collect()
            })
            .collect()
    }

    pub fn sampler(&self) -> Result<TaskSampler> {
        self.validate()?;
        let clusters = self
            .cluster_distributions()
            .iter()
            .map(|d| WeightedIndex::new(d).map_err(|e| Error::invalid("toy task", e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskSampler {
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            clusters,
            seq_len: self.seq_len,
        })
    }
}

/// Deterministic stream of sequences from a [`ToyTask`].
pub struct TaskSampler {
    rng: ChaCha8Rng,
    clusters: Vec<WeightedIndex<f64>>,
    seq_len: usize,
}

impl TaskSampler {
    pub fn sequence(&mut self) -> Vec<usize> {
        let c = self.rng.gen_range(0..self.clusters.len());
        (0..self.seq_len)
            .map(|_| self.clusters[c].sample(&mut self.rng))
            .collect()
    }

    /// `(input, target)` pairs from `sequences` fresh sequences.
    pub fn batch(&mut self, sequences: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(sequences * (self.seq_len - 1));
        for _ in 0..sequences {
            let s = self.sequence();
            out.extend(s.windows(2).map(|w| (w[0], w[1])));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub task: ToyTask,
    pub model_dim: usize,
    pub experts: usize,
    pub top_k: usize,
    pub expert_dim: usize,
    /// 0 disables the shared expert.
    pub shared_dim: usize,
    pub normalized: bool,
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Sequences per step.
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub init_std: f64,
    /// Output projection init; small values start near uniform logits.
    pub output_init_std: f64,
    /// Trials of the small-scale gradient check run before training.
    pub grad_check_trials: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            task: ToyTask::default(),
            model_dim: 16,
            experts: 8,
            top_k: 2,
            expert_dim: 16,
            shared_dim: 0,
            normalized: false,
            lambda: 0.01,
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 64,
            steps: 2000,
            seed: 0,
            init_std: 0.3,
            output_init_std: 0.01,
            grad_check_trials: 3,
        }
    }
}

impl ToyConfig {
    pub fn routing(&self) -> Result<Routing> {
        Routing::new(self.top_k, self.normalized)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.routing()?;
        let bad = |r: &str| Err(Error::invalid("toy config", r));
        if self.model_dim == 0 || self.expert_dim == 0 || self.batch_size == 0 {
            return bad("model_dim, expert_dim and batch_size must be >= 1");
        }
        if self.top_k > self.experts {
            return bad("top_k must not exceed experts");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }

    fn dims(&self) -> BlockDims {
        BlockDims {
            model_dim: self.model_dim,
            experts: self.experts,
            expert_dim: self.expert_dim,
            shared_dim: self.shared_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean cross-entropy in nats per token.
    pub ce_loss: f64,
    pub balance_loss: f64,
    pub total_loss: f64,
    /// Routed tokens per expert; sums to `K` times the tokens in the step.
    pub expert_load: Vec<u64>,
    pub load_cv: f64,
    pub bits_per_token: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ToyConfig,
    pub optimizer: String,
    pub tokens_per_step: usize,
    pub grad_check: GradCheckReport,
    pub records: Vec<StepRecord>,
}

/// Report without the step series, for the summary file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: ToyConfig,
    pub optimizer: String,
    pub tokens_per_step: usize,
    pub grad_check: GradCheckReport,
    pub steps_recorded: usize,
    pub initial_ce_loss: f64,
    pub final_ce_loss: f64,
    /// Final cross-entropy in bits per token.
    pub final_bits_per_token: f64,
    pub final_load_cv: f64,
    pub mean_balance_loss: f64,
}

impl TrainReport {
    pub fn first(&self) -> &StepRecord {
        &self.records[0]
    }

    pub fn last(&self) -> &StepRecord {
        self.records.last().expect("report has at least one record")
    }

    pub fn mean_balance_loss(&self) -> f64 {
        self.records.iter().map(|r| r.balance_loss).sum::<f64>() / self.records.len() as f64
    }

    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            config: self.config.clone(),
            optimizer: self.optimizer.clone(),
            tokens_per_step: self.tokens_per_step,
            grad_check: self.grad_check.clone(),
            steps_recorded: self.records.len(),
            initial_ce_loss: self.first().ce_loss,
            final_ce_loss: self.last().ce_loss,
            final_bits_per_token: self.last().bits_per_token,
            final_load_cv: self.last().load_cv,
            mean_balance_loss: self.mean_balance_loss(),
        }
    }

    /// Writes `steps.jsonl` (one record per line) and `summary.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("steps.jsonl");
        let mut buf = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("summary.json");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(&mut f, &self.summary())?;
        f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

struct Model {
    embed: Mat,
    block: MoeParams,
    output: Mat,
}

impl Model {
    fn init(cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Self {
        Model {
            embed: Mat::random(cfg.task.vocab, cfg.model_dim, 1.0, rng),
            block: MoeParams::random(cfg.dims(), cfg.init_std, rng),
            output: Mat::random(cfg.task.vocab, cfg.model_dim, cfg.output_init_std, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Model {
            embed: Mat::zeros(self.embed.rows(), self.embed.cols()),
            block: MoeParams::zeros(self.block.dims()),
            output: Mat::zeros(self.output.rows(), self.output.cols()),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut v = vec![&mut self.embed, &mut self.output];
        v.extend(self.block.tensors_mut());
        v
    }
}

struct StepOutcome {
    record: StepRecord,
    grads: Model,
}

fn evaluate(
    model: &Model,
    batch: &[(usize, usize)],
    routing: Routing,
    lambda: f64,
    step: usize,
) -> Result<StepOutcome> {
    let mut fwds = Vec::with_capacity(batch.len());
    let mut mixed = Vec::with_capacity(batch.len());
    for &(tok, _) in batch {
        let h = model.embed.row(tok);
        let f = model.block.forward(h, routing)?;
        let y: Vec<f64> = h.iter().zip(&f.y).map(|(a, b)| a + b).collect();
        fwds.push(f);
        mixed.push(y);
    }
    let stats = balance_stats(fwds.iter().map(|f| &f.gate))?;
    let dscores = stats.score_grad(lambda);
    let scale = 1.0 / batch.len() as f64;

    let mut grads = model.zeros_like();
    let mut ce = 0.0;
    for ((&(tok, target), f), y) in batch.iter().zip(&fwds).zip(&mixed) {
        let logits = model.output.matvec(y);
        ce += token_cross_entropy(&logits, target);
        let dlogits = token_cross_entropy_grad(&logits, target, scale);
        grads.output.add_outer(&dlogits, y);
        let mut dy = vec![0.0; y.len()];
        model.output.add_matvec_t(&dlogits, &mut dy);
        let h = model.embed.row(tok);
        let dh = model
            .block
            .backward_into(h, f, &dy, Some(&dscores), &mut grads.block)?;
        for ((g, a), b) in grads.embed.row_mut(tok).iter_mut().zip(&dy).zip(&dh) {
            *g += a + b;
        }
    }
    let ce = ce * scale;
    let total = ce + lambda * stats.balance_loss;
    if !(ce.is_finite() && total.is_finite()) {
        return Err(Error::Diverged {
            step,
            reason: format!("loss is {total}"),
        });
    }
    Ok(StepOutcome {
        record: StepRecord {
            step,
            ce_loss: ce,
            balance_loss: stats.balance_loss,
            total_loss: total,
            load_cv: load_cv(&stats.load_counts),
            expert_load: stats.load_counts,
            bits_per_token: ce / std::f64::consts::LN_2,
        },
        grads,
    })
}

/// Small-dimension gradient check with the run's routing settings.
fn precondition_check(cfg: &ToyConfig) -> Result<GradCheckReport> {
    let report = grad_check(&GradCheckConfig {
        experts: cfg.experts,
        top_k: cfg.top_k,
        shared_dim: if cfg.shared_dim > 0 { 3 } else { 0 },
        normalized: cfg.normalized,
        seed: cfg.seed,
        trials: cfg.grad_check_trials,
        lambda: cfg.lambda,
        ..GradCheckConfig::default()
    })?;
    if !report.passed {
        return Err(Error::Numerical(format!(
            "gradient check failed before training: max relative error {:.3e} in {}",
            report.max_rel_error, report.worst_tensor
        )));
    }
    Ok(report)
}

/// Trains for `cfg.steps` updates and records `steps + 1` evaluations; the
/// last one is taken after the final update.
pub fn run_toy_training(cfg: &ToyConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let routing = cfg.routing()?;
    let grad_check = precondition_check(cfg)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(cfg, &mut init_rng);
    let mut velocity = model.zeros_like();
    let mut sampler = cfg.task.sampler()?;

    let mut records = Vec::with_capacity(cfg.steps + 1);
    let mut tokens_per_step = 0;
    for step in 0..=cfg.steps {
        let batch = sampler.batch(cfg.batch_size);
        tokens_per_step = batch.len();
        let StepOutcome { record, mut grads } =
            evaluate(&model, &batch, routing, cfg.lambda, step)?;
        records.push(record);
        if step == cfg.steps {
            break;
        }
        for ((p, v), g) in model
            .tensors_mut()
            .into_iter()
            .zip(velocity.tensors_mut())
            .zip(grads.tensors_mut())
        {
            for ((p, v), g) in p
                .as_mut_slice()
                .iter_mut()
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
            {
                *v = cfg.momentum * *v + g;
                *p -= cfg.learning_rate * *v;
            }
        }
    }
    Ok(TrainReport {
        config: cfg.clone(),
        optimizer: format!("momentum_sgd(momentum={})", cfg.momentum),
        tokens_per_step,
        grad_check,
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatingComparison {
    pub normalized: TrainReport,
    pub non_normalized: TrainReport,
    pub mean_balance_normalized: f64,
    pub mean_balance_non_normalized: f64,
}

/// Runs the same seed and data with normalized and non-normalized Top-K
/// gating.
pub fn compare_gating(cfg: &ToyConfig) -> Result<GatingComparison> {
    if cfg.top_k < 2 {
        return Err(Error::invalid(
            "gating comparison",
            "normalized gating needs K >= 2",
        ));
    }
    let normalized = run_toy_training(&ToyConfig {
        normalized: true,
        ..cfg.clone()
    })?;
    let non_normalized = run_toy_training(&ToyConfig {
        normalized: false,
        ..cfg.clone()
    })?;
    Ok(GatingComparison {
        mean_balance_normalized: normalized.mean_balance_loss(),
        mean_balance_non_normalized: non_normalized.mean_balance_loss(),
        normalized,
        non_normalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(steps: usize) -> ToyConfig {
        ToyConfig {
            steps,
            grad_check_trials: 1,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn zero_steps_starts_near_uniform() {
        let r = run_toy_training(&short(0)).unwrap();
        assert_eq!(r.records.len(), 1);
        let ln_v = (r.config.task.vocab as f64).ln();
        assert!((r.first().ce_loss / ln_v - 1.0).abs() < 0.05);
    }

    #[test]
    fn histogram_conserves_routed_tokens() {
        let r = run_toy_training(&short(5)).unwrap();
        assert_eq!(r.records.len(), 6);
        for rec in &r.records {
            let total: u64 = rec.expert_load.iter().sum();
            assert_eq!(total as usize, r.config.top_k * r.tokens_per_step);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        assert_eq!(
            run_toy_training(&short(10)).unwrap(),
            run_toy_training(&short(10)).unwrap()
        );
    }

    #[test]
    fn task_clusters_are_distributions() {
        let t = ToyTask::default();
        for d in t.cluster_distributions() {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(ToyTask {
            cluster_count: 1,
            ..t
        }
        .validate()
        .is_err());
    }

    #[test]
    fn normalized_k1_rejected() {
        let cfg = ToyConfig {
            top_k: 1,
            ..short(1)
        };
        assert!(compare_gating(&cfg).is_err());
        assert!(run_toy_training(&ToyConfig {
            normalized: true,
            ..cfg
        })
        .is_err());
    }

    #[test]
    fn writes_outputs() {
        let r = run_toy_training(&short(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let lines = fs::read_to_string(dir.path().join("steps.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 4);
        let s: TrainSummary =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(s.steps_recorded, 4);
    }
}
