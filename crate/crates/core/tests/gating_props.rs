use moebudget::kernel::{
    balance_stats, gate_from_logits, probe_gradient, softmax, BlockDims, GateOutput, MoeParams,
    ProbeBatch, Routing,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: u32 = 1000;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(CASES)
}

/// `(E, K, normalized)` with `1 <= K <= E` and `normalized => K >= 2`.
fn routing_strategy() -> impl Strategy<Value = (usize, usize, bool)> {
    (2usize..=12)
        .prop_flat_map(|e| (Just(e), 1..=e, any::<bool>()))
        .prop_map(|(e, k, n)| (e, k, n && k >= 2))
}

fn logits_strategy() -> impl Strategy<Value = (Vec<f64>, usize, bool)> {
    routing_strategy()
        .prop_flat_map(|(e, k, n)| (prop::collection::vec(-8.0f64..8.0, e), Just(k), Just(n)))
}

fn block(seed: u64, e: usize, shared: bool) -> (MoeParams, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = BlockDims {
        model_dim: 4,
        experts: e,
        expert_dim: 3,
        shared_dim: if shared { 5 } else { 0 },
    };
    let params = MoeParams::random(dims, 0.7, &mut rng);
    let x = (0..dims.model_dim)
        .map(|_| rng.gen_range(-2.0..2.0))
        .collect();
    (params, x)
}

/// Independent reference: sort by score descending, lowest index first on
/// equal scores, then weight by score or renormalized score.
fn reference_weights(logits: &[f64], k: usize, normalized: bool) -> (Vec<usize>, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let s: Vec<f64> = logits.iter().map(|l| (l - max).exp() / z).collect();
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let mut sel = idx[..k].to_vec();
    sel.sort();
    let mass: f64 = sel.iter().map(|&i| s[i]).sum();
    let mut w = vec![0.0; s.len()];
    for &i in &sel {
        w[i] = if normalized { s[i] / mass } else { s[i] };
    }
    (sel, w)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

fn check_gate_invariants(g: &GateOutput, k: usize) -> Result<(), TestCaseError> {
    let sum: f64 = g.scores.iter().sum();
    prop_assert!((sum - 1.0).abs() <= 1e-12, "scores sum {sum}");
    prop_assert!(g.scores.iter().all(|&s| s >= 0.0));
    prop_assert_eq!(g.selected.len(), k);
    prop_assert!(g.selected.windows(2).all(|w| w[0] < w[1]));
    for i in 0..g.experts() {
        let on = g.selected.contains(&i);
        if !on {
            prop_assert_eq!(g.weights[i], 0.0);
        } else if !g.normalized {
            prop_assert_eq!(g.weights[i], g.scores[i]);
        }
    }
    if g.normalized {
        let mass: f64 = g.selected.iter().map(|&i| g.weights[i]).sum();
        prop_assert!((mass - 1.0).abs() <= 1e-12);
    }
    Ok(())
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn softmax_is_a_probability_vector(v in prop::collection::vec(-700.0f64..700.0, 1..40)) {
        let s = softmax(&v);
        prop_assert!(s.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn gate_output_invariants((logits, k, n) in logits_strategy()) {
        let g = gate_from_logits(&logits, Routing::new(k, n).unwrap()).unwrap();
        check_gate_invariants(&g, k)?;
        let (sel, w) = reference_weights(&logits, k, n);
        prop_assert_eq!(&g.selected, &sel);
        for (a, b) in g.weights.iter().zip(&w) {
            prop_assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn exactly_k_experts_evaluated(seed: u64, (e, k, n) in routing_strategy(), shared: bool) {
        let (params, x) = block(seed, e, shared);
        let f = params.forward(&x, Routing::new(k, n).unwrap()).unwrap();
        prop_assert_eq!(f.expert_evaluations(), k);
        prop_assert_eq!(f.gate.weights.iter().filter(|&&w| w != 0.0).count(), k);
    }

    #[test]
    fn shift_invariance((logits, k, n) in logits_strategy(), c in -50.0f64..50.0, seed: u64) {
        let routing = Routing::new(k, n).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        let a = gate_from_logits(&logits, routing).unwrap();
        let b = gate_from_logits(&shifted, routing).unwrap();
        prop_assert_eq!(&a.selected, &b.selected);
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        let (params, x) = block(seed, logits.len(), seed % 2 == 0);
        let ya = params.forward_from_logits(&x, &logits, routing).unwrap().y;
        let yb = params.forward_from_logits(&x, &shifted, routing).unwrap().y;
        for (p, q) in ya.iter().zip(&yb) {
            prop_assert!(close(*p, *q, 1e-12), "{p} vs {q}");
        }
    }

    #[test]
    fn selection_invariant_under_scaling((logits, k, n) in logits_strategy(), c in 1.0001f64..100.0) {
        let routing = Routing::new(k, n).unwrap();
        let a = gate_from_logits(&logits, routing).unwrap();
        // Distinct logits keep their order under multiplication by c > 1.
        let mut sorted = logits.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        prop_assume!(k == logits.len() || sorted[k - 1] - sorted[k] > 1e-9);
        let scaled: Vec<f64> = logits.iter().map(|l| l * c).collect();
        let b = gate_from_logits(&scaled, routing).unwrap();
        prop_assert_eq!(a.selected, b.selected);
    }

    #[test]
    fn block_matches_dense_masked_oracle(seed: u64, (e, k, n) in routing_strategy(), shared: bool) {
        let (params, x) = block(seed, e, shared);
        let routing = Routing::new(k, n).unwrap();
        let (y, _) = moebudget::kernel::moe_block_forward(&params, &x, routing).unwrap();

        let logits = params.router_logits(&x);
        let (_, w) = reference_weights(&logits, k, n);
        let mut oracle = vec![0.0; x.len()];
        for (i, expert) in params.experts.iter().enumerate() {
            let out = expert.forward(&x);
            for (o, v) in oracle.iter_mut().zip(out) {
                *o += w[i] * v;
            }
        }
        if let Some(se) = &params.shared {
            for (o, v) in oracle.iter_mut().zip(se.forward(&x)) {
                *o += v;
            }
        }
        for (a, b) in y.iter().zip(&oracle) {
            prop_assert!(close(*a, *b, 1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn normalized_top1_gate_gradient_is_zero(seed: u64, e in 2usize..10, shared: bool) {
        let (params, x) = block(seed, e, shared);
        let routing = Routing::new_unchecked(1, true);
        let f = params.forward(&x, routing).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let dy: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = params.backward(&x, &f, &dy, None).unwrap();
        prop_assert!(g.params.gate.weight.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn balance_stats_sums(
        (e, k, n) in routing_strategy(),
        batch in prop::collection::vec(prop::collection::vec(-6.0f64..6.0, 12), 1..64),
    ) {
        let routing = Routing::new(k, n).unwrap();
        let gates: Vec<GateOutput> = batch
            .iter()
            .map(|l| gate_from_logits(&l[..e], routing).unwrap())
            .collect();
        let st = balance_stats(&gates).unwrap();
        prop_assert_eq!(st.load_counts.iter().sum::<u64>(), (k * gates.len()) as u64);
        prop_assert!((st.load_fraction.iter().sum::<f64>() - k as f64).abs() <= 1e-12);
        prop_assert!((st.mean_score.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let expect = e as f64
            * st.load_fraction.iter().zip(&st.mean_score).map(|(f, p)| f * p).sum::<f64>();
        prop_assert_eq!(st.balance_loss, expect);

        // Duplicating every token leaves the averages unchanged.
        let doubled: Vec<&GateOutput> = gates.iter().chain(gates.iter()).collect();
        let st2 = balance_stats(doubled).unwrap();
        prop_assert!((st2.balance_loss - st.balance_loss).abs() <= 1e-12);
    }

    #[test]
    fn uniform_routing_gives_balance_k(e in 1usize..=16, k_frac in 0.0f64..1.0, rounds in 1usize..5) {
        let k = 1 + ((e - 1) as f64 * k_frac) as usize;
        // Equal logits give p_i = 1/E; cycling the logit peak over every
        // rotation routes each expert exactly K times per E tokens.
        let routing = Routing::new(k, false).unwrap();
        let mut gates = Vec::new();
        for _ in 0..rounds {
            for r in 0..e {
                let mut g = gate_from_logits(&vec![0.0; e], routing).unwrap();
                g.selected = (0..k).map(|j| (r + j) % e).collect();
                g.selected.sort();
                gates.push(g);
            }
        }
        let st = balance_stats(&gates).unwrap();
        prop_assert!(st.load_fraction.iter().all(|&f| (f - k as f64 / e as f64).abs() <= 1e-15));
        prop_assert!((st.balance_loss - k as f64).abs() <= 1e-12, "{}", st.balance_loss);
    }

    #[test]
    fn zero_lambda_gradients_equal_ce_only(seed: u64, (e, k, n) in routing_strategy(), shared: bool) {
        let (params, _) = block(seed, e, shared);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let dm = params.dims().model_dim;
        let batch = ProbeBatch {
            inputs: (0..3).map(|_| (0..dm).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect(),
            targets: (0..3).map(|_| rng.gen_range(0..dm)).collect(),
        };
        let routing = Routing::new(k, n).unwrap();
        let (grads, dx) = probe_gradient(&params, &batch, routing, 0.0).unwrap();

        let mut ce = MoeParams::zeros(params.dims());
        let mut ce_dx = Vec::new();
        for (x, &t) in batch.inputs.iter().zip(&batch.targets) {
            let f = params.forward(x, routing).unwrap();
            let dy = moebudget::kernel::token_cross_entropy_grad(&f.y, t, 1.0 / 3.0);
            ce_dx.push(params.backward_into(x, &f, &dy, None, &mut ce).unwrap());
        }
        for ((_, a), (_, b)) in grads.tensors().iter().zip(ce.tensors().iter()) {
            for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!(close(*p, *q, 1e-12), "{p} vs {q}");
            }
        }
        for (a, b) in dx.iter().flatten().zip(ce_dx.iter().flatten()) {
            prop_assert!(close(*a, *b, 1e-12));
        }
    }
}

#[test]
fn worked_gate_examples() {
    let logits = [2.0, 1.0, 0.0, -1.0];
    let g = gate_from_logits(&logits, Routing::new(2, false).unwrap()).unwrap();
    assert_eq!(g.selected, vec![0, 1]);
    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
    assert!((g.weights[0] - 2f64.exp() / z).abs() < 1e-15);
    assert!((g.weights[0] - 0.6439).abs() < 1e-4 && (g.weights[1] - 0.2369).abs() < 1e-4);

    let g = gate_from_logits(&logits, Routing::new(2, true).unwrap()).unwrap();
    assert!((g.weights[0] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
    assert!((g.weights[0] - 0.7311).abs() < 1e-4 && (g.weights[1] - 0.2689).abs() < 1e-4);

    let g = gate_from_logits(&[0.5; 6], Routing::new(3, false).unwrap()).unwrap();
    assert_eq!(g.selected, vec![0, 1, 2]);
    assert!(g.weights[..3].iter().all(|w| (w - 1.0 / 6.0).abs() < 1e-15));
}

#[test]
fn hand_computed_balance() {
    let mk = |s: Vec<f64>| GateOutput {
        weights: vec![s[0], 0.0],
        scores: s,
        selected: vec![0],
        normalized: false,
    };
    let st = balance_stats(&[mk(vec![0.9, 0.1]), mk(vec![0.6, 0.4])]).unwrap();
    assert_eq!(st.load_fraction, vec![1.0, 0.0]);
    assert!((st.mean_score[0] - 0.75).abs() < 1e-15 && (st.mean_score[1] - 0.25).abs() < 1e-15);
    assert!((st.balance_loss - 1.5).abs() < 1e-15);
}

#[test]
fn zero_experts_leave_only_shared_output() {
    let (mut params, x) = block(7, 4, true);
    for e in &mut params.experts {
        e.gate_proj.fill(0.0);
        e.up_proj.fill(0.0);
        e.down_proj.fill(0.0);
    }
    let routing = Routing::new(2, false).unwrap();
    let f = params.forward(&x, routing).unwrap();
    assert_eq!(f.y, params.shared.as_ref().unwrap().forward(&x));
    params.shared = None;
    assert!(params
        .forward(&x, routing)
        .unwrap()
        .y
        .iter()
        .all(|&v| v == 0.0));
}
