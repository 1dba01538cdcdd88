use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use taml::policy::{
    apply_update, decode_checkpoint, encode_checkpoint, Architecture, ControllerParams, OptimizerKind, OptimizerState,
    TaskInput,
};
use taml::space::SearchSpace;

fn arb_counts() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 1..5)
}

fn arb_arch() -> impl Strategy<Value = Architecture> {
    (1usize..5, 1usize..6, prop_oneof![Just(0.05), Just(0.5), Just(2.0)]).prop_map(|(e, h, r)| Architecture {
        embedding_size: e,
        hidden_size: h,
        init_range: r,
    })
}

fn params(counts: &[usize], arch: Architecture, n_tasks: usize, seed: u64) -> (SearchSpace, ControllerParams) {
    let space = SearchSpace::from_counts(counts).unwrap();
    let p = ControllerParams::init(&space, n_tasks, arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (space, p)
}

fn task_input(t: usize) -> TaskInput {
    if t == 0 {
        TaskInput::Blank
    } else {
        TaskInput::Task(t - 1)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rollout_invariants(counts in arb_counts(), arch in arb_arch(), seed in any::<u64>(), t in 0usize..4) {
        let (space, p) = params(&counts, arch, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let r = p.sample_rollout(task_input(t), &mut rng).unwrap();
        prop_assert!(space.validate_spec(&r.spec).is_ok());
        let sum: f64 = r.per_step_log_probs.iter().sum();
        prop_assert!((sum - r.total_log_prob).abs() <= 1e-12);
        prop_assert!(r.total_log_prob <= 0.0);
        let max_entropy: f64 = counts.iter().map(|&c| (c as f64).ln()).sum();
        prop_assert!(r.total_entropy >= 0.0 && r.total_entropy <= max_entropy + 1e-12);
        let lp = p.log_prob(task_input(t), &r.spec).unwrap();
        prop_assert!((lp.total - r.total_log_prob).abs() <= 1e-12);
        for d in p.step_distributions(task_input(t), &r.spec).unwrap() {
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(d.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn gradient_touches_only_its_own_task_row(counts in arb_counts(), arch in arb_arch(), seed in any::<u64>(), t in 0usize..4, c in -3.0f64..3.0) {
        let (space, p) = params(&counts, arch, 3, seed);
        let spec = space.sample_uniform(&mut ChaCha8Rng::seed_from_u64(seed ^ 2));
        let g = p.policy_gradient(task_input(t), &spec, c, 0.1).unwrap();
        let rows = &g.tensors().task_embeddings;
        for row in 0..3 {
            if t == 0 || row != t - 1 {
                prop_assert!(rows.row(row).iter().all(|&x| x == 0.0));
            }
        }
        prop_assert!(g.tensors().is_finite());
    }

    #[test]
    fn rollouts_ignore_the_task_when_blank(counts in arb_counts(), seed in any::<u64>()) {
        // Blank input never reads the embedding table, so it equals itself
        // across controllers that differ only in their task rows.
        let (_, p) = params(&counts, Architecture::default(), 2, seed);
        let (_, mut q) = params(&counts, Architecture::default(), 2, seed);
        q.tensors_mut().task_embeddings.fill(0.7);
        let a = p.sample_rollout(TaskInput::Blank, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = q.sample_rollout(TaskInput::Blank, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip(counts in arb_counts(), arch in arb_arch(), seed in any::<u64>(), steps in 0usize..4, adam in any::<bool>()) {
        let (space, mut p) = params(&counts, arch, 2, seed);
        let kind = if adam { OptimizerKind::Adam } else { OptimizerKind::Sgd };
        let mut opt = OptimizerState::new(kind, &p);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..steps {
            let spec = space.sample_uniform(&mut rng);
            let g = p.policy_gradient(1, &spec, 0.5, 0.01).unwrap();
            apply_update(&mut p, &g, &mut opt, 0.01).unwrap();
        }
        let bytes = encode_checkpoint(&p, &opt, &space.content_hash());
        let (q, o) = decode_checkpoint(&bytes, &space).unwrap();
        let bits = |x: &ControllerParams| -> Vec<u64> {
            x.tensors().tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
        };
        prop_assert_eq!(bits(&q), bits(&p));
        prop_assert_eq!(q.version(), steps as u64);
        prop_assert_eq!(&o, &opt);
        // Any truncation is detected.
        let cut = (seed as usize) % bytes.len();
        prop_assert!(decode_checkpoint(&bytes[..cut], &space).is_err());
    }

    #[test]
    fn updates_keep_parameters_finite(counts in arb_counts(), seed in any::<u64>(), lr in 1e-4f64..1.0, c in -5.0f64..5.0) {
        let (space, mut p) = params(&counts, Architecture::default(), 2, seed);
        let mut opt = OptimizerState::new(OptimizerKind::Adam, &p);
        let spec = space.sample_uniform(&mut ChaCha8Rng::seed_from_u64(seed));
        let g = p.policy_gradient(0, &spec, c, 0.01).unwrap();
        apply_update(&mut p, &g, &mut opt, lr).unwrap();
        prop_assert!(p.tensors().is_finite());
        prop_assert_eq!(p.version(), 1);
    }
}

#[test]
fn mismatched_space_is_rejected_on_load() {
    let (space, p) = params(&[2, 3], Architecture::default(), 1, 1);
    let opt = OptimizerState::new(OptimizerKind::Adam, &p);
    let bytes = encode_checkpoint(&p, &opt, &space.content_hash());
    let other = SearchSpace::from_counts(&[2, 4]).unwrap();
    assert!(decode_checkpoint(&bytes, &other).is_err());
}
