mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::mean_sem;
use taml::metrics::accuracy_top_n;
use taml::policy::{Architecture, ControllerParams, OptimizerKind, OptimizerState, TaskInput};
use taml::space::SearchSpace;
use taml::task::{make_task_family, FamilyConfig, SurrogateEvaluator, TaskDefinition};
use taml::trainer::{
    run_ablation_no_task_embedding, run_fixed_architecture_transfer, run_multitask, run_random_search,
    run_single_task, run_transfer, AblationPhase, Controller, RunSettings, TrainError, TrialStatus,
};

fn small_arch() -> Architecture {
    Architecture {
        embedding_size: 4,
        hidden_size: 8,
        init_range: 0.05,
    }
}

fn settings(budget: u64, seed: u64) -> RunSettings {
    let mut s = RunSettings::new(budget, seed);
    s.learner.learning_rate = 1e-3;
    s.learner.entropy_weight = 0.05;
    s
}

fn task(name: &str, preferred: &[usize], weights: &[f64], base: f64) -> TaskDefinition {
    TaskDefinition {
        name: name.into(),
        cluster: 0,
        preferred: preferred.to_vec(),
        weights: weights.to_vec(),
        base,
        val_noise: 0.0,
        test_noise: 0.0,
        val_size: 1,
        interactions: vec![],
        cost: 1.0,
    }
}

fn deterministic(space: &SearchSpace, weight: f64, seed: u64) -> SurrogateEvaluator {
    let family = FamilyConfig {
        clusters: 1,
        tasks_per_cluster: 1,
        shared_dims: vec![],
        cluster_preferences: None,
        weights: vec![weight; space.len()],
        base: 0.1,
        val_noise: 0.0,
        test_noise: 0.0,
        val_size: 1,
        outlier: None,
    };
    SurrogateEvaluator::new(space.clone(), make_task_family(space, &family, seed).unwrap()).unwrap()
}

#[test]
fn random_search_hit_rate_matches_closed_form() {
    let space = SearchSpace::from_counts(&[4, 4]).unwrap();
    let expected = 1.0 - (15.0f64 / 16.0).powi(16);
    let mut hits = 0;
    for seed in 0..400 {
        let ev = deterministic(&space, 0.4, seed);
        let best = ev.tasks()[0].preferred_spec();
        let out = run_random_search(&space, &ev, 0, &RunSettings::new(16, seed), None).unwrap();
        hits += out.log.records().iter().any(|r| r.spec == best) as usize;
    }
    let rate = hits as f64 / 400.0;
    assert!((rate - expected).abs() <= 0.05, "rate {rate} expected {expected:.4}");
}

#[test]
fn heavy_entropy_keeps_the_policy_uniform() {
    let space = SearchSpace::from_counts(&[4, 4, 4, 4]).unwrap();
    let ev = deterministic(&space, 0.2, 5);
    let mut s = settings(500, 5);
    s.learner.entropy_weight = 10.0;
    let out = run_single_task(&space, &ev, 0, &s, None).unwrap();
    let params = out.controller.unwrap().params;
    let n = 20_000;
    let mut counts = vec![[0usize; 4]; 4];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..n {
        let r = params.sample_rollout(0, &mut rng).unwrap();
        for (d, &a) in r.spec.choices.iter().enumerate() {
            counts[d][a] += 1;
        }
    }
    for row in &counts {
        for &c in row {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() <= 0.05, "marginals {counts:?}");
        }
    }
}

#[test]
fn multitask_samples_tasks_uniformly() {
    let space = SearchSpace::from_counts(&[3, 3]).unwrap();
    let tasks: Vec<_> = (0..4).map(|i| task(&format!("t{i}"), &[i % 3, 1], &[0.3, 0.3], 0.1)).collect();
    let ev = SurrogateEvaluator::new(space.clone(), tasks).unwrap();
    let mut s = settings(10_000, 2);
    s.learner.architecture = small_arch();
    let out = run_multitask(&space, &ev, &[0, 1, 2, 3], &s, None).unwrap();
    let mut counts = [0usize; 4];
    for r in out.log.records() {
        counts[r.task] += 1;
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn transfer_from_another_space_fails_before_any_trial() {
    let space = SearchSpace::from_counts(&[3, 3]).unwrap();
    let ev = deterministic(&space, 0.3, 1);
    let other = SearchSpace::from_counts(&[3, 4]).unwrap();
    let params = ControllerParams::init(&other, 2, small_arch(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let optimizer = OptimizerState::new(OptimizerKind::Adam, &params);
    let mut seen = 0;
    let mut obs = |_: &TrialStatus| seen += 1;
    let err = run_transfer(&space, &ev, 0, Controller { params, optimizer }, &[], &settings(10, 1), Some(&mut obs));
    assert!(matches!(err, Err(TrainError::Settings(_))));
    assert_eq!(seen, 0);
}

#[test]
fn fixed_architecture_deficit_follows_the_surrogate() {
    let space = SearchSpace::from_counts(&[3, 3, 4]).unwrap();
    let w = [0.3, 0.3, 0.3];
    let mut tasks: Vec<_> = (0..3).map(|i| task(&format!("p{i}"), &[1, 2, 0], &w, 0.1)).collect();
    tasks.push(task("mismatched", &[1, 2, 3], &w, 0.1));
    tasks.push(task("matching", &[1, 2, 0], &w, 0.1));
    let ev = SurrogateEvaluator::new(space.clone(), tasks).unwrap();
    let pre = run_ablation_no_task_embedding(&space, &ev, AblationPhase::Pretrain { tasks: &[0, 1, 2] }, &settings(600, 1), None)
        .unwrap()
        .controller
        .unwrap();
    assert_eq!(pre.params.modal_spec(TaskInput::Blank).unwrap().choices, vec![1, 2, 0]);
    let tnaml = run_multitask(&space, &ev, &[0, 1, 2], &settings(600, 1), None).unwrap().controller.unwrap();
    for (target, deficit) in [(3, 0.3), (4, 0.0)] {
        let s = settings(400, 2);
        let fixed = run_fixed_architecture_transfer(&space, &ev, target, &pre.params, &s, None).unwrap();
        let t = run_transfer(&space, &ev, target, tnaml.clone(), &[], &s, None).unwrap();
        let f = accuracy_top_n(fixed.log.records(), 10, None).unwrap().test;
        let a = accuracy_top_n(t.log.records(), 10, None).unwrap().test;
        assert!((a - f - deficit).abs() < 0.02, "task {target}: transfer {a} fixed {f}");
    }
}

#[test]
fn blank_ablation_matches_transfer_on_a_single_cluster() {
    // Every task wants the same spec, so task embeddings carry no signal.
    let space = SearchSpace::from_counts(&[4, 4, 4]).unwrap();
    let (mut with, mut without) = (vec![], vec![]);
    for seed in 0..10 {
        let family = FamilyConfig {
            clusters: 1,
            tasks_per_cluster: 6,
            shared_dims: vec![0, 1, 2],
            cluster_preferences: None,
            weights: vec![0.25; 3],
            base: 0.1,
            val_noise: 0.05,
            test_noise: 0.05,
            val_size: 1,
            outlier: None,
        };
        let ev = SurrogateEvaluator::new(space.clone(), make_task_family(&space, &family, seed).unwrap()).unwrap();
        let pre_tasks = [0, 1, 2, 3, 4];
        let pre = run_multitask(&space, &ev, &pre_tasks, &settings(800, seed), None).unwrap().controller.unwrap();
        let blank = run_ablation_no_task_embedding(&space, &ev, AblationPhase::Pretrain { tasks: &pre_tasks }, &settings(800, seed), None)
            .unwrap()
            .controller
            .unwrap();
        let s = settings(100, seed + 50);
        let t = run_transfer(&space, &ev, 5, pre, &[], &s, None).unwrap();
        let b = run_ablation_no_task_embedding(&space, &ev, AblationPhase::Transfer { task: 5, source: blank }, &s, None).unwrap();
        with.push(accuracy_top_n(t.log.records(), 10, None).unwrap().test);
        without.push(accuracy_top_n(b.log.records(), 10, None).unwrap().test);
    }
    let (m1, s1) = mean_sem(&with);
    let (m2, s2) = mean_sem(&without);
    assert!((m1 - m2).abs() <= 2.0 * (s1 + s2), "with {m1:.4}+-{s1:.4} without {m2:.4}+-{s2:.4}");
}
