use ndarray::Array1;

use kai0::advantage::{
    cumulative_value_trace, sample_pairs, AdvantageConfig, train_advantage, train_value, value_targets, AdvantageLayout,
    DirectEstimator, PairConfig,
};
use kai0::env::{generate_expert_dataset, EnvConfig, ExpertOptions};
use kai0::merge::{greedy_soup, inverse_loss_alphas, merge, strategy_average, strategy_gradient, CheckpointSet};
use kai0::merge::{GradientConfig, Quadratic, ValidationObjective};
use kai0::policy::{bc_loss_and_grad, indicator_weights, init_policy, train, BcBatch, BcDataset, PolicyLayout, TrainConfig};
use kai0::{Episode, ParameterVector, Provenance, Rng};

fn small_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 32,
        lr: 1e-3,
        cosine_decay_steps: steps,
        ..TrainConfig::default()
    }
}

fn bc_setup() -> (PolicyLayout, BcDataset) {
    let env = EnvConfig::default();
    let layout = PolicyLayout::for_env(&env, 10);
    let eps = generate_expert_dataset(&env, 4, &Rng::new(3), &ExpertOptions::default()).unwrap();
    let data = BcDataset::from_episodes(&eps, &layout).unwrap();
    (layout, data)
}

#[test]
fn seeded_training_is_reproducible() {
    let (layout, data) = bc_setup();
    let init = init_policy(&layout, &mut Rng::new(1)).unwrap();
    let a = train(&init, &data, None, &small_train(200)).unwrap();
    let b = train(&init, &data, None, &small_train(200)).unwrap();
    assert_eq!(a.net.params, b.net.params);
}

#[test]
fn unit_weights_match_unweighted_training() {
    let (layout, data) = bc_setup();
    let init = init_policy(&layout, &mut Rng::new(1)).unwrap();
    let ones = indicator_weights(&vec![false; data.len()], 1.0);
    let a = train(&init, &data, None, &small_train(100)).unwrap();
    let b = train(&init, &data, Some(&ones), &small_train(100)).unwrap();
    assert_eq!(a.net.params, b.net.params);
}

#[test]
fn doubling_sample_weights_changes_nothing() {
    let (layout, data) = bc_setup();
    let net = init_policy(&layout, &mut Rng::new(2)).unwrap();
    let targets = &data.y * layout.output_scale;
    let mut rng = Rng::new(9);
    let w = Array1::from_shape_fn(data.len(), |_| rng.uniform_range(0.1, 1.0));
    let w2 = &w * 2.0;
    let run = |w: &Array1<f64>| {
        bc_loss_and_grad(
            &net,
            &BcBatch {
                inputs: &data.x,
                targets: &targets,
                weights: w.view(),
            },
        )
        .unwrap()
    };
    let (l1, g1) = run(&w);
    let (l2, g2) = run(&w2);
    assert!((l1 - l2).abs() <= 1e-15 * l1.abs().max(1.0));
    for (a, b) in g1.values().iter().zip(g2.values()) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12));
    }
}

fn quad_set(rng: &mut Rng, n: usize) -> (CheckpointSet, Quadratic) {
    let cps = (0..n)
        .map(|_| ParameterVector::new("q", (0..5).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap())
        .collect();
    let q = Quadratic::isotropic((0..5).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
    (CheckpointSet::unlabeled(cps).unwrap(), q)
}

#[test]
fn gradient_never_loses_to_the_uniform_average() {
    let mut rng = Rng::new(31);
    for n in 2..6 {
        for _ in 0..10 {
            let (cs, q) = quad_set(&mut rng, n);
            let g = q.loss(&merge(&cs, &strategy_gradient(&cs, &q, &GradientConfig::default()).unwrap()).unwrap());
            let u = q.loss(&merge(&cs, &strategy_average(&cs)).unwrap()).unwrap();
            assert!(g.unwrap() <= u + 1e-9);
        }
    }
}

#[test]
fn greedy_soup_on_random_sets_beats_every_member() {
    let mut rng = Rng::new(32);
    for _ in 0..50 {
        let (cs, q) = quad_set(&mut rng, 4);
        let soup = greedy_soup(&cs, &q).unwrap();
        let l = q.loss(&merge(&cs, &soup.coefficients).unwrap()).unwrap();
        for c in &cs.checkpoints {
            assert!(l <= q.loss(c).unwrap());
        }
    }
}

#[test]
fn identical_checkpoints_give_a_one_checkpoint_soup() {
    let p = ParameterVector::new("q", vec![0.3, -0.2]).unwrap();
    let cs = CheckpointSet::unlabeled(vec![p.clone(), p.clone(), p]).unwrap();
    let soup = greedy_soup(&cs, &Quadratic::isotropic(vec![0.0, 0.0])).unwrap();
    assert_eq!(soup.coefficients.alphas().iter().filter(|&&a| a == 1.0).count(), 1);
    assert_eq!(soup.coefficients.alphas().iter().filter(|&&a| a == 0.0).count(), 2);
}

#[test]
fn inverse_loss_concentrates_for_large_exponents() {
    let a = inverse_loss_alphas(&[0.1, 0.3], 50.0, 1e-8).unwrap();
    assert!(a.alphas()[0] > 0.999);
}

/// Episodes whose first coordinate encodes time.
fn timed_episode(id: u64, len: usize, y: f64) -> Episode {
    let env = EnvConfig {
        waypoints: vec![[1.1, y]],
        ..EnvConfig::default()
    };
    let path: Vec<[f64; 2]> = (0..=len).map(|t| [-1.0 + 2.0 * t as f64 / len as f64, y]).collect();
    Episode::from_path(id, &path, &env, Provenance::Expert).unwrap()
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (k, &i) in idx.iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn direct_progress_ranks_time_gaps() {
    let train_eps: Vec<Episode> = (0..20).map(|i| timed_episode(i, 100, -0.5 + 0.05 * i as f64)).collect();
    let cfg = PairConfig {
        n_pairs: 4000,
        staged: false,
        symmetric: true,
    };
    let samples = sample_pairs(&train_eps, &cfg, &mut Rng::new(1)).unwrap();
    let layout = AdvantageLayout {
        staged: false,
        hidden: vec![32, 32],
    };
    let (net, _) = train_advantage(&samples, &layout, &small_train(2000)).unwrap();
    let (again, _) = train_advantage(&samples, &layout, &small_train(2000)).unwrap();
    assert_eq!(net.params, again.params);

    let held = timed_episode(99, 100, 0.17);
    let mut rng = Rng::new(2);
    let (mut pred, mut gap) = (Vec::new(), Vec::new());
    for _ in 0..200 {
        let t = rng.below(100);
        let tp = t + 1 + rng.below(100 - t);
        pred.push(net.predict(&held.states[t], &held.states[tp], None).unwrap());
        gap.push((tp - t) as f64);
    }
    assert!(spearman(&pred, &gap) > 0.9);
}

#[test]
fn staged_estimator_credits_expert_progress() {
    let env = EnvConfig::default();
    let mut positive = 0;
    for seed in 0..10u64 {
        let rng = Rng::new(seed);
        let eps = generate_expert_dataset(&env, 10, &rng.split_named("train"), &ExpertOptions::default()).unwrap();
        let test = generate_expert_dataset(&env, 1, &rng.split_named("test"), &ExpertOptions::default()).unwrap();
        let cfg = AdvantageConfig::default();
        let samples = sample_pairs(&eps, &cfg.pairs, &mut rng.split_named("pairs")).unwrap();
        let (net, _) = train_advantage(&samples, &AdvantageLayout::default(), &cfg.train).unwrap();
        let tr = cumulative_value_trace(&DirectEstimator { net, span: 1 }, &test[0]).unwrap();
        assert_eq!(tr.len(), test[0].len());
        positive += usize::from(*tr.last().unwrap() > 0.0);
    }
    assert!(positive >= 9, "{positive}/10");
}

/// Out along the x axis and back: the middle of the course is visited at two
/// different points of progress.
fn out_and_back(id: u64, y: f64) -> Episode {
    let env = EnvConfig {
        waypoints: vec![[0.6, y], [-0.6, y]],
        ..EnvConfig::default()
    };
    let mut path: Vec<[f64; 2]> = (0..=60).map(|t| [-0.6 + 0.02 * t as f64, y]).collect();
    path.extend((1..=60).map(|t| [0.6 - 0.02 * t as f64, y]));
    Episode::from_path(id, &path, &env, Provenance::Expert).unwrap()
}

#[test]
fn looped_states_leave_a_value_residual() {
    let looped: Vec<Episode> = (0..10).map(|i| out_and_back(i, -0.3 + 0.06 * i as f64)).collect();
    let straight: Vec<Episode> = (0..10)
        .map(|i| timed_episode(100 + i, 120, -0.3 + 0.06 * i as f64))
        .collect();
    let residual = |eps: &[Episode]| {
        let (v, _) = train_value(eps, &[32, 32], &small_train(3000)).unwrap();
        let (x, y) = value_targets(eps);
        let mut sse = 0.0;
        for (row, target) in x.rows().into_iter().zip(y.column(0)) {
            sse += (v.value(&row.to_vec()).unwrap() - target).powi(2);
        }
        sse / x.nrows() as f64
    };
    let (r_loop, r_line) = (residual(&looped), residual(&straight));
    assert!(r_loop > 0.02, "looped residual {r_loop}");
    assert!(r_line < 0.005, "straight residual {r_line}");
}
