mod common;

use std::collections::HashSet;
use std::sync::OnceLock;

use ndarray::{Array2, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mixoe::data::Example;
use mixoe::experiment::{build_environment, evaluate_model, new_model, Environment, ExperimentConfig};
use mixoe::math::entropy;
use mixoe::metrics::{auroc, tnr_at_tpr};
use mixoe::mixing::{make_soft_target, mix_cut, one_hot, MixMode};
use mixoe::model::Classifier;
use mixoe::objectives::{compute, select_hard_outliers, ObjectiveConfig, StepInputs};
use mixoe::scoring::{score_energy, score_msp, score_odin, Scorer};
use mixoe::splits::{filter_outlier_pool, make_holdout_splits, OutlierPool};
use mixoe::synth::{FamilyConfig, SuiteConfig};
use mixoe::trainer::{cosine_lr, train_standard, Checkpoint};

fn small_config(seed: u64) -> ExperimentConfig {
    let mut config = ExperimentConfig::from_toml(&format!(
        "seed = {seed}\n[data]\ndataset = \"a\"\nn_ood = 2\nn_splits = 2\n[model]\nhidden = [12]\n\
         [standard]\nepochs = 2\n[standard.optimizer]\nlr = 0.05\nmomentum = 0.9\nweight_decay = 0.0005\n"
    ))
    .expect("valid config");
    let family = |name: &str, n| FamilyConfig {
        name: name.into(),
        n_classes: n,
        train_per_class: 10,
        test_per_class: 5,
    };
    config.data.suite = Some(SuiteConfig {
        seed,
        families: vec![family("a", 6), family("b", 3)],
        web_concepts: 3,
        web_per_concept: 10,
        contamination_per_dataset: 5,
        ..SuiteConfig::default()
    });
    config
}

fn small_env() -> &'static (ExperimentConfig, Environment) {
    static ENV: OnceLock<(ExperimentConfig, Environment)> = OnceLock::new();
    ENV.get_or_init(|| {
        let config = small_config(11);
        let env = build_environment(&config).expect("environment");
        (config, env)
    })
}

fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 2..12)
}

fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..60)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn holdout_class_counts_add_up(seed in any::<u64>(), n in 2usize..40, frac in 0.05f64..0.9) {
        let classes: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let n_ood = ((n as f64 * frac) as usize).clamp(1, n - 1);
        let splits = make_holdout_splits("d", &classes, &["o".into()], n_ood, 3, seed).unwrap();
        prop_assert_eq!(splits.len(), 3);
        for s in &splits {
            prop_assert_eq!(s.id_classes.len() + s.fine_ood_classes.len(), n);
            prop_assert_eq!(s.fine_ood_classes.len(), n_ood);
            let all: HashSet<&String> = s.id_classes.iter().chain(&s.fine_ood_classes).collect();
            prop_assert_eq!(all.len(), n);
        }
    }

    #[test]
    fn soft_target_entropy_decreases_and_is_convex(k in 2usize..30, label in 0usize..30) {
        let y = one_hot(label % k, k).unwrap();
        let ones = make_soft_target(&y, 1.0).unwrap();
        let zeros = make_soft_target(&y, 0.0).unwrap();
        let mut previous = f64::INFINITY;
        for i in 0..=100 {
            let lambda = i as f64 / 100.0;
            let t = make_soft_target(&y, lambda).unwrap();
            let h = entropy(t.probs());
            prop_assert!(h < previous, "entropy not decreasing at λ={}", lambda);
            previous = h;
            for ((p, a), b) in t.probs().iter().zip(ones.probs()).zip(zeros.probs()) {
                prop_assert!((p - (lambda * a + (1.0 - lambda) * b)).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn cut_mixing_takes_every_element_from_an_input(
        seed in any::<u64>(), h in 1usize..10, w in 1usize..10, lambda in 0.0f64..=1.0,
    ) {
        let dims = IxDyn(&[2, h, w]);
        let x_in = ArrayD::from_elem(dims.clone(), 1.0);
        let x_out = ArrayD::from_elem(dims, -1.0);
        let (mixed, adjusted) = mix_cut(&x_in, &x_out, lambda, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(mixed.iter().all(|&v| v == 1.0 || v == -1.0));
        let share = mixed.iter().filter(|&&v| v == 1.0).count() as f64 / mixed.len() as f64;
        prop_assert!((share - adjusted).abs() < 1e-15);
        prop_assert!(adjusted >= lambda - 1e-12);
    }

    #[test]
    fn losses_decompose_and_are_nonnegative(seed in any::<u64>(), cut in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = common::tiny_net(seed);
        let id = common::random_batch(&mut rng, 5, 3);
        let outliers = common::random_outliers(&mut rng, 5);
        let pool = common::random_outliers(&mut rng, 10);
        let mode = if cut { MixMode::Cut } else { MixMode::Linear };
        for config in common::all_kinds(&mut rng, mode) {
            let inputs = StepInputs {
                id: &id,
                outliers: match config {
                    ObjectiveConfig::OeHardMining { .. } => Some(&pool),
                    _ => config.kind().uses_outliers().then_some(&outliers),
                },
                shape: common::TINY_SHAPE,
                forced_lambda: None,
            };
            let v = compute(&config, &model, &inputs, &mut rng, false).unwrap().value;
            prop_assert!((v.total - (v.id_term + v.reg_weight * v.reg_term)).abs() <= 1e-9);
            prop_assert!(v.total >= 0.0 && v.id_term >= 0.0 && v.reg_term >= 0.0, "{}: {:?}", config.label(), v);
        }
    }

    #[test]
    fn soft_cross_entropy_bounds_entropy(
        rows in prop::collection::vec(prop::collection::vec(-8.0f64..8.0, 4), 1..6),
        weights in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 6),
    ) {
        let n = rows.len();
        let logits = Array2::from_shape_fn((n, 4), |(i, j)| rows[i][j]);
        let targets = Array2::from_shape_fn((n, 4), |(i, j)| weights[i][j] / weights[i].iter().sum::<f64>());
        prop_assert!(common::soft_ce_gap(&logits, &targets) >= -1e-12);
        // Equality when the prediction is the target.
        let own = targets.mapv(f64::ln);
        prop_assert!(common::soft_ce_gap(&own, &targets).abs() < 1e-12);
    }

    #[test]
    fn hard_mining_is_permutation_consistent(seed in any::<u64>(), n in 1usize..30, k_frac in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = common::tiny_net(seed ^ 1);
        let pool = common::random_outliers(&mut rng, n);
        let k = ((n as f64 * k_frac) as usize).min(n);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permuted = pool.select(ndarray::Axis(0), &perm);
        let direct: HashSet<usize> = select_hard_outliers(&model, &pool, k).unwrap().into_iter().collect();
        let back: HashSet<usize> = select_hard_outliers(&model, &permuted, k)
            .unwrap()
            .into_iter()
            .map(|i| perm[i])
            .collect();
        prop_assert_eq!(direct, back);
    }

    #[test]
    fn scorers_respect_logit_shift(z in logits_strategy(), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        prop_assert!((score_msp(&z).unwrap() - score_msp(&shifted).unwrap()).abs() < 1e-12);
        prop_assert!((score_odin(&z, 1000.0).unwrap() - score_odin(&shifted, 1000.0).unwrap()).abs() < 1e-12);
        let e = score_energy(&z, 1.0).unwrap();
        prop_assert!((score_energy(&shifted, 1.0).unwrap() - (e + c)).abs() < 1e-9);
    }

    #[test]
    fn scorers_stay_finite_for_huge_logits(z in prop::collection::vec(-1e4f64..1e4, 2..12)) {
        for scorer in [Scorer::Msp, Scorer::Odin, Scorer::Energy] {
            let s = scorer.score(&z, scorer.default_temperature()).unwrap();
            prop_assert!(s.is_finite(), "{} gave {}", scorer, s);
        }
    }

    #[test]
    fn metrics_are_rank_invariant(id in scores_strategy(), ood in scores_strategy(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = (auroc(&id, &ood).unwrap(), tnr_at_tpr(&id, &ood, 0.95).unwrap());
        let transforms: [&dyn Fn(f64) -> f64; 3] = [&|x: f64| x.exp(), &|x: f64| a * x + b, &|x: f64| x * x * x];
        for f in transforms {
            let ti: Vec<f64> = id.iter().map(|&x| f(x)).collect();
            let to: Vec<f64> = ood.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(auroc(&ti, &to).unwrap(), base.0);
            prop_assert_eq!(tnr_at_tpr(&ti, &to, 0.95).unwrap(), base.1);
        }
    }

    #[test]
    fn adding_an_easy_ood_score_never_hurts(id in scores_strategy(), ood in scores_strategy()) {
        let lowest = id.iter().copied().fold(f64::INFINITY, f64::min);
        let mut more = ood.clone();
        more.push(lowest - 1.0);
        prop_assert!(auroc(&id, &more).unwrap() >= auroc(&id, &ood).unwrap());
        prop_assert!(tnr_at_tpr(&id, &more, 0.95).unwrap() >= tnr_at_tpr(&id, &ood, 0.95).unwrap());
    }

    #[test]
    fn cosine_schedule_shape(lr0 in 1e-5f64..1.0, total in 1usize..10_000, step in 0usize..10_000) {
        let step = step % (total + 1);
        let lr = cosine_lr(lr0, step, total);
        prop_assert!(lr >= 0.0 && lr <= lr0);
        if step > 0 {
            prop_assert!(lr <= cosine_lr(lr0, step - 1, total));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn example_identities_never_cross_partitions(seed in 0u64..1000) {
        let config = small_config(seed);
        let env = build_environment(&config).unwrap();
        let ids = |xs: &[Example]| xs.iter().map(|e| e.id).collect::<HashSet<_>>();
        let sets = [
            ids(env.partition.train.examples()),
            ids(env.partition.validation.examples()),
            ids(env.partition.test.examples()),
            ids(&env.fine_ood),
        ];
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                prop_assert!(sets[i].is_disjoint(&sets[j]), "sets {} and {} overlap", i, j);
            }
        }
        prop_assert!(!sets.iter().any(HashSet::is_empty));
    }
}

#[test]
fn outlier_filtering_is_idempotent() {
    let (_, env) = small_env();
    let pool: &OutlierPool = &env.suite.outliers;
    let forbidden: Vec<String> = env.suite.datasets.keys().cloned().collect();
    let once = filter_outlier_pool(pool, &forbidden).unwrap();
    let twice = filter_outlier_pool(&once, &forbidden).unwrap();
    assert_eq!(once, twice);
    assert!(once.len() < pool.len());
}

#[test]
fn cosine_endpoints_and_midpoint_are_exact() {
    assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
    assert_eq!(cosine_lr(0.1, 50, 100), 0.05);
    assert_eq!(cosine_lr(0.1, 100, 100), 0.0);
}

#[test]
fn checkpoint_round_trip_gives_identical_reports() {
    let (config, env) = small_env();
    let mut model = new_model(config, env).unwrap();
    let (ckpt, _) = train_standard(&mut model, &env.partition, &config.standard_train_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let mut restored = new_model(config, env).unwrap();
    Checkpoint::load(&path, Some(&ckpt.config_hash))
        .unwrap()
        .restore(&mut restored)
        .unwrap();
    assert_eq!(restored.params(), model.params());
    let scorers = [Scorer::Msp, Scorer::Odin, Scorer::Energy];
    let a = evaluate_model(&model, env, &scorers, "standard").unwrap();
    let b = evaluate_model(&restored, env, &scorers, "standard").unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.report.to_json(), y.report.to_json());
    }
}

#[test]
fn training_is_seed_deterministic_and_leaves_test_data_unread() {
    let config = small_config(5);
    let run = || {
        let env = build_environment(&config).unwrap();
        let mut model = new_model(&config, &env).unwrap();
        let (_, history) = train_standard(&mut model, &env.partition, &config.standard_train_config()).unwrap();
        assert_eq!(env.partition.test.reads(), 0);
        history.steps
    };
    let first = run();
    assert!(!first.is_empty());
    assert_eq!(first, run());
}
