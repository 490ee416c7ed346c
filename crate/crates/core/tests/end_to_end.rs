//! Small end-to-end flows through the public API.

use tapm_core::attack::{Algorithm, AttackConfig};
use tapm_core::data::{make_synthetic_dataset, SyntheticSpec};
use tapm_core::eval::{self, EvalAttacks};
use tapm_core::game;
use tapm_core::gradcheck::{op_suite, GradCheckConfig};
use tapm_core::model::{Architecture, Classifier};
use tapm_core::pubdef::{self, CacheConfig, DefenseConfig, WeightingScheme};
use tapm_core::train::{train_model, ModelGroup, TrainConfig};

fn small() -> (tapm_core::data::Dataset, tapm_core::data::Dataset) {
    let spec = SyntheticSpec {
        n_train: 256,
        n_test: 64,
        ..Default::default()
    };
    make_synthetic_dataset(&spec).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        eps_warmup_epochs: 1,
        ..Default::default()
    }
}

#[test]
fn every_operator_passes_gradient_check_over_ten_seeds() {
    for seed in 0..10 {
        for (name, rep) in op_suite(seed, GradCheckConfig::default()).unwrap() {
            assert!(rep.passed, "{name} seed {seed}: {:.3e}", rep.max_rel_error);
        }
    }
}

#[test]
fn transfer_grid_and_defense() {
    let (train, test) = small();
    let a = train_model(Architecture::MlpSmall, ModelGroup::Normal, &train, &quick(), 1).unwrap();
    let b = train_model(Architecture::CnnSmall, ModelGroup::Normal, &train, &quick(), 2).unwrap();
    assert!(eval::clean_accuracy(&a, &test).unwrap() > 40.0);

    let cfg = AttackConfig::new(Algorithm::Pgd, 0.03, 5);
    let adv = tapm_core::attack::generate_all(&cfg, &[&a as &dyn Classifier], Some(&a.net), &test.images, &test.labels, 3, 32).unwrap();
    let atk = EvalAttacks {
        sources: vec![a.id.clone()],
        algorithms: vec!["pgd".into()],
        cells: vec![vec![Some(adv.clone())]],
        labels: test.labels.clone(),
    };
    let grid = eval::eval_grid("target", &b, &atk).unwrap();
    assert_eq!(eval::worst_case(&grid).unwrap().value, grid.values[0][0].unwrap());
    assert!(eval::eval_grid(&a.id, &a, &atk).is_err());

    let cache = pubdef::pregenerate_cache(
        None,
        &[&a],
        &[cfg.clone()],
        &train,
        &CacheConfig {
            versions: 2,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    assert_eq!(cache.len(), 1);
    let dcfg = DefenseConfig {
        train: quick(),
        scheme: WeightingScheme::All,
        ..Default::default()
    };
    let d = pubdef::train_pubdef("d", &cache, &train, &dcfg, 6).unwrap();
    assert_eq!(d.manifest.pairs, vec![format!("{}/pgd", a.id)]);
    assert!(eval::accuracy_on(&d, &adv, &test.labels).unwrap() >= 0.0);
}

#[test]
fn lp_value_lies_between_pure_security_levels() {
    let r = vec![vec![90.0, 20.0, 60.0], vec![30.0, 80.0, 50.0]];
    let eq = game::solve_zero_sum_lp(&r).unwrap();
    assert!(game::max_min(&r) <= eq.value + 1e-9 && eq.value <= game::min_max(&r) + 1e-9);
    let (_, br) = game::best_response_value(&r, &eq.defender).unwrap();
    assert!((br - eq.value).abs() < 1e-6);
}
