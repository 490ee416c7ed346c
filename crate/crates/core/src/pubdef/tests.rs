use proptest::prelude::*;

use super::*;
use crate::data::{make_synthetic_dataset, SyntheticSpec};

fn tiny_data() -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        n_train: 24,
        n_test: 12,
        size: 8,
        ..SyntheticSpec::default()
    };
    make_synthetic_dataset(&spec).unwrap()
}

fn source(id: &str, group: ModelGroup, seed: u64, data: &Dataset) -> TrainedModel {
    TrainedModel {
        id: id.to_string(),
        group,
        seed,
        config: TrainConfig::default(),
        net: Network::new(Architecture::MlpSmall, data.image_shape(), data.classes, seed).unwrap(),
    }
}

fn quick_cache(versions: usize) -> CacheConfig {
    CacheConfig {
        attack: AttackConfig::new(Algorithm::Pgd, 0.03, 3),
        versions,
        shift: 1,
        chunk: 8,
    }
}

#[test]
fn uniform_weights() {
    let mut s = WeightState::new(4);
    let pi = compute_weights(&WeightingScheme::All, &mut s, &[], &[], &mut rng::rng(0)).unwrap();
    assert_eq!(pi, vec![0.25; 4]);
}

#[test]
fn dynamic_loss_hand_example() {
    let mut s = WeightState::new(2);
    s.mu = vec![1.0, 1.0];
    let pi = compute_weights(&WeightingScheme::DynamicLoss(0.5), &mut s, &[3.0, 1.0], &[], &mut rng::rng(0)).unwrap();
    assert_eq!(s.mu, vec![2.0, 1.0]);
    assert!((pi[0] - 2.0 / 3.0).abs() < 1e-15 && (pi[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn top_one_is_argmax() {
    let mut s = WeightState::new(3);
    let pi = compute_weights(&WeightingScheme::TopK(1), &mut s, &[0.2, 0.9, 0.1], &[], &mut rng::rng(0)).unwrap();
    assert_eq!(pi, vec![0.0, 1.0, 0.0]);
    let mut s = WeightState::new(3);
    assert!(compute_weights(&WeightingScheme::TopK(4), &mut s, &[0.2, 0.9, 0.1], &[], &mut rng::rng(0)).is_err());
}

#[test]
fn unit_alpha_tracks_current_losses() {
    let mut s = WeightState::new(3);
    let l = [0.5, 1.5, 2.0];
    let pi = compute_weights(&WeightingScheme::DynamicLoss(1.0), &mut s, &l, &[], &mut rng::rng(0)).unwrap();
    for (p, v) in pi.iter().zip(l) {
        assert!((p - v / 4.0).abs() < 1e-15);
    }
}

#[test]
fn accuracy_statistics() {
    let acc = [0.9, 0.3];
    let mut s = WeightState::new(2);
    let pi = compute_weights(&WeightingScheme::DynamicAcc(1.0, AccStatistic::ErrorRate), &mut s, &[], &acc, &mut rng::rng(0)).unwrap();
    assert!((pi[0] - 0.1 / 0.8).abs() < 1e-12);
    let mut s = WeightState::new(2);
    let pi = compute_weights(&WeightingScheme::DynamicAcc(1.0, AccStatistic::Correctness), &mut s, &[], &acc, &mut rng::rng(0)).unwrap();
    assert!((pi[0] - 0.75).abs() < 1e-12);
}

#[test]
fn invalid_schemes() {
    assert!(WeightingScheme::DynamicLoss(0.0).validate(3).is_err());
    assert!(WeightingScheme::DynamicAcc(1.5, AccStatistic::ErrorRate).validate(3).is_err());
    assert!(WeightingScheme::TopK(0).validate(3).is_err());
    assert!("top-k:x".parse::<WeightingScheme>().is_err());
    assert!("uniform".parse::<WeightingScheme>().is_err());
}

#[test]
fn scheme_strings_roundtrip() {
    for s in [
        WeightingScheme::All,
        WeightingScheme::Random,
        WeightingScheme::TopK(2),
        WeightingScheme::DynamicLoss(0.1),
        WeightingScheme::DynamicAcc(0.25, AccStatistic::ErrorRate),
        WeightingScheme::DynamicAcc(0.5, AccStatistic::Correctness),
    ] {
        assert_eq!(s.to_string().parse::<WeightingScheme>().unwrap(), s);
    }
}

fn schemes() -> impl Strategy<Value = WeightingScheme> {
    prop_oneof![
        Just(WeightingScheme::All),
        Just(WeightingScheme::Random),
        (1usize..=4).prop_map(WeightingScheme::TopK),
        (0.01f64..=1.0).prop_map(WeightingScheme::DynamicLoss),
        (0.01f64..=1.0).prop_map(|a| WeightingScheme::DynamicAcc(a, AccStatistic::ErrorRate)),
        (0.01f64..=1.0).prop_map(|a| WeightingScheme::DynamicAcc(a, AccStatistic::Correctness)),
    ]
}

proptest! {
    #[test]
    fn weights_stay_on_the_simplex(scheme in schemes(), seed in any::<u64>(),
                                   stats in prop::collection::vec((0.0f64..5.0, 0.0f64..=1.0), 4 * 10)) {
        let mut s = WeightState::new(4);
        let mut r = rng::rng(seed);
        for step in stats.chunks(4) {
            let l: Vec<f64> = step.iter().map(|p| p.0).collect();
            let a: Vec<f64> = step.iter().map(|p| p.1).collect();
            let pi = compute_weights(&scheme, &mut s, &l, &a, &mut r).unwrap();
            prop_assert!(pi.iter().all(|&p| p >= 0.0));
            prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(s.mu.iter().all(|&m| m >= 0.0));
        }
    }

    #[test]
    fn loss_ema_stays_in_the_envelope(seed in any::<u64>(), lo in 0.1f64..1.0, width in 0.0f64..2.0) {
        let mut s = WeightState::new(2);
        let mut r = rng::rng(seed);
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for step in 0..300 {
            let l: Vec<f64> = (0..2).map(|_| lo + width * r.random::<f64>()).collect();
            l.iter().for_each(|&v| { min = min.min(v); max = max.max(v); });
            compute_weights(&WeightingScheme::DynamicLoss(0.1), &mut s, &l, &[], &mut r).unwrap();
            if step >= 200 {
                prop_assert!(s.mu.iter().all(|&m| m >= min - 1e-12 && m <= max + 1e-12));
            }
        }
    }
}

#[test]
fn cache_counts_versions_and_determinism() {
    let (tr, _) = tiny_data();
    let a = source("a", ModelGroup::Normal, 1, &tr);
    let b = source("b", ModelGroup::LinfAdv, 2, &tr);
    let algs = [AttackConfig::new(Algorithm::Pgd, 0.03, 3), AttackConfig::new(Algorithm::MPgd, 0.03, 3)];
    let one = pregenerate_cache(None, &[&a, &b], &algs, &tr, &quick_cache(1), 5).unwrap();
    assert_eq!(one.len(), 4);
    assert_eq!(one.digests().len(), 4);

    let two = pregenerate_cache(None, &[&a], &algs[..1], &tr, &quick_cache(2), 5).unwrap();
    assert_ne!(two.caches[0].versions[0], two.caches[0].versions[1]);
    let again = pregenerate_cache(None, &[&a], &algs[..1], &tr, &quick_cache(2), 5).unwrap();
    assert_eq!(two.digests(), again.digests());

    for (i, c) in two.caches.iter().enumerate() {
        for v in 0..c.versions.len() {
            let o = two.origin(i, v, &tr).unwrap();
            assert!(c.versions[v].max_abs_diff(&o) <= 0.03 + 1e-9);
            assert!(c.versions[v].data().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}

#[test]
fn zero_radius_cache_versions_match_origins() {
    let (tr, _) = tiny_data();
    let a = source("a", ModelGroup::Normal, 1, &tr);
    let mut cfg = quick_cache(2);
    cfg.shift = 0;
    let set = pregenerate_cache(None, &[&a], &[AttackConfig::new(Algorithm::Pgd, 0.0, 3)], &tr, &cfg, 1).unwrap();
    assert_eq!(set.caches[0].versions[0], set.caches[0].versions[1]);
    assert_eq!(set.caches[0].versions[0], tr.images);
}

#[test]
fn store_backed_cache_matches_memory() {
    let (tr, _) = tiny_data();
    let a = source("a", ModelGroup::Normal, 1, &tr);
    let algs = [AttackConfig::new(Algorithm::Pgd, 0.03, 3)];
    let dir = tempfile::tempdir().unwrap();
    let store = CacheStore::new(dir.path());
    let disk = pregenerate_cache(Some(&store), &[&a], &algs, &tr, &quick_cache(2), 3).unwrap();
    let mem = pregenerate_cache(None, &[&a], &algs, &tr, &quick_cache(2), 3).unwrap();
    assert_eq!(disk, mem);
}

fn quick_defense(scheme: WeightingScheme) -> DefenseConfig {
    DefenseConfig {
        arch: Architecture::MlpSmall,
        train: TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        },
        scheme,
        patch_mix_prob: 0.5,
        ..DefenseConfig::default()
    }
}

#[test]
fn single_pair_random_equals_all() {
    let (tr, _) = tiny_data();
    let a = source("a", ModelGroup::Normal, 1, &tr);
    let set = pregenerate_cache(None, &[&a], &[AttackConfig::new(Algorithm::Pgd, 0.03, 2)], &tr, &quick_cache(2), 1).unwrap();
    let r = train_pubdef("d", &set, &tr, &quick_defense(WeightingScheme::Random), 4).unwrap();
    let all = train_pubdef("d", &set, &tr, &quick_defense(WeightingScheme::All), 4).unwrap();
    assert_eq!(r.net.params, all.net.params);
    let again = train_pubdef("d", &set, &tr, &quick_defense(WeightingScheme::Random), 4).unwrap();
    assert_eq!(r.net.params, again.net.params);
}

#[test]
fn every_scheme_trains() {
    let (tr, _) = tiny_data();
    let a = source("a", ModelGroup::Normal, 1, &tr);
    let b = source("b", ModelGroup::L2Adv, 2, &tr);
    let set = pregenerate_cache(None, &[&a, &b], &[AttackConfig::new(Algorithm::Pgd, 0.03, 2)], &tr, &quick_cache(1), 1).unwrap();
    for s in ["all", "random", "top-k:1", "dynamic-loss:0.1", "dynamic-acc:0.1"] {
        let m = train_pubdef("d", &set, &tr, &quick_defense(s.parse().unwrap()), 2).unwrap();
        assert!((m.manifest.mean_weights.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{s}");
        assert_eq!(m.manifest.pairs.len(), 2);
    }
    assert!(train_pubdef("d", &set, &tr, &quick_defense(WeightingScheme::TopK(3)), 2).is_err());
}

struct FixedProbe {
    acc: Vec<f64>,
    calls: usize,
}

impl SelectionProbe for FixedProbe {
    fn transfer_accuracy(&mut self, _: &[usize]) -> Result<Vec<f64>> {
        self.calls += 1;
        Ok(self.acc.clone())
    }
}

fn cand(id: &str, group: ModelGroup, linf: f64) -> Candidate {
    Candidate {
        id: id.into(),
        group,
        linf_robustness: linf,
        l2_robustness: 0.0,
        corruption_robustness: 0.0,
    }
}

#[test]
fn one_model_per_group_never_swaps() {
    let cands: Vec<Candidate> = ModelGroup::ALL.iter().enumerate().map(|(i, &g)| cand(&format!("m{i}"), g, 0.0)).collect();
    let mut probe = FixedProbe { acc: vec![90.0, 10.0, 50.0, 20.0], calls: 0 };
    let sel = select_sources(&cands, &ModelGroup::ALL, &mut probe, 5.0, 2).unwrap();
    assert_eq!(sel.chosen, vec!["m0", "m1", "m2", "m3"]);
    assert!(sel.rationale.iter().all(|r| r.swaps.is_empty()));
}

#[test]
fn infinite_threshold_never_swaps() {
    let cands = vec![
        cand("n", ModelGroup::Normal, 0.0),
        cand("l1", ModelGroup::LinfAdv, 40.0),
        cand("l2", ModelGroup::LinfAdv, 10.0),
    ];
    let mut probe = FixedProbe { acc: vec![80.0, 90.0, 5.0], calls: 0 };
    let sel = select_sources(&cands, &[ModelGroup::Normal, ModelGroup::LinfAdv], &mut probe, f64::INFINITY, 2).unwrap();
    assert_eq!(sel.chosen, vec!["n", "l1"]);
}

#[test]
fn weak_linf_pick_is_swapped_once() {
    // "l-strong" is the most white-box robust but its attack barely hurts
    // the probe defense; "l-weak" transfers far better.
    let cands = vec![
        cand("n", ModelGroup::Normal, 0.0),
        cand("l-strong", ModelGroup::LinfAdv, 45.0),
        cand("l-weak", ModelGroup::LinfAdv, 20.0),
        cand("c", ModelGroup::Corruption, 0.0),
    ];
    let mut probe = FixedProbe { acc: vec![80.0, 85.0, 60.0, 82.0], calls: 0 };
    let groups = [ModelGroup::Normal, ModelGroup::LinfAdv, ModelGroup::Corruption];
    let sel = select_sources(&cands, &groups, &mut probe, 5.0, 2).unwrap();
    assert_eq!(sel.chosen, vec!["n", "l-weak", "c"]);
    let swaps: usize = sel.rationale.iter().map(|r| r.swaps.len()).sum();
    assert_eq!(swaps, 1);
    assert_eq!(sel.rationale[1].swaps[0].from, "l-strong");
    assert_eq!(sel.rationale[1].initial, "l-strong");
}

#[test]
fn empty_group_is_an_error() {
    let cands = vec![cand("n", ModelGroup::Normal, 0.0)];
    let mut probe = FixedProbe { acc: vec![1.0], calls: 0 };
    assert!(select_sources(&cands, &[ModelGroup::L2Adv], &mut probe, 5.0, 2).is_err());
}
