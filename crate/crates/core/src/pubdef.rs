//! PubDef: training against pregenerated transfer attacks from a few
//! public source models, with per-batch weights over the (source, attack)
//! pairs and a source-selection heuristic.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attack::cache::{AttackCache, CacheManifest, CacheStore};
use crate::attack::{self, Algorithm, AttackConfig, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::loss;
use crate::model::{Architecture, Classifier, Network};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::train::{self, Batch, ModelGroup, TrainConfig, TrainedModel};
use crate::transforms;

/// What the dynamic accuracy scheme tracks per attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccStatistic {
    /// EMA of `1 - accuracy`: harder attacks get more weight.
    ErrorRate,
    /// EMA of the accuracy itself.
    Correctness,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightingScheme {
    All,
    Random,
    TopK(usize),
    DynamicLoss(f64),
    DynamicAcc(f64, AccStatistic),
}

impl WeightingScheme {
    pub fn validate(&self, pairs: usize) -> Result<()> {
        match *self {
            WeightingScheme::TopK(k) if k == 0 || k > pairs => Err(Error::invalid(format!(
                "top-k needs 1 <= k <= {pairs}, got {k}"
            ))),
            WeightingScheme::DynamicLoss(a) | WeightingScheme::DynamicAcc(a, _) if !(a > 0.0 && a <= 1.0) => {
                Err(Error::invalid(format!("alpha must lie in (0, 1], got {a}")))
            }
            _ => Ok(()),
        }
    }

    /// Whether per-attack losses or accuracies are needed every batch.
    pub fn needs_stats(&self) -> bool {
        matches!(
            self,
            WeightingScheme::TopK(_) | WeightingScheme::DynamicLoss(_) | WeightingScheme::DynamicAcc(..)
        )
    }
}

impl fmt::Display for WeightingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightingScheme::All => f.write_str("all"),
            WeightingScheme::Random => f.write_str("random"),
            WeightingScheme::TopK(k) => write!(f, "top-k:{k}"),
            WeightingScheme::DynamicLoss(a) => write!(f, "dynamic-loss:{a}"),
            WeightingScheme::DynamicAcc(a, AccStatistic::ErrorRate) => write!(f, "dynamic-acc:{a}"),
            WeightingScheme::DynamicAcc(a, AccStatistic::Correctness) => write!(f, "dynamic-acc-correct:{a}"),
        }
    }
}

impl FromStr for WeightingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |default: f64| -> Result<f64> {
            arg.map_or(Ok(default), |a| {
                a.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad scheme argument in `{s}`")))
            })
        };
        match name {
            "all" if arg.is_none() => Ok(WeightingScheme::All),
            "random" if arg.is_none() => Ok(WeightingScheme::Random),
            "top-k" => {
                let k = arg
                    .unwrap_or("1")
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad k in `{s}`")))?;
                Ok(WeightingScheme::TopK(k))
            }
            "dynamic-loss" => Ok(WeightingScheme::DynamicLoss(num(0.1)?)),
            "dynamic-acc" => Ok(WeightingScheme::DynamicAcc(num(0.1)?, AccStatistic::ErrorRate)),
            "dynamic-acc-correct" => Ok(WeightingScheme::DynamicAcc(num(0.1)?, AccStatistic::Correctness)),
            _ => Err(Error::invalid(format!("unknown weighting scheme `{s}`"))),
        }
    }
}

impl Serialize for WeightingScheme {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WeightingScheme {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// EMA statistics and the weights derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    pub mu: Vec<f64>,
    pub pi: Vec<f64>,
}

impl WeightState {
    pub fn new(pairs: usize) -> Self {
        let u = 1.0 / pairs as f64;
        WeightState {
            mu: vec![u; pairs],
            pi: vec![u; pairs],
        }
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter().map(|x| x / s).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    }
}

/// Weights over the attack pairs for one batch. `losses` and `accuracy`
/// (fractions in `[0, 1]`) are read only by schemes that need them.
pub fn compute_weights(
    scheme: &WeightingScheme,
    state: &mut WeightState,
    losses: &[f64],
    accuracy: &[f64],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let sa = state.mu.len();
    scheme.validate(sa)?;
    let need = |v: &[f64], what: &str| -> Result<()> {
        if v.len() != sa {
            return Err(Error::invalid(format!("{what} must have {sa} entries, got {}", v.len())));
        }
        Ok(())
    };
    let pi = match *scheme {
        WeightingScheme::All => vec![1.0 / sa as f64; sa],
        WeightingScheme::Random if sa == 1 => vec![1.0],
        WeightingScheme::Random => {
            let mut p = vec![0.0; sa];
            p[rng.random_range(0..sa)] = 1.0;
            p
        }
        WeightingScheme::TopK(k) => {
            need(losses, "losses")?;
            let mut order: Vec<usize> = (0..sa).collect();
            order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
            let mut p = vec![0.0; sa];
            for &i in &order[..k] {
                p[i] = 1.0 / k as f64;
            }
            p
        }
        WeightingScheme::DynamicLoss(alpha) => {
            need(losses, "losses")?;
            for (m, l) in state.mu.iter_mut().zip(losses) {
                *m = (1.0 - alpha) * *m + alpha * l.max(0.0);
            }
            normalized(&state.mu)
        }
        WeightingScheme::DynamicAcc(alpha, stat) => {
            need(accuracy, "accuracies")?;
            for (m, a) in state.mu.iter_mut().zip(accuracy) {
                let x = match stat {
                    AccStatistic::ErrorRate => 1.0 - a,
                    AccStatistic::Correctness => *a,
                };
                *m = (1.0 - alpha) * *m + alpha * x.clamp(0.0, 1.0);
            }
            normalized(&state.mu)
        }
    };
    state.pi = pi.clone();
    Ok(pi)
}

/// How the training-set caches are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    pub attack: AttackConfig,
    pub versions: usize,
    /// Cache-time pad-crop shift in pixels.
    pub shift: usize,
    pub chunk: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            attack: AttackConfig::new(Algorithm::Pgd, 0.03, 10),
            versions: 4,
            shift: 1,
            chunk: 100,
        }
    }
}

/// Pregenerated attacks for several (source, algorithm) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackCacheSet {
    pub caches: Vec<AttackCache>,
}

/// Per-row cache-time shifts of version `v`.
pub fn cache_shifts(m: &CacheManifest, v: usize) -> Vec<(isize, isize)> {
    let mut r = rng::derive_rng(m.version_seed(v), &["shift"]);
    transforms::random_shifts(m.rows, m.shift, &mut r)
}

impl AttackCacheSet {
    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }

    pub fn specs(&self) -> Vec<&AttackSpec> {
        self.caches.iter().map(|c| &c.manifest.spec).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> AttackCacheSet {
        AttackCacheSet {
            caches: idx.iter().map(|&i| self.caches[i].clone()).collect(),
        }
    }

    /// The clean images version `v` of pair `i` was generated from.
    pub fn origin(&self, i: usize, v: usize, train: &Dataset) -> Result<Tensor> {
        transforms::shift_rows(&train.images, &cache_shifts(&self.caches[i].manifest, v))
    }

    pub fn digests(&self) -> Vec<String> {
        self.caches.iter().flat_map(|c| c.digests.iter().cloned()).collect()
    }
}

/// Attacks every training image `versions` times per (source, algorithm)
/// pair, each version from a fresh random start and cache-time shift.
pub fn pregenerate_cache(
    store: Option<&CacheStore>,
    sources: &[&TrainedModel],
    algorithms: &[AttackConfig],
    train: &Dataset,
    cfg: &CacheConfig,
    seed: u64,
) -> Result<AttackCacheSet> {
    if cfg.versions == 0 {
        return Err(Error::invalid("versions must be at least 1"));
    }
    let mut caches = Vec::new();
    for src in sources {
        for a in algorithms {
            let spec = AttackSpec::new(&src.id, a.clone());
            let manifest = CacheManifest::new(&train.spec_hash, &spec, seed, cfg.versions, train.len(), cfg.shift);
            let m2 = manifest.clone();
            let gen = move |v: usize| -> Result<Tensor> {
                let x = transforms::shift_rows(&train.images, &cache_shifts(&m2, v))?;
                attack::generate_all(a, &[*src as &dyn Classifier], Some(&src.net), &x, &train.labels, m2.version_seed(v), cfg.chunk)
            };
            caches.push(match store {
                Some(s) => s.load_or_generate(manifest, gen)?,
                None => AttackCache::generate(manifest, gen)?,
            });
        }
    }
    Ok(AttackCacheSet { caches })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub arch: Architecture,
    pub train: TrainConfig,
    pub scheme: WeightingScheme,
    /// Share of the objective on clean examples.
    pub clean_weight: f64,
    /// Train-time pad-crop shift in pixels.
    pub shift: usize,
    /// Probability of patch-mixing a batch half at train time.
    pub patch_mix_prob: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            arch: Architecture::CnnSmall,
            train: TrainConfig::default(),
            scheme: WeightingScheme::Random,
            clean_weight: 0.5,
            shift: 1,
            patch_mix_prob: 0.0,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self, pairs: usize) -> Result<()> {
        self.train.validate()?;
        self.scheme.validate(pairs)?;
        if !(0.0..1.0).contains(&self.clean_weight) && pairs > 0 {
            return Err(Error::invalid("clean_weight must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.patch_mix_prob) {
            return Err(Error::invalid("patch_mix_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Record written beside a defense checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseManifest {
    pub id: String,
    pub scheme: WeightingScheme,
    pub pairs: Vec<String>,
    pub cache_digests: Vec<String>,
    #[serde(with = "rng::seed_serde")]
    pub seed: u64,
    pub config: DefenseConfig,
    pub epoch_losses: Vec<f64>,
    /// Mean weight each pair received over training.
    pub mean_weights: Vec<f64>,
    pub selection: Option<SourceSelection>,
    pub clean_accuracy: Option<f64>,
    pub worst_case_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DefendedModel {
    pub id: String,
    pub net: Network,
    pub manifest: DefenseManifest,
}

impl Classifier for DefendedModel {
    fn classes(&self) -> usize {
        self.net.classes
    }

    fn input_shape(&self) -> [usize; 3] {
        self.net.input_shape
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.net.logits(x)
    }

    fn input_gradient(
        &self,
        x: &Tensor,
        head: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        self.net.input_gradient(x, head)
    }
}

fn augment(x: Tensor, labels: &[usize], classes: usize, w: f64, cfg: &DefenseConfig, r: &mut Rng) -> Result<Batch> {
    let n = labels.len();
    let x = if cfg.shift > 0 {
        transforms::shift_rows(&x, &transforms::random_shifts(n, cfg.shift, r))?
    } else {
        x
    };
    let mut b = if cfg.patch_mix_prob > 0.0 && r.random::<f64>() < cfg.patch_mix_prob {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(r);
        let (y, lam) = transforms::patch_mix(&x, &perm, r)?;
        let mut targets = train::one_hot(labels, classes);
        for i in 0..n {
            let row = targets.row_mut(i);
            row.iter_mut().for_each(|v| *v *= 1.0 - lam[i]);
            row[labels[perm[i]]] += lam[i];
        }
        Batch {
            x: y,
            targets,
            weights: vec![0.0; n],
        }
    } else {
        Batch::hard(x, labels, classes)
    };
    b.weights = vec![w / n as f64; n];
    Ok(b)
}

/// Minimizes clean cross-entropy plus the weighted cross-entropy on cached
/// adversarial versions (one random version per image and step).
pub fn train_pubdef(id: &str, cache: &AttackCacheSet, train: &Dataset, cfg: &DefenseConfig, seed: u64) -> Result<DefendedModel> {
    let sa = cache.len();
    cfg.validate(sa)?;
    for c in &cache.caches {
        if c.manifest.rows != train.len() || c.manifest.dataset != train.spec_hash {
            return Err(Error::invalid(format!("cache {} was not built on this training set", c.manifest.spec.id())));
        }
    }
    let classes = train.classes;
    let mut net = Network::new(cfg.arch, train.image_shape(), classes, rng::derive_seed(seed, &["init"]))?;
    let mut state = WeightState::new(sa.max(1));
    let mut weight_sum = vec![0.0; sa];
    let mut batches = 0usize;
    let history = train::fit(&mut net, &cfg.train, train.len(), seed, |net, _, idx, r| {
        let (x, y) = train.batch(idx);
        if sa == 0 {
            return augment(x, &y, classes, 1.0, cfg, r);
        }
        let advs: Vec<Tensor> = cache
            .caches
            .iter()
            .map(|c| {
                let rows: Vec<Tensor> = idx
                    .iter()
                    .map(|&i| c.versions[r.random_range(0..c.versions.len())].select_rows(&[i]))
                    .collect();
                Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())
            })
            .collect::<Result<_>>()?;
        let (losses, accs) = if cfg.scheme.needs_stats() {
            let mut ls = Vec::with_capacity(sa);
            let mut acs = Vec::with_capacity(sa);
            for a in &advs {
                let z = net.logits(a)?;
                let per = loss::cross_entropy_per_sample(&z, &y)?;
                ls.push(per.iter().sum::<f64>() / per.len() as f64);
                let hits = z.argmax_rows().iter().zip(&y).filter(|(p, t)| p == t).count();
                acs.push(hits as f64 / y.len() as f64);
            }
            (ls, acs)
        } else {
            (Vec::new(), Vec::new())
        };
        let pi = compute_weights(&cfg.scheme, &mut state, &losses, &accs, r)?;
        weight_sum.iter_mut().zip(&pi).for_each(|(s, p)| *s += p);
        batches += 1;
        let mut parts = vec![augment(x, &y, classes, cfg.clean_weight, cfg, r)?];
        for (a, p) in advs.into_iter().zip(&pi) {
            if *p > 0.0 {
                parts.push(augment(a, &y, classes, (1.0 - cfg.clean_weight) * p, cfg, r)?);
            }
        }
        Batch::concat(&parts)
    })?;
    let mean_weights = weight_sum.iter().map(|s| s / batches.max(1) as f64).collect();
    Ok(DefendedModel {
        id: id.to_string(),
        net,
        manifest: DefenseManifest {
            id: id.to_string(),
            scheme: cfg.scheme,
            pairs: cache.specs().iter().map(|s| s.id()).collect(),
            cache_digests: cache.digests(),
            seed,
            config: cfg.clone(),
            epoch_losses: history,
            mean_weights,
            selection: None,
            clean_accuracy: None,
            worst_case_accuracy: None,
        },
    })
}

/// Robustness scores of a zoo model used to make the initial picks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub group: ModelGroup,
    pub linf_robustness: f64,
    pub l2_robustness: f64,
    pub corruption_robustness: f64,
}

/// White-box l-inf and l2 accuracy and mean accuracy under noise and blur.
pub fn candidate_scores(m: &TrainedModel, eval_set: &Dataset, eps: f64, steps: usize, seed: u64) -> Result<Candidate> {
    let x = &eval_set.images;
    let y = &eval_set.labels;
    let linf = attack::generate(&AttackConfig::new(Algorithm::Pgd, eps, steps), m, None, x, y, seed)?;
    let eps2 = m.config.l2_radius(eval_set.image_shape().iter().product());
    let mut r = rng::derive_rng(seed, &["l2"]);
    let l2 = train::pgd_l2_train(m, x, y, eps2, steps, 2.5 * eps2 / steps as f64, &mut r)?;
    let noisy = {
        let mut r = rng::derive_rng(seed, &["noise"]);
        let mut z = x.clone();
        for v in z.data_mut() {
            *v = (*v + 0.1 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut r)).clamp(0.0, 1.0);
        }
        z
    };
    let blurred = transforms::box_blur(x)?;
    Ok(Candidate {
        id: m.id.clone(),
        group: m.group,
        linf_robustness: eval::accuracy_on(m, &linf, y)?,
        l2_robustness: eval::accuracy_on(m, &l2, y)?,
        corruption_robustness: 0.5 * (eval::accuracy_on(m, &noisy, y)? + eval::accuracy_on(m, &blurred, y)?),
    })
}

/// Trains a probe defense on the chosen candidates and reports its accuracy
/// against a transfer attack from every candidate.
pub trait SelectionProbe {
    fn transfer_accuracy(&mut self, chosen: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Swap {
    pub round: usize,
    pub from: String,
    pub to: String,
    pub from_accuracy: f64,
    pub to_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub group: ModelGroup,
    pub initial: String,
    pub chosen: String,
    pub swaps: Vec<Swap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSelection {
    pub chosen: Vec<String>,
    pub rationale: Vec<SlotRecord>,
    pub tau: f64,
    pub rounds: usize,
}

fn best_by(cands: &[Candidate], members: &[usize], score: impl Fn(&Candidate) -> f64) -> usize {
    let mut best = members[0];
    for &i in members {
        if score(&cands[i]) > score(&cands[best]) {
            best = i;
        }
    }
    best
}

/// One representative per group, then up to `max_rounds` rounds of
/// within-group swaps toward sources whose attacks beat the probe defense by
/// more than `tau` accuracy points.
pub fn select_sources(
    cands: &[Candidate],
    groups: &[ModelGroup],
    probe: &mut dyn SelectionProbe,
    tau: f64,
    max_rounds: usize,
) -> Result<SourceSelection> {
    let mut slots = Vec::new();
    for &g in groups {
        let members: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].group == g).collect();
        if members.is_empty() {
            return Err(Error::invalid(format!("no candidate in group {g}")));
        }
        let pick = match g {
            ModelGroup::Normal => members[0],
            ModelGroup::LinfAdv => best_by(cands, &members, |c| c.linf_robustness),
            ModelGroup::L2Adv => best_by(cands, &members, |c| c.l2_robustness),
            ModelGroup::Corruption => best_by(cands, &members, |c| c.corruption_robustness),
        };
        slots.push((members, pick));
    }
    let mut rationale: Vec<SlotRecord> = slots
        .iter()
        .zip(groups)
        .map(|((_, p), &g)| SlotRecord {
            group: g,
            initial: cands[*p].id.clone(),
            chosen: cands[*p].id.clone(),
            swaps: Vec::new(),
        })
        .collect();
    let mut rounds = 0;
    while rounds < max_rounds {
        let chosen: Vec<usize> = slots.iter().map(|s| s.1).collect();
        let acc = probe.transfer_accuracy(&chosen)?;
        if acc.len() != cands.len() {
            return Err(Error::invalid("probe must score every candidate"));
        }
        rounds += 1;
        let mut swapped = false;
        for (slot, rec) in slots.iter_mut().zip(rationale.iter_mut()) {
            let cur = slot.1;
            let mut best: Option<usize> = None;
            for &u in &slot.0 {
                if u != cur && acc[u] < acc[cur] - tau && best.is_none_or(|b| acc[u] < acc[b]) {
                    best = Some(u);
                }
            }
            if let Some(u) = best {
                rec.swaps.push(Swap {
                    round: rounds,
                    from: cands[cur].id.clone(),
                    to: cands[u].id.clone(),
                    from_accuracy: acc[cur],
                    to_accuracy: acc[u],
                });
                rec.chosen = cands[u].id.clone();
                slot.1 = u;
                swapped = true;
            }
        }
        if !swapped {
            break;
        }
    }
    Ok(SourceSelection {
        chosen: slots.iter().map(|s| cands[s.1].id.clone()).collect(),
        rationale,
        tau,
        rounds,
    })
}

#[cfg(test)]
mod tests;
