//! SGD training: normal, white-box adversarial and corruption procedures,
//! plus the generic loop reused by the defenses.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensors;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss;
use crate::model::{Architecture, Classifier, Network};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::transforms;

/// Training procedure of a public model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelGroup {
    Normal,
    LinfAdv,
    L2Adv,
    Corruption,
}

impl ModelGroup {
    pub const ALL: [ModelGroup; 4] = [
        ModelGroup::Normal,
        ModelGroup::LinfAdv,
        ModelGroup::L2Adv,
        ModelGroup::Corruption,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelGroup::Normal => "normal",
            ModelGroup::LinfAdv => "linf-adv",
            ModelGroup::L2Adv => "l2-adv",
            ModelGroup::Corruption => "corruption",
        }
    }
}

impl fmt::Display for ModelGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model group `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// l-inf radius of the inner attack.
    pub eps: f64,
    /// l2 radius of the inner attack; `None` means `eps * sqrt(d) / 4`.
    pub eps_l2: Option<f64>,
    pub attack_steps: usize,
    /// Inner step size; `None` means `2.5 * radius / steps`.
    pub attack_step_size: Option<f64>,
    /// Gaussian noise level of the corruption procedure.
    pub noise_std: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Epochs over which the inner attack radius ramps up linearly.
    pub eps_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            eps: 0.03,
            eps_l2: None,
            attack_steps: 7,
            attack_step_size: None,
            noise_std: 0.1,
            grad_clip: Some(5.0),
            eps_warmup_epochs: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::invalid("lr must be positive and momentum in [0, 1)"));
        }
        if self.eps < 0.0 || self.eps_l2.is_some_and(|e| e < 0.0) {
            return Err(Error::invalid("attack radius must be non-negative"));
        }
        if self.attack_steps == 0 {
            return Err(Error::invalid("attack_steps must be at least 1"));
        }
        Ok(())
    }

    pub fn l2_radius(&self, dim: usize) -> f64 {
        self.eps_l2.unwrap_or(self.eps * (dim as f64).sqrt() / 4.0)
    }

    /// Fraction of the full radius used during `epoch`.
    pub fn warmup(&self, epoch: usize) -> f64 {
        ((epoch + 1) as f64 / (self.eps_warmup_epochs + 1) as f64).min(1.0)
    }
}

/// SGD with momentum and decoupled-free (L2) weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Vec<Tensor>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(params: &NamedTensors, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            velocity: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut NamedTensors, grads: &[Tensor], lr: f64) {
        for ((v, (_, p)), g) in self.velocity.iter_mut().zip(params.iter_mut()).zip(grads) {
            for ((vi, pi), gi) in v.data_mut().iter_mut().zip(p.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Cosine-annealed learning rate at `step` of `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// One training batch: inputs, soft targets `[N, classes]` and per-row loss
/// weights.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub targets: Tensor,
    pub weights: Vec<f64>,
}

impl Batch {
    /// Hard labels with uniform weights `1/N`.
    pub fn hard(x: Tensor, labels: &[usize], classes: usize) -> Self {
        let n = labels.len();
        Batch {
            x,
            targets: one_hot(labels, classes),
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn concat(parts: &[Batch]) -> Result<Batch> {
        let x = Tensor::concat_rows(&parts.iter().map(|b| &b.x).collect::<Vec<_>>())?;
        let targets = Tensor::concat_rows(&parts.iter().map(|b| &b.targets).collect::<Vec<_>>())?;
        let weights = parts.iter().flat_map(|b| b.weights.iter().copied()).collect();
        Ok(Batch { x, targets, weights })
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.row_mut(i)[y] = 1.0;
    }
    t
}

/// `sum_i w_i * CE(logits_i, targets_i)` and its logit gradient.
pub fn weighted_soft_ce(logits: &Tensor, targets: &Tensor, weights: &[f64]) -> Result<(f64, Tensor)> {
    if logits.shape() != targets.shape() || logits.rows() != weights.len() {
        return Err(Error::invalid("logits, targets and weights disagree in shape"));
    }
    let p = loss::softmax(logits);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for i in 0..logits.rows() {
        let z = logits.row(i);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let t = targets.row(i);
        total += weights[i] * t.iter().zip(z).map(|(ti, zi)| ti * (lse - zi)).sum::<f64>();
        for (g, (pi, ti)) in grad.row_mut(i).iter_mut().zip(p.row(i).iter().zip(t)) {
            *g = weights[i] * (pi - ti);
        }
    }
    Ok((total, grad))
}

/// Runs `epochs` of minibatch SGD over `n` examples. `make_batch` receives
/// the current network, the epoch, the example indices and a batch RNG.
/// Returns the mean loss of each epoch.
pub fn fit<F>(net: &mut Network, cfg: &TrainConfig, n: usize, seed: u64, mut make_batch: F) -> Result<Vec<f64>>
where
    F: FnMut(&Network, usize, &[usize], &mut Rng) -> Result<Batch>,
{
    cfg.validate()?;
    let mut opt = Sgd::new(&net.params, cfg.momentum, cfg.weight_decay);
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::derive_rng(seed, &["epoch", &epoch.to_string()]));
        let mut sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut r = rng::derive_rng(seed, &["batch", &epoch.to_string(), &b.to_string()]);
            let batch = make_batch(net, epoch, idx, &mut r)?;
            let mut loss_value = 0.0;
            let (_, grads) = net.param_grads_with(&batch.x, &mut |z| {
                let (l, g) = weighted_soft_ce(z, &batch.targets, &batch.weights)?;
                loss_value = l;
                Ok(g)
            })?;
            if !loss_value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            let mut grads = grads;
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
                if norm > clip {
                    grads.iter_mut().for_each(|g| g.scale_in_place(clip / norm));
                }
            }
            opt.step(&mut net.params, &grads, cosine_lr(cfg.lr, step, total));
            sum += loss_value;
            step += 1;
        }
        history.push(sum / per_epoch as f64);
    }
    Ok(history)
}

/// Inner l-inf PGD used by adversarial training.
pub fn pgd_linf_train(
    clf: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    steps: usize,
    step_size: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let noise: Vec<f64> = (0..x.len()).map(|_| eps * (2.0 * rng.random::<f64>() - 1.0)).collect();
    let mut adv = x.zip_map(&Tensor::new(x.shape().to_vec(), noise)?, |a, b| a + b)?;
    transforms::project_linf(&mut adv, x, eps);
    for _ in 0..steps {
        let (_, g) = clf.input_gradient(&adv, &mut |z| loss::cross_entropy_grad(z, labels))?;
        adv.add_scaled(&g.map(f64::signum), step_size);
        transforms::project_linf(&mut adv, x, eps);
    }
    Ok(adv)
}

/// Inner l2 PGD used by adversarial training: normalized-gradient steps.
pub fn pgd_l2_train(
    clf: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    steps: usize,
    step_size: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let d = x.row_len();
    let mut adv = x.clone();
    for i in 0..x.rows() {
        let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let r = eps * rng.random::<f64>();
        for (a, v) in adv.row_mut(i).iter_mut().zip(&dir) {
            *a += r * v / norm;
        }
    }
    transforms::project_l2(&mut adv, x, eps);
    for _ in 0..steps {
        let (_, mut g) = clf.input_gradient(&adv, &mut |z| loss::cross_entropy_grad(z, labels))?;
        for i in 0..g.rows() {
            let row = g.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        adv.add_scaled(&g, step_size);
        transforms::project_l2(&mut adv, x, eps);
    }
    Ok(adv)
}

/// Applies one randomly chosen corruption (noise, blur or patch-mix).
/// Returns the corrupted batch with soft targets.
pub fn corrupt(x: &Tensor, labels: &[usize], classes: usize, noise_std: f64, rng: &mut Rng) -> Result<Batch> {
    let n = labels.len();
    match rng.random_range(0..3) {
        0 => {
            let normal = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
            let mut y = x.clone();
            for v in y.data_mut() {
                *v = (*v + normal.sample(&mut *rng)).clamp(0.0, 1.0);
            }
            Ok(Batch::hard(y, labels, classes))
        }
        1 => Ok(Batch::hard(transforms::box_blur(x)?, labels, classes)),
        _ => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            let (y, lam) = transforms::patch_mix(x, &perm, rng)?;
            let mut targets = one_hot(labels, classes);
            for i in 0..n {
                let row = targets.row_mut(i);
                row.iter_mut().for_each(|v| *v *= 1.0 - lam[i]);
                row[labels[perm[i]]] += lam[i];
            }
            Ok(Batch {
                x: y,
                targets,
                weights: vec![1.0 / n as f64; n],
            })
        }
    }
}

/// A zoo member: parameters plus how they were obtained.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub id: String,
    pub group: ModelGroup,
    pub seed: u64,
    pub config: TrainConfig,
    pub net: Network,
}

impl TrainedModel {
    pub fn arch(&self) -> Architecture {
        self.net.arch
    }
}

impl Classifier for TrainedModel {
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

/// Trains `arch` on `data` with the given procedure.
pub fn train_model(
    arch: Architecture,
    group: ModelGroup,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let shape = data.image_shape();
    let classes = data.classes;
    let mut net = Network::new(arch, shape, classes, rng::derive_seed(seed, &["init"]))?;
    let d = shape.iter().product();
    let eps2 = cfg.l2_radius(d);
    let step = |radius: f64| cfg.attack_step_size.unwrap_or(2.5 * radius / cfg.attack_steps as f64);
    fit(&mut net, cfg, data.len(), seed, |net, epoch, idx, r| {
        let (x, y) = data.batch(idx);
        let ramp = cfg.warmup(epoch);
        match group {
            ModelGroup::Normal => Ok(Batch::hard(x, &y, classes)),
            ModelGroup::LinfAdv => {
                let e = ramp * cfg.eps;
                let adv = pgd_linf_train(net, &x, &y, e, cfg.attack_steps, step(e), r)?;
                Ok(Batch::hard(adv, &y, classes))
            }
            ModelGroup::L2Adv => {
                let e = ramp * eps2;
                let adv = pgd_l2_train(net, &x, &y, e, cfg.attack_steps, step(e), r)?;
                Ok(Batch::hard(adv, &y, classes))
            }
            ModelGroup::Corruption => corrupt(&x, &y, classes, cfg.noise_std, r),
        }
    })?;
    Ok(TrainedModel {
        id: format!("{}-{}-s{}", arch, group, seed),
        group,
        seed,
        config: cfg.clone(),
        net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_soft_ce_matches_hard_ce() {
        let z = Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.2, 1.0, 0.0, 0.3]).unwrap();
        let labels = [1, 2];
        let (l, g) = weighted_soft_ce(&z, &one_hot(&labels, 3), &[0.5, 0.5]).unwrap();
        let ce = loss::cross_entropy_per_sample(&z, &labels).unwrap();
        assert!((l - (ce[0] + ce[1]) / 2.0).abs() < 1e-14);
        let hard = loss::cross_entropy_grad(&z, &labels).unwrap().map(|v| v / 2.0);
        assert!(g.max_abs_diff(&hard) < 1e-14);
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = vec![("w".to_string(), Tensor::vector(vec![1.0, -1.0]))];
        let mut opt = Sgd::new(&p, 0.0, 0.0);
        opt.step(&mut p, &[Tensor::vector(vec![0.5, 0.5])], 0.1);
        assert_eq!(p[0].1.data(), &[0.95, -1.05]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn group_names_roundtrip() {
        for g in ModelGroup::ALL {
            assert_eq!(g.name().parse::<ModelGroup>().unwrap(), g);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig::default();
        assert!((c.l2_radius(144) - 0.09).abs() < 1e-15);
    }
}
