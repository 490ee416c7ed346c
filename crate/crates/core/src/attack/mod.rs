//! Transfer-attack suite: l-inf bounded iterative attacks on a surrogate.

mod autopgd;
pub mod cache;
mod na;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use autopgd::{autopgd_checkpoints, autopgd_schedule};
pub use na::{feature_attack_loss, na_weights};

use crate::error::{Error, Result};
use crate::loss;
use crate::model::{Classifier, Ensemble, Fusion, Network};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::transforms::{self, Resample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "pgd")]
    Pgd,
    #[serde(rename = "m-pgd")]
    MPgd,
    #[serde(rename = "pregradient")]
    Pregradient,
    #[serde(rename = "di")]
    Di,
    #[serde(rename = "ti")]
    Ti,
    #[serde(rename = "admix")]
    Admix,
    #[serde(rename = "na")]
    Na,
    #[serde(rename = "ni-si-ti-dim")]
    NiSiTiDim,
    #[serde(rename = "ni-admix-ti-dim")]
    NiAdmixTiDim,
    #[serde(rename = "autopgd-ce")]
    AutoPgdCe,
    #[serde(rename = "autopgd-dlr")]
    AutoPgdDlr,
}

impl Algorithm {
    pub const ALL: [Algorithm; 11] = [
        Algorithm::Pgd,
        Algorithm::MPgd,
        Algorithm::Pregradient,
        Algorithm::Di,
        Algorithm::Ti,
        Algorithm::Admix,
        Algorithm::Na,
        Algorithm::NiSiTiDim,
        Algorithm::NiAdmixTiDim,
        Algorithm::AutoPgdCe,
        Algorithm::AutoPgdDlr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Pgd => "pgd",
            Algorithm::MPgd => "m-pgd",
            Algorithm::Pregradient => "pregradient",
            Algorithm::Di => "di",
            Algorithm::Ti => "ti",
            Algorithm::Admix => "admix",
            Algorithm::Na => "na",
            Algorithm::NiSiTiDim => "ni-si-ti-dim",
            Algorithm::NiAdmixTiDim => "ni-admix-ti-dim",
            Algorithm::AutoPgdCe => "autopgd-ce",
            Algorithm::AutoPgdDlr => "autopgd-dlr",
        }
    }

    fn momentum(self) -> bool {
        matches!(
            self,
            Algorithm::MPgd | Algorithm::Pregradient | Algorithm::NiSiTiDim | Algorithm::NiAdmixTiDim
        )
    }

    fn nesterov(self) -> bool {
        matches!(self, Algorithm::NiSiTiDim | Algorithm::NiAdmixTiDim)
    }

    fn diverse_inputs(self) -> bool {
        matches!(self, Algorithm::Di | Algorithm::NiSiTiDim | Algorithm::NiAdmixTiDim)
    }

    fn translation(self) -> bool {
        matches!(self, Algorithm::Ti | Algorithm::NiSiTiDim | Algorithm::NiAdmixTiDim)
    }

    fn admix(self) -> bool {
        matches!(self, Algorithm::Admix | Algorithm::NiAdmixTiDim)
    }

    fn is_autopgd(self) -> bool {
        matches!(self, Algorithm::AutoPgdCe | Algorithm::AutoPgdDlr)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown attack algorithm `{s}`")))
    }
}

/// Per-algorithm knobs. Each has a neutral value that reduces the attack to
/// plain PGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackParams {
    /// Momentum decay.
    pub mu: f64,
    pub di_prob: f64,
    /// Smallest resize factor of the diverse-input transform.
    pub di_low: f64,
    /// Odd translation-kernel size.
    pub ti_kernel: usize,
    pub admix_scales: usize,
    pub admix_mixes: usize,
    pub admix_eta: f64,
    pub si_scales: usize,
    pub na_steps: usize,
    /// Momentum of the AutoPGD update.
    pub apgd_alpha: f64,
    /// Required fraction of improving steps between AutoPGD checkpoints.
    pub apgd_rho: f64,
}

impl Default for AttackParams {
    fn default() -> Self {
        AttackParams {
            mu: 1.0,
            di_prob: 0.5,
            di_low: 0.9,
            ti_kernel: 5,
            admix_scales: 3,
            admix_mixes: 2,
            admix_eta: 0.2,
            si_scales: 3,
            na_steps: 8,
            apgd_alpha: 0.75,
            apgd_rho: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub algorithm: Algorithm,
    pub eps: f64,
    pub steps: usize,
    /// `None` means `2.5 * eps / steps` (AutoPGD: `2 * eps` initially).
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "yes")]
    pub random_start: bool,
    /// Average probabilities instead of logits when attacking an ensemble.
    #[serde(default)]
    pub fusion: Fusion,
    #[serde(default)]
    pub params: AttackParams,
}

fn yes() -> bool {
    true
}

impl AttackConfig {
    pub fn new(algorithm: Algorithm, eps: f64, steps: usize) -> Self {
        AttackConfig {
            algorithm,
            eps,
            steps,
            step_size: None,
            random_start: true,
            fusion: Fusion::Logits,
            params: AttackParams::default(),
        }
    }

    pub fn step(&self) -> f64 {
        match self.step_size {
            Some(s) => s,
            None if self.algorithm.is_autopgd() => 2.0 * self.eps,
            None => 2.5 * self.eps / self.steps.max(1) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::invalid(format!("epsilon must be a finite non-negative number, got {}", self.eps)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if self.step_size.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::invalid("step size must be positive"));
        }
        let p = &self.params;
        if p.ti_kernel % 2 == 0 {
            return Err(Error::invalid("ti_kernel must be odd"));
        }
        if p.admix_scales == 0 || p.si_scales == 0 {
            return Err(Error::invalid("scale counts must be at least 1"));
        }
        if !(0.0..=1.0).contains(&p.di_prob) || !(0.0 < p.di_low && p.di_low <= 1.0) {
            return Err(Error::invalid("di_prob must lie in [0, 1] and di_low in (0, 1]"));
        }
        if self.algorithm.is_autopgd() && self.steps < 4 {
            return Err(Error::invalid("AutoPGD needs at least 4 steps"));
        }
        if self.algorithm == Algorithm::Na && p.na_steps == 0 {
            return Err(Error::invalid("na_steps must be at least 1"));
        }
        Ok(())
    }
}

/// A pure attack strategy: surrogate(s) plus algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub sources: Vec<String>,
    pub config: AttackConfig,
}

impl AttackSpec {
    pub fn new(source: &str, config: AttackConfig) -> Self {
        AttackSpec {
            sources: vec![source.to_string()],
            config,
        }
    }

    pub fn source_label(&self) -> String {
        self.sources.join("+")
    }

    pub fn id(&self) -> String {
        format!("{}/{}", self.source_label(), self.config.algorithm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub x_adv: Tensor,
    pub origin: Vec<usize>,
    pub spec: AttackSpec,
    pub seed: u64,
}

/// Momentum buffer and previous gradient carried between steps.
#[derive(Debug, Clone, Default)]
pub struct PipelineState {
    pub momentum: Option<Tensor>,
    pub prev_grad: Option<Tensor>,
}

/// Per-row `g / ||g||_1`.
fn l1_normalize(g: &Tensor) -> Tensor {
    let mut out = g.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n: f64 = row.iter().map(|v| v.abs()).sum();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Per-row rescale to unit mean absolute value, so look-ahead offsets are
/// on the scale of one signed step.
fn mean_abs_normalize(g: &Tensor) -> Tensor {
    let mut out = g.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n: f64 = row.iter().map(|v| v.abs()).sum::<f64>() / row.len() as f64;
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

fn scaled_copy(x: &Tensor, s: f64) -> Tensor {
    x.map(|v| v * s)
}

/// Applies the diverse-input transform with probability `p` and returns the
/// input plus the transform used.
fn maybe_diverse(x: &Tensor, cfg: &AttackConfig, rng: &mut Rng) -> Result<(Tensor, Option<Resample>)> {
    if !cfg.algorithm.diverse_inputs() || !(rng.random::<f64>() < cfg.params.di_prob) {
        return Ok((x.clone(), None));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let t = Resample::random_resize_pad(h, w, cfg.params.di_low, rng);
    Ok((t.apply(x)?, Some(t)))
}

/// One gradient query through the optional diverse-input transform.
fn transformed_grad(
    x: &Tensor,
    cfg: &AttackConfig,
    grad_at: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    rng: &mut Rng,
) -> Result<Tensor> {
    let (xt, t) = maybe_diverse(x, cfg, rng)?;
    let g = grad_at(&xt)?;
    match t {
        Some(t) => t.adjoint(&g),
        None => Ok(g),
    }
}

/// Turns loss gradients into the ascent direction whose sign is applied:
/// look-ahead, input transforms, averaging, translation smoothing and
/// momentum, in that order. `grad_at` returns the loss gradient at a point.
pub fn gradient_pipeline(
    cfg: &AttackConfig,
    state: &mut PipelineState,
    grad_at: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    let alg = cfg.algorithm;
    let p = &cfg.params;
    let alpha = cfg.step();
    let point = match (alg, &state.momentum, &state.prev_grad) {
        (_, Some(m), _) if alg.nesterov() => {
            let mut q = x.clone();
            q.add_scaled(&mean_abs_normalize(m), alpha * p.mu);
            q
        }
        (Algorithm::Pregradient, _, Some(prev)) => {
            let mut q = x.clone();
            q.add_scaled(&mean_abs_normalize(prev), alpha);
            q
        }
        _ => x.clone(),
    };

    let mut grad = if alg.admix() {
        let n = point.rows();
        let mut acc = Tensor::zeros(point.shape());
        let mut count = 0usize;
        let mixes: Vec<Option<Vec<usize>>> = if p.admix_mixes == 0 {
            vec![None]
        } else {
            (0..p.admix_mixes)
                .map(|_| Some((0..n).map(|_| rng.random_range(0..n)).collect()))
                .collect()
        };
        for mix in &mixes {
            let base = match mix {
                Some(idx) => {
                    let mut b = point.clone();
                    b.add_scaled(&point.select_rows(idx), p.admix_eta);
                    b
                }
                None => point.clone(),
            };
            for i in 0..p.admix_scales {
                let gamma = 0.5f64.powi(i as i32);
                let g = transformed_grad(&scaled_copy(&base, gamma), cfg, grad_at, rng)?;
                acc.add_scaled(&g, gamma);
                count += 1;
            }
        }
        acc.scale_in_place(1.0 / count as f64);
        acc
    } else if alg == Algorithm::NiSiTiDim {
        let mut acc = Tensor::zeros(point.shape());
        for i in 0..p.si_scales {
            let s = 0.5f64.powi(i as i32);
            let g = transformed_grad(&scaled_copy(&point, s), cfg, grad_at, rng)?;
            acc.add_scaled(&g, s);
        }
        acc.scale_in_place(1.0 / p.si_scales as f64);
        acc
    } else {
        transformed_grad(&point, cfg, grad_at, rng)?
    };

    if alg.translation() && p.ti_kernel > 1 {
        let k = transforms::tent_kernel(p.ti_kernel)?;
        grad = transforms::smooth(&grad, &k, p.ti_kernel)?;
    }
    if alg == Algorithm::Pregradient {
        state.prev_grad = Some(grad.clone());
    }
    if alg.momentum() {
        let unit = l1_normalize(&grad);
        let m = match state.momentum.take() {
            Some(mut m) => {
                m.scale_in_place(p.mu);
                m.add_assign(&unit);
                m
            }
            None => unit,
        };
        state.momentum = Some(m.clone());
        return Ok(m);
    }
    Ok(grad)
}

/// Loss gradient of the configured objective.
fn objective_grad(
    cfg: &AttackConfig,
    src: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
) -> Result<(Tensor, Vec<f64>)> {
    let mut per_sample = Vec::new();
    let (_, g) = src.input_gradient(x, &mut |z| {
        if cfg.algorithm == Algorithm::AutoPgdDlr {
            per_sample = loss::dlr_per_sample(z, labels)?;
            loss::dlr_grad(z, labels)
        } else {
            per_sample = loss::cross_entropy_per_sample(z, labels)?;
            loss::cross_entropy_grad(z, labels)
        }
    })?;
    Ok((g, per_sample))
}

fn random_start(x: &Tensor, eps: f64, rng: &mut Rng) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += eps * (2.0 * rng.random::<f64>() - 1.0);
    }
    transforms::project_linf(&mut out, x, eps);
    out
}

fn check_finite(g: &Tensor, step: usize) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteGradient { step })
    }
}

/// Runs `cfg` against the surrogate `src` on one batch. `features` must be
/// the surrogate network when the algorithm is feature-level.
pub fn generate(
    cfg: &AttackConfig,
    src: &dyn Classifier,
    features: Option<&Network>,
    x: &Tensor,
    labels: &[usize],
    seed: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("attack inputs must lie in [0, 1]"));
    }
    if x.rows() != labels.len() {
        return Err(Error::invalid("batch rows and labels differ in length"));
    }
    if cfg.eps == 0.0 {
        return Ok(x.clone());
    }
    let mut start_rng = rng::derive_rng(seed, &["start"]);
    let mut aug_rng = rng::derive_rng(seed, &["augment"]);
    let start = if cfg.random_start {
        random_start(x, cfg.eps, &mut start_rng)
    } else {
        x.clone()
    };
    if cfg.algorithm.is_autopgd() {
        return autopgd::run(cfg, src, x, labels, start);
    }
    let na = if cfg.algorithm == Algorithm::Na {
        let net = features
            .filter(|n| n.has_feature_tap)
            .ok_or_else(|| Error::MissingFeatureTap("feature-level attack needs a single network with a feature tap".into()))?;
        let w = na_weights(net, x, labels, cfg.params.na_steps)?;
        Some((net, w))
    } else {
        None
    };
    let alpha = cfg.step();
    let mut adv = start;
    let mut state = PipelineState::default();
    for step in 0..cfg.steps {
        let mut grad_at = |q: &Tensor| -> Result<Tensor> {
            let g = match &na {
                Some((net, w)) => na::feature_loss_grad(net, q, w)?,
                None => objective_grad(cfg, src, q, labels)?.0,
            };
            check_finite(&g, step)?;
            Ok(g)
        };
        let dir = gradient_pipeline(cfg, &mut state, &mut grad_at, &adv, &mut aug_rng)?;
        check_finite(&dir, step)?;
        adv.add_scaled(&dir.map(f64::signum), alpha);
        transforms::project_linf(&mut adv, x, cfg.eps);
    }
    Ok(adv)
}

/// Runs the attack against the fused outputs of several surrogates.
pub fn ensemble_generate(
    cfg: &AttackConfig,
    members: &[&dyn Classifier],
    x: &Tensor,
    labels: &[usize],
    seed: u64,
) -> Result<Tensor> {
    if cfg.algorithm == Algorithm::Na {
        return Err(Error::MissingFeatureTap("ensembles have no feature tap".into()));
    }
    let ens = Ensemble::new(members.to_vec(), cfg.fusion)?;
    generate(cfg, &ens, None, x, labels, seed)
}

/// Attacks a whole image set in fixed-size chunks, each seeded from
/// `(seed, chunk index)` so chunking order cannot change the result.
pub fn generate_all(
    cfg: &AttackConfig,
    members: &[&dyn Classifier],
    features: Option<&Network>,
    x: &Tensor,
    labels: &[usize],
    seed: u64,
    chunk: usize,
) -> Result<Tensor> {
    use rayon::prelude::*;
    if members.is_empty() {
        return Err(Error::invalid("an attack needs at least one source"));
    }
    let n = x.rows();
    let chunk = chunk.max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + chunk).min(n)).collect();
            let xb = x.select_rows(&idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let cs = rng::derive_seed(seed, &["chunk", &(s / chunk).to_string()]);
            if members.len() == 1 {
                generate(cfg, members[0], features, &xb, &yb, cs)
            } else {
                ensemble_generate(cfg, members, &xb, &yb, cs)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        return Ok(x.clone());
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}
