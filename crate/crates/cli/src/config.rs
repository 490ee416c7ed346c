//! Experiment configuration. Every table rejects unknown keys.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tapm_core::attack::{Algorithm, AttackConfig, AttackParams};
use tapm_core::data::SyntheticSpec;
use tapm_core::model::{Architecture, Fusion};
use tapm_core::pubdef::{CacheConfig, DefenseConfig};
use tapm_core::rng;
use tapm_core::train::ModelGroup;
use tapm_core::zoo::ZooSpec;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSuite {
    pub algorithms: Vec<Algorithm>,
    pub eps: f64,
    pub steps: usize,
    pub step_size: Option<f64>,
    pub fusion: Fusion,
    pub params: AttackParams,
    /// Rows per generation chunk.
    pub chunk: usize,
    /// Evaluation rows taken from the head of the test split.
    pub eval_samples: usize,
}

impl Default for AttackSuite {
    fn default() -> Self {
        AttackSuite {
            algorithms: vec![
                Algorithm::Pgd,
                Algorithm::MPgd,
                Algorithm::Di,
                Algorithm::Ti,
                Algorithm::Admix,
                Algorithm::AutoPgdDlr,
            ],
            eps: 0.03,
            steps: 50,
            step_size: None,
            fusion: Fusion::Logits,
            params: AttackParams::default(),
            chunk: 100,
            eval_samples: 500,
        }
    }
}

impl AttackSuite {
    pub fn config(&self, algorithm: Algorithm) -> AttackConfig {
        AttackConfig {
            algorithm,
            eps: self.eps,
            steps: self.steps,
            step_size: self.step_size,
            random_start: true,
            fusion: self.fusion,
            params: self.params.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    Heuristic,
    RandomByModel,
    RandomByGroup,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub mode: SelectionMode,
    /// One source slot per listed group.
    pub groups: Vec<ModelGroup>,
    /// Swap threshold in accuracy points.
    pub tau: f64,
    pub max_rounds: usize,
    /// Epoch budget of the probe defense.
    pub probe_epochs: usize,
    /// Source ids for `mode = "fixed"`.
    pub fixed: Vec<String>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            mode: SelectionMode::Heuristic,
            groups: ModelGroup::ALL.to_vec(),
            tau: 5.0,
            max_rounds: 2,
            probe_epochs: 10,
            fixed: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub arch: Architecture,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            arch: Architecture::CnnSmall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GameConfig {
    pub mw_iterations: usize,
    pub mw_learning_rate: f64,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            mw_iterations: 100_000,
            mw_learning_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    LeaveOneGroupOut,
    AddPerGroupCount,
    SingleSource,
    RandomSelection,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::LeaveOneGroupOut,
        Ablation::AddPerGroupCount,
        Ablation::SingleSource,
        Ablation::RandomSelection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::LeaveOneGroupOut => "leave-one-group-out",
            Ablation::AddPerGroupCount => "add-per-group-count",
            Ablation::SingleSource => "single-source",
            Ablation::RandomSelection => "random-selection",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Ablations run by `tapm run`.
    pub kinds: Vec<Ablation>,
    pub replicates: usize,
    pub random_replicates: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            kinds: vec![Ablation::LeaveOneGroupOut],
            replicates: 3,
            random_replicates: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Evaluation rows used for the subspace diagnostics.
    pub samples: usize,
    /// Also fit one PCA over all samples.
    pub pooled: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            samples: 100,
            pooled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(with = "rng::seed_serde")]
    pub seed: u64,
    pub dataset: SyntheticSpec,
    pub zoo: ZooSpec,
    pub attacks: AttackSuite,
    pub cache: CacheConfig,
    pub defense: DefenseConfig,
    pub selection: SelectionConfig,
    pub baselines: BaselineConfig,
    pub game: GameConfig,
    pub ablation: AblationConfig,
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(rng::digest(self.to_toml()?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.zoo.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.attacks.algorithms.is_empty() {
            return bad("attacks.algorithms is empty".into());
        }
        for &a in &self.attacks.algorithms {
            self.attacks.config(a).validate().map_err(|e| CliError::Config(format!("attacks ({a}): {e}")))?;
        }
        if self.attacks.eval_samples == 0 || self.attacks.eval_samples > self.dataset.n_test {
            return bad(format!("attacks.eval_samples must lie in 1..={}", self.dataset.n_test));
        }
        if self.analysis.samples == 0 || self.analysis.samples > self.attacks.eval_samples {
            return bad("analysis.samples must lie in 1..=attacks.eval_samples".into());
        }
        self.cache.attack.validate().map_err(|e| CliError::Config(format!("cache.attack: {e}")))?;
        if self.cache.versions == 0 {
            return bad("cache.versions must be at least 1".into());
        }
        let slots = self.selection.groups.len();
        if slots == 0 {
            return bad("selection.groups is empty".into());
        }
        self.defense.validate(slots).map_err(|e| CliError::Config(format!("defense: {e}")))?;
        if self.selection.mode == SelectionMode::Fixed && self.selection.fixed.is_empty() {
            return bad("selection.fixed must list sources when mode = \"fixed\"".into());
        }
        if self.selection.mode != SelectionMode::Fixed {
            for g in &self.selection.groups {
                if !self.zoo.models.iter().any(|m| m.group == *g) {
                    return bad(format!("selection group {g} has no zoo model"));
                }
            }
        }
        if self.ablation.replicates == 0 || self.ablation.random_replicates == 0 {
            return bad("ablation replicate counts must be at least 1".into());
        }
        if self.game.mw_iterations == 0 || !(self.game.mw_learning_rate > 0.0) {
            return bad("game.mw_iterations and game.mw_learning_rate must be positive".into());
        }
        Ok(())
    }
}
