//! The experiment stages. Each stage reads its inputs from earlier stages,
//! writes into its own directory under the run root and records the digests
//! of what it wrote in the run ledger.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;
use tapm_core::analysis;
use tapm_core::attack::cache::{CacheManifest, CacheStore};
use tapm_core::attack::{self, Algorithm, AttackConfig, AttackSpec};
use tapm_core::checkpoint;
use tapm_core::data::{self, Dataset};
use tapm_core::eval::{self, EvalAttacks};
use tapm_core::game;
use tapm_core::model::{Classifier, Network};
use tapm_core::pubdef::{self, AttackCacheSet, Candidate, DefenseManifest, SelectionProbe, SourceSelection, WeightingScheme};
use tapm_core::rng;
use tapm_core::train::{self, ModelGroup, TrainedModel};
use tapm_core::zoo;
use tapm_core::Tensor;

use crate::config::{Ablation, ExperimentConfig, SelectionMode};
use crate::error::{CliError, Result};
use crate::ledger::{self, RunLedger};

/// Overrides the attack cache location.
pub const CACHE_ENV: &str = "TAPM_CACHE_DIR";

/// Training rows used to score candidates and probe selections.
const SELECTION_ROWS: usize = 200;

pub const TRAIN_ZOO: &str = "train-zoo";
pub const GEN_ATTACKS: &str = "gen-attacks";
pub const TRAIN_DEFENSE: &str = "train-defense";
pub const EVAL: &str = "eval";
pub const SOLVE_GAME: &str = "solve-game";
pub const ANALYZE: &str = "analyze";

pub fn ablate_stage(kind: Ablation) -> String {
    format!("ablate-{}", kind.name())
}

fn f2(v: f64) -> String {
    format!("{v:.2}")
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    ledger::write_atomic(path, &bytes)
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ledger::write_atomic(path, toml::to_string(value)?.as_bytes())
}

/// Files produced by the running stage, relative to the run root.
pub struct Outputs {
    root: PathBuf,
    dir: String,
    files: Vec<String>,
}

impl Outputs {
    fn file(&mut self, name: &str) -> PathBuf {
        let rel = format!("{}/{}", self.dir, name);
        if !self.files.contains(&rel) {
            self.files.push(rel.clone());
        }
        self.root.join(rel)
    }
}

#[derive(Serialize)]
struct StageManifest<'a> {
    stage: &'a str,
    config_digest: &'a str,
    seed: u64,
    eval_samples: usize,
    outputs: &'a [String],
}

pub struct Context {
    pub cfg: ExperimentConfig,
    pub ledger: RunLedger,
    pub store: CacheStore,
    pub train: Dataset,
    pub test: Dataset,
    /// Head of the test split every adversarial number is measured on.
    pub eval: Dataset,
    resume: bool,
}

pub fn cache_root(out: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(p) if !p.is_empty() => PathBuf::from(p),
        _ => out.join("cache"),
    }
}

impl Context {
    /// Opens the run at `out`, with the cache root taken from the
    /// environment.
    pub fn new(cfg: ExperimentConfig, out: &Path, resume: bool) -> Result<Self> {
        Self::with_cache(cfg, out, &cache_root(out), resume)
    }

    pub fn with_cache(cfg: ExperimentConfig, out: &Path, cache: &Path, resume: bool) -> Result<Self> {
        cfg.validate()?;
        let cache = cache.to_path_buf();
        let ledger = RunLedger::open(out, &cfg.digest()?, &cache)?;
        let (train, test) = data::make_synthetic_dataset(&cfg.dataset)?;
        let eval = test.head(cfg.attacks.eval_samples);
        Ok(Context {
            store: CacheStore::new(cache),
            ledger,
            train,
            test,
            eval,
            resume,
            cfg,
        })
    }

    fn seed(&self, labels: &[&str]) -> u64 {
        rng::derive_seed(self.cfg.seed, labels)
    }

    /// `None` when the stage is already recorded and its outputs are intact.
    fn begin(&self, stage: &str, dir: &str) -> Result<Option<Outputs>> {
        if self.ledger.is_complete(stage) {
            self.ledger.verify(stage)?;
            eprintln!("{stage}: already complete");
            return Ok(None);
        }
        let d = self.ledger.root().join(dir);
        if !self.resume && d.read_dir().map(|mut r| r.next().is_some()).unwrap_or(false) {
            return Err(CliError::Ledger(format!(
                "{} holds outputs of an unfinished `{stage}` run; pass --resume to replace them",
                d.display()
            )));
        }
        std::fs::create_dir_all(&d)?;
        eprintln!("{stage}: running");
        Ok(Some(Outputs {
            root: self.ledger.root().to_path_buf(),
            dir: dir.to_string(),
            files: Vec::new(),
        }))
    }

    fn finish(&mut self, stage: &str, mut out: Outputs) -> Result<()> {
        let path = out.file("manifest.toml");
        let m = StageManifest {
            stage,
            config_digest: &self.ledger.config_digest,
            seed: self.cfg.seed,
            eval_samples: self.eval.len(),
            outputs: &out.files,
        };
        write_toml(&path, &m)?;
        self.ledger.complete(stage, &out.files)
    }

    fn dir(&self, rel: &str) -> PathBuf {
        self.ledger.root().join(rel)
    }

    pub fn load_zoo(&self) -> Result<Vec<TrainedModel>> {
        let (_, models) = zoo::load_zoo(&self.dir("zoo"), self.train.image_shape(), self.train.classes)?;
        Ok(models)
    }

    fn load_net(&self, path: &Path, arch: tapm_core::model::Architecture) -> Result<Network> {
        let params = checkpoint::read(path)?;
        Ok(Network::with_params(arch, self.train.image_shape(), self.train.classes, params)?)
    }

    pub fn load_defense(&self, id: &str) -> Result<(Network, DefenseManifest)> {
        let text = std::fs::read_to_string(self.dir("defense").join(format!("{id}.toml")))?;
        let manifest: DefenseManifest = toml::from_str(&text)?;
        let net = self.load_net(&self.dir("defense").join(format!("{id}.ckpt")), manifest.config.arch)?;
        Ok((net, manifest))
    }

    pub fn load_baseline(&self, id: &str) -> Result<Network> {
        self.load_net(&self.dir("defense").join(format!("{id}.ckpt")), self.cfg.baselines.arch)
    }

    /// One attack from `src` on the evaluation set, through the cache.
    fn eval_attack(&self, src: &TrainedModel, cfg: &AttackConfig, label: &str) -> Result<Tensor> {
        let spec = AttackSpec::new(&src.id, cfg.clone());
        let m = CacheManifest::new(&self.eval.spec_hash, &spec, self.seed(&[label]), 1, self.eval.len(), 0);
        let seed0 = m.version_seed(0);
        let c = self.store.load_or_generate(m, |_| {
            attack::generate_all(cfg, &[src as &dyn Classifier], Some(&src.net), &self.eval.images, &self.eval.labels, seed0, self.cfg.attacks.chunk)
        })?;
        Ok(c.versions.into_iter().next().expect("one version"))
    }

    /// Every (zoo source, suite algorithm) attack on the evaluation set.
    pub fn eval_attacks(&self, zoo: &[TrainedModel]) -> Result<EvalAttacks> {
        let algs = &self.cfg.attacks.algorithms;
        let mut cells = Vec::new();
        for m in zoo {
            let mut row = Vec::new();
            for &a in algs {
                if a == Algorithm::Na && !m.net.has_feature_tap {
                    row.push(None);
                } else {
                    row.push(Some(self.eval_attack(m, &self.cfg.attacks.config(a), "eval-attacks")?));
                }
            }
            cells.push(row);
        }
        Ok(EvalAttacks {
            sources: zoo.iter().map(|m| m.id.clone()).collect(),
            algorithms: algs.iter().map(|a| a.name().to_string()).collect(),
            cells,
            labels: self.eval.labels.clone(),
        })
    }

    /// Training-set caches of `sources` under the cache attack.
    pub fn train_caches(&self, sources: &[&TrainedModel]) -> Result<AttackCacheSet> {
        Ok(pubdef::pregenerate_cache(
            Some(&self.store),
            sources,
            &[self.cfg.cache.attack.clone()],
            &self.train,
            &self.cfg.cache,
            self.seed(&["train-cache"]),
        )?)
    }

    fn save_defense(&self, out: &mut Outputs, d: &pubdef::DefendedModel) -> Result<()> {
        checkpoint::write(&out.file(&format!("{}.ckpt", d.id)), &d.net.params)?;
        write_toml(&out.file(&format!("{}.toml", d.id)), &d.manifest)
    }

    // ---- stages ----

    pub fn train_zoo(&mut self) -> Result<()> {
        let Some(mut out) = self.begin(TRAIN_ZOO, "zoo")? else { return Ok(()) };
        let models = zoo::build_zoo(&self.train, &self.cfg.zoo, self.seed(&["zoo"]))?;
        let manifest = zoo::save_zoo(&self.dir("zoo"), &models, &self.test)?;
        out.file("manifest.toml");
        for e in &manifest.models {
            out.file(&e.checkpoint);
        }
        let rows: Vec<Vec<String>> = manifest
            .models
            .iter()
            .map(|e| vec![e.id.clone(), e.architecture.to_string(), e.group.to_string(), e.seed.to_string(), f2(e.clean_accuracy)])
            .collect();
        write_rows(&out.file("models.csv"), &["id", "architecture", "group", "seed", "clean"], &rows)?;
        // The zoo manifest doubles as the stage manifest.
        self.ledger.complete(TRAIN_ZOO, &out.files)
    }

    pub fn gen_attacks(&mut self) -> Result<()> {
        self.ledger.require(GEN_ATTACKS, TRAIN_ZOO)?;
        let Some(mut out) = self.begin(GEN_ATTACKS, "attacks")? else { return Ok(()) };
        let zoo = self.load_zoo()?;
        let atk = self.eval_attacks(&zoo)?;
        let mut index = Vec::new();
        let mut white = Vec::new();
        for (i, m) in zoo.iter().enumerate() {
            let clean = eval::accuracy_on(m, &self.eval.images, &self.eval.labels)?;
            for (j, a) in atk.algorithms.iter().enumerate() {
                match &atk.cells[i][j] {
                    Some(x) => {
                        let digest = rng::digest(&x.to_le_bytes());
                        index.push(vec![m.id.clone(), m.group.to_string(), a.clone(), "yes".into(), digest]);
                        let wb = eval::accuracy_on(m, x, &atk.labels)?;
                        white.push(vec![m.id.clone(), m.group.to_string(), a.clone(), f2(clean), f2(wb)]);
                    }
                    None => {
                        index.push(vec![m.id.clone(), m.group.to_string(), a.clone(), "no".into(), eval::NA.into()]);
                        white.push(vec![m.id.clone(), m.group.to_string(), a.clone(), f2(clean), eval::NA.into()]);
                    }
                }
            }
        }
        write_rows(&out.file("index.csv"), &["source", "group", "algorithm", "applicable", "digest"], &index)?;
        write_rows(&out.file("whitebox.csv"), &["source", "group", "algorithm", "clean", "adversarial"], &white)?;
        self.finish(GEN_ATTACKS, out)
    }

    /// Source indices into `zoo` for one defense.
    fn choose(&self, zoo: &[TrainedModel], mode: SelectionMode, replicate: usize, cands: &[Candidate]) -> Result<(Vec<usize>, Option<SourceSelection>)> {
        let groups = &self.cfg.selection.groups;
        let mut r = rng::derive_rng(self.cfg.seed, &["selection", &format!("{mode:?}"), &replicate.to_string()]);
        match mode {
            SelectionMode::Fixed => {
                let idx = self
                    .cfg
                    .selection
                    .fixed
                    .iter()
                    .map(|id| {
                        zoo.iter()
                            .position(|m| &m.id == id)
                            .ok_or_else(|| CliError::Config(format!("selection.fixed names unknown model `{id}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((idx, None))
            }
            SelectionMode::RandomByModel => {
                let mut all: Vec<usize> = (0..zoo.len()).collect();
                all.shuffle(&mut r);
                all.truncate(groups.len());
                Ok((all, None))
            }
            SelectionMode::RandomByGroup => {
                let mut out = Vec::new();
                while out.len() < groups.len().min(zoo.len()) {
                    let g = groups[r.random_range(0..groups.len())];
                    let free: Vec<usize> = (0..zoo.len()).filter(|i| zoo[*i].group == g && !out.contains(i)).collect();
                    if !free.is_empty() {
                        out.push(free[r.random_range(0..free.len())]);
                    }
                }
                Ok((out, None))
            }
            SelectionMode::Heuristic => {
                let mut probe = Probe {
                    ctx: self,
                    zoo,
                    transfers: Vec::new(),
                    round: 0,
                };
                let sel = pubdef::select_sources(cands, groups, &mut probe, self.cfg.selection.tau, self.cfg.selection.max_rounds)?;
                let idx = sel
                    .chosen
                    .iter()
                    .map(|id| zoo.iter().position(|m| &m.id == id).expect("chosen from the zoo"))
                    .collect();
                Ok((idx, Some(sel)))
            }
        }
    }

    fn selection_set(&self) -> Dataset {
        self.train.head(SELECTION_ROWS)
    }

    pub fn train_defense(&mut self) -> Result<()> {
        self.ledger.require(TRAIN_DEFENSE, TRAIN_ZOO)?;
        let Some(mut out) = self.begin(TRAIN_DEFENSE, "defense")? else { return Ok(()) };
        let zoo = self.load_zoo()?;
        let sel = self.selection_set();
        let eps = self.cfg.attacks.eps;
        let steps = self.cfg.attacks.steps;
        let cands = zoo
            .iter()
            .map(|m| pubdef::candidate_scores(m, &sel, eps, steps, self.seed(&["candidates", &m.id])))
            .collect::<tapm_core::Result<Vec<_>>>()?;
        let rows: Vec<Vec<String>> = cands
            .iter()
            .map(|c| vec![c.id.clone(), c.group.to_string(), f2(c.linf_robustness), f2(c.l2_robustness), f2(c.corruption_robustness)])
            .collect();
        write_rows(&out.file("candidates.csv"), &["id", "group", "linf", "l2", "corruption"], &rows)?;

        let (chosen, selection) = self.choose(&zoo, self.cfg.selection.mode, 0, &cands)?;
        #[derive(Serialize)]
        struct SelectionFile<'a> {
            mode: SelectionMode,
            chosen: Vec<&'a str>,
            selection: Option<&'a SourceSelection>,
        }
        write_toml(
            &out.file("selection.toml"),
            &SelectionFile {
                mode: self.cfg.selection.mode,
                chosen: chosen.iter().map(|&i| zoo[i].id.as_str()).collect(),
                selection: selection.as_ref(),
            },
        )?;

        let srcs: Vec<&TrainedModel> = chosen.iter().map(|&i| &zoo[i]).collect();
        let cache = self.train_caches(&srcs)?;
        let mut d = pubdef::train_pubdef("pubdef", &cache, &self.train, &self.cfg.defense, self.seed(&["pubdef"]))?;
        d.manifest.selection = selection;
        self.save_defense(&mut out, &d)?;

        let arch = self.cfg.baselines.arch;
        for (id, group) in [("undefended", ModelGroup::Normal), ("whitebox-at", ModelGroup::LinfAdv)] {
            let cfg = self.cfg.zoo.config_for(group);
            let m = train::train_model(arch, group, &self.train, cfg, self.seed(&[id]))?;
            checkpoint::write(&out.file(&format!("{id}.ckpt")), &m.net.params)?;
        }
        self.finish(TRAIN_DEFENSE, out)
    }

    /// Sources and algorithm names the main defense trained on.
    fn trained_pairs(&self, m: &DefenseManifest) -> Vec<(String, String)> {
        m.pairs
            .iter()
            .filter_map(|p| p.rsplit_once('/').map(|(s, a)| (s.to_string(), a.to_string())))
            .collect()
    }

    pub fn eval(&mut self) -> Result<()> {
        self.ledger.require(EVAL, GEN_ATTACKS)?;
        self.ledger.require(EVAL, TRAIN_DEFENSE)?;
        let Some(mut out) = self.begin(EVAL, "eval")? else { return Ok(()) };
        let zoo = self.load_zoo()?;
        let atk = self.eval_attacks(&zoo)?;
        let (pubdef_net, pubdef_manifest) = self.load_defense("pubdef")?;
        let targets: Vec<(&str, Network)> = vec![
            ("undefended", self.load_baseline("undefended")?),
            ("whitebox-at", self.load_baseline("whitebox-at")?),
            ("pubdef", pubdef_net),
        ];
        let mut table1 = Vec::new();
        let mut pubdef_grid = None;
        for (id, net) in &targets {
            let grid = eval::eval_grid(id, net, &atk)?;
            grid.write_csv(&out.file(&format!("grid_{id}.csv")))?;
            let wc = eval::worst_case(&grid)?;
            let clean = eval::clean_accuracy(net, &self.test)?;
            table1.push(vec![id.to_string(), f2(clean), f2(wc.value), wc.source.clone(), wc.algorithm.clone(), grid.samples.to_string()]);
            if *id == "pubdef" {
                pubdef_grid = Some(grid);
            }
        }
        write_rows(
            &out.file("table1.csv"),
            &["model", "clean", "worst_case", "worst_source", "worst_algorithm", "samples"],
            &table1,
        )?;

        let grid = pubdef_grid.expect("pubdef target");
        let trained: Vec<(String, String)> = self
            .trained_pairs(&pubdef_manifest)
            .into_iter()
            .filter(|(s, a)| grid.rows.contains(s) && grid.cols.contains(a))
            .collect();
        let rep = eval::seen_unseen(&grid, &trained)?;
        let cells = [
            ("seen-source/seen-algorithm", &rep.seen_src_seen_algo),
            ("unseen-source/seen-algorithm", &rep.unseen_src_seen_algo),
            ("seen-source/unseen-algorithm", &rep.seen_src_unseen_algo),
            ("unseen-source/unseen-algorithm", &rep.unseen_src_unseen_algo),
        ];
        let mut table2: Vec<Vec<String>> = cells
            .iter()
            .map(|(name, c)| match c {
                Some(c) => vec![name.to_string(), c.source.clone(), c.algorithm.clone(), f2(c.value)],
                None => vec![name.to_string(), eval::NA.into(), eval::NA.into(), eval::NA.into()],
            })
            .collect();
        table2.push(vec!["all".into(), rep.global.source.clone(), rep.global.algorithm.clone(), f2(rep.global.value)]);
        write_rows(&out.file("table2.csv"), &["partition", "source", "algorithm", "accuracy"], &table2)?;
        #[derive(Serialize)]
        struct Report<'a> {
            samples: usize,
            gap: Option<f64>,
            trained_pairs: &'a [(String, String)],
            report: &'a eval::SeenUnseenReport,
        }
        write_toml(
            &out.file("seen_unseen.toml"),
            &Report {
                samples: grid.samples,
                gap: rep.gap(),
                trained_pairs: &trained,
                report: &rep,
            },
        )?;
        self.finish(EVAL, out)
    }

    pub fn solve_game(&mut self) -> Result<()> {
        self.ledger.require(SOLVE_GAME, TRAIN_DEFENSE)?;
        let Some(mut out) = self.begin(SOLVE_GAME, "game")? else { return Ok(()) };
        let zoo = self.load_zoo()?;
        let (_, manifest) = self.load_defense("pubdef")?;
        let srcs: Vec<&TrainedModel> = manifest
            .pairs
            .iter()
            .map(|p| {
                let s = p.rsplit_once('/').map(|x| x.0).unwrap_or(p);
                zoo.iter().find(|m| m.id == s).ok_or_else(|| CliError::Ledger(format!("defense source `{s}` is not in the zoo")))
            })
            .collect::<Result<_>>()?;
        let cache = self.train_caches(&srcs)?;
        let cols: Vec<String> = cache.specs().iter().map(|s| s.id()).collect();
        let mut attacks = BTreeMap::new();
        for (src, col) in srcs.iter().zip(&cols) {
            attacks.insert(col.clone(), self.eval_attack(src, &self.cfg.cache.attack, "game-attacks")?);
        }

        let simple = game::train_simple_game_defenders(&cache, &self.train, &self.cfg.defense, self.seed(&["simple-game"]))?;
        let defenders: Vec<(String, &dyn Classifier)> = simple.iter().map(|d| (d.id.clone(), d as &dyn Classifier)).collect();
        let payoff = game::compute_payoff_matrix(&defenders, &cols, &attacks, &self.eval.labels)?;
        payoff.write_csv(&out.file("payoff.csv"))?;
        let lp = game::solve_zero_sum_lp(&payoff.values)?;
        lp.write_toml(&out.file("equilibrium.toml"), &payoff)?;
        let mw = game::solve_multiplicative_weights(&payoff.values, self.cfg.game.mw_iterations, self.cfg.game.mw_learning_rate)?;
        mw.write_toml(&out.file("multiplicative_weights.toml"), &payoff)?;

        let mut cfg = self.cfg.defense.clone();
        cfg.scheme = WeightingScheme::All;
        let all = pubdef::train_pubdef("pubdef-all", &cache, &self.train, &cfg, self.seed(&["pubdef-all"]))?;
        let all_payoff = game::compute_payoff_matrix(&[(all.id.clone(), &all as &dyn Classifier)], &cols, &attacks, &self.eval.labels)?;
        let row = &all_payoff.values[0];
        let worst = row.iter().cloned().fold(f64::INFINITY, f64::min);

        let mut header = vec!["defender".to_string(), "worst_case".to_string()];
        header.extend(cols.iter().cloned());
        let mut rows = Vec::new();
        let mut r = vec!["simple-game-equilibrium".to_string(), f2(lp.value)];
        r.extend(col_values(&payoff.values, &lp.defender).iter().map(|v| f2(*v)));
        rows.push(r);
        let mut r = vec![all.id.clone(), f2(worst)];
        r.extend(row.iter().map(|v| f2(*v)));
        rows.push(r);
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        write_rows(&out.file("comparison.csv"), &h, &rows)?;
        self.finish(SOLVE_GAME, out)
    }

    pub fn analyze(&mut self) -> Result<()> {
        self.ledger.require(ANALYZE, GEN_ATTACKS)?;
        let Some(mut out) = self.begin(ANALYZE, "analysis")? else { return Ok(()) };
        let zoo = self.load_zoo()?;
        let atk = self.eval_attacks(&zoo)?;
        let idx: Vec<usize> = (0..self.cfg.analysis.samples).collect();
        let clean = self.eval.images.select_rows(&idx);
        let mut adv = Vec::new();
        let mut groups = Vec::new();
        for (m, row) in zoo.iter().zip(&atk.cells) {
            for x in row.iter().flatten() {
                adv.push(x.select_rows(&idx));
                groups.push(m.group.to_string());
            }
        }
        let set = analysis::PerturbationSet::from_pairs(&clean, &adv, groups)?;
        let cos = analysis::cosine_group_matrix(&set)?;
        cos.write_csv(&out.file("cosine.csv"))?;
        let curves = analysis::per_sample_curves(&set)?;
        analysis::write_curves_csv(&out.file("pca_curves.csv"), &curves)?;
        let dims = |c: &analysis::ExplainedVarianceCurve, t: f64| match analysis::dims_for_threshold(c, t) {
            Ok(k) => k.to_string(),
            Err(_) => eval::NA.to_string(),
        };
        let mut summary: Vec<Vec<String>> = curves
            .iter()
            .enumerate()
            .map(|(s, c)| vec![s.to_string(), dims(c, 0.90), dims(c, 0.95)])
            .collect();
        if self.cfg.analysis.pooled {
            let c = analysis::pooled_curve(&set)?;
            summary.push(vec!["pooled".into(), dims(&c, 0.90), dims(&c, 0.95)]);
        }
        write_rows(&out.file("pca_summary.csv"), &["sample", "dims_90", "dims_95"], &summary)?;
        #[derive(Serialize)]
        struct Info {
            samples: usize,
            perturbations: usize,
            excluded_zero_norm: usize,
            degenerate_curves: usize,
        }
        write_toml(
            &out.file("analysis.toml"),
            &Info {
                samples: set.samples(),
                perturbations: set.deltas.len(),
                excluded_zero_norm: cos.excluded,
                degenerate_curves: curves.iter().filter(|c| c.degenerate).count(),
            },
        )?;
        self.finish(ANALYZE, out)
    }

    /// Trains a defense on `sources` and returns its clean accuracy on the
    /// test split and worst case over `atk`.
    fn variant(&self, zoo: &[TrainedModel], atk: &EvalAttacks, sources: &[usize], id: &str, seed: u64) -> Result<(f64, f64)> {
        let srcs: Vec<&TrainedModel> = sources.iter().map(|&i| &zoo[i]).collect();
        let cache = self.train_caches(&srcs)?;
        let mut cfg = self.cfg.defense.clone();
        if cache.len() < 2 {
            cfg.scheme = WeightingScheme::All;
        }
        let d = pubdef::train_pubdef(id, &cache, &self.train, &cfg, seed)?;
        let grid = eval::eval_grid(id, &d, atk)?;
        Ok((eval::clean_accuracy(&d, &self.test)?, eval::worst_case(&grid)?.value))
    }

    pub fn ablate(&mut self, kind: Ablation) -> Result<()> {
        let stage = ablate_stage(kind);
        self.ledger.require(&stage, TRAIN_DEFENSE)?;
        self.ledger.require(&stage, GEN_ATTACKS)?;
        if self.cfg.ablation.replicates == 0 || self.cfg.ablation.random_replicates == 0 {
            return Err(CliError::Config("ablation replicate counts must be at least 1".into()));
        }
        let Some(mut out) = self.begin(&stage, &format!("ablation/{}", kind.name()))? else { return Ok(()) };
        let zoo = self.load_zoo()?;
        let atk = self.eval_attacks(&zoo)?;
        let (_, manifest) = self.load_defense("pubdef")?;
        let base: Vec<usize> = manifest
            .pairs
            .iter()
            .filter_map(|p| {
                let s = p.rsplit_once('/').map(|x| x.0).unwrap_or(p);
                zoo.iter().position(|m| m.id == s)
            })
            .collect();
        let reps = match kind {
            Ablation::RandomSelection => self.cfg.ablation.random_replicates,
            _ => self.cfg.ablation.replicates,
        };

        // (variant, sources) pairs per replicate.
        let mut variants: Vec<(String, Vec<usize>)> = Vec::new();
        match kind {
            Ablation::LeaveOneGroupOut => {
                variants.push(("all".into(), base.clone()));
                for g in &self.cfg.selection.groups {
                    let keep: Vec<usize> = base.iter().copied().filter(|&i| zoo[i].group != *g).collect();
                    variants.push((format!("without-{g}"), keep));
                }
            }
            Ablation::AddPerGroupCount => {
                let per = self
                    .cfg
                    .selection
                    .groups
                    .iter()
                    .map(|g| zoo.iter().filter(|m| m.group == *g).count())
                    .min()
                    .unwrap_or(0);
                for m in 1..=per {
                    let mut srcs = Vec::new();
                    for g in &self.cfg.selection.groups {
                        let mut members: Vec<usize> = base.iter().copied().filter(|&i| zoo[i].group == *g).collect();
                        let rest: Vec<usize> = (0..zoo.len()).filter(|i| zoo[*i].group == *g && !members.contains(i)).collect();
                        members.extend(rest);
                        srcs.extend(members.into_iter().take(m));
                    }
                    variants.push((format!("{m}-per-group"), srcs));
                }
            }
            Ablation::SingleSource => {
                for (i, m) in zoo.iter().enumerate() {
                    variants.push((m.id.clone(), vec![i]));
                }
            }
            Ablation::RandomSelection => {}
        }

        let mut rows = Vec::new();
        for r in 0..reps {
            let mut vs = variants.clone();
            if kind == Ablation::RandomSelection {
                for mode in [SelectionMode::RandomByModel, SelectionMode::RandomByGroup] {
                    let (idx, _) = self.choose(&zoo, mode, r, &[])?;
                    let name = if mode == SelectionMode::RandomByModel { "random-by-model" } else { "random-by-group" };
                    vs.push((name.into(), idx));
                }
            }
            for (name, srcs) in vs {
                let seed = self.seed(&["ablate", kind.name(), &r.to_string(), &name]);
                let (clean, worst) = self.variant(&zoo, &atk, &srcs, &format!("ablation-{name}"), seed)?;
                let ids: Vec<&str> = srcs.iter().map(|&i| zoo[i].id.as_str()).collect();
                rows.push(vec![name, r.to_string(), ids.join(" "), f2(clean), f2(worst)]);
            }
        }
        write_rows(&out.file("replicates.csv"), &["variant", "replicate", "sources", "clean", "worst_case"], &rows)?;

        let mut names: Vec<String> = Vec::new();
        for r in &rows {
            if !names.contains(&r[0]) {
                names.push(r[0].clone());
            }
        }
        let summary: Vec<Vec<String>> = names
            .iter()
            .map(|n| {
                let mine: Vec<&Vec<String>> = rows.iter().filter(|r| &r[0] == n).collect();
                let mean = |k: usize| mine.iter().map(|r| r[k].parse::<f64>().unwrap_or(f64::NAN)).sum::<f64>() / mine.len() as f64;
                vec![n.clone(), mine.len().to_string(), f2(mean(3)), f2(mean(4))]
            })
            .collect();
        write_rows(&out.file("summary.csv"), &["variant", "replicates", "clean", "worst_case"], &summary)?;
        self.finish(&stage, out)
    }

    /// Every stage, then the configured ablations.
    pub fn run_all(&mut self) -> Result<()> {
        self.train_zoo()?;
        self.gen_attacks()?;
        self.train_defense()?;
        self.eval()?;
        self.solve_game()?;
        self.analyze()?;
        for k in self.cfg.ablation.kinds.clone() {
            self.ablate(k)?;
        }
        Ok(())
    }
}

/// `p^T R` per column.
fn col_values(r: &[Vec<f64>], p: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r.first().map_or(0, Vec::len)];
    for (pi, row) in p.iter().zip(r) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += pi * v;
        }
    }
    out
}

/// Short-budget all-pairs defense used to test a selection.
struct Probe<'a> {
    ctx: &'a Context,
    zoo: &'a [TrainedModel],
    /// Transfer attack of every candidate on the selection rows.
    transfers: Vec<Tensor>,
    round: usize,
}

impl SelectionProbe for Probe<'_> {
    fn transfer_accuracy(&mut self, chosen: &[usize]) -> tapm_core::Result<Vec<f64>> {
        let ctx = self.ctx;
        let sel = ctx.selection_set();
        if self.transfers.is_empty() {
            let cfg = ctx.cfg.attacks.config(Algorithm::Pgd);
            for m in self.zoo {
                let s = ctx.seed(&["probe-transfer", &m.id]);
                self.transfers
                    .push(attack::generate_all(&cfg, &[m as &dyn Classifier], None, &sel.images, &sel.labels, s, ctx.cfg.attacks.chunk)?);
            }
        }
        let srcs: Vec<&TrainedModel> = chosen.iter().map(|&i| &self.zoo[i]).collect();
        let cache = ctx.train_caches(&srcs).map_err(|e| match e {
            CliError::Core(e) => e,
            other => tapm_core::Error::Cache(other.to_string()),
        })?;
        let mut cfg = ctx.cfg.defense.clone();
        cfg.scheme = WeightingScheme::All;
        cfg.train.epochs = ctx.cfg.selection.probe_epochs;
        cfg.train.eps_warmup_epochs = cfg.train.eps_warmup_epochs.min(cfg.train.epochs.saturating_sub(1));
        let probe = pubdef::train_pubdef("probe", &cache, &ctx.train, &cfg, ctx.seed(&["probe", &self.round.to_string()]))?;
        self.round += 1;
        self.transfers.iter().map(|x| eval::accuracy_on(&probe, x, &sel.labels)).collect()
    }
}

/// Reads a CSV written by a stage into string rows, header first.
pub fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        out.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(out)
}
