//! Declarative run configuration (TOML) driving every command.
//!
//! All randomness derives from the top-level `seed`: sub-seeds are
//! `derive_seed(seed, stream)` with streams 1 pool layout, 2 world
//! coefficients, 3 user population, 4 stream sampling, 5 learner init and
//! shuffling, 6 train/validation split, 7 evaluation, 8 history replay. Seed
//! fields inside sub-sections are overwritten by this derivation.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{HteError, Result};
use crate::evaluation::DEFAULT_N_POINTS;
use crate::incremental::{CadenceMode, DriftThresholds, TrainingCadenceConfig};
use crate::learners::LearnerConfig;
use crate::selection::SelectionCriteria;
use crate::simgen::{GeneratorConfig, PoolConfig};
use crate::tlearner::{Scope, SplitParams};
use crate::util::{derive_seed, sha256_hex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Pool directory (or stream root with `week_NN` subdirectories).
    pub pool: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            pool: PathBuf::from("pool"),
            output: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulationKind {
    Pool,
    Stream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSettings {
    pub weeks: usize,
    pub generator: GeneratorConfig,
    /// Users in each week's held-out evaluation experiment.
    pub eval_users: usize,
}

impl Default for StreamSettings {
    fn default() -> Self {
        Self {
            weeks: 8,
            generator: GeneratorConfig {
                experiment_id: "stream".into(),
                heterogeneity: 1.5,
                drift_rate: 0.1,
                ..GeneratorConfig::default()
            },
            eval_users: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSettings {
    pub kind: SimulationKind,
    pub pool: PoolConfig,
    pub stream: StreamSettings,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self {
            kind: SimulationKind::Pool,
            pool: PoolConfig::default(),
            stream: StreamSettings::default(),
        }
    }
}

/// Selection criteria with an optional reference date (defaults to the latest
/// end date in the pool).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriteriaSettings {
    pub name: String,
    pub max_recency_days: Option<i64>,
    pub min_control_size: usize,
    pub min_lift_multiples: f64,
    pub as_of_date: Option<NaiveDate>,
}

impl Default for CriteriaSettings {
    fn default() -> Self {
        Self {
            name: "default".into(),
            max_recency_days: Some(180),
            min_control_size: 10_000,
            min_lift_multiples: 2.0,
            as_of_date: None,
        }
    }
}

impl CriteriaSettings {
    pub fn resolve(&self, fallback_as_of: NaiveDate) -> SelectionCriteria {
        SelectionCriteria {
            max_recency_days: self.max_recency_days,
            min_control_size: self.min_control_size,
            min_lift_multiples: self.min_lift_multiples,
            as_of_date: self.as_of_date.unwrap_or(fallback_as_of),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub n_points: usize,
    /// Held out from training when `eval_experiments` is empty; picked by a
    /// seeded hash of the experiment id.
    pub n_eval_experiments: usize,
    pub eval_experiments: Vec<String>,
    pub random_replications: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            n_points: DEFAULT_N_POINTS,
            n_eval_experiments: 5,
            eval_experiments: Vec::new(),
            random_replications: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CadenceSettings {
    pub modes: Vec<CadenceMode>,
    pub history_retention_weeks: usize,
    pub replay_fraction: f64,
    pub window_weeks: usize,
    /// Apply `[selection]` to each week's experiments.
    pub apply_selection: bool,
    pub drift: DriftThresholds,
}

impl Default for CadenceSettings {
    fn default() -> Self {
        Self {
            modes: vec![CadenceMode::Incremental, CadenceMode::FromScratchWeekly],
            history_retention_weeks: 4,
            replay_fraction: 0.3,
            window_weeks: 1,
            apply_selection: false,
            drift: DriftThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: Option<usize>,
    pub paths: Paths,
    pub simulate: SimulateSettings,
    pub selection: CriteriaSettings,
    /// Extra criteria variants reported by `select` (grid search).
    pub selection_grid: Vec<CriteriaSettings>,
    pub learner: LearnerConfig,
    pub split: SplitParams,
    pub scopes: Vec<String>,
    /// Outcome to model; defaults to the pool's primary outcome.
    pub metric: Option<String>,
    pub evaluation: EvaluationSettings,
    pub cadence: CadenceSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 42,
            workers: None,
            paths: Paths::default(),
            simulate: SimulateSettings::default(),
            selection: CriteriaSettings::default(),
            selection_grid: Vec::new(),
            learner: LearnerConfig::default(),
            split: SplitParams::default(),
            scopes: vec!["general".into()],
            metric: None,
            evaluation: EvaluationSettings::default(),
            cadence: CadenceSettings::default(),
        };
        cfg.derive_seeds();
        cfg
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| HteError::RunConfig(e.to_string()))?;
        cfg.derive_seeds();
        Ok(cfg)
    }

    /// Loads a config; relative paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| HteError::RunConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.pool, &mut cfg.paths.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.derive_seeds();
        self
    }

    pub fn derive_seeds(&mut self) {
        let s = self.seed;
        let world = derive_seed(s, 2);
        let population = derive_seed(s, 3);
        self.simulate.pool.seed = derive_seed(s, 1);
        self.simulate.pool.template.world_seed = world;
        self.simulate.pool.template.population_seed = population;
        self.simulate.stream.generator.seed = derive_seed(s, 4);
        self.simulate.stream.generator.world_seed = world;
        self.simulate.stream.generator.population_seed = population;
        self.learner.seed = derive_seed(s, 5);
        self.split.seed = derive_seed(s, 6);
        self.evaluation.seed = derive_seed(s, 7);
    }

    pub fn replay_seed(&self) -> u64 {
        derive_seed(self.seed, 8)
    }

    pub fn validate(&self) -> Result<()> {
        self.learner
            .validate()
            .map_err(|e| HteError::RunConfig(format!("[learner] {e}")))?;
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(HteError::RunConfig("[split] train_fraction must lie in (0, 1)".into()));
        }
        if self.split.max_vocab == 0 {
            return Err(HteError::RunConfig("[split] max_vocab must be >= 1".into()));
        }
        if self.evaluation.n_points == 0 {
            return Err(HteError::RunConfig("[evaluation] n_points must be >= 1".into()));
        }
        if self.evaluation.random_replications == 0 {
            return Err(HteError::RunConfig("[evaluation] random_replications must be >= 1".into()));
        }
        if self.scopes.is_empty() {
            return Err(HteError::RunConfig("scopes must list at least one scope".into()));
        }
        for s in &self.scopes {
            s.parse::<Scope>()
                .map_err(|e| HteError::RunConfig(format!("scopes: {e}")))?;
        }
        for c in std::iter::once(&self.selection).chain(&self.selection_grid) {
            c.resolve(NaiveDate::default())
                .validate()
                .map_err(|e| HteError::RunConfig(format!("[selection] {e}")))?;
        }
        if self.cadence.modes.is_empty() {
            return Err(HteError::RunConfig("[cadence] modes must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.cadence.replay_fraction) {
            return Err(HteError::RunConfig("[cadence] replay_fraction must lie in [0, 1]".into()));
        }
        if self.cadence.window_weeks == 0 {
            return Err(HteError::RunConfig("[cadence] window_weeks must be >= 1".into()));
        }
        if self.workers == Some(0) {
            return Err(HteError::RunConfig("workers must be >= 1".into()));
        }
        match self.simulate.kind {
            SimulationKind::Pool => self.simulate.pool.template.validate(),
            SimulationKind::Stream => {
                if self.simulate.stream.weeks == 0 {
                    return Err(HteError::RunConfig("[simulate.stream] weeks must be >= 1".into()));
                }
                self.simulate.stream.generator.validate()
            }
        }
        .map_err(|e| HteError::RunConfig(format!("[simulate] {e}")))?;
        Ok(())
    }

    pub fn scopes(&self) -> Result<Vec<Scope>> {
        self.scopes.iter().map(|s| s.parse()).collect()
    }

    /// Hash of the resolved configuration, used in manifests.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn cadence_config(&self, mode: CadenceMode, metric: &str, criteria: Option<SelectionCriteria>) -> Result<TrainingCadenceConfig> {
        Ok(TrainingCadenceConfig {
            mode,
            history_retention_weeks: self.cadence.history_retention_weeks,
            replay_fraction: self.cadence.replay_fraction,
            window_weeks: self.cadence.window_weeks,
            criteria,
            learner: self.learner.clone(),
            split: self.split.clone(),
            scope: self.scopes()?.into_iter().next().unwrap_or_else(Scope::general),
            metric: metric.to_string(),
            n_points: self.evaluation.n_points,
            drift: self.cadence.drift.clone(),
            replay_seed: self.replay_seed(),
        })
    }
}
