//! Weekly retraining: warm-started incremental updates with history replay, or
//! a from-scratch retrain on a recent window, plus feature and label drift
//! monitoring.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{partition_indices, Experiment, FeatureValue, UserObservation};
use crate::error::{HteError, Result};
use crate::evaluation::{evaluate_model, DEFAULT_N_POINTS};
use crate::learners::LearnerConfig;
use crate::selection::{select_experiments, SelectionCriteria};
use crate::tlearner::{fit_from_rows, Scope, SplitParams, TLearnerModel};
use crate::transform::{fit_transform_spec, TransformSpec};
use crate::util::{derive_seed, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CadenceMode {
    Incremental,
    FromScratchWeekly,
}

impl CadenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CadenceMode::Incremental => "incremental",
            CadenceMode::FromScratchWeekly => "from_scratch_weekly",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftThresholds {
    pub max_abs_smd: f64,
    pub max_oov_rate: f64,
    /// Relative change of an outcome mean against the fitting rows.
    pub max_outcome_change: f64,
}

impl Default for DriftThresholds {
    fn default() -> Self {
        Self {
            max_abs_smd: 0.2,
            max_oov_rate: 0.1,
            max_outcome_change: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingCadenceConfig {
    pub mode: CadenceMode,
    /// Weeks of past training rows kept for replay.
    pub history_retention_weeks: usize,
    /// Share of each incremental training set drawn from retained history.
    pub replay_fraction: f64,
    /// Weeks of data (current included) a from-scratch retrain uses.
    pub window_weeks: usize,
    /// Applied to each week's experiments with `as_of_date` set to the week's
    /// latest end date. `None` keeps every experiment.
    pub criteria: Option<SelectionCriteria>,
    pub learner: LearnerConfig,
    pub split: SplitParams,
    pub scope: Scope,
    pub metric: String,
    pub n_points: usize,
    pub drift: DriftThresholds,
    pub replay_seed: u64,
}

impl Default for TrainingCadenceConfig {
    fn default() -> Self {
        Self {
            mode: CadenceMode::Incremental,
            history_retention_weeks: 4,
            replay_fraction: 0.3,
            window_weeks: 1,
            criteria: None,
            learner: LearnerConfig::default(),
            split: SplitParams::default(),
            scope: Scope::general(),
            metric: "conversion".into(),
            n_points: DEFAULT_N_POINTS,
            drift: DriftThresholds::default(),
            replay_seed: 5,
        }
    }
}

impl TrainingCadenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return Err(HteError::config("replay_fraction", "must lie in [0, 1]"));
        }
        if self.window_weeks == 0 {
            return Err(HteError::config("window_weeks", "must be >= 1"));
        }
        if self.n_points == 0 {
            return Err(HteError::config("n_points", "must be >= 1"));
        }
        if let Some(c) = &self.criteria {
            c.validate()?;
        }
        self.learner.validate()
    }
}

/// One week of input: experiments that completed this week, and held-out
/// experiments used only for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct WeekInput {
    /// 1-based.
    pub week: usize,
    pub experiments: Vec<Experiment>,
    pub eval: Vec<Experiment>,
}

#[derive(Debug, Clone, PartialEq)]
struct StoredWeek {
    week: usize,
    experiment_ids: Vec<String>,
    train: Vec<UserObservation>,
    valid: Vec<UserObservation>,
}

/// Retained train/validation partitions of past weeks' selected experiments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HistoryStore {
    weeks: VecDeque<StoredWeek>,
}

impl HistoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn weeks(&self) -> Vec<usize> {
        self.weeks.iter().map(|w| w.week).collect()
    }

    pub fn row_count(&self) -> usize {
        self.weeks.iter().map(|w| w.train.len()).sum()
    }

    fn push(&mut self, week: StoredWeek) {
        self.weeks.push_back(week);
    }

    /// Drops weeks older than `keep` weeks before `current`.
    fn prune(&mut self, current: usize, keep: usize) {
        while matches!(self.weeks.front(), Some(w) if w.week + keep < current) {
            self.weeks.pop_front();
        }
    }

    fn range(&self, from: usize, to: usize) -> impl Iterator<Item = &StoredWeek> {
        self.weeks.iter().filter(move |w| w.week >= from && w.week <= to)
    }
}

/// Experiments of `input` that pass selection and scope.
fn selected_for_week<'a>(cfg: &TrainingCadenceConfig, input: &'a WeekInput) -> Result<Vec<&'a Experiment>> {
    let in_scope: Vec<&Experiment> = input.experiments.iter().filter(|e| cfg.scope.matches(&e.meta)).collect();
    let Some(criteria) = &cfg.criteria else {
        return Ok(in_scope);
    };
    let Some(as_of) = in_scope.iter().map(|e| e.meta.end_date).max() else {
        return Ok(in_scope);
    };
    let owned: Vec<Experiment> = in_scope.iter().map(|e| (*e).clone()).collect();
    let week_criteria = SelectionCriteria {
        as_of_date: as_of,
        ..criteria.clone()
    };
    let kept: BTreeSet<String> = select_experiments(&owned, &week_criteria)?.selected_ids().into_iter().collect();
    Ok(in_scope.into_iter().filter(|e| kept.contains(e.id())).collect())
}

fn partition_week(cfg: &TrainingCadenceConfig, week: usize, selected: &[&Experiment]) -> Result<StoredWeek> {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for exp in selected {
        let (tr, va) = partition_indices(&exp.observations, cfg.split.train_fraction, cfg.split.seed)?;
        train.extend(tr.iter().map(|&i| exp.observations[i].clone()));
        valid.extend(va.iter().map(|&i| exp.observations[i].clone()));
    }
    Ok(StoredWeek {
        week,
        experiment_ids: selected.iter().map(|e| e.id().to_string()).collect(),
        train,
        valid,
    })
}

impl HistoryStore {
    /// Records a week's selected data without training (used when resuming).
    pub fn absorb(&mut self, cfg: &TrainingCadenceConfig, input: &WeekInput) -> Result<()> {
        let selected = selected_for_week(cfg, input)?;
        if !selected.is_empty() {
            self.push(partition_week(cfg, input.week, &selected)?);
        }
        self.prune(input.week, retained_weeks(cfg));
        Ok(())
    }
}

fn retained_weeks(cfg: &TrainingCadenceConfig) -> usize {
    cfg.history_retention_weeks.max(cfg.window_weeks - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericDrift {
    pub feature: String,
    /// `(week mean - fitted mean) / fitted stddev`; `None` when undefined.
    pub smd: Option<f64>,
    pub week_mean: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDrift {
    pub feature: String,
    pub oov_rate: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeDrift {
    pub metric: String,
    pub baseline_mean: f64,
    pub week_mean: Option<f64>,
    pub relative_change: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub n_rows: usize,
    pub numeric: Vec<NumericDrift>,
    pub categorical: Vec<CategoricalDrift>,
    pub outcomes: Vec<OutcomeDrift>,
}

impl DriftReport {
    pub fn flagged(&self) -> Vec<String> {
        self.numeric
            .iter()
            .filter(|d| d.flagged)
            .map(|d| d.feature.clone())
            .chain(self.categorical.iter().filter(|d| d.flagged).map(|d| d.feature.clone()))
            .chain(
                self.outcomes
                    .iter()
                    .filter(|d| d.flagged)
                    .map(|d| format!("outcome:{}", d.metric)),
            )
            .collect()
    }
}

/// Compares `rows` against the statistics `spec` was fitted on. A numeric
/// feature with no observed values is flagged as fully drifted.
pub fn drift_monitor(spec: &TransformSpec, rows: &[&UserObservation], thresholds: &DriftThresholds) -> Result<DriftReport> {
    if rows.is_empty() {
        return Err(HteError::param("week_data", "drift monitoring needs at least one row"));
    }
    let numeric = spec
        .numeric
        .iter()
        .map(|s| {
            let values: Vec<f64> = rows
                .iter()
                .filter_map(|o| o.features.get(s.schema_index).and_then(FeatureValue::as_numeric))
                .collect();
            let week_mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
            let smd = week_mean.and_then(|m| {
                if s.constant {
                    (m == s.mean).then_some(0.0)
                } else {
                    Some((m - s.mean) / s.stddev)
                }
            });
            NumericDrift {
                feature: s.name.clone(),
                smd,
                week_mean,
                flagged: smd.is_none_or(|d| d.abs() > thresholds.max_abs_smd),
            }
        })
        .collect();
    let categorical = spec
        .categorical
        .iter()
        .map(|s| {
            let oov = rows
                .iter()
                .filter(|o| match o.features.get(s.schema_index) {
                    Some(FeatureValue::Categorical(c)) => !s.vocabulary.contains(c),
                    _ => true,
                })
                .count();
            let oov_rate = oov as f64 / rows.len() as f64;
            CategoricalDrift {
                feature: s.name.clone(),
                oov_rate,
                flagged: oov_rate > thresholds.max_oov_rate,
            }
        })
        .collect();
    let outcomes = spec
        .outcome_means
        .iter()
        .map(|(metric, &baseline_mean)| {
            let values: Vec<f64> = rows.iter().filter_map(|o| o.outcome(metric)).collect();
            let week_mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
            let relative_change = week_mean.and_then(|m| (baseline_mean != 0.0).then(|| (m - baseline_mean) / baseline_mean.abs()));
            OutcomeDrift {
                metric: metric.clone(),
                baseline_mean,
                week_mean,
                relative_change,
                flagged: relative_change.is_none_or(|c| c.abs() > thresholds.max_outcome_change),
            }
        })
        .collect();
    Ok(DriftReport {
        n_rows: rows.len(),
        numeric,
        categorical,
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyRunRecord {
    pub week: usize,
    pub mode: CadenceMode,
    pub scope: String,
    pub model_id: Option<String>,
    pub parent_model_id: Option<String>,
    pub skipped: bool,
    pub selected_experiment_ids: Vec<String>,
    pub eval_experiment_ids: Vec<String>,
    pub eval_auuc: Option<f64>,
    pub eval_auuc_per_experiment: Vec<(String, f64)>,
    pub train_rows: usize,
    pub replay_rows: usize,
    pub drift: Option<DriftReport>,
}

#[derive(Debug, Clone)]
pub struct WeekOutcome {
    /// The model in force after the week (carried forward on a skip).
    pub model: Option<TLearnerModel>,
    pub record: WeeklyRunRecord,
}

fn evaluate_week(
    cfg: &TrainingCadenceConfig,
    model: Option<&TLearnerModel>,
    input: &WeekInput,
) -> Result<(Option<f64>, Vec<(String, f64)>)> {
    let Some(model) = model else {
        return Ok((None, Vec::new()));
    };
    let mut per = Vec::new();
    for exp in &input.eval {
        if model.training_experiment_ids.iter().any(|t| t == exp.id()) {
            return Err(HteError::Eval(format!(
                "experiment {} is used for both training and evaluation in week {}",
                exp.id(),
                input.week
            )));
        }
        match evaluate_model(model, exp, &cfg.metric, cfg.n_points) {
            Ok(v) => per.push((exp.id().to_string(), v)),
            Err(HteError::DegenerateExperiment { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let mean = (!per.is_empty()).then(|| per.iter().map(|(_, v)| v).sum::<f64>() / per.len() as f64);
    Ok((mean, per))
}

/// Runs one week of the cadence and updates `history`.
pub fn run_week(
    cfg: &TrainingCadenceConfig,
    input: &WeekInput,
    prior: Option<&TLearnerModel>,
    history: &mut HistoryStore,
) -> Result<WeekOutcome> {
    cfg.validate()?;
    if input.week == 0 {
        return Err(HteError::param("week", "weeks are numbered from 1"));
    }
    let selected = selected_for_week(cfg, input)?;
    let eval_ids: Vec<String> = input.eval.iter().map(|e| e.id().to_string()).collect();
    if let Some(e) = selected.iter().find(|e| eval_ids.iter().any(|id| id == e.id())) {
        return Err(HteError::Eval(format!("experiment {} is both trained on and evaluated", e.id())));
    }

    if selected.is_empty() {
        history.prune(input.week, retained_weeks(cfg));
        let (eval_auuc, per) = evaluate_week(cfg, prior, input)?;
        return Ok(WeekOutcome {
            model: prior.cloned(),
            record: WeeklyRunRecord {
                week: input.week,
                mode: cfg.mode,
                scope: cfg.scope.to_string(),
                model_id: prior.map(TLearnerModel::id),
                parent_model_id: prior.map(TLearnerModel::id),
                skipped: true,
                selected_experiment_ids: Vec::new(),
                eval_experiment_ids: eval_ids,
                eval_auuc,
                eval_auuc_per_experiment: per,
                train_rows: 0,
                replay_rows: 0,
                drift: None,
            },
        });
    }
    let schema = selected[0].schema.clone();
    if selected.iter().any(|e| e.schema != schema) {
        return Err(HteError::Schema("week experiments disagree on the feature schema".into()));
    }
    let current = partition_week(cfg, input.week, &selected)?;
    let new_ids = current.experiment_ids.clone();

    let (model, replay_rows, train_rows, drift) = match cfg.mode {
        CadenceMode::Incremental => {
            if prior.is_none() && history.row_count() > 0 {
                return Err(HteError::param(
                    "prior",
                    format!("incremental week {} has history but no prior model", input.week),
                ));
            }
            let transform = match prior {
                Some(p) => {
                    if p.transform.check_schema(&schema).is_err() {
                        let refit = fit_transform_spec(&current.train, &schema, cfg.split.max_vocab, &new_ids)?;
                        return Err(HteError::SpecEvolution {
                            prior: p.transform.dimension,
                            current: refit.dimension,
                        });
                    }
                    p.transform.clone()
                }
                None => fit_transform_spec(&current.train, &schema, cfg.split.max_vocab, &new_ids)?,
            };
            let lo = input.week.saturating_sub(cfg.history_retention_weeks);
            let past: Vec<&UserObservation> = history
                .range(lo, input.week - 1)
                .flat_map(|w| w.train.iter())
                .collect();
            let n_new = current.train.len();
            let wanted = if cfg.replay_fraction >= 1.0 {
                past.len()
            } else {
                ((n_new as f64) * cfg.replay_fraction / (1.0 - cfg.replay_fraction)).round() as usize
            };
            let n_replay = wanted.min(past.len());
            let mut r = rng(derive_seed(cfg.replay_seed, input.week as u64));
            let mut picked: Vec<usize> = sample(&mut r, past.len(), n_replay).into_vec();
            picked.sort_unstable();
            let mut rows: Vec<&UserObservation> = current.train.iter().collect();
            rows.extend(picked.iter().map(|&i| past[i]));
            let valid: Vec<&UserObservation> = current.valid.iter().collect();
            let mut ids = new_ids.clone();
            if let Some(p) = prior {
                ids.extend(p.training_experiment_ids.iter().cloned());
            }
            let drift_rows: Vec<&UserObservation> = current.train.iter().chain(&current.valid).collect();
            let drift = drift_monitor(&transform, &drift_rows, &cfg.drift)?;
            let train_rows = rows.len();
            let model = fit_from_rows(
                transform,
                &schema,
                &rows,
                &valid,
                &cfg.metric,
                &cfg.learner,
                prior,
                cfg.scope.clone(),
                ids,
            )?;
            (model, n_replay, train_rows, drift)
        }
        CadenceMode::FromScratchWeekly => {
            let lo = (input.week + 1).saturating_sub(cfg.window_weeks);
            let window: Vec<&StoredWeek> = history
                .range(lo, input.week - 1)
                .chain(std::iter::once(&current))
                .collect();
            let rows: Vec<&UserObservation> = window.iter().flat_map(|w| w.train.iter()).collect();
            let valid: Vec<&UserObservation> = window.iter().flat_map(|w| w.valid.iter()).collect();
            let ids: Vec<String> = window.iter().flat_map(|w| w.experiment_ids.iter().cloned()).collect();
            let transform = fit_transform_spec(rows.iter().copied(), &schema, cfg.split.max_vocab, &ids)?;
            let baseline = prior.map(|p| &p.transform).unwrap_or(&transform);
            let drift_rows: Vec<&UserObservation> = current.train.iter().chain(&current.valid).collect();
            let drift = if baseline.check_schema(&schema).is_ok() {
                drift_monitor(baseline, &drift_rows, &cfg.drift)?
            } else {
                drift_monitor(&transform, &drift_rows, &cfg.drift)?
            };
            let train_rows = rows.len();
            let model = fit_from_rows(
                transform,
                &schema,
                &rows,
                &valid,
                &cfg.metric,
                &cfg.learner,
                None,
                cfg.scope.clone(),
                ids,
            )?;
            (model, 0, train_rows, drift)
        }
    };
    history.push(current);
    history.prune(input.week, retained_weeks(cfg));

    let (eval_auuc, per) = evaluate_week(cfg, Some(&model), input)?;
    let parent_model_id = match cfg.mode {
        CadenceMode::Incremental => prior.map(TLearnerModel::id),
        CadenceMode::FromScratchWeekly => None,
    };
    let record = WeeklyRunRecord {
        week: input.week,
        mode: cfg.mode,
        scope: cfg.scope.to_string(),
        model_id: Some(model.id()),
        parent_model_id,
        skipped: false,
        selected_experiment_ids: new_ids,
        eval_experiment_ids: eval_ids,
        eval_auuc,
        eval_auuc_per_experiment: per,
        train_rows,
        replay_rows,
        drift: Some(drift),
    };
    Ok(WeekOutcome {
        model: Some(model),
        record,
    })
}

/// Runs consecutive weeks from scratch, returning one outcome per week.
pub fn run_cadence(cfg: &TrainingCadenceConfig, weeks: &[WeekInput]) -> Result<Vec<WeekOutcome>> {
    let mut history = HistoryStore::new();
    let mut prior: Option<TLearnerModel> = None;
    let mut out = Vec::with_capacity(weeks.len());
    for input in weeks {
        let outcome = run_week(cfg, input, prior.as_ref(), &mut history)?;
        prior = outcome.model.clone();
        out.push(outcome);
    }
    Ok(out)
}

pub fn append_record(path: &Path, record: &WeeklyRunRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

/// Reads a ledger; a missing file is an empty ledger. A truncated final line
/// (interrupted write) is ignored.
pub fn read_ledger(path: &Path) -> Result<Vec<WeeklyRunRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let lines: Vec<String> = BufReader::new(fs::File::open(path)?).lines().collect::<std::io::Result<_>>()?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => {
                return Err(HteError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{generate_experiment, generate_stream, GeneratorConfig};
    use std::collections::BTreeMap;

    fn small_cfg(mode: CadenceMode) -> TrainingCadenceConfig {
        TrainingCadenceConfig {
            mode,
            learner: LearnerConfig {
                epochs: 1,
                ..LearnerConfig::linear()
            },
            ..TrainingCadenceConfig::default()
        }
    }

    fn weeks(n: usize) -> Vec<WeekInput> {
        let gen = GeneratorConfig {
            experiment_id: "s".into(),
            n_users: 600,
            heterogeneity: 0.5,
            ..GeneratorConfig::default()
        };
        let eval = GeneratorConfig {
            experiment_id: "s-eval".into(),
            user_offset: 1_000_000,
            seed: 99,
            ..gen.clone()
        };
        let train = generate_stream(&gen, n).unwrap();
        let ev = generate_stream(&eval, n).unwrap();
        train
            .into_iter()
            .zip(ev)
            .enumerate()
            .map(|(i, ((e, _), (v, _)))| WeekInput {
                week: i + 1,
                experiments: vec![e],
                eval: vec![v],
            })
            .collect()
    }

    #[test]
    fn week_one_is_mode_independent() {
        let w = weeks(1);
        let a = run_cadence(&small_cfg(CadenceMode::Incremental), &w).unwrap();
        let b = run_cadence(&small_cfg(CadenceMode::FromScratchWeekly), &w).unwrap();
        assert_eq!(a[0].model, b[0].model);
        assert_eq!(a[0].record.parent_model_id, None);
    }

    #[test]
    fn lineage_chains_back_to_week_one() {
        let w = weeks(3);
        let out = run_cadence(&small_cfg(CadenceMode::Incremental), &w).unwrap();
        assert_eq!(out[1].record.parent_model_id, out[0].record.model_id);
        assert_eq!(out[2].record.parent_model_id, out[1].record.model_id);
        assert!(out[1].record.replay_rows > 0);
        let m = out[2].model.as_ref().unwrap();
        assert_eq!(m.treatment_model.parent_id.as_deref(), Some(out[1].model.as_ref().unwrap().treatment_model.id.as_str()));
        let scratch = run_cadence(&small_cfg(CadenceMode::FromScratchWeekly), &w).unwrap();
        assert!(scratch.iter().all(|o| o.record.parent_model_id.is_none()));
    }

    #[test]
    fn empty_week_carries_model_forward() {
        let mut w = weeks(2);
        w[1].experiments.clear();
        let out = run_cadence(&small_cfg(CadenceMode::Incremental), &w).unwrap();
        assert!(out[1].record.skipped);
        assert_eq!(out[1].model, out[0].model);
    }

    #[test]
    fn drift_statistics() {
        let cfg = GeneratorConfig {
            n_users: 4000,
            ..GeneratorConfig::default()
        };
        let (exp, _) = generate_experiment(&cfg).unwrap();
        let spec = fit_transform_spec(&exp.observations, &exp.schema, 8, &[]).unwrap();
        let rows: Vec<&UserObservation> = exp.observations.iter().collect();
        let same = drift_monitor(&spec, &rows, &DriftThresholds::default()).unwrap();
        assert!(same.flagged().is_empty(), "{:?}", same.flagged());

        let sd = spec.numeric[0].stddev;
        let cat_idx = spec.categorical[0].schema_index;
        let shifted: Vec<UserObservation> = exp
            .observations
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let mut o = o.clone();
                if let FeatureValue::Numeric(v) = o.features[0] {
                    o.features[0] = FeatureValue::Numeric(v + sd);
                }
                if i % 2 == 0 {
                    o.features[cat_idx] = FeatureValue::Categorical("brand-new".into());
                }
                o
            })
            .collect();
        let rows: Vec<&UserObservation> = shifted.iter().collect();
        let d = drift_monitor(&spec, &rows, &DriftThresholds::default()).unwrap();
        assert!((d.numeric[0].smd.unwrap() - 1.0).abs() < 1e-9);
        assert!(d.numeric[0].flagged);
        assert_eq!(d.categorical[0].oov_rate, 0.5);

        let empty: Vec<UserObservation> = exp
            .observations
            .iter()
            .map(|o| {
                let mut o = o.clone();
                o.features[1] = FeatureValue::Null;
                o.outcomes = BTreeMap::new();
                o
            })
            .collect();
        let rows: Vec<&UserObservation> = empty.iter().collect();
        let d = drift_monitor(&spec, &rows, &DriftThresholds::default()).unwrap();
        assert!(d.numeric[1].flagged && d.numeric[1].smd.is_none());
        assert!(drift_monitor(&spec, &[], &DriftThresholds::default()).is_err());
    }

    #[test]
    fn ledger_roundtrip_tolerates_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let out = run_cadence(&small_cfg(CadenceMode::Incremental), &weeks(2)).unwrap();
        for o in &out {
            append_record(&path, &o.record).unwrap();
        }
        let mut f = fs::OpenOptions::new().append(true).open(&path).unwrap();
        write!(f, "{{\"week\":3,").unwrap();
        let back = read_ledger(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1], out[1].record);
    }
}
