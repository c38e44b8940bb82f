//! Two-model (T-learner) uplift estimator with scoped model families.

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{partition_indices, Arm, Experiment, ExperimentMeta, FeatureSchema, UserObservation};
use crate::error::{HteError, Result};
use crate::learners::{train, Dataset, LearnerConfig, Loss, ModelCheckpoint, Predictor};
use crate::transform::{fit_transform_spec, TransformSpec};
use crate::util::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeLevel {
    General,
    Vertical,
    Advertiser,
    AdProduct,
}

impl ScopeLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            ScopeLevel::General => "general",
            ScopeLevel::Vertical => "vertical",
            ScopeLevel::Advertiser => "advertiser",
            ScopeLevel::AdProduct => "ad_product",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Scope {
    pub level: ScopeLevel,
    pub key: Option<String>,
}

impl Scope {
    pub fn general() -> Self {
        Self {
            level: ScopeLevel::General,
            key: None,
        }
    }

    pub fn new(level: ScopeLevel, key: Option<String>) -> Result<Self> {
        match (level, &key) {
            (ScopeLevel::General, None) => {}
            (ScopeLevel::General, Some(_)) => {
                return Err(HteError::param("scope", "the general scope takes no key"))
            }
            (_, None) => {
                return Err(HteError::param(
                    "scope",
                    format!("scope level `{}` needs a key", level.as_str()),
                ))
            }
            (_, Some(k)) if k.is_empty() => return Err(HteError::param("scope", "empty scope key")),
            _ => {}
        }
        Ok(Self { level, key })
    }

    pub fn matches(&self, meta: &ExperimentMeta) -> bool {
        let field = match self.level {
            ScopeLevel::General => return true,
            ScopeLevel::Vertical => &meta.vertical,
            ScopeLevel::Advertiser => &meta.advertiser_id,
            ScopeLevel::AdProduct => &meta.ad_product,
        };
        field.is_some() && field.as_deref() == self.key.as_deref()
    }

    pub fn key_str(&self) -> &str {
        self.key.as_deref().unwrap_or("")
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            None => f.write_str(self.level.as_str()),
            Some(k) => write!(f, "{}:{k}", self.level.as_str()),
        }
    }
}

/// Parses `general`, `vertical:<name>`, `advertiser:<id>` or `ad_product:<name>`.
impl FromStr for Scope {
    type Err = HteError;

    fn from_str(s: &str) -> Result<Self> {
        let (level, key) = match s.split_once(':') {
            Some((l, k)) => (l, Some(k.to_string())),
            None => (s, None),
        };
        let level = match level {
            "general" => ScopeLevel::General,
            "vertical" => ScopeLevel::Vertical,
            "advertiser" => ScopeLevel::Advertiser,
            "ad_product" => ScopeLevel::AdProduct,
            other => return Err(HteError::param("scope", format!("unknown scope level `{other}`"))),
        };
        Scope::new(level, key)
    }
}

/// Per-experiment train/validation split settings and transform vocabulary cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitParams {
    pub train_fraction: f64,
    pub seed: u64,
    pub max_vocab: usize,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 11,
            max_vocab: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TLearnerModel {
    pub treatment_model: ModelCheckpoint,
    pub control_model: ModelCheckpoint,
    pub transform: TransformSpec,
    pub scope: Scope,
    pub metric: String,
    pub training_experiment_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ITEScore {
    pub user_id: String,
    pub ite: f64,
    pub scope: Scope,
    pub score_date: NaiveDate,
}

impl TLearnerModel {
    pub fn new(
        treatment_model: ModelCheckpoint,
        control_model: ModelCheckpoint,
        transform: TransformSpec,
        scope: Scope,
        metric: impl Into<String>,
        mut training_experiment_ids: Vec<String>,
    ) -> Result<Self> {
        training_experiment_ids.sort();
        training_experiment_ids.dedup();
        let m = Self {
            treatment_model,
            control_model,
            transform,
            scope,
            metric: metric.into(),
            training_experiment_ids,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, c) = (&self.treatment_model, &self.control_model);
        if t.transform_hash != self.transform.content_hash || c.transform_hash != self.transform.content_hash {
            return Err(HteError::Schema("arm checkpoints reference a different transform spec".into()));
        }
        if t.input_dim != self.transform.dimension || c.input_dim != self.transform.dimension {
            return Err(HteError::Dimension {
                expected: self.transform.dimension,
                found: if t.input_dim != self.transform.dimension {
                    t.input_dim
                } else {
                    c.input_dim
                },
            });
        }
        if t.config.loss != c.config.loss {
            return Err(HteError::Schema("arm checkpoints use different loss families".into()));
        }
        Ok(())
    }

    pub fn loss(&self) -> Loss {
        self.treatment_model.config.loss
    }

    /// Content address over both checkpoints, the transform, scope, metric and
    /// training experiments.
    pub fn id(&self) -> String {
        let body = serde_json::json!({
            "treatment": self.treatment_model.id,
            "control": self.control_model.id,
            "transform": self.transform.content_hash,
            "scope": self.scope,
            "metric": self.metric,
            "experiments": self.training_experiment_ids,
        });
        sha256_hex(body.to_string().as_bytes())
    }

    /// The same model with arms exchanged; every ITE changes sign.
    pub fn swapped(&self) -> Self {
        Self {
            treatment_model: self.control_model.clone(),
            control_model: self.treatment_model.clone(),
            ..self.clone()
        }
    }

    pub fn scorer(&self) -> Result<Scorer<'_>> {
        Ok(Scorer {
            model: self,
            treatment: self.treatment_model.predictor()?,
            control: self.control_model.predictor()?,
        })
    }

    pub fn predict_ite(&self, schema: &FeatureSchema, obs: &UserObservation, score_date: NaiveDate) -> Result<ITEScore> {
        self.scorer()?.score(schema, obs, score_date)
    }

    /// Positive when the treatment lowers the metric.
    pub fn score_sensitivity(&self, schema: &FeatureSchema, obs: &UserObservation) -> Result<f64> {
        let x = self.transform.apply(schema, obs)?;
        let s = self.scorer()?;
        Ok(-(s.treatment.predict(x.as_slice())? - s.control.predict(x.as_slice())?))
    }

    /// ITE for every observation, in input order.
    pub fn predict_ite_batch(&self, schema: &FeatureSchema, observations: &[UserObservation]) -> Result<Vec<f64>> {
        self.scorer()?.ite_batch(schema, observations)
    }
}

/// A model with compiled predictors, for repeated scoring.
pub struct Scorer<'a> {
    model: &'a TLearnerModel,
    treatment: Predictor,
    control: Predictor,
}

const SCORE_CHUNK: usize = 4096;

impl Scorer<'_> {
    pub fn score(&self, schema: &FeatureSchema, obs: &UserObservation, score_date: NaiveDate) -> Result<ITEScore> {
        let x = self.model.transform.apply(schema, obs)?;
        let ite = self.treatment.predict(x.as_slice())? - self.control.predict(x.as_slice())?;
        Ok(ITEScore {
            user_id: obs.user_id.clone(),
            ite,
            scope: self.model.scope.clone(),
            score_date,
        })
    }

    pub fn ite_batch(&self, schema: &FeatureSchema, observations: &[UserObservation]) -> Result<Vec<f64>> {
        self.model.transform.check_schema(schema)?;
        let chunks: Vec<Vec<f64>> = observations
            .par_chunks(SCORE_CHUNK)
            .map(|chunk| {
                let x = self.model.transform.apply_batch(schema, chunk)?;
                let t = self.treatment.predict_batch(&x)?;
                let c = self.control.predict_batch(&x)?;
                Ok(t.iter().zip(&c).map(|(a, b)| a - b).collect())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.concat())
    }

    pub fn score_batch(
        &self,
        schema: &FeatureSchema,
        observations: &[UserObservation],
        score_date: NaiveDate,
    ) -> Result<Vec<ITEScore>> {
        let ite = self.ite_batch(schema, observations)?;
        Ok(observations
            .iter()
            .zip(ite)
            .map(|(o, ite)| ITEScore {
                user_id: o.user_id.clone(),
                ite,
                scope: self.model.scope.clone(),
                score_date,
            })
            .collect())
    }
}

/// Experiments of `pool` that fall inside `scope`.
pub fn filter_scope<'a>(pool: &[&'a Experiment], scope: &Scope) -> Vec<&'a Experiment> {
    pool.iter().copied().filter(|e| scope.matches(&e.meta)).collect()
}

/// Pooled training and validation rows of `experiments` under `split`.
pub fn pooled_partitions<'a>(
    experiments: &[&'a Experiment],
    split: &SplitParams,
) -> Result<(Vec<&'a UserObservation>, Vec<&'a UserObservation>)> {
    let mut train_rows = Vec::new();
    let mut valid_rows = Vec::new();
    for exp in experiments {
        let (tr, va) = partition_indices(&exp.observations, split.train_fraction, split.seed)?;
        train_rows.extend(tr.iter().map(|&i| &exp.observations[i]));
        valid_rows.extend(va.iter().map(|&i| &exp.observations[i]));
    }
    Ok((train_rows, valid_rows))
}

/// Encodes `rows` of one arm into a learner dataset.
pub fn arm_dataset(
    transform: &TransformSpec,
    schema: &FeatureSchema,
    rows: &[&UserObservation],
    arm: Arm,
    metric: &str,
) -> Result<Dataset> {
    let picked: Vec<&UserObservation> = rows.iter().copied().filter(|o| o.arm == arm).collect();
    let y = picked
        .iter()
        .map(|o| {
            o.outcome(metric).ok_or_else(|| {
                HteError::Schema(format!("user {} lacks outcome `{metric}`", o.user_id))
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let x = transform.apply_batch(schema, picked.iter().copied())?;
    Dataset::new(transform.dimension, x, y)
}

/// Trains both arms on already-partitioned rows encoded by `transform`. With
/// `warm`, each arm resumes from the matching checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn fit_from_rows(
    transform: TransformSpec,
    schema: &FeatureSchema,
    train_rows: &[&UserObservation],
    valid_rows: &[&UserObservation],
    metric: &str,
    cfg: &LearnerConfig,
    warm: Option<&TLearnerModel>,
    scope: Scope,
    experiment_ids: Vec<String>,
) -> Result<TLearnerModel> {
    if let Some(w) = warm {
        if w.transform.dimension != transform.dimension {
            return Err(HteError::SpecEvolution {
                prior: w.transform.dimension,
                current: transform.dimension,
            });
        }
        if w.transform.content_hash != transform.content_hash {
            return Err(HteError::WarmStart(
                "warm model was fitted with a different transform spec".into(),
            ));
        }
    }
    let data = |rows: &[&UserObservation], arm| arm_dataset(&transform, schema, rows, arm, metric);
    let (t_train, c_train) = (data(train_rows, Arm::Treatment)?, data(train_rows, Arm::Control)?);
    for (d, arm) in [(&t_train, Arm::Treatment), (&c_train, Arm::Control)] {
        if d.is_empty() {
            return Err(HteError::Arm(format!("no {arm} rows in the pooled training data")));
        }
    }
    let (t_valid, c_valid) = (data(valid_rows, Arm::Treatment)?, data(valid_rows, Arm::Control)?);
    let hash = transform.content_hash.clone();
    let (t_model, c_model) = rayon::join(
        || train(cfg, &t_train, Some(&t_valid), warm.map(|w| &w.treatment_model), &hash),
        || train(cfg, &c_train, Some(&c_valid), warm.map(|w| &w.control_model), &hash),
    );
    TLearnerModel::new(t_model?, c_model?, transform, scope, metric, experiment_ids)
}

/// Fits a T-learner on the experiments of `selected` inside `scope`.
///
/// Observations are pooled across experiments; each experiment is split into
/// train and validation by user hash. A warm model contributes its transform and
/// both arm checkpoints.
pub fn fit_tlearner(
    selected: &[&Experiment],
    scope: &Scope,
    metric: &str,
    cfg: &LearnerConfig,
    split: &SplitParams,
    warm: Option<&TLearnerModel>,
) -> Result<TLearnerModel> {
    let in_scope = filter_scope(selected, scope);
    let Some(first) = in_scope.first() else {
        return Err(HteError::Scope(format!("no selected experiment matches scope {scope}")));
    };
    let schema = first.schema.clone();
    if in_scope.iter().any(|e| e.schema != schema) {
        return Err(HteError::Schema("selected experiments disagree on the feature schema".into()));
    }
    let ids: Vec<String> = in_scope.iter().map(|e| e.id().to_string()).collect();
    let (train_rows, valid_rows) = pooled_partitions(&in_scope, split)?;
    let transform = match warm {
        Some(w) => {
            w.transform.check_schema(&schema)?;
            w.transform.clone()
        }
        None => fit_transform_spec(train_rows.iter().copied(), &schema, split.max_vocab, &ids)?,
    };
    fit_from_rows(
        transform,
        &schema,
        &train_rows,
        &valid_rows,
        metric,
        cfg,
        warm,
        scope.clone(),
        ids,
    )
}
