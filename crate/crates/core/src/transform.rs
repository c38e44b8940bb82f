//! Fitted feature transformation shared by training and scoring.
//!
//! Numeric features are standardized with the training mean and population
//! standard deviation (nulls take the mean, so they map to 0). Categorical
//! features are one-hot encoded over a frequency-ranked vocabulary with a
//! trailing out-of-vocabulary slot that also receives nulls.
//!
//! Vector layout: `[numerics in schema order | one block per categorical]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, FeatureSchema, FeatureValue, UserObservation};
use crate::error::{HteError, Result};
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub name: String,
    pub schema_index: usize,
    pub mean: f64,
    pub stddev: f64,
    pub null_fill: f64,
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalStats {
    pub name: String,
    pub schema_index: usize,
    pub vocabulary: Vec<String>,
    /// Position of the out-of-vocabulary slot inside this feature's block.
    pub oov_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FittedOn {
    pub experiment_ids: Vec<String>,
    pub row_count: usize,
}

/// Everything the hash covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SpecBody {
    schema_version: u32,
    feature_names: Vec<String>,
    max_vocab: usize,
    numeric: Vec<NumericStats>,
    categorical: Vec<CategoricalStats>,
    outcome_means: BTreeMap<String, f64>,
    fitted_on: FittedOn,
    dimension: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub schema_version: u32,
    pub feature_names: Vec<String>,
    pub max_vocab: usize,
    pub numeric: Vec<NumericStats>,
    pub categorical: Vec<CategoricalStats>,
    /// Mean of each outcome metric on the fitting rows (baseline for label drift).
    pub outcome_means: BTreeMap<String, f64>,
    pub fitted_on: FittedOn,
    pub dimension: usize,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Order-insensitive sum: values are sorted before accumulation.
fn stable_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

pub fn fit_transform_spec<'a, I>(
    train: I,
    schema: &FeatureSchema,
    max_vocab: usize,
    experiment_ids: &[String],
) -> Result<TransformSpec>
where
    I: IntoIterator<Item = &'a UserObservation>,
{
    if max_vocab == 0 {
        return Err(HteError::param("max_vocab", "must be at least 1"));
    }
    let mut numeric_values: Vec<Vec<f64>> = vec![Vec::new(); schema.len()];
    let mut counts: Vec<HashMap<&str, usize>> = vec![HashMap::new(); schema.len()];
    let mut outcomes: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut rows = 0usize;
    for obs in train {
        if obs.features.len() != schema.len() {
            return Err(HteError::Dimension {
                expected: schema.len(),
                found: obs.features.len(),
            });
        }
        rows += 1;
        for (j, value) in obs.features.iter().enumerate() {
            match value {
                FeatureValue::Numeric(v) => numeric_values[j].push(*v),
                FeatureValue::Categorical(c) => *counts[j].entry(c.as_str()).or_default() += 1,
                FeatureValue::Null => {}
            }
        }
        for (metric, y) in &obs.outcomes {
            outcomes.entry(metric.clone()).or_default().push(*y);
        }
    }
    if rows == 0 {
        return Err(HteError::Fitting {
            feature: "*".into(),
            message: "no training rows".into(),
        });
    }

    let mut numeric = Vec::new();
    let mut categorical = Vec::new();
    for (j, def) in schema.features.iter().enumerate() {
        match def.kind {
            FeatureKind::Numeric => {
                let values = &mut numeric_values[j];
                if values.is_empty() {
                    return Err(HteError::Fitting {
                        feature: def.name.clone(),
                        message: "every training value is null".into(),
                    });
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(HteError::Fitting {
                        feature: def.name.clone(),
                        message: "non-finite value".into(),
                    });
                }
                let n = values.len() as f64;
                let mean = stable_sum(values) / n;
                let mut sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
                let stddev = (stable_sum(&mut sq) / n).sqrt();
                let constant = stddev <= 1e-12 * mean.abs().max(1.0);
                numeric.push(NumericStats {
                    name: def.name.clone(),
                    schema_index: j,
                    mean,
                    stddev,
                    null_fill: mean,
                    constant,
                });
            }
            FeatureKind::Categorical => {
                if counts[j].is_empty() {
                    return Err(HteError::Fitting {
                        feature: def.name.clone(),
                        message: "every training value is null".into(),
                    });
                }
                let mut ranked: Vec<(&str, usize)> = counts[j].iter().map(|(k, v)| (*k, *v)).collect();
                ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
                let vocabulary: Vec<String> = ranked
                    .into_iter()
                    .take(max_vocab)
                    .map(|(k, _)| k.to_string())
                    .collect();
                categorical.push(CategoricalStats {
                    name: def.name.clone(),
                    schema_index: j,
                    oov_index: vocabulary.len(),
                    vocabulary,
                });
            }
        }
    }
    let outcome_means = outcomes
        .into_iter()
        .map(|(m, mut ys)| {
            let n = ys.len() as f64;
            (m, stable_sum(&mut ys) / n)
        })
        .collect();
    let ids: BTreeSet<String> = experiment_ids.iter().cloned().collect();
    let dimension = numeric.len() + categorical.iter().map(|c| c.vocabulary.len() + 1).sum::<usize>();
    let body = SpecBody {
        schema_version: schema.version,
        feature_names: schema.features.iter().map(|f| f.name.clone()).collect(),
        max_vocab,
        numeric,
        categorical,
        outcome_means,
        fitted_on: FittedOn {
            experiment_ids: ids.into_iter().collect(),
            row_count: rows,
        },
        dimension,
    };
    Ok(TransformSpec::from_body(body))
}

impl TransformSpec {
    fn from_body(body: SpecBody) -> Self {
        let content_hash = Self::hash_body(&body);
        let SpecBody {
            schema_version,
            feature_names,
            max_vocab,
            numeric,
            categorical,
            outcome_means,
            fitted_on,
            dimension,
        } = body;
        Self {
            schema_version,
            feature_names,
            max_vocab,
            numeric,
            categorical,
            outcome_means,
            fitted_on,
            dimension,
            content_hash,
        }
    }

    fn body(&self) -> SpecBody {
        SpecBody {
            schema_version: self.schema_version,
            feature_names: self.feature_names.clone(),
            max_vocab: self.max_vocab,
            numeric: self.numeric.clone(),
            categorical: self.categorical.clone(),
            outcome_means: self.outcome_means.clone(),
            fitted_on: self.fitted_on.clone(),
            dimension: self.dimension,
        }
    }

    fn hash_body(body: &SpecBody) -> String {
        sha256_hex(serde_json::to_string(body).expect("spec serializes").as_bytes())
    }

    pub fn recompute_hash(&self) -> String {
        Self::hash_body(&self.body())
    }

    /// Checks that `schema` is the one this spec was fitted against.
    pub fn check_schema(&self, schema: &FeatureSchema) -> Result<()> {
        if schema.version != self.schema_version {
            return Err(HteError::SchemaVersionMismatch {
                expected: self.schema_version,
                found: schema.version,
            });
        }
        let same_names = schema.features.len() == self.feature_names.len()
            && schema
                .features
                .iter()
                .zip(&self.feature_names)
                .all(|(f, n)| &f.name == n);
        if !same_names {
            return Err(HteError::Schema(format!(
                "schema v{} feature list differs from the one the transform was fitted on",
                schema.version
            )));
        }
        Ok(())
    }

    pub fn apply(&self, schema: &FeatureSchema, obs: &UserObservation) -> Result<FeatureVector> {
        self.check_schema(schema)?;
        if obs.features.len() != self.feature_names.len() {
            return Err(HteError::Dimension {
                expected: self.feature_names.len(),
                found: obs.features.len(),
            });
        }
        let mut out = vec![0.0; self.dimension];
        self.encode_into(obs, &mut out);
        Ok(FeatureVector(out))
    }

    /// Writes the encoding of `obs` into `out` (length `dimension`). The caller
    /// has already validated the schema.
    pub fn encode_into(&self, obs: &UserObservation, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dimension);
        for (slot, stats) in out.iter_mut().zip(&self.numeric) {
            let raw = match &obs.features[stats.schema_index] {
                FeatureValue::Numeric(v) => *v,
                _ => stats.null_fill,
            };
            *slot = if stats.constant {
                0.0
            } else {
                (raw - stats.mean) / stats.stddev
            };
        }
        let mut offset = self.numeric.len();
        for stats in &self.categorical {
            let block = &mut out[offset..offset + stats.vocabulary.len() + 1];
            block.iter_mut().for_each(|v| *v = 0.0);
            let hot = match &obs.features[stats.schema_index] {
                FeatureValue::Categorical(c) => stats
                    .vocabulary
                    .iter()
                    .position(|v| v == c)
                    .unwrap_or(stats.oov_index),
                _ => stats.oov_index,
            };
            block[hot] = 1.0;
            offset += stats.vocabulary.len() + 1;
        }
    }

    /// Row-major matrix of encodings, one row per observation.
    pub fn apply_batch<'a, I>(&self, schema: &FeatureSchema, observations: I) -> Result<Vec<f64>>
    where
        I: IntoIterator<Item = &'a UserObservation>,
    {
        self.check_schema(schema)?;
        let mut out = Vec::new();
        for obs in observations {
            if obs.features.len() != self.feature_names.len() {
                return Err(HteError::Dimension {
                    expected: self.feature_names.len(),
                    found: obs.features.len(),
                });
            }
            let start = out.len();
            out.resize(start + self.dimension, 0.0);
            self.encode_into(obs, &mut out[start..]);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("spec serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let spec: TransformSpec = serde_json::from_str(text)?;
        let expected = spec.recompute_hash();
        if expected != spec.content_hash {
            return Err(HteError::Schema(format!(
                "transform spec hash mismatch: stored {}, computed {expected}",
                spec.content_hash
            )));
        }
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
