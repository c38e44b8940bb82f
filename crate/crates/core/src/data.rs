//! Experiment data model, line-delimited file I/O and the seeded
//! train/validation splitter.
//!
//! An experiment pool on disk is a pair of files:
//!
//! * a schema header (JSON) listing the feature names, kinds and version, plus
//!   one metadata record per experiment (end date, vertical, advertiser, ...);
//! * one or more line-delimited data files, one observation per line, each a
//!   flat JSON object with the reserved keys `experiment_id`, `user_id`, `arm`
//!   and `outcome:<metric>`, and one key per schema feature.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{HteError, Result};
use crate::util::{fnv1a64, splitmix64, unit_interval};

pub const OUTCOME_PREFIX: &str = "outcome:";
const RESERVED: [&str; 3] = ["experiment_id", "user_id", "arm"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub kind: FeatureKind,
}

/// Ordered feature list shared by every observation of a model lineage.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: u32,
    pub features: Vec<FeatureDef>,
}

impl FeatureSchema {
    pub fn new(version: u32, features: Vec<FeatureDef>) -> Result<Self> {
        if features.is_empty() {
            return Err(HteError::Schema("schema needs at least one feature".into()));
        }
        let mut seen = HashSet::new();
        for f in &features {
            if f.name.is_empty() {
                return Err(HteError::Schema("empty feature name".into()));
            }
            if RESERVED.contains(&f.name.as_str()) || f.name.starts_with(OUTCOME_PREFIX) {
                return Err(HteError::Schema(format!(
                    "feature name `{}` collides with a reserved key",
                    f.name
                )));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(HteError::Schema(format!("duplicate feature `{}`", f.name)));
            }
        }
        Ok(Self { version, features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureValue {
    Null,
    Numeric(f64),
    Categorical(String),
}

impl FeatureValue {
    pub fn as_numeric(&self) -> Option<f64> {
        match self {
            FeatureValue::Numeric(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_category(&self) -> Option<&str> {
        match self {
            FeatureValue::Categorical(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Treatment,
    Control,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Treatment => "treatment",
            Arm::Control => "control",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = HteError;

    /// "test" is accepted as a synonym for the treatment arm.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "treatment" | "test" => Ok(Arm::Treatment),
            "control" => Ok(Arm::Control),
            other => Err(HteError::Schema(format!(
                "arm label `{other}` is not one of treatment/control"
            ))),
        }
    }
}

/// One user in one experiment. Feature values are aligned with the schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct UserObservation {
    pub user_id: String,
    pub features: Vec<FeatureValue>,
    pub arm: Arm,
    pub outcomes: BTreeMap<String, f64>,
}

impl UserObservation {
    pub fn outcome(&self, metric: &str) -> Option<f64> {
        self.outcomes.get(metric).copied()
    }
}

/// Descriptive fields of an experiment, as stored in the schema header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentMeta {
    pub experiment_id: String,
    pub end_date: NaiveDate,
    #[serde(default)]
    pub vertical: Option<String>,
    #[serde(default)]
    pub advertiser_id: Option<String>,
    #[serde(default)]
    pub ad_product: Option<String>,
    pub primary_outcome: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub meta: ExperimentMeta,
    pub schema: Arc<FeatureSchema>,
    pub observations: Vec<UserObservation>,
}

impl Experiment {
    /// Builds an experiment, checking arm coverage, outcome presence and
    /// feature alignment.
    pub fn new(
        meta: ExperimentMeta,
        schema: Arc<FeatureSchema>,
        observations: Vec<UserObservation>,
    ) -> Result<Self> {
        let (mut n_t, mut n_c) = (0usize, 0usize);
        for obs in &observations {
            if obs.features.len() != schema.len() {
                return Err(HteError::Schema(format!(
                    "user {} in {} has {} feature values, schema declares {}",
                    obs.user_id,
                    meta.experiment_id,
                    obs.features.len(),
                    schema.len()
                )));
            }
            for (value, def) in obs.features.iter().zip(&schema.features) {
                let ok = matches!(
                    (value, def.kind),
                    (FeatureValue::Null, _)
                        | (FeatureValue::Numeric(_), FeatureKind::Numeric)
                        | (FeatureValue::Categorical(_), FeatureKind::Categorical)
                );
                if !ok {
                    return Err(HteError::Schema(format!(
                        "feature `{}` of user {} does not match its declared kind",
                        def.name, obs.user_id
                    )));
                }
            }
            if !obs.outcomes.contains_key(&meta.primary_outcome) {
                return Err(HteError::Schema(format!(
                    "user {} in {} lacks primary outcome `{}`",
                    obs.user_id, meta.experiment_id, meta.primary_outcome
                )));
            }
            match obs.arm {
                Arm::Treatment => n_t += 1,
                Arm::Control => n_c += 1,
            }
        }
        if n_t == 0 || n_c == 0 {
            let missing = if n_t == 0 { Arm::Treatment } else { Arm::Control };
            return Err(HteError::Schema(format!(
                "experiment {} has no {missing} observations",
                meta.experiment_id
            )));
        }
        Ok(Self {
            meta,
            schema,
            observations,
        })
    }

    pub fn id(&self) -> &str {
        &self.meta.experiment_id
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.observations.iter().filter(|o| o.arm == arm).count()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Schema header file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolHeader {
    pub schema: FeatureSchema,
    pub experiments: Vec<ExperimentMeta>,
}

pub fn write_header(path: &Path, header: &PoolHeader) -> Result<()> {
    let mut text = serde_json::to_string_pretty(header)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_header(path: &Path) -> Result<PoolHeader> {
    let text = fs::read_to_string(path)?;
    let header: PoolHeader = serde_json::from_str(&text)
        .map_err(|e| HteError::Schema(format!("{}: {e}", path.display())))?;
    // re-run the constructor checks
    FeatureSchema::new(header.schema.version, header.schema.features.clone())?;
    Ok(header)
}

/// Serializes one observation as a canonical flat JSON line: reserved keys,
/// then features in schema order, then outcomes sorted by metric name.
pub fn encode_line(experiment_id: &str, schema: &FeatureSchema, obs: &UserObservation) -> String {
    let mut out = String::with_capacity(96 + 24 * (schema.len() + obs.outcomes.len()));
    let mut push = |key: &str, v: Value| {
        out.push(if out.is_empty() { '{' } else { ',' });
        out.push_str(&Value::String(key.to_string()).to_string());
        out.push(':');
        out.push_str(&v.to_string());
    };
    push("experiment_id", Value::String(experiment_id.into()));
    push("user_id", Value::String(obs.user_id.clone()));
    push("arm", Value::String(obs.arm.as_str().into()));
    for (def, value) in schema.features.iter().zip(&obs.features) {
        let v = match value {
            FeatureValue::Null => Value::Null,
            FeatureValue::Numeric(x) => number(*x),
            FeatureValue::Categorical(s) => Value::String(s.clone()),
        };
        push(&def.name, v);
    }
    for (metric, y) in &obs.outcomes {
        push(&format!("{OUTCOME_PREFIX}{metric}"), number(*y));
    }
    out.push('}');
    out
}

fn number(x: f64) -> Value {
    serde_json::Number::from_f64(x)
        .map(Value::Number)
        .unwrap_or(Value::Null)
}

/// Parses one data line into `(experiment_id, observation)`.
pub fn decode_line(
    line: &str,
    line_no: usize,
    schema: &FeatureSchema,
) -> Result<(String, UserObservation)> {
    let (experiment_id, obs) = decode_record(line, line_no, schema, false)?;
    Ok((experiment_id.unwrap_or_default(), obs))
}

/// Parses a line to be scored: only `user_id` and the features are needed.
/// `experiment_id`, `arm` and outcomes are accepted and ignored (the arm
/// defaults to control when absent).
pub fn decode_scoring_line(line: &str, line_no: usize, schema: &FeatureSchema) -> Result<UserObservation> {
    decode_record(line, line_no, schema, true).map(|(_, obs)| obs)
}

fn decode_record(
    line: &str,
    line_no: usize,
    schema: &FeatureSchema,
    scoring: bool,
) -> Result<(Option<String>, UserObservation)> {
    let parse_err = |message: String| HteError::Parse {
        line: line_no,
        message,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(parse_err("record is not a JSON object".into()));
    };
    let string_field = |key: &str| -> Result<Option<String>> {
        match map.get(key) {
            Some(Value::String(s)) => Ok(Some(s.clone())),
            None if scoring && key != "user_id" => Ok(None),
            _ => Err(parse_err(format!("missing or non-string `{key}`"))),
        }
    };
    let experiment_id = string_field("experiment_id")?;
    let user_id = string_field("user_id")?.unwrap_or_default();
    let arm: Arm = match string_field("arm")? {
        Some(a) => a.parse().map_err(|e: HteError| match e {
            HteError::Schema(m) => HteError::Schema(format!("line {line_no}: {m}")),
            other => other,
        })?,
        None => Arm::Control,
    };

    let mut features = Vec::with_capacity(schema.len());
    for def in &schema.features {
        let v = match (map.get(&def.name), def.kind) {
            (None, _) | (Some(Value::Null), _) => FeatureValue::Null,
            (Some(Value::Number(n)), FeatureKind::Numeric) => {
                FeatureValue::Numeric(n.as_f64().ok_or_else(|| {
                    parse_err(format!("feature `{}` is not representable", def.name))
                })?)
            }
            (Some(Value::String(s)), FeatureKind::Categorical) => {
                FeatureValue::Categorical(s.clone())
            }
            (Some(other), kind) => {
                return Err(HteError::Schema(format!(
                    "line {line_no}: feature `{}` declared {kind:?} but holds {other}",
                    def.name
                )))
            }
        };
        features.push(v);
    }

    let mut outcomes = BTreeMap::new();
    for (key, v) in &map {
        if let Some(metric) = key.strip_prefix(OUTCOME_PREFIX) {
            if scoring {
                continue;
            }
            let y = v
                .as_f64()
                .ok_or_else(|| parse_err(format!("outcome `{metric}` is not a number")))?;
            outcomes.insert(metric.to_string(), y);
        } else if !RESERVED.contains(&key.as_str()) && schema.index_of(key).is_none() {
            return Err(HteError::Schema(format!(
                "line {line_no}: key `{key}` is not declared in the schema"
            )));
        }
    }
    Ok((
        experiment_id,
        UserObservation {
            user_id,
            features,
            arm,
            outcomes,
        },
    ))
}

/// Reads a line-delimited data file against its schema header. Experiments are
/// returned sorted by id; observations keep file order.
pub fn load_experiments(data_path: &Path, header_path: &Path) -> Result<Vec<Experiment>> {
    let header = read_header(header_path)?;
    let file = fs::File::open(data_path)?;
    load_from_reader(BufReader::new(file), &header)
}

pub fn load_from_reader(reader: impl BufRead, header: &PoolHeader) -> Result<Vec<Experiment>> {
    let schema = Arc::new(header.schema.clone());
    let mut groups: BTreeMap<String, Vec<UserObservation>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (exp_id, obs) = decode_line(&line, i + 1, &schema)?;
        groups.entry(exp_id).or_default().push(obs);
    }
    let metas: BTreeMap<&str, &ExperimentMeta> = header
        .experiments
        .iter()
        .map(|m| (m.experiment_id.as_str(), m))
        .collect();
    groups
        .into_iter()
        .map(|(id, observations)| {
            let meta = metas.get(id.as_str()).ok_or_else(|| {
                HteError::Schema(format!("experiment {id} has no metadata in the schema header"))
            })?;
            Experiment::new((*meta).clone(), schema.clone(), observations)
        })
        .collect()
}

/// Writes the canonical data file for `experiments` (sorted by id).
pub fn save_experiments(data_path: &Path, experiments: &[Experiment]) -> Result<()> {
    let mut sorted: Vec<&Experiment> = experiments.iter().collect();
    sorted.sort_by(|a, b| a.id().cmp(b.id()));
    let mut w = BufWriter::new(fs::File::create(data_path)?);
    for exp in sorted {
        for obs in &exp.observations {
            writeln!(w, "{}", encode_line(exp.id(), &exp.schema, obs))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn header_for(experiments: &[Experiment]) -> Result<PoolHeader> {
    let first = experiments
        .first()
        .ok_or_else(|| HteError::Schema("no experiments to describe".into()))?;
    if experiments.iter().any(|e| e.schema != first.schema) {
        return Err(HteError::Schema("experiments disagree on the feature schema".into()));
    }
    let mut metas: Vec<ExperimentMeta> = experiments.iter().map(|e| e.meta.clone()).collect();
    metas.sort_by(|a, b| a.experiment_id.cmp(&b.experiment_id));
    Ok(PoolHeader {
        schema: (*first.schema).clone(),
        experiments: metas,
    })
}

/// Hash of `(user_id, seed)` used for partition assignment: FNV-1a over the
/// UTF-8 user id followed by the little-endian seed, then a SplitMix64 finalizer.
pub fn split_hash(user_id: &str, seed: u64) -> u64 {
    let mut bytes = Vec::with_capacity(user_id.len() + 8);
    bytes.extend_from_slice(user_id.as_bytes());
    bytes.extend_from_slice(&seed.to_le_bytes());
    splitmix64(fnv1a64(&bytes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<UserObservation>,
    pub validation: Vec<UserObservation>,
    pub split_fraction: f64,
    pub seed: u64,
}

/// Partition indices of `observations` into (train, validation).
///
/// A user goes to train when `unit(split_hash(user_id, seed)) < fraction`. If an
/// arm with at least two users lands entirely in one partition, its user whose
/// hash lies closest to the threshold is moved across.
pub fn partition_indices(
    observations: &[UserObservation],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(HteError::param(
            "fraction",
            format!("split fraction must lie strictly inside (0, 1), got {fraction}"),
        ));
    }
    let u: Vec<f64> = observations
        .iter()
        .map(|o| unit_interval(split_hash(&o.user_id, seed)))
        .collect();
    let mut in_train: Vec<bool> = u.iter().map(|&x| x < fraction).collect();

    for arm in [Arm::Treatment, Arm::Control] {
        let members: Vec<usize> = (0..observations.len())
            .filter(|&i| observations[i].arm == arm)
            .collect();
        if members.len() < 2 {
            continue;
        }
        let n_train = members.iter().filter(|&&i| in_train[i]).count();
        if n_train == members.len() {
            let &i = members
                .iter()
                .max_by(|&&a, &&b| u[a].total_cmp(&u[b]).then(a.cmp(&b)))
                .expect("non-empty");
            in_train[i] = false;
        } else if n_train == 0 {
            let &i = members
                .iter()
                .min_by(|&&a, &&b| u[a].total_cmp(&u[b]).then(a.cmp(&b)))
                .expect("non-empty");
            in_train[i] = true;
        }
    }
    let train = (0..observations.len()).filter(|&i| in_train[i]).collect();
    let valid = (0..observations.len()).filter(|&i| !in_train[i]).collect();
    Ok((train, valid))
}

pub fn split_train_validation(exp: &Experiment, fraction: f64, seed: u64) -> Result<SplitDataset> {
    let (train, valid) = partition_indices(&exp.observations, fraction, seed)?;
    Ok(SplitDataset {
        train: train.iter().map(|&i| exp.observations[i].clone()).collect(),
        validation: valid.iter().map(|&i| exp.observations[i].clone()).collect(),
        split_fraction: fraction,
        seed,
    })
}
