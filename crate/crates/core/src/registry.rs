//! File-based model registry. Each model lives in `<root>/<model_id>/` with its
//! transform spec, both arm checkpoints and an `entry.json` listing every
//! artifact with its SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{HteError, Result};
use crate::learners::ModelCheckpoint;
use crate::tlearner::{Scope, TLearnerModel};
use crate::transform::TransformSpec;
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the entry directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub eval_experiment_ids: Vec<String>,
    pub per_experiment: Vec<(String, f64)>,
    pub mean_auuc: Option<f64>,
    pub ci_half_width: Option<f64>,
    pub random_mean_auuc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub model_id: String,
    pub scope: Scope,
    pub metric: String,
    pub transform_hash: String,
    pub artifacts: BTreeMap<String, Artifact>,
    pub training_experiment_ids: Vec<String>,
    pub eval_summary: Option<EvalSummary>,
    pub created_at: NaiveDate,
    pub parent_id: Option<String>,
    pub label: Option<String>,
}

const TRANSFORM: &str = "transform";
const TREATMENT: &str = "treatment_model";
const CONTROL: &str = "control_model";
const ENTRY_FILE: &str = "entry.json";

#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

/// Writes via a temporary file and rename, so readers never see partial files.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Registry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Stores `model` and returns its entry. Registering identical content
    /// twice leaves one entry.
    pub fn register(
        &self,
        model: &TLearnerModel,
        eval_summary: Option<EvalSummary>,
        created_at: NaiveDate,
        parent_id: Option<String>,
        label: Option<String>,
    ) -> Result<RegistryEntry> {
        if let Some(s) = &eval_summary {
            if let Some(e) = s
                .eval_experiment_ids
                .iter()
                .find(|e| model.training_experiment_ids.contains(e))
            {
                return Err(HteError::Registry(format!(
                    "experiment {e} appears in both training and evaluation sets"
                )));
            }
        }
        let model_id = model.id();
        let dir = self.root.join(&model_id);
        fs::create_dir_all(&dir)?;
        let mut artifacts = BTreeMap::new();
        for (name, text) in [
            (TRANSFORM, model.transform.to_text()),
            (TREATMENT, model.treatment_model.to_text()),
            (CONTROL, model.control_model.to_text()),
        ] {
            let file = format!("{name}.json");
            write_atomic(&dir.join(&file), text.as_bytes())?;
            artifacts.insert(
                name.to_string(),
                Artifact {
                    path: file,
                    sha256: sha256_hex(text.as_bytes()),
                },
            );
        }
        let entry = RegistryEntry {
            model_id,
            scope: model.scope.clone(),
            metric: model.metric.clone(),
            transform_hash: model.transform.content_hash.clone(),
            artifacts,
            training_experiment_ids: model.training_experiment_ids.clone(),
            eval_summary,
            created_at,
            parent_id,
            label,
        };
        let mut text = serde_json::to_string_pretty(&entry)?;
        text.push('\n');
        write_atomic(&dir.join(ENTRY_FILE), text.as_bytes())?;
        Ok(entry)
    }

    fn read_entry(&self, dir: &Path) -> Result<RegistryEntry> {
        let text = fs::read_to_string(dir.join(ENTRY_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Every entry, sorted by creation date then id.
    pub fn list(&self) -> Result<Vec<RegistryEntry>> {
        let mut out = Vec::new();
        for item in fs::read_dir(&self.root)? {
            let path = item?.path();
            if path.join(ENTRY_FILE).is_file() {
                out.push(self.read_entry(&path)?);
            }
        }
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.model_id.cmp(&b.model_id)));
        Ok(out)
    }

    /// Looks up an entry by full id or unique prefix and verifies its artifacts.
    pub fn entry(&self, id: &str) -> Result<RegistryEntry> {
        if id.is_empty() {
            return Err(HteError::Registry("empty model id".into()));
        }
        let dir = self.root.join(id);
        let entry = if dir.join(ENTRY_FILE).is_file() {
            self.read_entry(&dir)?
        } else {
            let matches: Vec<RegistryEntry> = self
                .list()?
                .into_iter()
                .filter(|e| e.model_id.starts_with(id))
                .collect();
            match matches.len() {
                0 => return Err(HteError::Registry(format!("unknown model id {id}"))),
                1 => matches.into_iter().next().expect("one match"),
                n => return Err(HteError::Registry(format!("model id prefix {id} is ambiguous ({n} matches)"))),
            }
        };
        self.verify(&entry)?;
        Ok(entry)
    }

    /// Checks that every artifact exists and matches its recorded hash.
    pub fn verify(&self, entry: &RegistryEntry) -> Result<()> {
        let dir = self.root.join(&entry.model_id);
        for (name, a) in &entry.artifacts {
            let bytes = fs::read(dir.join(&a.path))
                .map_err(|e| HteError::Registry(format!("{}: artifact {name} unreadable: {e}", entry.model_id)))?;
            let got = sha256_hex(&bytes);
            if got != a.sha256 {
                return Err(HteError::Registry(format!(
                    "{}: artifact {name} hash {got} differs from recorded {}",
                    entry.model_id, a.sha256
                )));
            }
        }
        for name in [TRANSFORM, TREATMENT, CONTROL] {
            if !entry.artifacts.contains_key(name) {
                return Err(HteError::Registry(format!("{}: missing artifact {name}", entry.model_id)));
            }
        }
        Ok(())
    }

    pub fn load_model(&self, id: &str) -> Result<(RegistryEntry, TLearnerModel)> {
        let entry = self.entry(id)?;
        let dir = self.root.join(&entry.model_id);
        let path = |name: &str| dir.join(&entry.artifacts[name].path);
        let model = TLearnerModel::new(
            ModelCheckpoint::load(&path(TREATMENT))?,
            ModelCheckpoint::load(&path(CONTROL))?,
            TransformSpec::load(&path(TRANSFORM))?,
            entry.scope.clone(),
            entry.metric.clone(),
            entry.training_experiment_ids.clone(),
        )?;
        if model.id() != entry.model_id {
            return Err(HteError::Registry(format!(
                "stored artifacts address {} but the entry claims {}",
                model.id(),
                entry.model_id
            )));
        }
        Ok((entry, model))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::LearnerConfig;
    use crate::simgen::{generate_experiment, GeneratorConfig};
    use crate::tlearner::{fit_tlearner, SplitParams};

    fn model() -> TLearnerModel {
        let (exp, _) = generate_experiment(&GeneratorConfig {
            n_users: 500,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let cfg = LearnerConfig {
            epochs: 1,
            ..LearnerConfig::linear()
        };
        fit_tlearner(&[&exp], &Scope::general(), "conversion", &cfg, &SplitParams::default(), None).unwrap()
    }

    #[test]
    fn register_load_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        let m = model();
        let date = NaiveDate::from_ymd_opt(2024, 6, 30).unwrap();
        let e = reg.register(&m, None, date, None, None).unwrap();
        assert_eq!(e.model_id, m.id());
        let (_, back) = reg.load_model(&e.model_id[..12]).unwrap();
        assert_eq!(back, m);
        assert_eq!(reg.list().unwrap().len(), 1);
        assert!(matches!(reg.entry("nope"), Err(HteError::Registry(_))));

        let f = dir.path().join(&e.model_id).join("control_model.json");
        let text = fs::read_to_string(&f).unwrap();
        fs::write(&f, text.replacen("0.", "1.", 1)).unwrap();
        assert!(reg.load_model(&e.model_id).is_err());
    }

    #[test]
    fn train_eval_overlap_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        let m = model();
        let summary = EvalSummary {
            eval_experiment_ids: m.training_experiment_ids.clone(),
            per_experiment: Vec::new(),
            mean_auuc: None,
            ci_half_width: None,
            random_mean_auuc: None,
        };
        let date = NaiveDate::from_ymd_opt(2024, 6, 30).unwrap();
        assert!(reg.register(&m, Some(summary), date, None, None).is_err());
    }
}
