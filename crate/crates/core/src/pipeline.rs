//! End-to-end commands behind the `hte` binary: simulate, select, train,
//! evaluate, score and run-cadence. Each command reads a [`RunConfig`] and
//! writes its artifacts under `paths.output` (or `paths.pool` for simulate).
//!
//! Pool layout on disk:
//!
//! ```text
//! <pool>/schema.json              feature schema + experiment metadata
//! <pool>/experiments/<id>.jsonl   one observation per line
//! <pool>/ground_truth/<id>.csv    true ITEs (simulated data only)
//! <pool>/manifest.json            SHA-256 of every file above
//! ```
//!
//! A stream has the same layout inside `week_01/`, `week_02/`, ... with one
//! manifest at the root.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CriteriaSettings, RunConfig, SimulationKind, StreamSettings};
use crate::data::{
    decode_scoring_line, encode_line, header_for, load_from_reader, split_hash, write_header, Experiment,
    FeatureSchema, PoolHeader, UserObservation,
};
use crate::error::{HteError, Result};
use crate::evaluation::{auuc, evaluation_report, uplift_curve_aligned, write_curves, EvalReport, UpliftCurve};
use crate::incremental::{append_record, read_ledger, run_week, CadenceMode, HistoryStore, WeekInput, WeeklyRunRecord};
use crate::registry::{EvalSummary, Registry, RegistryEntry};
use crate::selection::{select_experiments, write_audit, ExclusionReason, SelectionOutcome};
use crate::simgen::{generate_pool, generate_stream, GeneratorConfig, GroundTruth};
use crate::tlearner::{fit_tlearner, TLearnerModel};
use crate::util::{derive_seed, sha256_hex};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_FILE: &str = "schema.json";
const SCORE_CHUNK_LINES: usize = 65_536;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: SimulationKind,
    pub seed: u64,
    /// SHA-256 of the simulation settings.
    pub config_hash: String,
    pub weeks: Option<usize>,
    pub eval_experiment_ids: Vec<String>,
    /// Relative path -> SHA-256.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Option<Manifest>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn rel(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub n_experiments: usize,
    pub n_rows: usize,
}

/// Writes one dataset directory (schema, experiments, ground truth) and
/// records file hashes into `files`.
fn write_dataset(
    root: &Path,
    dir: &Path,
    data: &[(Experiment, GroundTruth)],
    files: &mut BTreeMap<String, String>,
) -> Result<()> {
    let exps: Vec<Experiment> = data.iter().map(|(e, _)| e.clone()).collect();
    fs::create_dir_all(dir.join("experiments"))?;
    fs::create_dir_all(dir.join("ground_truth"))?;
    write_header(&dir.join(SCHEMA_FILE), &header_for(&exps)?)?;
    let written: Vec<(PathBuf, PathBuf)> = data
        .par_iter()
        .map(|(exp, truth)| {
            let mut text = String::new();
            for obs in &exp.observations {
                text.push_str(&encode_line(exp.id(), &exp.schema, obs));
                text.push('\n');
            }
            let data_path = dir.join("experiments").join(format!("{}.jsonl", exp.id()));
            fs::write(&data_path, text)?;
            let truth_path = dir.join("ground_truth").join(format!("{}.csv", exp.id()));
            truth.write_sidecar(&truth_path)?;
            Ok((data_path, truth_path))
        })
        .collect::<Result<_>>()?;
    let mut paths = vec![dir.join(SCHEMA_FILE)];
    for (a, b) in written {
        paths.push(a);
        paths.push(b);
    }
    for p in paths {
        files.insert(rel(root, &p), sha256_hex(&fs::read(&p)?));
    }
    Ok(())
}

/// Removes files a previous simulation left in `dir`.
fn clear_dataset_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    for item in fs::read_dir(dir)? {
        let path = item?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if path.is_dir() && (name == "experiments" || name == "ground_truth" || name.starts_with("week_")) {
            fs::remove_dir_all(&path)?;
        } else if name == SCHEMA_FILE || name == MANIFEST_FILE {
            fs::remove_file(&path)?;
        }
    }
    Ok(())
}

/// Eval generator for a stream: same world and panel design, disjoint users
/// and its own sampling seed.
pub fn stream_eval_generator(settings: &StreamSettings) -> GeneratorConfig {
    let g = &settings.generator;
    GeneratorConfig {
        experiment_id: format!("{}-eval", g.experiment_id),
        n_users: settings.eval_users,
        user_offset: g.user_offset + g.n_users,
        seed: derive_seed(g.seed, 0x6576_616c),
        ..g.clone()
    }
}

/// Generates a stream: per week, the training experiment and a held-out
/// evaluation experiment.
pub fn generate_stream_weeks(
    settings: &StreamSettings,
) -> Result<Vec<((Experiment, GroundTruth), (Experiment, GroundTruth))>> {
    let train = generate_stream(&settings.generator, settings.weeks)?;
    let eval = generate_stream(&stream_eval_generator(settings), settings.weeks)?;
    Ok(train.into_iter().zip(eval).collect())
}

pub fn simulate(cfg: &RunConfig) -> Result<SimulateOutput> {
    cfg.validate()?;
    let root = cfg.paths.pool.clone();
    fs::create_dir_all(&root)?;
    clear_dataset_dir(&root)?;
    let mut files = BTreeMap::new();
    let settings_hash = sha256_hex(serde_json::to_string(&cfg.simulate)?.as_bytes());
    let (manifest, n_experiments, n_rows) = match cfg.simulate.kind {
        SimulationKind::Pool => {
            let data = generate_pool(&cfg.simulate.pool)?;
            write_dataset(&root, &root, &data, &mut files)?;
            let rows = data.iter().map(|(e, _)| e.len()).sum();
            let manifest = Manifest {
                kind: SimulationKind::Pool,
                seed: cfg.seed,
                config_hash: settings_hash,
                weeks: None,
                eval_experiment_ids: Vec::new(),
                files,
            };
            (manifest, data.len(), rows)
        }
        SimulationKind::Stream => {
            let weeks = generate_stream_weeks(&cfg.simulate.stream)?;
            let mut eval_ids = Vec::new();
            let mut rows = 0;
            for (i, (train, eval)) in weeks.iter().enumerate() {
                let dir = root.join(format!("week_{:02}", i + 1));
                rows += train.0.len() + eval.0.len();
                eval_ids.push(eval.0.id().to_string());
                write_dataset(&root, &dir, &[train.clone(), eval.clone()], &mut files)?;
            }
            let manifest = Manifest {
                kind: SimulationKind::Stream,
                seed: cfg.seed,
                config_hash: settings_hash,
                weeks: Some(weeks.len()),
                eval_experiment_ids: eval_ids,
                files,
            };
            (manifest, 2 * weeks.len(), rows)
        }
    };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(SimulateOutput {
        dir: root,
        manifest,
        n_experiments,
        n_rows,
    })
}

// ---------------------------------------------------------------- loading

#[derive(Debug, Clone)]
pub struct PoolData {
    pub header: PoolHeader,
    pub experiments: Vec<Experiment>,
    pub manifest: Option<Manifest>,
}

/// Reads one dataset directory; files listed in `manifest` are checked against
/// their recorded hash.
fn load_dataset_dir(root: &Path, dir: &Path, manifest: Option<&Manifest>) -> Result<(PoolHeader, Vec<Experiment>)> {
    let verify = |path: &Path, bytes: &[u8]| -> Result<()> {
        if let Some(m) = manifest {
            if let Some(expected) = m.files.get(&rel(root, path)) {
                if sha256_hex(bytes) != *expected {
                    return Err(HteError::Schema(format!(
                        "{} does not match the checksum in {MANIFEST_FILE}",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    };
    let header_path = dir.join(SCHEMA_FILE);
    let header_bytes = fs::read(&header_path)
        .map_err(|e| HteError::Schema(format!("cannot read {}: {e}", header_path.display())))?;
    verify(&header_path, &header_bytes)?;
    let header = crate::data::read_header(&header_path)?;

    let data_dir = dir.join("experiments");
    let mut paths: Vec<PathBuf> = fs::read_dir(&data_dir)
        .map_err(|e| HteError::Schema(format!("cannot list {}: {e}", data_dir.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "jsonl"));
    paths.sort();
    let per_file: Vec<Vec<Experiment>> = paths
        .par_iter()
        .map(|p| {
            let bytes = fs::read(p)?;
            verify(p, &bytes)?;
            load_from_reader(&bytes[..], &header).map_err(|e| match e {
                HteError::Parse { line, message } => HteError::Parse {
                    line,
                    message: format!("{}: {message}", p.display()),
                },
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let mut experiments: Vec<Experiment> = per_file.into_iter().flatten().collect();
    experiments.sort_by(|a, b| a.id().cmp(b.id()));
    if let Some(w) = experiments.windows(2).find(|w| w[0].id() == w[1].id()) {
        return Err(HteError::Schema(format!(
            "experiment {} is split across several data files",
            w[0].id()
        )));
    }
    Ok((header, experiments))
}

pub fn load_pool(dir: &Path) -> Result<PoolData> {
    let manifest = Manifest::read(dir)?;
    if matches!(&manifest, Some(m) if m.kind == SimulationKind::Stream) || !dir.join(SCHEMA_FILE).is_file() && dir.join("week_01").is_dir() {
        return Err(HteError::RunConfig(format!(
            "{} holds a weekly stream; use run-cadence",
            dir.display()
        )));
    }
    let (header, experiments) = load_dataset_dir(dir, dir, manifest.as_ref())?;
    if experiments.is_empty() {
        return Err(HteError::Schema(format!("{} contains no experiments", dir.display())));
    }
    Ok(PoolData {
        header,
        experiments,
        manifest,
    })
}

/// Loads `week_NN` directories in week order. Evaluation experiments are the
/// configured ids, or else those listed in the stream manifest.
pub fn load_stream(dir: &Path, eval_ids: &[String]) -> Result<Vec<WeekInput>> {
    let manifest = Manifest::read(dir)?;
    let eval_ids: BTreeSet<String> = if eval_ids.is_empty() {
        manifest.as_ref().map(|m| m.eval_experiment_ids.iter().cloned().collect()).unwrap_or_default()
    } else {
        eval_ids.iter().cloned().collect()
    };
    let mut weeks: Vec<(usize, PathBuf)> = Vec::new();
    for item in fs::read_dir(dir).map_err(|e| HteError::Schema(format!("cannot list {}: {e}", dir.display())))? {
        let path = item?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(n) = name.strip_prefix("week_").and_then(|n| n.parse::<usize>().ok()) {
            if path.is_dir() && n > 0 {
                weeks.push((n, path));
            }
        }
    }
    weeks.sort();
    if weeks.is_empty() {
        return Err(HteError::Schema(format!("{} has no week_NN directories", dir.display())));
    }
    weeks
        .into_iter()
        .map(|(week, path)| {
            let (_, exps) = load_dataset_dir(dir, &path, manifest.as_ref())?;
            let (eval, experiments): (Vec<Experiment>, Vec<Experiment>) =
                exps.into_iter().partition(|e| eval_ids.contains(e.id()));
            Ok(WeekInput {
                week,
                experiments,
                eval,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- helpers

pub fn resolve_metric(cfg: &RunConfig, experiments: &[&Experiment]) -> Result<String> {
    if let Some(m) = &cfg.metric {
        return Ok(m.clone());
    }
    experiments
        .first()
        .map(|e| e.meta.primary_outcome.clone())
        .ok_or_else(|| HteError::Schema("no experiments to infer the metric from".into()))
}

/// Splits the pool into (candidates for training, held-out evaluation).
/// Explicit ids win; otherwise the `n_eval_experiments` ids with the smallest
/// seeded hash are held out.
pub fn holdout<'a>(cfg: &RunConfig, experiments: &'a [Experiment]) -> Result<(Vec<&'a Experiment>, Vec<&'a Experiment>)> {
    let eval_ids: BTreeSet<String> = if cfg.evaluation.eval_experiments.is_empty() {
        let n = cfg.evaluation.n_eval_experiments;
        if n >= experiments.len() && n > 0 {
            return Err(HteError::RunConfig(format!(
                "[evaluation] n_eval_experiments = {n} leaves no training experiments (pool has {})",
                experiments.len()
            )));
        }
        let mut ranked: Vec<(u64, &str)> = experiments
            .iter()
            .map(|e| (split_hash(e.id(), cfg.evaluation.seed), e.id()))
            .collect();
        ranked.sort();
        ranked.into_iter().take(n).map(|(_, id)| id.to_string()).collect()
    } else {
        let ids: BTreeSet<String> = cfg.evaluation.eval_experiments.iter().cloned().collect();
        if let Some(missing) = ids.iter().find(|id| !experiments.iter().any(|e| e.id() == id.as_str())) {
            return Err(HteError::RunConfig(format!(
                "[evaluation] eval_experiments names unknown experiment {missing}"
            )));
        }
        ids
    };
    Ok(experiments.iter().partition(|e| !eval_ids.contains(e.id())))
}

/// Evaluation experiments whose total gain is too small for a normalized AUUC
/// are set aside; the gain does not depend on the scores.
fn usable_eval<'a>(eval: &[&'a Experiment], metric: &str, n_points: usize) -> Result<(Vec<&'a Experiment>, Vec<String>)> {
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for e in eval {
        let zeros = vec![0.0; e.len()];
        match uplift_curve_aligned(&zeros, e, metric, n_points).and_then(|c| auuc(&c)) {
            Ok(_) => keep.push(*e),
            Err(HteError::DegenerateExperiment { .. }) => dropped.push(e.id().to_string()),
            Err(err) => return Err(err),
        }
    }
    Ok((keep, dropped))
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn latest_end_date(experiments: &[&Experiment]) -> Result<NaiveDate> {
    experiments
        .iter()
        .map(|e| e.meta.end_date)
        .max()
        .ok_or_else(|| HteError::Schema("no experiments".into()))
}

// ---------------------------------------------------------------- select

#[derive(Debug, Clone, Serialize)]
pub struct SelectionSummary {
    pub name: String,
    pub as_of_date: NaiveDate,
    pub n_candidates: usize,
    pub n_selected: usize,
    /// Experiments failing each criterion (one experiment may fail several).
    pub excluded_by: BTreeMap<String, usize>,
    pub selected_ids: Vec<String>,
}

fn summarize(name: &str, as_of: NaiveDate, outcome: &SelectionOutcome<'_>) -> SelectionSummary {
    let mut excluded_by: BTreeMap<String, usize> = [
        ExclusionReason::Recency,
        ExclusionReason::ControlSize,
        ExclusionReason::Lift,
        ExclusionReason::LiftUndefined,
    ]
    .iter()
    .map(|r| (r.code().to_string(), 0))
    .collect();
    for row in outcome.exclusions() {
        for r in &row.reasons {
            *excluded_by.entry(r.code().to_string()).or_default() += 1;
        }
    }
    SelectionSummary {
        name: name.to_string(),
        as_of_date: as_of,
        n_candidates: outcome.audit.len(),
        n_selected: outcome.selected.len(),
        excluded_by,
        selected_ids: outcome.selected_ids(),
    }
}

/// Applies the configured criteria and every grid variant to the training
/// candidates, writing one audit per variant plus `summary.csv`.
pub fn select(cfg: &RunConfig) -> Result<Vec<SelectionSummary>> {
    cfg.validate()?;
    let pool = load_pool(&cfg.paths.pool)?;
    let (candidates, _) = holdout(cfg, &pool.experiments)?;
    let owned: Vec<Experiment> = candidates.iter().map(|e| (*e).clone()).collect();
    let fallback = latest_end_date(&candidates)?;
    let out = cfg.paths.output.join("selection");
    fs::create_dir_all(&out)?;

    let variants: Vec<&CriteriaSettings> = std::iter::once(&cfg.selection).chain(&cfg.selection_grid).collect();
    let mut seen = BTreeSet::new();
    let mut summaries = Vec::new();
    for v in variants {
        let stem = file_stem(&v.name);
        if !seen.insert(stem.clone()) {
            return Err(HteError::RunConfig(format!("[selection] duplicate criteria name {}", v.name)));
        }
        let criteria = v.resolve(fallback);
        let outcome = select_experiments(&owned, &criteria)?;
        write_audit(&out.join(format!("audit_{stem}.csv")), &outcome.audit)?;
        summaries.push(summarize(&v.name, criteria.as_of_date, &outcome));
    }
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    let reasons: Vec<String> = summaries[0].excluded_by.keys().cloned().collect();
    let mut head = vec!["criteria".to_string(), "as_of_date".into(), "n_candidates".into(), "n_selected".into()];
    head.extend(reasons.iter().map(|r| format!("excluded_{r}")));
    w.write_record(&head)?;
    for s in &summaries {
        let mut row = vec![s.name.clone(), s.as_of_date.to_string(), s.n_candidates.to_string(), s.n_selected.to_string()];
        row.extend(reasons.iter().map(|r| s.excluded_by[r].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(summaries)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub as_of_date: NaiveDate,
    pub metric: String,
    pub selection: SelectionSummary,
    pub eval_experiment_ids: Vec<String>,
    /// Held-out experiments with too little total gain to evaluate on.
    pub dropped_eval_ids: Vec<String>,
    pub entries: Vec<RegistryEntry>,
    pub report: Option<EvalReport>,
}

fn eval_summary(report: &EvalReport, name: &str) -> Option<EvalSummary> {
    let m = report.models.iter().find(|m| m.name == name)?;
    Some(EvalSummary {
        eval_experiment_ids: m.per_experiment.iter().map(|(e, _)| e.clone()).collect(),
        per_experiment: m.per_experiment.clone(),
        mean_auuc: Some(m.mean),
        ci_half_width: m.ci_half_width,
        random_mean_auuc: Some(report.random_baseline.mean),
    })
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::write(dir.join("report.txt"), report.to_text())?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    fs::write(dir.join("per_experiment.csv"), report.per_experiment_csv())?;
    Ok(())
}

/// Holds out evaluation experiments, selects training experiments, fits one
/// T-learner per configured scope, evaluates and registers each model.
pub fn train(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let pool = load_pool(&cfg.paths.pool)?;
    let (candidates, eval) = holdout(cfg, &pool.experiments)?;
    let metric = resolve_metric(cfg, &candidates)?;
    let owned: Vec<Experiment> = candidates.iter().map(|e| (*e).clone()).collect();
    let criteria = cfg.selection.resolve(latest_end_date(&candidates)?);
    let outcome = select_experiments(&owned, &criteria)?;
    let out = cfg.paths.output.join("train");
    fs::create_dir_all(&out)?;
    write_audit(&out.join("audit.csv"), &outcome.audit)?;
    let selection = summarize(&cfg.selection.name, criteria.as_of_date, &outcome);
    if outcome.selected.is_empty() {
        let mut lines = Vec::new();
        for row in &outcome.audit {
            let reasons: Vec<&str> = row.reasons.iter().map(|r| r.code()).collect();
            lines.push(format!("  {}: {}", row.experiment_id, reasons.join(";")));
        }
        return Err(HteError::EmptySelection(format!(
            "all {} candidates were excluded (as of {})\n{}",
            outcome.audit.len(),
            criteria.as_of_date,
            lines.join("\n")
        )));
    }

    let (eval, dropped) = usable_eval(&eval, &metric, cfg.evaluation.n_points)?;
    let registry = Registry::open(cfg.paths.output.join("registry"))?;
    let scopes = cfg.scopes()?;
    let models: Vec<TLearnerModel> = scopes
        .iter()
        .map(|scope| fit_tlearner(&outcome.selected, scope, &metric, &cfg.learner, &cfg.split, None))
        .collect::<Result<_>>()?;
    let named: Vec<(String, &TLearnerModel)> = scopes.iter().map(|s| s.to_string()).zip(models.iter()).collect();
    let report = if eval.is_empty() {
        None
    } else {
        Some(evaluation_report(
            &named,
            &eval,
            &metric,
            cfg.evaluation.n_points,
            cfg.evaluation.random_replications,
            cfg.evaluation.seed,
        )?)
    };
    let mut entries = Vec::new();
    for (name, model) in &named {
        let summary = report.as_ref().and_then(|r| eval_summary(r, name));
        entries.push(registry.register(model, summary, criteria.as_of_date, None, Some(format!("train {name}")))?);
    }
    if let Some(r) = &report {
        write_report(&out, r)?;
    }
    let mut w = csv::Writer::from_path(out.join("models.csv"))?;
    w.write_record(["scope", "model_id", "n_training_experiments", "mean_auuc"])?;
    for e in &entries {
        let mean = e
            .eval_summary
            .as_ref()
            .and_then(|s| s.mean_auuc)
            .map(|m| m.to_string())
            .unwrap_or_default();
        w.write_record([e.scope.to_string(), e.model_id.clone(), e.training_experiment_ids.len().to_string(), mean])?;
    }
    w.flush()?;
    Ok(TrainOutput {
        as_of_date: criteria.as_of_date,
        metric,
        selection,
        eval_experiment_ids: eval.iter().map(|e| e.id().to_string()).collect(),
        dropped_eval_ids: dropped,
        entries,
        report,
    })
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone)]
pub struct EvaluateOutput {
    pub report: EvalReport,
    pub dropped_eval_ids: Vec<String>,
    pub curves: Vec<(String, UpliftCurve)>,
}

/// Evaluates registered models (all of them when `model_ids` is empty) on the
/// held-out experiments, or on `experiment_ids` when given.
pub fn evaluate(cfg: &RunConfig, model_ids: &[String], experiment_ids: &[String]) -> Result<EvaluateOutput> {
    cfg.validate()?;
    let registry = Registry::open(cfg.paths.output.join("registry"))?;
    let ids: Vec<String> = if model_ids.is_empty() {
        registry.list()?.into_iter().map(|e| e.model_id).collect()
    } else {
        model_ids.to_vec()
    };
    if ids.is_empty() {
        return Err(HteError::Registry("the registry is empty; run train first".into()));
    }
    let models: Vec<(RegistryEntry, TLearnerModel)> = ids.iter().map(|id| registry.load_model(id)).collect::<Result<_>>()?;
    let pool = load_pool(&cfg.paths.pool)?;
    let eval: Vec<&Experiment> = if experiment_ids.is_empty() {
        holdout(cfg, &pool.experiments)?.1
    } else {
        experiment_ids
            .iter()
            .map(|id| {
                pool.experiments
                    .iter()
                    .find(|e| e.id() == id)
                    .ok_or_else(|| HteError::RunConfig(format!("unknown experiment {id}")))
            })
            .collect::<Result<_>>()?
    };
    let metric = match &cfg.metric {
        Some(m) => m.clone(),
        None => models[0].1.metric.clone(),
    };
    let (eval, dropped) = usable_eval(&eval, &metric, cfg.evaluation.n_points)?;
    if eval.is_empty() {
        return Err(HteError::Eval("no usable evaluation experiments".into()));
    }
    let named: Vec<(String, &TLearnerModel)> = models
        .iter()
        .map(|(e, m)| (format!("{}@{}", &e.model_id[..12], e.scope), m))
        .collect();
    let report = evaluation_report(
        &named,
        &eval,
        &metric,
        cfg.evaluation.n_points,
        cfg.evaluation.random_replications,
        cfg.evaluation.seed,
    )?;
    let mut curves = Vec::new();
    for (name, model) in &named {
        let scorer = model.scorer()?;
        for exp in &eval {
            let scores = scorer.ite_batch(&exp.schema, &exp.observations)?;
            let curve = uplift_curve_aligned(&scores, exp, &metric, cfg.evaluation.n_points)?;
            curves.push((file_stem(&format!("{name}__{}", exp.id())), curve));
        }
    }
    let out = cfg.paths.output.join("evaluate");
    fs::create_dir_all(&out)?;
    write_report(&out, &report)?;
    write_curves(&out.join("curves"), &curves)?;
    Ok(EvaluateOutput {
        report,
        dropped_eval_ids: dropped,
        curves,
    })
}

// ---------------------------------------------------------------- score

#[derive(Debug, Clone)]
pub struct ScoreRequest {
    pub model_id: String,
    pub input: PathBuf,
    pub output: PathBuf,
    /// Schema header (or bare feature schema); defaults to the pool's.
    pub schema: Option<PathBuf>,
    /// Defaults to the model's registration date.
    pub score_date: Option<NaiveDate>,
    pub sensitivity: bool,
}

#[derive(Debug, Clone)]
pub struct ScoreOutput {
    pub model_id: String,
    pub rows: usize,
}

/// Reads a feature schema from a bare schema file or a pool header.
pub fn read_schema(path: &Path) -> Result<FeatureSchema> {
    let text = fs::read_to_string(path).map_err(|e| HteError::Schema(format!("cannot read {}: {e}", path.display())))?;
    if let Ok(h) = serde_json::from_str::<PoolHeader>(&text) {
        return FeatureSchema::new(h.schema.version, h.schema.features);
    }
    let s: FeatureSchema =
        serde_json::from_str(&text).map_err(|e| HteError::Schema(format!("{}: {e}", path.display())))?;
    FeatureSchema::new(s.version, s.features)
}

/// Streams `input` (one JSON object per line) through a registered model in
/// chunks, writing `user_id,ite,scope_level,scope_key,model_id,score_date`
/// (plus `sensitivity`) rows. The output only appears once every line scored.
pub fn score(cfg: &RunConfig, req: &ScoreRequest) -> Result<ScoreOutput> {
    let registry = Registry::open(cfg.paths.output.join("registry"))?;
    let (entry, model) = registry.load_model(&req.model_id)?;
    let schema_path = req.schema.clone().unwrap_or_else(|| cfg.paths.pool.join(SCHEMA_FILE));
    let schema = read_schema(&schema_path)?;
    model.transform.check_schema(&schema)?;
    let scorer = model.scorer()?;
    let date = req.score_date.unwrap_or(entry.created_at).to_string();
    let (level, key) = (model.scope.level.as_str(), model.scope.key_str().to_string());

    let input = fs::File::open(&req.input)
        .map_err(|e| HteError::Schema(format!("cannot open {}: {e}", req.input.display())))?;
    let mut reader = BufReader::new(input);
    if let Some(dir) = req.output.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let partial = PathBuf::from(format!("{}.partial", req.output.display()));
    let result = (|| -> Result<usize> {
        let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(&partial)?));
        let mut head = vec!["user_id", "ite", "scope_level", "scope_key", "model_id", "score_date"];
        if req.sensitivity {
            head.push("sensitivity");
        }
        w.write_record(&head)?;
        let mut line_no = 0usize;
        let mut rows = 0usize;
        loop {
            let mut chunk: Vec<(usize, String)> = Vec::with_capacity(SCORE_CHUNK_LINES);
            let mut line = String::new();
            while chunk.len() < SCORE_CHUNK_LINES {
                line.clear();
                if reader.read_line(&mut line)? == 0 {
                    break;
                }
                line_no += 1;
                if !line.trim().is_empty() {
                    chunk.push((line_no, line.trim_end().to_string()));
                }
            }
            if chunk.is_empty() {
                break;
            }
            let observations: Vec<UserObservation> = chunk
                .par_iter()
                .map(|(n, l)| decode_scoring_line(l, *n, &schema))
                .collect::<Result<_>>()?;
            let ite = scorer.ite_batch(&schema, &observations)?;
            for (obs, v) in observations.iter().zip(&ite) {
                let mut rec = vec![
                    obs.user_id.clone(),
                    v.to_string(),
                    level.to_string(),
                    key.clone(),
                    entry.model_id.clone(),
                    date.clone(),
                ];
                if req.sensitivity {
                    rec.push((-v).to_string());
                }
                w.write_record(&rec)?;
            }
            rows += observations.len();
        }
        w.into_inner()
            .map_err(|e| HteError::Io(std::io::Error::other(e.to_string())))?
            .flush()?;
        Ok(rows)
    })();
    match result {
        Ok(rows) => {
            fs::rename(&partial, &req.output)?;
            Ok(ScoreOutput {
                model_id: entry.model_id,
                rows,
            })
        }
        Err(e) => {
            let _ = fs::remove_file(&partial);
            Err(e)
        }
    }
}

// ---------------------------------------------------------------- cadence

#[derive(Debug, Clone)]
pub struct CadenceOutput {
    pub records: BTreeMap<CadenceMode, Vec<WeeklyRunRecord>>,
    /// Weeks already present in a ledger and not rerun.
    pub resumed_weeks: BTreeMap<CadenceMode, usize>,
}

fn run_mode(
    cfg: &RunConfig,
    mode: CadenceMode,
    weeks: &[WeekInput],
    metric: &str,
    registry: &Registry,
) -> Result<(Vec<WeeklyRunRecord>, usize)> {
    let criteria = cfg
        .cadence
        .apply_selection
        .then(|| cfg.selection.resolve(NaiveDate::default()));
    let ccfg = cfg.cadence_config(mode, metric, criteria)?;
    let dir = cfg.paths.output.join("cadence").join(mode.as_str());
    fs::create_dir_all(&dir)?;
    let ledger = dir.join("ledger.jsonl");
    let mut records = read_ledger(&ledger)?;
    if records.len() > weeks.len() {
        return Err(HteError::Schema(format!(
            "{} records {} weeks but the stream has {}",
            ledger.display(),
            records.len(),
            weeks.len()
        )));
    }
    for (r, w) in records.iter().zip(weeks) {
        if r.week != w.week || r.mode != mode {
            return Err(HteError::Schema(format!(
                "{} does not match the stream at week {}",
                ledger.display(),
                w.week
            )));
        }
    }
    // A torn last line is dropped by read_ledger; rewrite so appends stay clean.
    let mut clean = String::new();
    for r in &records {
        clean.push_str(&serde_json::to_string(r)?);
        clean.push('\n');
    }
    fs::write(&ledger, clean)?;

    let resumed = records.len();
    let mut history = HistoryStore::new();
    for input in &weeks[..resumed] {
        history.absorb(&ccfg, input)?;
    }
    let mut prior = match records.last().and_then(|r| r.model_id.clone()) {
        Some(id) => Some(registry.load_model(&id)?.1),
        None => None,
    };
    for input in &weeks[resumed..] {
        let outcome = run_week(&ccfg, input, prior.as_ref(), &mut history)?;
        if !outcome.record.skipped {
            if let Some(model) = &outcome.model {
                let train: Vec<&Experiment> = input.experiments.iter().collect();
                let created = latest_end_date(&train)?;
                let summary = outcome.record.eval_auuc.map(|mean| EvalSummary {
                    eval_experiment_ids: outcome.record.eval_experiment_ids.clone(),
                    per_experiment: outcome.record.eval_auuc_per_experiment.clone(),
                    mean_auuc: Some(mean),
                    ci_half_width: None,
                    random_mean_auuc: None,
                });
                registry.register(
                    model,
                    summary,
                    created,
                    outcome.record.parent_model_id.clone(),
                    Some(format!("{} week {}", mode.as_str(), input.week)),
                )?;
            }
        }
        append_record(&ledger, &outcome.record)?;
        records.push(outcome.record);
        prior = outcome.model;
    }
    Ok((records, resumed))
}

/// Runs every configured cadence mode over the weekly stream at `paths.pool`,
/// resuming from existing ledgers, and writes `cadence/comparison.csv`.
pub fn run_cadence(cfg: &RunConfig) -> Result<CadenceOutput> {
    cfg.validate()?;
    let weeks = load_stream(&cfg.paths.pool, &cfg.evaluation.eval_experiments)?;
    let first: Vec<&Experiment> = weeks.iter().flat_map(|w| w.experiments.iter()).take(1).collect();
    let metric = resolve_metric(cfg, &first)?;
    let registry = Registry::open(cfg.paths.output.join("registry"))?;
    let mut records = BTreeMap::new();
    let mut resumed_weeks = BTreeMap::new();
    for &mode in &cfg.cadence.modes {
        if records.contains_key(&mode) {
            continue;
        }
        let (r, n) = run_mode(cfg, mode, &weeks, metric.as_str(), &registry)?;
        records.insert(mode, r);
        resumed_weeks.insert(mode, n);
    }
    let mut w = csv::Writer::from_path(cfg.paths.output.join("cadence").join("comparison.csv"))?;
    w.write_record(["week", "incremental", "from_scratch_weekly"])?;
    for input in &weeks {
        let cell = |mode: CadenceMode| {
            records
                .get(&mode)
                .and_then(|rs: &Vec<WeeklyRunRecord>| rs.iter().find(|r| r.week == input.week))
                .and_then(|r| r.eval_auuc)
                .map(|v| v.to_string())
                .unwrap_or_default()
        };
        w.write_record([
            input.week.to_string(),
            cell(CadenceMode::Incremental),
            cell(CadenceMode::FromScratchWeekly),
        ])?;
    }
    w.flush()?;
    Ok(CadenceOutput {
        records,
        resumed_weeks,
    })
}

// ---------------------------------------------------------------- registry

pub fn registry_list(cfg: &RunConfig) -> Result<Vec<RegistryEntry>> {
    Registry::open(cfg.paths.output.join("registry"))?.list()
}

pub fn registry_show(cfg: &RunConfig, id: &str) -> Result<RegistryEntry> {
    Registry::open(cfg.paths.output.join("registry"))?.entry(id)
}
