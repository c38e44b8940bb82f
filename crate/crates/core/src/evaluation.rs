//! Uplift curves, AUUC, evaluation reports and robustness/stability checks.
//!
//! Users are ranked by score (descending, ties by user id). For the prefix of
//! the top `k` users, `gain = (mean_T - mean_C) * k`, sampled at
//! `k_i = i * N / n_points` for `i = 0..=n_points`. AUUC is the trapezoidal area
//! under gain over `t = i / n_points`, divided by the total gain, so random
//! targeting sits near 0.5.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Arm, Experiment, FeatureValue, UserObservation};
use crate::error::{HteError, Result};
use crate::tlearner::{ITEScore, TLearnerModel};
use crate::util::{derive_seed, rng};

pub const DEFAULT_N_POINTS: usize = 100;

/// Relative floor on |total_gain|: `FLOOR_FACTOR * N * outcome scale`.
pub const FLOOR_FACTOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub prefix_size: usize,
    pub gain: f64,
    /// False when the prefix missed an arm and the gain was interpolated.
    pub defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpliftCurve {
    pub points: Vec<CurvePoint>,
    pub total_gain: f64,
    pub n_treatment: usize,
    pub n_control: usize,
    /// Largest absolute outcome, the unit of the degenerate floor.
    pub outcome_scale: f64,
}

impl UpliftCurve {
    pub fn n_users(&self) -> usize {
        self.n_treatment + self.n_control
    }

    pub fn default_floor(&self) -> f64 {
        FLOOR_FACTOR * self.n_users() as f64 * self.outcome_scale.max(f64::MIN_POSITIVE)
    }

    /// `t, gain, gain_normalized` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,gain,gain_normalized\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.t, p.gain, p.gain / self.total_gain);
        }
        s
    }
}

/// Core curve computation over parallel arrays.
pub fn uplift_curve_from_parts(
    scores: &[f64],
    user_ids: &[&str],
    arms: &[Arm],
    outcomes: &[f64],
    n_points: usize,
) -> Result<UpliftCurve> {
    let n = scores.len();
    if user_ids.len() != n || arms.len() != n || outcomes.len() != n {
        return Err(HteError::Eval("score, id, arm and outcome arrays differ in length".into()));
    }
    if n_points == 0 {
        return Err(HteError::param("n_points", "must be >= 1"));
    }
    if scores.iter().chain(outcomes).any(|v| !v.is_finite()) {
        return Err(HteError::Eval("scores and outcomes must be finite".into()));
    }
    let n_treatment = arms.iter().filter(|&&a| a == Arm::Treatment).count();
    let n_control = n - n_treatment;
    if n_treatment == 0 || n_control == 0 {
        return Err(HteError::Arm("evaluation experiment lacks one arm entirely".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| user_ids[a].cmp(user_ids[b]))
            .then(a.cmp(&b))
    });

    let mut points = Vec::with_capacity(n_points + 1);
    let (mut k, mut nt, mut nc, mut st, mut sc) = (0usize, 0usize, 0usize, 0.0f64, 0.0f64);
    for i in 0..=n_points {
        let target = i * n / n_points;
        while k < target {
            let j = order[k];
            match arms[j] {
                Arm::Treatment => {
                    nt += 1;
                    st += outcomes[j];
                }
                Arm::Control => {
                    nc += 1;
                    sc += outcomes[j];
                }
            }
            k += 1;
        }
        let (gain, defined) = if target == 0 {
            (0.0, true)
        } else if nt == 0 || nc == 0 {
            (f64::NAN, false)
        } else {
            ((st / nt as f64 - sc / nc as f64) * target as f64, true)
        };
        points.push(CurvePoint {
            t: i as f64 / n_points as f64,
            prefix_size: target,
            gain,
            defined,
        });
    }
    interpolate_undefined(&mut points);
    let total_gain = points.last().expect("n_points >= 1").gain;
    let outcome_scale = outcomes.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    Ok(UpliftCurve {
        points,
        total_gain,
        n_treatment,
        n_control,
        outcome_scale,
    })
}

/// Linear interpolation in `t` between the nearest defined neighbours. The
/// first and last points are always defined.
fn interpolate_undefined(points: &mut [CurvePoint]) {
    let mut i = 0;
    while i < points.len() {
        if points[i].defined {
            i += 1;
            continue;
        }
        let lo = i - 1;
        let mut hi = i;
        while !points[hi].defined {
            hi += 1;
        }
        let (t0, g0, t1, g1) = (points[lo].t, points[lo].gain, points[hi].t, points[hi].gain);
        for p in &mut points[i..hi] {
            p.gain = g0 + (g1 - g0) * (p.t - t0) / (t1 - t0);
        }
        i = hi;
    }
}

fn eval_arrays<'a>(
    scores: &HashMap<&str, f64>,
    observations: &'a [UserObservation],
    metric: &str,
) -> Result<(Vec<f64>, Vec<&'a str>, Vec<Arm>, Vec<f64>)> {
    let mut s = Vec::with_capacity(observations.len());
    let mut ids = Vec::with_capacity(observations.len());
    let mut arms = Vec::with_capacity(observations.len());
    let mut y = Vec::with_capacity(observations.len());
    for obs in observations {
        let score = scores
            .get(obs.user_id.as_str())
            .ok_or_else(|| HteError::Eval(format!("user {} has no score", obs.user_id)))?;
        let outcome = obs
            .outcome(metric)
            .ok_or_else(|| HteError::Eval(format!("user {} lacks outcome `{metric}`", obs.user_id)))?;
        s.push(*score);
        ids.push(obs.user_id.as_str());
        arms.push(obs.arm);
        y.push(outcome);
    }
    Ok((s, ids, arms, y))
}

/// Curve for `eval_exp` ranked by `scores` (joined on user id).
pub fn uplift_curve(scores: &[ITEScore], eval_exp: &Experiment, metric: &str, n_points: usize) -> Result<UpliftCurve> {
    let map: HashMap<&str, f64> = scores.iter().map(|s| (s.user_id.as_str(), s.ite)).collect();
    let (s, ids, arms, y) = eval_arrays(&map, &eval_exp.observations, metric)?;
    uplift_curve_from_parts(&s, &ids, &arms, &y, n_points)
}

/// Curve from scores aligned with `eval_exp.observations`.
pub fn uplift_curve_aligned(scores: &[f64], eval_exp: &Experiment, metric: &str, n_points: usize) -> Result<UpliftCurve> {
    let obs = &eval_exp.observations;
    if scores.len() != obs.len() {
        return Err(HteError::Eval(format!(
            "{} scores for {} observations",
            scores.len(),
            obs.len()
        )));
    }
    let ids: Vec<&str> = obs.iter().map(|o| o.user_id.as_str()).collect();
    let arms: Vec<Arm> = obs.iter().map(|o| o.arm).collect();
    let y = obs
        .iter()
        .map(|o| {
            o.outcome(metric)
                .ok_or_else(|| HteError::Eval(format!("user {} lacks outcome `{metric}`", o.user_id)))
        })
        .collect::<Result<Vec<f64>>>()?;
    uplift_curve_from_parts(scores, &ids, &arms, &y, n_points)
}

pub fn auuc(curve: &UpliftCurve) -> Result<f64> {
    auuc_with_floor(curve, curve.default_floor())
}

pub fn auuc_with_floor(curve: &UpliftCurve, floor: f64) -> Result<f64> {
    if !(curve.total_gain.abs() > floor) {
        return Err(HteError::DegenerateExperiment {
            total_gain: curve.total_gain,
            floor,
        });
    }
    let area: f64 = curve
        .points
        .windows(2)
        .map(|w| 0.5 * (w[0].gain + w[1].gain) * (w[1].t - w[0].t))
        .sum();
    Ok(area / curve.total_gain)
}

/// AUUC of `model` on `exp`.
pub fn evaluate_model(model: &TLearnerModel, exp: &Experiment, metric: &str, n_points: usize) -> Result<f64> {
    let scores = model.predict_ite_batch(&exp.schema, &exp.observations)?;
    auuc(&uplift_curve_aligned(&scores, exp, metric, n_points)?)
}

/// Mean AUUC of uniformly random scores over `replications` draws.
pub fn random_baseline_auuc(
    exp: &Experiment,
    metric: &str,
    n_points: usize,
    replications: usize,
    seed: u64,
) -> Result<f64> {
    if replications == 0 {
        return Err(HteError::param("replications", "must be >= 1"));
    }
    let mut total = 0.0;
    for r in 0..replications {
        let mut g = rng(derive_seed(seed, r as u64));
        let scores: Vec<f64> = (0..exp.len()).map(|_| g.random::<f64>()).collect();
        total += auuc(&uplift_curve_aligned(&scores, exp, metric, n_points)?)?;
    }
    Ok(total / replications as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub per_experiment: Vec<(String, f64)>,
    pub mean: f64,
    /// Half-width of the 95% t-interval; absent with fewer than two values.
    pub ci_half_width: Option<f64>,
}

impl Summary {
    pub fn new(name: impl Into<String>, per_experiment: Vec<(String, f64)>) -> Self {
        let values: Vec<f64> = per_experiment.iter().map(|(_, v)| *v).collect();
        let (mean, ci_half_width) = mean_with_ci(&values);
        Self {
            name: name.into(),
            per_experiment,
            mean,
            ci_half_width,
        }
    }
}

/// Mean and 95% t-interval half-width.
pub fn mean_with_ci(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    (mean, Some(t * (var / n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    /// Mean of per-experiment AUUC(a) - AUUC(b) over shared experiments.
    pub mean_difference: f64,
    pub ci_half_width: Option<f64>,
    pub wins_a: usize,
    pub shared: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub models: Vec<Summary>,
    pub random_baseline: Summary,
    pub comparisons: Vec<Comparison>,
}

impl EvalReport {
    pub fn new(models: Vec<Summary>, random_baseline: Summary) -> Self {
        let mut comparisons = Vec::new();
        let all: Vec<&Summary> = models.iter().chain(std::iter::once(&random_baseline)).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                comparisons.push(compare(all[i], all[j]));
            }
        }
        Self {
            models,
            random_baseline,
            comparisons,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,n_experiments,mean_auuc,ci95_low,ci95_high\n");
        for m in self.models.iter().chain(std::iter::once(&self.random_baseline)) {
            let (lo, hi) = match m.ci_half_width {
                Some(h) => ((m.mean - h).to_string(), (m.mean + h).to_string()),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(s, "{},{},{},{lo},{hi}", m.name, m.per_experiment.len(), m.mean);
        }
        s
    }

    pub fn per_experiment_csv(&self) -> String {
        let mut s = String::from("model,experiment_id,auuc\n");
        for m in self.models.iter().chain(std::iter::once(&self.random_baseline)) {
            for (e, v) in &m.per_experiment {
                let _ = writeln!(s, "{},{e},{v}", m.name);
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self
            .models
            .iter()
            .map(|m| m.name.len())
            .chain([self.random_baseline.name.len(), 5])
            .max()
            .unwrap_or(5);
        let mut s = format!("{:<width$}  {:>5}  {}\n", "model", "n", "mean AUUC (95% CI)");
        for m in self.models.iter().chain(std::iter::once(&self.random_baseline)) {
            let ci = m.ci_half_width.map(|h| format!(" ± {h:.2}")).unwrap_or_default();
            let _ = writeln!(s, "{:<width$}  {:>5}  {:.2}{ci}", m.name, m.per_experiment.len(), m.mean);
        }
        if !self.comparisons.is_empty() {
            s.push_str("\npairwise differences (a - b)\n");
            for c in &self.comparisons {
                let ci = c.ci_half_width.map(|h| format!(" ± {h:.3}")).unwrap_or_default();
                let _ = writeln!(
                    s,
                    "{} vs {}: {:+.3}{ci} (a better on {}/{})",
                    c.a, c.b, c.mean_difference, c.wins_a, c.shared
                );
            }
        }
        s
    }
}

fn compare(a: &Summary, b: &Summary) -> Comparison {
    let bmap: HashMap<&str, f64> = b.per_experiment.iter().map(|(e, v)| (e.as_str(), *v)).collect();
    let diffs: Vec<f64> = a
        .per_experiment
        .iter()
        .filter_map(|(e, v)| bmap.get(e.as_str()).map(|w| v - w))
        .collect();
    let (mean_difference, ci_half_width) = mean_with_ci(&diffs);
    Comparison {
        a: a.name.clone(),
        b: b.name.clone(),
        mean_difference,
        ci_half_width,
        wins_a: diffs.iter().filter(|&&d| d > 0.0).count(),
        shared: diffs.len(),
    }
}

/// Evaluates each named model on `eval` and builds a report with a random
/// baseline row. Evaluation experiments that a model trained on are rejected.
pub fn evaluation_report(
    models: &[(String, &TLearnerModel)],
    eval: &[&Experiment],
    metric: &str,
    n_points: usize,
    random_replications: usize,
    seed: u64,
) -> Result<EvalReport> {
    if eval.is_empty() {
        return Err(HteError::Eval("no evaluation experiments".into()));
    }
    let mut summaries = Vec::new();
    for (name, model) in models {
        if let Some(e) = eval.iter().find(|e| model.training_experiment_ids.iter().any(|t| t == e.id())) {
            return Err(HteError::Eval(format!(
                "experiment {} is used for both training and evaluation of {name}",
                e.id()
            )));
        }
        let per = eval
            .iter()
            .map(|e| Ok((e.id().to_string(), evaluate_model(model, e, metric, n_points)?)))
            .collect::<Result<Vec<_>>>()?;
        summaries.push(Summary::new(name.clone(), per));
    }
    let random = eval
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok((
                e.id().to_string(),
                random_baseline_auuc(e, metric, n_points, random_replications, derive_seed(seed, i as u64))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(summaries, Summary::new("random", random)))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    pearson(&ranks(a), &ranks(b))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return if saa == sbb { 1.0 } else { 0.0 };
    }
    sab / (saa * sbb).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Joins two score sets on user id (first occurrence wins) and returns aligned
/// values in `a`'s order.
fn join_scores(a: &[ITEScore], b: &[ITEScore]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut bmap: HashMap<&str, f64> = HashMap::with_capacity(b.len());
    for s in b {
        bmap.entry(s.user_id.as_str()).or_insert(s.ite);
    }
    let mut seen = std::collections::HashSet::new();
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for s in a {
        if let Some(v) = bmap.get(s.user_id.as_str()) {
            if seen.insert(s.user_id.as_str()) {
                xa.push(s.ite);
                xb.push(*v);
            }
        }
    }
    if xa.is_empty() {
        return Err(HteError::Eval("score sets share no users".into()));
    }
    Ok((xa, xb))
}

pub fn rank_correlation(a: &[ITEScore], b: &[ITEScore]) -> Result<f64> {
    let (x, y) = join_scores(a, b)?;
    Ok(spearman(&x, &y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub a: String,
    pub b: String,
    pub spearman: f64,
    pub n_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationGap {
    pub model: String,
    pub in_sample_auuc: Option<f64>,
    pub out_of_sample_auuc: f64,
    /// in-sample minus out-of-sample.
    pub gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub correlations: Vec<PairCorrelation>,
    pub gaps: Vec<GeneralizationGap>,
}

/// Cross-algorithm agreement on the users of `eval`, plus each model's AUUC on
/// its own training experiments (from `pool`) versus on `eval`.
pub fn robustness_report(
    models: &[(String, &TLearnerModel)],
    pool: &[&Experiment],
    eval: &[&Experiment],
    metric: &str,
    n_points: usize,
) -> Result<RobustnessReport> {
    if models.len() < 2 {
        return Err(HteError::Eval("robustness report needs at least two models".into()));
    }
    if eval.iter().all(|e| e.is_empty()) {
        return Err(HteError::Eval("no evaluation users".into()));
    }
    let date = chrono::NaiveDate::default();
    let mut scores: Vec<Vec<ITEScore>> = Vec::new();
    for (_, m) in models {
        let scorer = m.scorer()?;
        let mut all = Vec::new();
        for e in eval {
            all.extend(scorer.score_batch(&e.schema, &e.observations, date)?);
        }
        scores.push(all);
    }
    let mut correlations = Vec::new();
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            let (x, y) = join_scores(&scores[i], &scores[j])?;
            correlations.push(PairCorrelation {
                a: models[i].0.clone(),
                b: models[j].0.clone(),
                spearman: spearman(&x, &y),
                n_users: x.len(),
            });
        }
    }
    let mean_auuc = |m: &TLearnerModel, exps: &[&Experiment]| -> Result<Option<f64>> {
        if exps.is_empty() {
            return Ok(None);
        }
        let v = exps
            .iter()
            .map(|e| evaluate_model(m, e, metric, n_points))
            .collect::<Result<Vec<f64>>>()?;
        Ok(Some(v.iter().sum::<f64>() / v.len() as f64))
    };
    let mut gaps = Vec::new();
    for (name, m) in models {
        let own: Vec<&Experiment> = pool
            .iter()
            .copied()
            .filter(|e| m.training_experiment_ids.iter().any(|t| t == e.id()))
            .collect();
        let in_sample = mean_auuc(m, &own)?;
        let out = mean_auuc(m, eval)?.expect("eval non-empty");
        gaps.push(GeneralizationGap {
            model: name.clone(),
            in_sample_auuc: in_sample,
            out_of_sample_auuc: out,
            gap: in_sample.map(|i| i - out),
        });
    }
    Ok(RobustnessReport { correlations, gaps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekChange {
    pub from_week: usize,
    pub to_week: usize,
    pub spearman: f64,
    pub mean_abs_change: f64,
    pub n_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub changes: Vec<WeekChange>,
    pub cohort_auuc: BTreeMap<String, f64>,
    /// max - min of the cohort AUUCs.
    pub cohort_spread: Option<f64>,
}

/// Week-over-week agreement of scores on a shared user panel. Weeks are indexed
/// from 1 in the report.
pub fn stability_report(weekly_scores: &[Vec<ITEScore>]) -> Result<StabilityReport> {
    if weekly_scores.len() < 2 {
        return Err(HteError::Eval("stability needs at least two weeks".into()));
    }
    let mut changes = Vec::new();
    for (w, pair) in weekly_scores.windows(2).enumerate() {
        let (x, y) = join_scores(&pair[0], &pair[1])?;
        let mean_abs_change = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
        changes.push(WeekChange {
            from_week: w + 1,
            to_week: w + 2,
            spearman: spearman(&x, &y),
            mean_abs_change,
            n_users: x.len(),
        });
    }
    Ok(StabilityReport {
        changes,
        cohort_auuc: BTreeMap::new(),
        cohort_spread: None,
    })
}

impl StabilityReport {
    pub fn with_cohorts(mut self, cohort_auuc: BTreeMap<String, f64>) -> Self {
        let spread = cohort_auuc
            .values()
            .fold(None, |acc: Option<(f64, f64)>, &v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
            .map(|(lo, hi)| hi - lo);
        self.cohort_auuc = cohort_auuc;
        self.cohort_spread = spread;
        self
    }
}

/// AUUC per cohort, where `cohort_of` labels each observation of `exp`.
pub fn cohort_auuc<F>(
    scores: &[ITEScore],
    exp: &Experiment,
    metric: &str,
    n_points: usize,
    cohort_of: F,
) -> Result<BTreeMap<String, f64>>
where
    F: Fn(&UserObservation) -> String,
{
    let map: HashMap<&str, f64> = scores.iter().map(|s| (s.user_id.as_str(), s.ite)).collect();
    let mut groups: BTreeMap<String, Vec<UserObservation>> = BTreeMap::new();
    for obs in &exp.observations {
        groups.entry(cohort_of(obs)).or_default().push(obs.clone());
    }
    groups
        .into_iter()
        .map(|(cohort, obs)| {
            let (s, ids, arms, y) = eval_arrays(&map, &obs, metric)?;
            let curve = uplift_curve_from_parts(&s, &ids, &arms, &y, n_points)?;
            Ok((cohort, auuc(&curve)?))
        })
        .collect()
}

/// Labels users by quantile bin (`q0`..) of the numeric feature at
/// `feature_index`, with bin edges taken from `exp`; nulls go to `null`.
pub fn quantile_cohorts(exp: &Experiment, feature_index: usize, n_bins: usize) -> Result<impl Fn(&UserObservation) -> String> {
    if n_bins == 0 {
        return Err(HteError::param("n_bins", "must be >= 1"));
    }
    let mut values: Vec<f64> = exp
        .observations
        .iter()
        .filter_map(|o| o.features.get(feature_index).and_then(FeatureValue::as_numeric))
        .collect();
    if values.is_empty() {
        return Err(HteError::Eval(format!("feature {feature_index} has no numeric values")));
    }
    values.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..n_bins).map(|b| values[b * values.len() / n_bins]).collect();
    Ok(move |o: &UserObservation| match o.features.get(feature_index).and_then(FeatureValue::as_numeric) {
        Some(v) => format!("q{}", edges.iter().filter(|&&e| v >= e).count()),
        None => "null".to_string(),
    })
}

/// Writes `<dir>/<name>.csv` for each curve.
pub fn write_curves(dir: &Path, curves: &[(String, UpliftCurve)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, c) in curves {
        fs::write(dir.join(format!("{name}.csv")), c.to_csv())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_user_hand_example() {
        // ranked order: u1(T,1) u2(C,0) u3(T,0) u4(C,1) u5(T,1) u6(C,0)
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        let ids = ["u1", "u2", "u3", "u4", "u5", "u6"];
        let arms = [
            Arm::Treatment,
            Arm::Control,
            Arm::Treatment,
            Arm::Control,
            Arm::Treatment,
            Arm::Control,
        ];
        let y = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let c = uplift_curve_from_parts(&scores, &ids, &arms, &y, 6).unwrap();
        let gains: Vec<f64> = c.points.iter().map(|p| p.gain).collect();
        // k=1 has no control user: interpolated between k=0 and k=2
        let expected = [0.0, 1.0, 2.0, 1.5, 0.0, 5.0 / 6.0, 2.0];
        for (g, e) in gains.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{gains:?}");
        }
        assert!(!c.points[1].defined);
        assert_eq!(c.total_gain, 2.0);
    }

    #[test]
    fn linear_curve_has_half_auuc() {
        let points = (0..=10)
            .map(|i| CurvePoint {
                t: i as f64 / 10.0,
                prefix_size: i,
                gain: 3.0 * i as f64 / 10.0,
                defined: true,
            })
            .collect();
        let c = UpliftCurve {
            points,
            total_gain: 3.0,
            n_treatment: 5,
            n_control: 5,
            outcome_scale: 1.0,
        };
        assert!((auuc(&c).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_total_gain_is_degenerate() {
        let ids = ["a", "b", "c", "d"];
        let arms = [Arm::Treatment, Arm::Control, Arm::Treatment, Arm::Control];
        let c = uplift_curve_from_parts(&[1.0, 2.0, 3.0, 4.0], &ids, &arms, &[1.0; 4], 4).unwrap();
        assert!(matches!(auuc(&c), Err(HteError::DegenerateExperiment { .. })));
        assert!(uplift_curve_from_parts(&[1.0, 2.0], &ids[..2], &[Arm::Control; 2], &[1.0, 0.0], 2).is_err());
    }

    #[test]
    fn spearman_handles_ties_and_identity() {
        let a = [1.0, 2.0, 2.0, 5.0];
        assert!((spearman(&a, &a) - 1.0).abs() < 1e-15);
        let b = [4.0, 3.0, 3.0, 0.0];
        assert!((spearman(&a, &b) + 1.0).abs() < 1e-15);
        assert_eq!(ranks(&a), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn ci_matches_t_quantile() {
        let (m, h) = mean_with_ci(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        // t_{0.975, 2} = 4.302652729...
        assert!((h.unwrap() - 4.302_652_729_911_275 * (1.0f64 / 3.0).sqrt()).abs() < 1e-9);
    }
}
