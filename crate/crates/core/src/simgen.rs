//! Synthetic A/B experiment generator with known per-user treatment effects.
//!
//! Feature model (all draws seeded):
//! * numeric features `x0..` are i.i.d. Uniform(-sqrt(3), sqrt(3)) (zero mean, unit variance);
//! * categorical features `c0..` are uniform over levels `L0..L{m-1}`.
//!
//! Outcome model, with `s(x)` a linear baseline score and `h(x)` a zero-mean
//! effect shape bounded by 1 in absolute value:
//! * conversion: `p0 = sigmoid(logit(base_rate) + s(x) + noise_scale * e_u)` and
//!   `p1 = sigmoid(logit(p0) + d + heterogeneity * h(x))`, where the offset `d`
//!   is solved per experiment so that the mean of `p1 - p0` over the generated
//!   users is exactly `base_rate * target_relative_lift`; both potential
//!   outcomes share one uniform draw;
//! * engagement: `mu0 = base_rate * (1 + s(x) / 4)` and
//!   `mu1 = mu0 + base_rate * (target_relative_lift + heterogeneity * h(x))`;
//!   both potential outcomes share one Gaussian draw of sd `noise_scale`.
//!
//! The true ITE is `mu1 - mu0` (`p1 - p0` for conversions).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use chrono::{Days, NaiveDate};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    Arm, Experiment, ExperimentMeta, FeatureDef, FeatureKind, FeatureSchema, FeatureValue,
    UserObservation,
};
use crate::error::{HteError, Result};
use crate::util::{derive_seed, rng, sha256_hex};

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectForm {
    Constant,
    Linear,
    CrossInteraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeFamily {
    /// Binary conversion indicator.
    Conversion,
    /// Continuous engagement (sessions per week).
    Engagement,
}

impl OutcomeFamily {
    pub fn metric(self) -> &'static str {
        match self {
            OutcomeFamily::Conversion => "conversion",
            OutcomeFamily::Engagement => "sessions",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub experiment_id: String,
    pub n_users: usize,
    pub n_numeric: usize,
    pub n_categorical: usize,
    pub n_levels: usize,
    pub treatment_share: f64,
    pub outcome: OutcomeFamily,
    pub base_rate: f64,
    pub target_relative_lift: f64,
    /// Amplitude of the effect shape: logit units for conversions,
    /// relative-lift units for engagement.
    pub heterogeneity: f64,
    pub effect_form: EffectForm,
    /// Rotation offset (radians) of the effect coefficients.
    pub effect_angle: f64,
    /// Scale of the linear baseline score.
    pub baseline_strength: f64,
    pub noise_scale: f64,
    /// Effect rotation in radians per week.
    pub drift_rate: f64,
    /// Probability that a numeric feature is observed as null.
    pub missing_rate: f64,
    pub end_date: NaiveDate,
    /// Assignment and outcome sampling.
    pub seed: u64,
    /// User feature draws; users are reproducible across experiments sharing it.
    pub population_seed: u64,
    pub user_offset: usize,
    /// Baseline and effect coefficients shared across experiments of one world.
    pub world_seed: u64,
    pub vertical: Option<String>,
    pub advertiser_id: Option<String>,
    pub ad_product: Option<String>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            experiment_id: "exp-0000".into(),
            n_users: 10_000,
            n_numeric: 6,
            n_categorical: 2,
            n_levels: 4,
            treatment_share: 0.5,
            outcome: OutcomeFamily::Conversion,
            base_rate: 0.1,
            target_relative_lift: 0.2,
            heterogeneity: 0.0,
            effect_form: EffectForm::Constant,
            effect_angle: 0.0,
            baseline_strength: 1.0,
            noise_scale: 0.0,
            drift_rate: 0.0,
            missing_rate: 0.0,
            end_date: NaiveDate::from_ymd_opt(2024, 6, 30).expect("valid date"),
            seed: 1,
            population_seed: 1,
            user_offset: 0,
            world_seed: 0,
            vertical: None,
            advertiser_id: None,
            ad_product: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |p: &str, m: String| Err(HteError::config(p, m));
        if self.n_users < 2 {
            return bad("n_users", format!("need at least 2 users, got {}", self.n_users));
        }
        if self.n_numeric + self.n_categorical == 0 {
            return bad("n_numeric", "need at least one feature".into());
        }
        if self.n_categorical > 0 && self.n_levels < 1 {
            return bad("n_levels", "categorical features need at least one level".into());
        }
        if !(self.treatment_share > 0.0 && self.treatment_share < 1.0) {
            return bad("treatment_share", format!("must lie in (0,1), got {}", self.treatment_share));
        }
        if self.outcome == OutcomeFamily::Conversion && !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return bad("base_rate", format!("conversion base rate must lie in (0,1), got {}", self.base_rate));
        }
        if !self.base_rate.is_finite() {
            return bad("base_rate", "must be finite".into());
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("drift_rate", self.drift_rate),
            ("heterogeneity", self.heterogeneity),
            ("baseline_strength", self.baseline_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, format!("must be finite and >= 0, got {v}"));
            }
        }
        if !self.target_relative_lift.is_finite() {
            return bad("target_relative_lift", "must be finite".into());
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate", format!("must lie in [0,1), got {}", self.missing_rate));
        }
        match self.effect_form {
            EffectForm::Linear if self.n_numeric < 1 => {
                bad("effect_form", "linear effects need at least one numeric feature".into())
            }
            EffectForm::CrossInteraction if self.n_numeric < 2 => bad(
                "effect_form",
                "cross-interaction effects need at least two numeric features".into(),
            ),
            _ => Ok(()),
        }
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn schema(&self) -> FeatureSchema {
        let mut features = Vec::with_capacity(self.n_numeric + self.n_categorical);
        for j in 0..self.n_numeric {
            features.push(FeatureDef {
                name: format!("x{j}"),
                kind: FeatureKind::Numeric,
            });
        }
        for k in 0..self.n_categorical {
            features.push(FeatureDef {
                name: format!("c{k}"),
                kind: FeatureKind::Categorical,
            });
        }
        FeatureSchema::new(1, features).expect("generated schema is valid")
    }
}

/// Per-user ground truth. `ite == mu_treatment - mu_control` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub user_id: String,
    pub ite: f64,
    pub mu_control: f64,
    pub mu_treatment: f64,
    pub y_control: f64,
    pub y_treatment: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub config_hash: String,
    pub records: Vec<TruthRecord>,
}

impl GroundTruth {
    pub fn ite_map(&self) -> BTreeMap<&str, f64> {
        self.records.iter().map(|r| (r.user_id.as_str(), r.ite)).collect()
    }

    pub fn mean_ite(&self) -> f64 {
        self.records.iter().map(|r| r.ite).sum::<f64>() / self.records.len() as f64
    }

    /// Writes the sidecar: a `# config_hash=` line, a CSV header, one row per user.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "# config_hash={}", self.config_hash)?;
        writeln!(w, "user_id,true_ite")?;
        for r in &self.records {
            writeln!(w, "{},{}", r.user_id, r.ite)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a sidecar back. Only `user_id` and `ite` are recovered.
    pub fn read_sidecar(path: &Path) -> Result<GroundTruth> {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let config_hash = first
            .trim()
            .strip_prefix("# config_hash=")
            .ok_or_else(|| HteError::Parse {
                line: 1,
                message: "missing `# config_hash=` line".into(),
            })?
            .to_string();
        let mut rdr = csv::Reader::from_reader(reader);
        let mut records = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let parse_err = || HteError::Parse {
                line: i + 3,
                message: "expected `user_id,true_ite`".into(),
            };
            let user_id = row.get(0).ok_or_else(parse_err)?.to_string();
            let ite: f64 = row.get(1).and_then(|v| v.parse().ok()).ok_or_else(parse_err)?;
            records.push(TruthRecord {
                user_id,
                ite,
                mu_control: f64::NAN,
                mu_treatment: f64::NAN,
                y_control: f64::NAN,
                y_treatment: f64::NAN,
            });
        }
        Ok(GroundTruth {
            config_hash,
            records,
        })
    }
}

/// Coefficients shared by every experiment generated from one world seed.
struct World {
    baseline: Vec<f64>,
    level_effects: Vec<Vec<f64>>,
    effect_dir: Vec<f64>,
    effect_perp: Vec<f64>,
}

impl World {
    fn new(cfg: &GeneratorConfig) -> Self {
        let mut r = rng(derive_seed(cfg.world_seed, 0x0077_6f72_6c64));
        let scale = cfg.baseline_strength / ((cfg.n_numeric + cfg.n_categorical).max(1) as f64).sqrt();
        let baseline = (0..cfg.n_numeric)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
            .collect();
        let level_effects = (0..cfg.n_categorical)
            .map(|_| {
                (0..cfg.n_levels)
                    .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
                    .collect()
            })
            .collect();
        let mut effect_dir: Vec<f64> = (0..cfg.n_numeric)
            .map(|_| StandardNormal.sample(&mut r))
            .collect();
        let mut effect_perp: Vec<f64> = (0..cfg.n_numeric)
            .map(|_| StandardNormal.sample(&mut r))
            .collect();
        normalize(&mut effect_dir);
        // Gram-Schmidt so the rotation plane is well defined
        let d = dot(&effect_perp, &effect_dir);
        effect_perp
            .iter_mut()
            .zip(&effect_dir)
            .for_each(|(p, e)| *p -= d * e);
        normalize(&mut effect_perp);
        Self {
            baseline,
            level_effects,
            effect_dir,
            effect_perp,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Zero-mean effect shape in [-1, 1] at rotation angle `theta`.
fn effect_shape(form: EffectForm, world: &World, x: &[f64], theta: f64) -> f64 {
    match form {
        EffectForm::Constant => 0.0,
        EffectForm::Linear => {
            let w: Vec<f64> = world
                .effect_dir
                .iter()
                .zip(&world.effect_perp)
                .map(|(d, p)| theta.cos() * d + theta.sin() * p)
                .collect();
            let l1: f64 = w.iter().map(|v| v.abs()).sum();
            if l1 == 0.0 {
                0.0
            } else {
                dot(&w, x) / (SQRT3 * l1)
            }
        }
        EffectForm::CrossInteraction => {
            let first = x[0] * x[1];
            let second = if x.len() >= 4 { x[2] * x[3] } else { first };
            let (c, s) = (theta.cos(), theta.sin());
            (c * first + s * second) / (3.0 * (c.abs() + s.abs()))
        }
    }
}

/// Solves for the logit offset `d` such that the mean over users of
/// `sigmoid(score + d + shift) - sigmoid(score)` equals `target`.
fn calibrate_logit_offset(logits: &[(f64, f64)], target: f64) -> Result<f64> {
    let n = logits.len() as f64;
    let base: f64 = logits.iter().map(|&(s, _)| sigmoid(s)).sum::<f64>() / n;
    let gap = |d: f64| {
        logits.iter().map(|&(s, h)| sigmoid(s + d + h)).sum::<f64>() / n - base - target
    };
    let (mut lo, mut hi) = (-40.0, 40.0);
    if gap(lo) > 0.0 || gap(hi) < 0.0 {
        return Err(HteError::config(
            "target_relative_lift",
            format!("a mean effect of {target} pushes conversion probabilities outside [0,1]"),
        ));
    }
    let mut d = 0.0f64.clamp(lo, hi);
    for _ in 0..200 {
        let g = gap(d);
        if g == 0.0 {
            break;
        }
        if g > 0.0 {
            hi = d;
        } else {
            lo = d;
        }
        let slope = logits
            .iter()
            .map(|&(s, h)| {
                let p = sigmoid(s + d + h);
                p * (1.0 - p)
            })
            .sum::<f64>()
            / n;
        let newton = d - g / slope;
        let next = if slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - d).abs() < 1e-15 {
            d = next;
            break;
        }
        d = next;
    }
    Ok(d)
}

/// Generates one experiment and its ground truth.
pub fn generate_experiment(cfg: &GeneratorConfig) -> Result<(Experiment, GroundTruth)> {
    generate_week(cfg, 0)
}

fn generate_week(cfg: &GeneratorConfig, week: usize) -> Result<(Experiment, GroundTruth)> {
    cfg.validate()?;
    let world = World::new(cfg);
    let schema = Arc::new(cfg.schema());
    let theta = cfg.effect_angle + cfg.drift_rate * week as f64;
    let sample_seed = if week == 0 {
        cfg.seed
    } else {
        derive_seed(cfg.seed, week as u64)
    };
    let mut sampler = rng(sample_seed);

    struct Draw {
        x: Vec<f64>,
        levels: Vec<usize>,
        score: f64,
        shape: f64,
        arm: Arm,
        noise: f64,
        missing: Vec<bool>,
    }

    let mut draws = Vec::with_capacity(cfg.n_users);
    for i in 0..cfg.n_users {
        let index = cfg.user_offset + i;
        let mut pop = rng(derive_seed(cfg.population_seed, index as u64));
        let x: Vec<f64> = (0..cfg.n_numeric)
            .map(|_| pop.random_range(-SQRT3..SQRT3))
            .collect();
        let levels: Vec<usize> = (0..cfg.n_categorical)
            .map(|_| pop.random_range(0..cfg.n_levels))
            .collect();
        let latent: f64 = StandardNormal.sample(&mut pop);
        let missing = (0..cfg.n_numeric)
            .map(|_| cfg.missing_rate > 0.0 && pop.random::<f64>() < cfg.missing_rate)
            .collect();

        let mut score = dot(&world.baseline, &x);
        for (k, &l) in levels.iter().enumerate() {
            score += world.level_effects[k][l];
        }
        if cfg.outcome == OutcomeFamily::Conversion {
            score += (cfg.base_rate / (1.0 - cfg.base_rate)).ln() + cfg.noise_scale * latent;
        }
        let arm = if sampler.random::<f64>() < cfg.treatment_share {
            Arm::Treatment
        } else {
            Arm::Control
        };
        let noise = match cfg.outcome {
            OutcomeFamily::Conversion => sampler.random::<f64>(),
            OutcomeFamily::Engagement => StandardNormal.sample(&mut sampler),
        };
        draws.push(Draw {
            shape: effect_shape(cfg.effect_form, &world, &x, theta),
            x,
            levels,
            score,
            arm,
            noise,
            missing,
        });
    }

    let target = cfg.base_rate * cfg.target_relative_lift;
    let offset = match cfg.outcome {
        OutcomeFamily::Conversion => {
            let logits: Vec<(f64, f64)> = draws
                .iter()
                .map(|d| (d.score, cfg.heterogeneity * d.shape))
                .collect();
            calibrate_logit_offset(&logits, target)?
        }
        OutcomeFamily::Engagement => 0.0,
    };

    let metric = cfg.outcome.metric().to_string();
    let mut observations = Vec::with_capacity(cfg.n_users);
    let mut records = Vec::with_capacity(cfg.n_users);
    for (i, d) in draws.into_iter().enumerate() {
        let user_id = format!("u{:08}", cfg.user_offset + i);
        let (mu0, mu1, y0, y1) = match cfg.outcome {
            OutcomeFamily::Conversion => {
                let p0 = sigmoid(d.score);
                let p1 = sigmoid(d.score + offset + cfg.heterogeneity * d.shape);
                let y0 = if d.noise < p0 { 1.0 } else { 0.0 };
                let y1 = if d.noise < p1 { 1.0 } else { 0.0 };
                (p0, p1, y0, y1)
            }
            OutcomeFamily::Engagement => {
                let mu0 = cfg.base_rate * (1.0 + d.score / 4.0);
                let mu1 = mu0 + cfg.base_rate * (cfg.target_relative_lift + cfg.heterogeneity * d.shape);
                let eps = cfg.noise_scale * d.noise;
                (mu0, mu1, mu0 + eps, mu1 + eps)
            }
        };
        let mut features = Vec::with_capacity(schema.len());
        for (&xj, &gone) in d.x.iter().zip(&d.missing) {
            features.push(if gone {
                FeatureValue::Null
            } else {
                FeatureValue::Numeric(xj)
            });
        }
        for &l in &d.levels {
            features.push(FeatureValue::Categorical(format!("L{l}")));
        }
        let observed = match d.arm {
            Arm::Treatment => y1,
            Arm::Control => y0,
        };
        observations.push(UserObservation {
            user_id: user_id.clone(),
            features,
            arm: d.arm,
            outcomes: BTreeMap::from([(metric.clone(), observed)]),
        });
        records.push(TruthRecord {
            user_id,
            ite: mu1 - mu0,
            mu_control: mu0,
            mu_treatment: mu1,
            y_control: y0,
            y_treatment: y1,
        });
    }

    let experiment_id = if week == 0 {
        cfg.experiment_id.clone()
    } else {
        format!("{}-w{:02}", cfg.experiment_id, week + 1)
    };
    let meta = ExperimentMeta {
        experiment_id,
        end_date: cfg
            .end_date
            .checked_add_days(Days::new(7 * week as u64))
            .ok_or_else(|| HteError::config("end_date", "date overflow"))?,
        vertical: cfg.vertical.clone(),
        advertiser_id: cfg.advertiser_id.clone(),
        ad_product: cfg.ad_product.clone(),
        primary_outcome: metric,
    };
    let experiment = Experiment::new(meta, schema, observations).map_err(|e| match e {
        HteError::Schema(m) => HteError::config("n_users", m),
        other => other,
    })?;
    Ok((
        experiment,
        GroundTruth {
            config_hash: cfg.config_hash(),
            records,
        },
    ))
}

/// Weekly batches over a fixed user panel. Week `t` (0-based) rotates the
/// effect by `drift_rate * t`, samples with a seed derived from `(seed, t)` and
/// ends `7 * t` days after `cfg.end_date`. Week 0 equals [`generate_experiment`].
pub fn generate_stream(cfg: &GeneratorConfig, weeks: usize) -> Result<Vec<(Experiment, GroundTruth)>> {
    if weeks < 1 {
        return Err(HteError::config("weeks", "need at least one week"));
    }
    (0..weeks).map(|t| generate_week(cfg, t)).collect()
}

/// Pool of experiments with mixed ages, sizes and lifts.
///
/// A share of the experiments are "effective": positive lift and a common
/// effect direction (rotated by `drift_rate` per week of age). The rest are
/// near-null campaigns whose heterogeneity points in a random direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub n_experiments: usize,
    pub id_prefix: String,
    pub as_of: NaiveDate,
    pub max_age_days: u64,
    pub min_users: usize,
    pub max_users: usize,
    pub effective_share: f64,
    pub effective_lift: (f64, f64),
    pub null_lift: (f64, f64),
    pub verticals: Vec<String>,
    pub advertisers_per_vertical: usize,
    /// Template for the per-experiment generator (ids, sizes, lifts, angles,
    /// dates and seeds are overwritten).
    pub template: GeneratorConfig,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            n_experiments: 20,
            id_prefix: "exp".into(),
            as_of: NaiveDate::from_ymd_opt(2024, 6, 30).expect("valid date"),
            max_age_days: 240,
            min_users: 4_000,
            max_users: 40_000,
            effective_share: 0.5,
            effective_lift: (0.15, 0.4),
            null_lift: (-0.05, 0.05),
            verticals: vec!["gaming".into(), "retail".into(), "finance".into()],
            advertisers_per_vertical: 2,
            template: GeneratorConfig {
                heterogeneity: 0.6,
                effect_form: EffectForm::Linear,
                ..GeneratorConfig::default()
            },
            seed: 1,
        }
    }
}

/// Generator configs for every experiment of a pool, in id order.
pub fn pool_configs(pool: &PoolConfig) -> Result<Vec<GeneratorConfig>> {
    if pool.n_experiments == 0 {
        return Err(HteError::config("n_experiments", "must be positive"));
    }
    if pool.min_users < 2 || pool.max_users < pool.min_users {
        return Err(HteError::config("min_users", "need 2 <= min_users <= max_users"));
    }
    if !(0.0..=1.0).contains(&pool.effective_share) {
        return Err(HteError::config("effective_share", "must lie in [0,1]"));
    }
    let mut r = rng(derive_seed(pool.seed, 0x706f_6f6c));
    let mut offset = pool.template.user_offset;
    let mut out = Vec::with_capacity(pool.n_experiments);
    for e in 0..pool.n_experiments {
        let age = r.random_range(0..=pool.max_age_days);
        let n_users = r.random_range(pool.min_users..=pool.max_users);
        let effective = r.random::<f64>() < pool.effective_share;
        let (lo, hi) = if effective { pool.effective_lift } else { pool.null_lift };
        let lift = if hi > lo { r.random_range(lo..hi) } else { lo };
        let random_angle = r.random_range(0.0..2.0 * PI);
        let angle = if effective {
            -pool.template.drift_rate * age as f64 / 7.0
        } else {
            random_angle
        };
        let vertical = if pool.verticals.is_empty() {
            None
        } else {
            Some(pool.verticals[e % pool.verticals.len()].clone())
        };
        let advertiser = vertical.as_ref().map(|v| {
            format!(
                "{v}-adv{}",
                (e / pool.verticals.len().max(1)) % pool.advertisers_per_vertical.max(1)
            )
        });
        let cfg = GeneratorConfig {
            experiment_id: format!("{}-{:04}", pool.id_prefix, e),
            n_users,
            target_relative_lift: lift,
            effect_angle: angle,
            end_date: pool
                .as_of
                .checked_sub_days(Days::new(age))
                .ok_or_else(|| HteError::config("max_age_days", "date underflow"))?,
            seed: derive_seed(pool.seed, 1000 + e as u64),
            population_seed: pool.template.population_seed,
            user_offset: offset,
            vertical,
            advertiser_id: advertiser,
            ..pool.template.clone()
        };
        offset += n_users;
        out.push(cfg);
    }
    Ok(out)
}

pub fn generate_pool(pool: &PoolConfig) -> Result<Vec<(Experiment, GroundTruth)>> {
    use rayon::prelude::*;
    pool_configs(pool)?
        .par_iter()
        .map(generate_experiment)
        .collect()
}
