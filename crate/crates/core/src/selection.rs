//! Experiment selection: recency window, control-arm size floor and a
//! relative-lift threshold expressed in standard-error multiples.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, Experiment};
use crate::error::{HteError, Result};

/// Relative lift `(mean_T - mean_C) / mean_C` with its delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiftEstimate {
    pub relative_lift: f64,
    pub standard_error: f64,
    pub n_treatment: usize,
    pub n_control: usize,
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1.0))
}

pub fn estimate_relative_lift(exp: &Experiment, metric: &str) -> Result<LiftEstimate> {
    let mut treated = Vec::new();
    let mut control = Vec::new();
    for obs in &exp.observations {
        let y = obs.outcome(metric).ok_or_else(|| {
            HteError::Schema(format!(
                "user {} in {} lacks metric `{metric}`",
                obs.user_id,
                exp.id()
            ))
        })?;
        match obs.arm {
            Arm::Treatment => treated.push(y),
            Arm::Control => control.push(y),
        }
    }
    for (arm, ys) in [(Arm::Treatment, &treated), (Arm::Control, &control)] {
        if ys.len() < 2 {
            return Err(HteError::VarianceUndefined {
                experiment_id: exp.id().to_string(),
                arm: arm.to_string(),
            });
        }
    }
    let (mt, vt) = mean_var(&treated);
    let (mc, vc) = mean_var(&control);
    if mc == 0.0 {
        return Err(HteError::UndefinedLift {
            experiment_id: exp.id().to_string(),
        });
    }
    let (nt, nc) = (treated.len() as f64, control.len() as f64);
    // d/dmT = 1/mC, d/dmC = -mT/mC^2
    let var = vt / (nt * mc * mc) + mt * mt * vc / (nc * mc.powi(4));
    Ok(LiftEstimate {
        relative_lift: (mt - mc) / mc,
        standard_error: var.sqrt(),
        n_treatment: treated.len(),
        n_control: control.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionCriteria {
    /// `None` keeps experiments of any age.
    pub max_recency_days: Option<i64>,
    pub min_control_size: usize,
    /// Keep only experiments whose lift exceeds this many standard errors; 0 disables the filter.
    pub min_lift_multiples: f64,
    pub as_of_date: NaiveDate,
}

impl SelectionCriteria {
    /// Keeps everything.
    pub fn vacuous(as_of_date: NaiveDate) -> Self {
        Self {
            max_recency_days: None,
            min_control_size: 0,
            min_lift_multiples: 0.0,
            as_of_date,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.max_recency_days, Some(d) if d < 0) {
            return Err(HteError::param("max_recency_days", "must be >= 0"));
        }
        if !(self.min_lift_multiples >= 0.0 && self.min_lift_multiples.is_finite()) {
            return Err(HteError::param("min_lift_multiples", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    Recency,
    ControlSize,
    Lift,
    LiftUndefined,
}

impl ExclusionReason {
    pub fn code(self) -> &'static str {
        match self {
            ExclusionReason::Recency => "recency",
            ExclusionReason::ControlSize => "control_size",
            ExclusionReason::Lift => "lift",
            ExclusionReason::LiftUndefined => "lift_undefined",
        }
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub experiment_id: String,
    pub selected: bool,
    pub reasons: Vec<ExclusionReason>,
    pub lift: Option<f64>,
    pub se: Option<f64>,
    pub control_size: usize,
    pub age_days: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome<'a> {
    pub selected: Vec<&'a Experiment>,
    pub audit: Vec<AuditRow>,
}

impl SelectionOutcome<'_> {
    pub fn exclusions(&self) -> impl Iterator<Item = &AuditRow> {
        self.audit.iter().filter(|r| !r.selected)
    }

    pub fn selected_ids(&self) -> Vec<String> {
        self.selected.iter().map(|e| e.id().to_string()).collect()
    }
}

/// Applies the criteria to every experiment of `pool`, keeping pool order.
pub fn select_experiments<'a>(
    pool: &'a [Experiment],
    criteria: &SelectionCriteria,
) -> Result<SelectionOutcome<'a>> {
    criteria.validate()?;
    let mut selected = Vec::new();
    let mut audit = Vec::with_capacity(pool.len());
    for exp in pool {
        let age_days = (criteria.as_of_date - exp.meta.end_date).num_days();
        if age_days < 0 {
            return Err(HteError::param(
                "as_of_date",
                format!(
                    "{} precedes the end date {} of {}",
                    criteria.as_of_date,
                    exp.meta.end_date,
                    exp.id()
                ),
            ));
        }
        let control_size = exp.arm_count(Arm::Control);
        let mut reasons = Vec::new();
        if matches!(criteria.max_recency_days, Some(max) if age_days > max) {
            reasons.push(ExclusionReason::Recency);
        }
        if control_size < criteria.min_control_size {
            reasons.push(ExclusionReason::ControlSize);
        }
        let estimate = estimate_relative_lift(exp, &exp.meta.primary_outcome);
        if criteria.min_lift_multiples > 0.0 {
            match &estimate {
                Ok(l) if l.relative_lift > criteria.min_lift_multiples * l.standard_error => {}
                Ok(_) => reasons.push(ExclusionReason::Lift),
                Err(_) => reasons.push(ExclusionReason::LiftUndefined),
            }
        }
        let (lift, se) = match estimate {
            Ok(l) => (Some(l.relative_lift), Some(l.standard_error)),
            Err(_) => (None, None),
        };
        let keep = reasons.is_empty();
        if keep {
            selected.push(exp);
        }
        audit.push(AuditRow {
            experiment_id: exp.id().to_string(),
            selected: keep,
            reasons,
            lift,
            se,
            control_size,
            age_days,
        });
    }
    Ok(SelectionOutcome { selected, audit })
}

/// Writes the audit as CSV: `experiment_id,decision,reason,lift,se,control_size,age_days`.
/// Multiple reasons are joined with `;`.
pub fn write_audit(path: &Path, audit: &[AuditRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "experiment_id",
        "decision",
        "reason",
        "lift",
        "se",
        "control_size",
        "age_days",
    ])?;
    for row in audit {
        let reason = row
            .reasons
            .iter()
            .map(|r| r.code())
            .collect::<Vec<_>>()
            .join(";");
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            row.experiment_id.clone(),
            if row.selected { "selected" } else { "excluded" }.to_string(),
            reason,
            fmt_opt(row.lift),
            fmt_opt(row.se),
            row.control_size.to_string(),
            row.age_days.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| HteError::Io(e.into_error()))?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ExperimentMeta, FeatureDef, FeatureKind, FeatureSchema, FeatureValue, UserObservation};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    /// Experiment with given per-arm outcome vectors.
    fn experiment(id: &str, end: NaiveDate, treated: &[f64], control: &[f64]) -> Experiment {
        let schema = Arc::new(
            FeatureSchema::new(
                1,
                vec![FeatureDef {
                    name: "x".into(),
                    kind: FeatureKind::Numeric,
                }],
            )
            .unwrap(),
        );
        let mut obs = Vec::new();
        for (arm, ys) in [(Arm::Treatment, treated), (Arm::Control, control)] {
            for (i, &y) in ys.iter().enumerate() {
                obs.push(UserObservation {
                    user_id: format!("{id}-{arm}-{i}"),
                    features: vec![FeatureValue::Numeric(0.0)],
                    arm,
                    outcomes: BTreeMap::from([("conversion".to_string(), y)]),
                });
            }
        }
        Experiment::new(
            ExperimentMeta {
                experiment_id: id.into(),
                end_date: end,
                vertical: None,
                advertiser_id: None,
                ad_product: None,
                primary_outcome: "conversion".into(),
            },
            schema,
            obs,
        )
        .unwrap()
    }

    fn bernoulli_vec(n: usize, ones: usize) -> Vec<f64> {
        (0..n).map(|i| if i < ones { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn lift_from_means() {
        let e = experiment("e", date(2024, 1, 1), &bernoulli_vec(1000, 55), &bernoulli_vec(1000, 50));
        let l = estimate_relative_lift(&e, "conversion").unwrap();
        assert!((l.relative_lift - 0.10).abs() < 1e-12);
        assert_eq!((l.n_treatment, l.n_control), (1000, 1000));
    }

    #[test]
    fn identical_arms_zero_lift() {
        let ys = [0.3, 1.7, 2.2, 0.0, 4.1];
        let e = experiment("e", date(2024, 1, 1), &ys, &ys);
        assert_eq!(estimate_relative_lift(&e, "conversion").unwrap().relative_lift, 0.0);
    }

    #[test]
    fn lift_errors() {
        let e = experiment("e", date(2024, 1, 1), &[1.0, 0.0], &[0.0, 0.0]);
        assert!(matches!(
            estimate_relative_lift(&e, "conversion"),
            Err(HteError::UndefinedLift { .. })
        ));
        let e = experiment("e", date(2024, 1, 1), &[1.0], &[0.0, 1.0]);
        assert!(matches!(
            estimate_relative_lift(&e, "conversion"),
            Err(HteError::VarianceUndefined { .. })
        ));
    }

    #[test]
    fn delta_method_matches_hand_value() {
        // mT=0.5 vT=1/3 nT=4; mC=0.25 vC=0.25 nC=4
        let e = experiment("e", date(2024, 1, 1), &[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]);
        let l = estimate_relative_lift(&e, "conversion").unwrap();
        let var = (1.0 / 3.0) / (4.0 * 0.0625) + 0.25 * 0.25 / (4.0 * 0.25f64.powi(4));
        assert!((l.standard_error - var.sqrt()).abs() < 1e-12);
        assert!((l.relative_lift - 1.0).abs() < 1e-15);
    }

    #[test]
    fn recency_exclusion_reason() {
        let as_of = date(2024, 7, 1);
        let old = experiment("old", as_of - chrono::Days::new(200), &[1.0, 0.0], &[1.0, 0.0]);
        let criteria = SelectionCriteria {
            max_recency_days: Some(180),
            ..SelectionCriteria::vacuous(as_of)
        };
        let pool = [old];
        let out = select_experiments(&pool, &criteria).unwrap();
        assert!(out.selected.is_empty());
        assert_eq!(out.audit[0].reasons, vec![ExclusionReason::Recency]);
        assert_eq!(out.audit[0].age_days, 200);
    }

    #[test]
    fn vacuous_criteria_keep_everything() {
        let as_of = date(2024, 7, 1);
        let pool = vec![
            experiment("a", date(2020, 1, 1), &[1.0, 0.0], &[1.0, 1.0]),
            experiment("b", as_of, &[0.0, 0.0], &[0.0, 0.0]),
        ];
        let out = select_experiments(&pool, &SelectionCriteria::vacuous(as_of)).unwrap();
        assert_eq!(out.selected.len(), 2);
    }

    #[test]
    fn future_end_date_rejected() {
        let as_of = date(2024, 7, 1);
        let pool = vec![experiment("a", date(2024, 8, 1), &[1.0, 0.0], &[1.0, 0.0])];
        assert!(select_experiments(&pool, &SelectionCriteria::vacuous(as_of)).is_err());
    }

    #[test]
    fn audit_csv_layout() {
        let as_of = date(2024, 7, 1);
        let pool = vec![experiment("a", date(2024, 6, 1), &[1.0, 0.0], &[0.0, 0.0])];
        let criteria = SelectionCriteria {
            min_lift_multiples: 3.0,
            min_control_size: 5,
            ..SelectionCriteria::vacuous(as_of)
        };
        let out = select_experiments(&pool, &criteria).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("audit.csv");
        write_audit(&p, &out.audit).unwrap();
        let text = fs::read_to_string(p).unwrap();
        assert_eq!(
            text,
            "experiment_id,decision,reason,lift,se,control_size,age_days\n\
             a,excluded,control_size;lift_undefined,,,2,30\n"
        );
    }
}
