//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::NaiveDate;
use hte_core::data::{Arm, Experiment, ExperimentMeta, FeatureDef, FeatureKind, FeatureSchema, FeatureValue, UserObservation};

/// Independent AUUC reference: every prefix is recomputed from scratch, gaps
/// are filled by interpolation in t, then a trapezoid sum is normalized by
/// the full-population gain.
pub fn brute_force_auuc(scores: &[f64], ids: &[String], arms: &[Arm], y: &[f64], n_points: usize) -> Option<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| ids[a].cmp(&ids[b]))
            .then(a.cmp(&b))
    });
    let mut t = Vec::new();
    let mut g: Vec<Option<f64>> = Vec::new();
    for i in 0..=n_points {
        let k = i * n / n_points;
        t.push(i as f64 / n_points as f64);
        if k == 0 {
            g.push(Some(0.0));
            continue;
        }
        let prefix = &order[..k];
        let treated: Vec<f64> = prefix.iter().filter(|&&j| arms[j] == Arm::Treatment).map(|&j| y[j]).collect();
        let control: Vec<f64> = prefix.iter().filter(|&&j| arms[j] == Arm::Control).map(|&j| y[j]).collect();
        if treated.is_empty() || control.is_empty() {
            g.push(None);
        } else {
            let mt = treated.iter().sum::<f64>() / treated.len() as f64;
            let mc = control.iter().sum::<f64>() / control.len() as f64;
            g.push(Some((mt - mc) * k as f64));
        }
    }
    let mut filled = vec![0.0; g.len()];
    for i in 0..g.len() {
        filled[i] = match g[i] {
            Some(v) => v,
            None => {
                let lo = (0..i).rev().find(|&j| g[j].is_some())?;
                let hi = (i + 1..g.len()).find(|&j| g[j].is_some())?;
                let (g0, g1) = (g[lo]?, g[hi]?);
                g0 + (g1 - g0) * (t[i] - t[lo]) / (t[hi] - t[lo])
            }
        };
    }
    let total = *filled.last()?;
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if total.abs() <= 1e-6 * n as f64 * scale {
        return None;
    }
    let mut area = 0.0;
    for i in 1..filled.len() {
        area += 0.5 * (filled[i - 1] + filled[i]) * (t[i] - t[i - 1]);
    }
    Some(area / total)
}

pub fn small_schema() -> Arc<FeatureSchema> {
    Arc::new(
        FeatureSchema::new(
            1,
            vec![
                FeatureDef { name: "x0".into(), kind: FeatureKind::Numeric },
                FeatureDef { name: "x1".into(), kind: FeatureKind::Numeric },
                FeatureDef { name: "c0".into(), kind: FeatureKind::Categorical },
            ],
        )
        .unwrap(),
    )
}

pub fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

pub fn meta(id: &str, end_date: NaiveDate) -> ExperimentMeta {
    ExperimentMeta {
        experiment_id: id.into(),
        end_date,
        vertical: Some("retail".into()),
        advertiser_id: None,
        ad_product: None,
        primary_outcome: "conversion".into(),
    }
}

/// Experiment with `n_t` treated and `n_c` control users whose conversion is
/// `1` for the first `conv_t` / `conv_c` of each arm.
pub fn counted_experiment(id: &str, end_date: NaiveDate, n_t: usize, conv_t: usize, n_c: usize, conv_c: usize) -> Experiment {
    let schema = small_schema();
    let mut obs = Vec::with_capacity(n_t + n_c);
    for (arm, n, conv) in [(Arm::Treatment, n_t, conv_t), (Arm::Control, n_c, conv_c)] {
        for i in 0..n {
            obs.push(UserObservation {
                user_id: format!("{id}-{}-{i}", arm.as_str()),
                features: vec![
                    FeatureValue::Numeric(i as f64 % 7.0),
                    FeatureValue::Numeric((i % 3) as f64),
                    FeatureValue::Categorical(format!("L{}", i % 4)),
                ],
                arm,
                outcomes: BTreeMap::from([("conversion".to_string(), if i < conv { 1.0 } else { 0.0 })]),
            });
        }
    }
    Experiment::new(meta(id, end_date), schema, obs).unwrap()
}
