mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use hte_core::data::{
    encode_line, header_for, load_from_reader, partition_indices, Arm, Experiment, FeatureValue, UserObservation,
};
use hte_core::evaluation::{auuc, uplift_curve_from_parts};
use hte_core::selection::{select_experiments, SelectionCriteria};
use hte_core::transform::{fit_transform_spec, TransformSpec};
use proptest::prelude::*;

use common::{brute_force_auuc, counted_experiment, date, meta, small_schema};

fn feature_values() -> impl Strategy<Value = Vec<FeatureValue>> {
    (
        prop_oneof![Just(FeatureValue::Null), (-1e6f64..1e6).prop_map(FeatureValue::Numeric)],
        prop_oneof![Just(FeatureValue::Null), (-3i32..3).prop_map(|v| FeatureValue::Numeric(v as f64))],
        prop_oneof![
            Just(FeatureValue::Null),
            "[a-zA-Z0-9 ,\"\\\\é]{0,6}".prop_map(FeatureValue::Categorical)
        ],
    )
        .prop_map(|(a, b, c)| vec![a, b, c])
}

fn observations(min: usize, max: usize) -> impl Strategy<Value = Vec<UserObservation>> {
    prop::collection::vec((feature_values(), any::<bool>(), 0u8..2, -50.0f64..50.0), min..max).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (features, treated, conv, sessions))| UserObservation {
                user_id: format!("user,{i}\"x"),
                features,
                arm: if treated { Arm::Treatment } else { Arm::Control },
                outcomes: BTreeMap::from([
                    ("conversion".to_string(), conv as f64),
                    ("sessions".to_string(), sessions),
                ]),
            })
            .collect()
    })
}

fn ensure_both_arms(mut obs: Vec<UserObservation>) -> Vec<UserObservation> {
    obs[0].arm = Arm::Treatment;
    obs[1].arm = Arm::Control;
    obs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn data_file_roundtrip(a in observations(2, 30), b in observations(2, 30)) {
        let schema = small_schema();
        let exps = vec![
            Experiment::new(meta("e1", date(2024, 1, 1)), schema.clone(), ensure_both_arms(a)).unwrap(),
            Experiment::new(meta("e2", date(2024, 2, 1)), schema.clone(), ensure_both_arms(b)).unwrap(),
        ];
        let mut text = String::new();
        for e in &exps {
            for o in &e.observations {
                text.push_str(&encode_line(e.id(), &schema, o));
                text.push('\n');
            }
        }
        let header = header_for(&exps).unwrap();
        let header: hte_core::data::PoolHeader =
            serde_json::from_str(&serde_json::to_string(&header).unwrap()).unwrap();
        let back = load_from_reader(text.as_bytes(), &header).unwrap();
        prop_assert_eq!(back, exps);
    }

    #[test]
    fn split_is_deterministic_exhaustive_and_order_free(obs in observations(4, 80), seed in any::<u64>(), frac in 0.05f64..0.95) {
        let obs = ensure_both_arms(obs);
        let (tr, va) = partition_indices(&obs, frac, seed).unwrap();
        prop_assert_eq!(partition_indices(&obs, frac, seed).unwrap(), (tr.clone(), va.clone()));
        let all: BTreeSet<usize> = tr.iter().chain(&va).copied().collect();
        prop_assert_eq!(all.len(), obs.len());
        prop_assert_eq!(tr.len() + va.len(), obs.len());

        let mut reversed = obs.clone();
        reversed.reverse();
        let (tr2, _) = partition_indices(&reversed, frac, seed).unwrap();
        let ids = |o: &[UserObservation], idx: &[usize]| idx.iter().map(|&i| o[i].user_id.clone()).collect::<BTreeSet<_>>();
        prop_assert_eq!(ids(&obs, &tr), ids(&reversed, &tr2));
    }

    #[test]
    fn transform_train_serve_consistency(obs in observations(3, 60), unseen in "[xyz]{8}") {
        let schema = small_schema();
        let spec = fit_transform_spec(&obs, &schema, 3, &["e".to_string()]).unwrap();
        let served = TransformSpec::from_text(&spec.to_text()).unwrap();
        prop_assert_eq!(&served, &spec);
        let batch = spec.apply_batch(&schema, &obs).unwrap();
        for (i, o) in obs.iter().enumerate() {
            let one = served.apply(&schema, o).unwrap();
            let row = &batch[i * spec.dimension..(i + 1) * spec.dimension];
            prop_assert_eq!(one.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            row.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        // an unseen category and a null land in the same slot
        let mut a = obs[0].clone();
        a.features[2] = FeatureValue::Categorical(unseen);
        let mut b = obs[0].clone();
        b.features[2] = FeatureValue::Null;
        prop_assert_eq!(served.apply(&schema, &a).unwrap(), served.apply(&schema, &b).unwrap());
    }
}

#[derive(Debug, Clone)]
struct ExpSpec {
    age: i64,
    n_t: usize,
    n_c: usize,
    conv_t: f64,
    conv_c: f64,
}

fn exp_specs() -> impl Strategy<Value = Vec<ExpSpec>> {
    prop::collection::vec(
        (0i64..400, 2usize..300, 2usize..300, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(age, n_t, n_c, conv_t, conv_c)| ExpSpec {
            age,
            n_t,
            n_c,
            conv_t,
            conv_c,
        }),
        1..12,
    )
}

fn build(specs: &[ExpSpec]) -> Vec<Experiment> {
    let as_of = date(2024, 6, 30);
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let end = as_of - chrono::Days::new(s.age as u64);
            let ct = (s.conv_t * s.n_t as f64) as usize;
            let cc = (s.conv_c * s.n_c as f64) as usize;
            counted_experiment(&format!("e{i:02}"), end, s.n_t, ct, s.n_c, cc)
        })
        .collect()
}

fn criteria_strategy() -> impl Strategy<Value = SelectionCriteria> {
    (prop::option::of(0i64..400), 0usize..300, 0.0f64..4.0).prop_map(|(r, c, k)| SelectionCriteria {
        max_recency_days: r,
        min_control_size: c,
        min_lift_multiples: k,
        as_of_date: date(2024, 6, 30),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tightening_criteria_never_adds_experiments(
        specs in exp_specs(),
        loose in criteria_strategy(),
        dr in 0i64..200, dc in 0usize..200, dk in 0.0f64..2.0,
    ) {
        let pool = build(&specs);
        let tight = SelectionCriteria {
            max_recency_days: Some(loose.max_recency_days.unwrap_or(400).saturating_sub(dr).max(0)),
            min_control_size: loose.min_control_size + dc,
            min_lift_multiples: if loose.min_lift_multiples > 0.0 { loose.min_lift_multiples + dk } else { dk },
            as_of_date: loose.as_of_date,
        };
        let a: BTreeSet<String> = select_experiments(&pool, &loose).unwrap().selected_ids().into_iter().collect();
        let b: BTreeSet<String> = select_experiments(&pool, &tight).unwrap().selected_ids().into_iter().collect();
        // k = 0 disables the lift filter, so going from 0 to dk > 0 is a
        // tightening; from k > 0 to k + dk is too
        prop_assert!(b.is_subset(&a), "tight {b:?} loose {a:?}");
    }

    #[test]
    fn audit_lists_every_experiment_once(specs in exp_specs(), c in criteria_strategy()) {
        let pool = build(&specs);
        let out = select_experiments(&pool, &c).unwrap();
        prop_assert_eq!(out.audit.len(), pool.len());
        for (row, exp) in out.audit.iter().zip(&pool) {
            prop_assert_eq!(&row.experiment_id, exp.id());
            prop_assert_eq!(row.selected, row.reasons.is_empty());
        }
        prop_assert_eq!(out.selected.len(), out.audit.iter().filter(|r| r.selected).count());
    }
}

fn curve_inputs() -> impl Strategy<Value = (Vec<f64>, Vec<String>, Vec<Arm>, Vec<f64>, usize)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0i32..12, n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), -3.0f64..5.0], n),
            1usize..25,
        )
            .prop_map(move |(s, t, y, n_points)| {
                let mut arms: Vec<Arm> = t.iter().map(|&b| if b { Arm::Treatment } else { Arm::Control }).collect();
                arms[0] = Arm::Treatment;
                arms[n - 1] = Arm::Control;
                let ids = (0..n).map(|i| format!("u{:03}", (i * 7919) % 1000)).collect();
                (s.into_iter().map(f64::from).collect(), ids, arms, y, n_points)
            })
    })
}

fn auuc_of(s: &[f64], ids: &[String], arms: &[Arm], y: &[f64], n_points: usize) -> Option<f64> {
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    auuc(&uplift_curve_from_parts(s, &refs, arms, y, n_points).unwrap()).ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn auuc_matches_brute_force((s, ids, arms, y, n_points) in curve_inputs()) {
        let got = auuc_of(&s, &ids, &arms, &y, n_points);
        let want = brute_force_auuc(&s, &ids, &arms, &y, n_points);
        match (got, want) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}"),
            (None, None) => {}
            other => prop_assert!(false, "degeneracy disagrees: {other:?}"),
        }
    }

    #[test]
    fn auuc_invariant_under_monotone_transform((s, ids, arms, y, n_points) in curve_inputs()) {
        let f: Vec<f64> = s.iter().map(|x| x * x * x + 2.0 * x - 7.0).collect();
        prop_assert_eq!(auuc_of(&s, &ids, &arms, &y, n_points), auuc_of(&f, &ids, &arms, &y, n_points));
    }

    #[test]
    fn auuc_invariant_under_arm_relabelling((s, ids, arms, y, n_points) in curve_inputs()) {
        let swapped: Vec<Arm> = arms.iter().map(|a| match a { Arm::Treatment => Arm::Control, Arm::Control => Arm::Treatment }).collect();
        let a = auuc_of(&s, &ids, &arms, &y, n_points);
        let b = auuc_of(&s, &ids, &swapped, &y, n_points);
        match (a, b) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}"),
            (a, b) => prop_assert_eq!(a, b),
        }
    }
}

#[test]
fn swapped_tlearner_negates_every_ite() {
    use hte_core::learners::LearnerConfig;
    use hte_core::simgen::{generate_experiment, GeneratorConfig};
    use hte_core::tlearner::{fit_tlearner, Scope, SplitParams};

    let (exp, _) = generate_experiment(&GeneratorConfig {
        n_users: 2_000,
        heterogeneity: 1.0,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let cfg = LearnerConfig {
        epochs: 2,
        ..LearnerConfig::default()
    };
    let m = fit_tlearner(&[&exp], &Scope::general(), "conversion", &cfg, &SplitParams::default(), None).unwrap();
    let a = m.predict_ite_batch(&exp.schema, &exp.observations).unwrap();
    let b = m.swapped().predict_ite_batch(&exp.schema, &exp.observations).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| *x == -*y));
    let schema: Arc<_> = exp.schema.clone();
    assert_eq!(
        m.score_sensitivity(&schema, &exp.observations[0]).unwrap(),
        -a[0]
    );
}
