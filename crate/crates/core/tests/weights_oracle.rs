use std::collections::{BTreeMap, HashMap};

use dtr_core::glm::{expit, quantile_sorted, DesignSpec};
use dtr_core::longitudinal_data::{Race, Schema, Sex};
use dtr_core::regimen::{clone_cohort, usrds_family, CloneOptions};
use dtr_core::weights::{
    combine_weights, compute_censoring_weights, compute_stabilized_weights, fit_adherence_models, positivity_diagnostics,
    Component, WeightTable,
};
use dtr_core::{BaselineCovariates, CloneTable, Cohort, RegimenGrid, SubjectHistory, Visit, WeightModelSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HORIZON: u32 = 12;

struct Draw {
    age: f64,
    diabetes: bool,
    /// Dose per visit; a doubled dose breaks the within-target rule.
    doses: Vec<f64>,
    last_followup: u32,
    event_visit: Option<u32>,
}

fn subject(id: usize, d: &Draw) -> SubjectHistory {
    let visits = d
        .doses
        .iter()
        .enumerate()
        .map(|(t, &dose)| Visit { t: t as u32, marker: Some(33.0), dose: Some(dose), aux: BTreeMap::new() })
        .collect();
    SubjectHistory {
        id: format!("s{id}"),
        baseline: BaselineCovariates {
            sex: if id.is_multiple_of(2) { Sex::Male } else { Sex::Female },
            age: d.age,
            race: Race::White,
            diabetes: d.diabetes,
            hypertension: false,
            extra: BTreeMap::new(),
        },
        visits,
        event_time: d.event_visit.map(|t| t as f64 + 0.5),
        last_followup: d.last_followup,
        event_observed: d.event_visit.is_some(),
    }
}

/// Everyone followed to the horizon without events; at each visit the dose is
/// kept with probability `stay(age, diabetes)` and doubled otherwise.
fn adherence_cohort(seed: u64, n: usize, stay: impl Fn(f64, bool) -> f64) -> Cohort {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = (0..n)
        .map(|i| {
            let age = rng.random_range(30.0..90.0);
            let diabetes = rng.random_bool(0.4);
            let mut dose = 10.0;
            let doses = (0..=HORIZON)
                .map(|t| {
                    if t > 0 && !rng.random_bool(stay(age, diabetes)) {
                        dose *= 2.0;
                    }
                    dose
                })
                .collect();
            subject(i, &Draw { age, diabetes, doses, last_followup: HORIZON, event_visit: None })
        })
        .collect();
    Cohort::new(subjects, Schema::default()).unwrap()
}

fn single_regimen() -> RegimenGrid {
    RegimenGrid::new(vec![usrds_family(0.25, 33.0, 1).unwrap()], 1).unwrap()
}

fn spec(num: &[&str], den: &[&str]) -> WeightModelSpec {
    WeightModelSpec {
        numerator: DesignSpec::parse(num).unwrap(),
        denominator: DesignSpec::parse(den).unwrap(),
        stratify_by_regimen: true,
        truncation: None,
        structural_key: None,
    }
}

fn adherence_weights(cohort: &Cohort, clones: &CloneTable, s: &WeightModelSpec) -> (Vec<Option<f64>>, Vec<Option<f64>>, WeightTable) {
    let models = fit_adherence_models(clones, cohort, s).unwrap();
    let table = compute_stabilized_weights(clones, cohort, &models).unwrap();
    (models.p_num, models.p_den, table)
}

fn at_risk_mean(clones: &CloneTable, w: &[f64]) -> f64 {
    let rows: Vec<f64> = (0..w.len()).filter(|&i| clones.rows[i].adherent).map(|i| w[i]).collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

#[test]
fn covariate_free_adherence_gives_unit_weights() {
    let cohort = adherence_cohort(1, 5000, |_, _| 0.8);
    let clones = clone_cohort(&cohort, &single_regimen(), 0, &CloneOptions::default());
    let s = spec(&["1"], &["1", "age", "diabetes"]);
    let (p_num, p_den, table) = adherence_weights(&cohort, &clones, &s);
    let mean = |p: &[Option<f64>]| {
        let v: Vec<f64> = p.iter().flatten().copied().collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!((mean(&p_num) - 0.8).abs() < 0.01);
    assert!((mean(&p_den) - 0.8).abs() < 0.01);
    let spread: f64 = table.sw.iter().map(|w| (w - 1.0).abs()).sum::<f64>() / table.sw.len() as f64;
    assert!(spread < 0.05, "mean |sw - 1| = {spread}");
}

#[test]
fn stabilized_weights_average_one_and_stay_positive() {
    let cohort = adherence_cohort(2, 5000, |age, diab| expit(2.0 - 0.9 * f64::from(diab) - 0.03 * (age - 60.0)));
    let clones = clone_cohort(&cohort, &single_regimen(), 0, &CloneOptions::default());
    let s = spec(&["1"], &["1", "age", "diabetes"]);
    let models = fit_adherence_models(&clones, &cohort, &s).unwrap();
    let table = compute_stabilized_weights(&clones, &cohort, &models).unwrap();
    let mean = at_risk_mean(&clones, &table.sw);
    assert!((mean - 1.0).abs() < 0.05, "mean sw {mean}");
    let report = positivity_diagnostics(&models, &table, &clones);
    let diag = report.strata[0].1.as_ref().unwrap();
    assert!(diag.min_p_den > 0.01, "min p_den {}", diag.min_p_den);
}

#[test]
fn identical_models_give_weight_one() {
    let cohort = adherence_cohort(3, 800, |age, diab| expit(1.5 - 0.5 * f64::from(diab) + 0.01 * (age - 60.0)));
    let clones = clone_cohort(&cohort, &single_regimen(), 0, &CloneOptions::default());
    let terms = ["1", "age", "diabetes"];
    let (_, _, table) = adherence_weights(&cohort, &clones, &spec(&terms, &terms));
    assert!(table.sw.iter().all(|w| (w - 1.0).abs() < 1e-12));
}

/// Diabetes raises both the event hazard and dropout, so complete-case
/// survival is too optimistic; weighting for dropout on diabetes removes that.
#[test]
fn dropout_weighted_km_recovers_full_data_km() {
    let n = 5000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut full_events = Vec::new();
    let subjects = (0..n)
        .map(|i| {
            let diabetes = rng.random_bool(0.5);
            let (hazard, dropout) = if diabetes { (0.10, 0.15) } else { (0.03, 0.02) };
            let mut true_event = None;
            let mut last_followup = HORIZON;
            for t in 0..=HORIZON {
                if rng.random_bool(hazard) {
                    true_event = Some(t);
                    break;
                }
            }
            for t in 0..HORIZON {
                if true_event.is_some_and(|e| e <= t) {
                    break;
                }
                if rng.random_bool(dropout) {
                    last_followup = t;
                    break;
                }
            }
            full_events.push(true_event);
            let observed = true_event.filter(|&e| e <= last_followup);
            let stop = observed.unwrap_or(last_followup);
            let draw = Draw { age: 60.0, diabetes, doses: vec![10.0; stop as usize + 1], last_followup, event_visit: observed };
            subject(i, &draw)
        })
        .collect();
    let cohort = Cohort::new(subjects, Schema::default()).unwrap();
    let clones = clone_cohort(&cohort, &single_regimen(), 0, &CloneOptions::default());
    let (_, ltfu) = compute_censoring_weights(&clones, &cohort, Component::Ltfu, &spec(&["1"], &["1", "diabetes"])).unwrap();

    let km = |w: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut at_risk: HashMap<u32, (f64, f64)> = HashMap::new();
        for (i, r) in clones.rows.iter().enumerate() {
            let e = at_risk.entry(r.t).or_default();
            e.0 += w(i);
            e.1 += w(i) * f64::from(r.event);
        }
        let mut s = 1.0;
        (0..=HORIZON).map(|t| {
            let (y, d) = at_risk[&t];
            s *= 1.0 - d / y;
            s
        })
        .collect()
    };
    let weighted = km(&|i| ltfu.sw[i]);
    let naive = km(&|_| 1.0);
    let mut s = 1.0;
    let truth: Vec<f64> = (0..=HORIZON)
        .map(|t| {
            let y = full_events.iter().filter(|e| e.is_none_or(|e| e >= t)).count() as f64;
            let d = full_events.iter().filter(|e| **e == Some(t)).count() as f64;
            s *= 1.0 - d / y;
            s
        })
        .collect();
    let worst = |km: &[f64]| km.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst(&weighted) < 0.02, "weighted KM off by {}", worst(&weighted));
    assert!(worst(&naive) > worst(&weighted), "naive {} vs weighted {}", worst(&naive), worst(&weighted));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cumulative_products_match_a_naive_loop(seed in any::<u64>()) {
        let cohort = adherence_cohort(seed, 300, |age, diab| expit(1.8 - 0.7 * f64::from(diab) + 0.02 * (age - 60.0)));
        let clones = clone_cohort(&cohort, &single_regimen(), 0, &CloneOptions::default());
        let s = spec(&["1"], &["1", "age", "diabetes"]);
        let models = fit_adherence_models(&clones, &cohort, &s);
        prop_assume!(models.is_ok());
        let models = models.unwrap();
        let table = compute_stabilized_weights(&clones, &cohort, &models).unwrap();
        let mut running: HashMap<(usize, u32), f64> = HashMap::new();
        for (i, r) in clones.rows.iter().enumerate() {
            let acc = running.entry((r.subject, r.regimen_id)).or_insert(1.0);
            if let (Some(pn), Some(pd)) = (models.p_num[i], models.p_den[i]) {
                *acc *= pn / pd;
            }
            prop_assert!((table.sw[i] - *acc).abs() <= 1e-12 * acc.abs().max(1.0));
        }
    }

    #[test]
    fn truncation_hits_the_requested_percentiles(seed in any::<u64>(), lo in 0.0f64..0.2, hi in 0.8f64..1.0) {
        let cohort = adherence_cohort(seed, 60, |_, _| 0.85);
        let clones = clone_cohort(&cohort, &single_regimen(), 0, &CloneOptions::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = clones.rows.len();
        let sw: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect();
        let table = WeightTable { component: Component::Adherence, p_num: vec![1.0; n], p_den: vec![1.0; n], sw: sw.clone() };
        let combined = combine_weights(&clones, &[&table], Some((lo, hi))).unwrap();
        let mut pre: Vec<f64> = (0..n).filter(|&i| clones.rows[i].adherent).map(|i| sw[i]).collect();
        pre.sort_by(f64::total_cmp);
        let post: Vec<f64> = (0..n).filter(|&i| clones.rows[i].adherent).map(|i| combined.w_total[i]).collect();
        let min = post.iter().copied().fold(f64::INFINITY, f64::min);
        let max = post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(min, quantile_sorted(&pre, lo));
        prop_assert_eq!(max, quantile_sorted(&pre, hi));
    }
}
