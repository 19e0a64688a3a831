use std::collections::{BTreeMap, HashMap};

use dtr_core::longitudinal_data::{Race, Sex, Schema};
use dtr_core::regimen::{adherence_trace, clone_cohort, usrds_family, CloneOptions};
use dtr_core::{BaselineCovariates, Cohort, RegimenGrid, RegimenSpec, SubjectHistory, Visit};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn baseline() -> BaselineCovariates {
    BaselineCovariates { sex: Sex::Female, age: 55.0, race: Race::White, diabetes: false, hypertension: true, extra: BTreeMap::new() }
}

fn random_subject(rng: &mut ChaCha8Rng, id: usize) -> SubjectHistory {
    let n = rng.random_range(1..16u32);
    let mut dose = rng.random_range(2.0..20.0);
    let visits = (0..n)
        .map(|t| {
            if t > 0 {
                dose = match rng.random_range(0..10) {
                    0 => 0.0,
                    1 | 2 => dose,
                    3 if dose == 0.0 => rng.random_range(1.0..10.0),
                    _ => dose * rng.random_range(0.3..1.8),
                };
            }
            Visit {
                t,
                marker: (!rng.random_bool(0.1)).then(|| rng.random_range(25.0..44.0)),
                dose: (!rng.random_bool(0.03)).then_some(dose),
                aux: BTreeMap::new(),
            }
        })
        .collect();
    let last_followup = n - 1 + rng.random_range(0..2);
    let event_time = rng.random_bool(0.3).then(|| rng.random_range(0.1..(last_followup as f64 + 1.0)));
    SubjectHistory {
        id: format!("s{id}"),
        baseline: baseline(),
        visits,
        event_observed: event_time.is_some(),
        event_time,
        last_followup,
    }
}

/// Month-by-month scan written from the rule definition, independent of the
/// library's zone and interval helpers.
fn brute_force_censor(spec: &RegimenSpec, s: &SubjectHistory, start_t: u32) -> Option<u32> {
    let i0 = s.visits.iter().position(|v| v.t == start_t)?;
    let mut carried = None;
    let mut markers = Vec::new();
    for v in &s.visits {
        if v.marker.is_some() {
            carried = v.marker;
        }
        markers.push(carried);
    }
    for i in i0 + 1..s.visits.len() {
        let (prev, new, m) = (s.visits[i - 1].dose, s.visits[i].dose, markers[i]);
        let ok = match (prev, new, m) {
            (Some(prev), Some(new), Some(m)) => {
                let (lo, hi) = if m > spec.b.1 {
                    (spec.p[0], spec.p[1])
                } else if m < spec.b.0 {
                    (spec.p[4], spec.p[5])
                } else {
                    (spec.p[2], spec.p[3])
                };
                if prev == 0.0 {
                    if m < spec.b.0 { new > 0.0 } else { new == 0.0 }
                } else {
                    new >= prev * lo && (hi.is_infinite() || new <= prev * hi)
                }
            }
            _ => false,
        };
        if !ok {
            return Some(s.visits[i].t);
        }
    }
    None
}

fn random_cohort(seed: u64, n: usize) -> Cohort {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Cohort::new((0..n).map(|i| random_subject(&mut rng, i)).collect(), Schema::default()).unwrap()
}

fn random_grid(seed: u64, k: usize) -> RegimenGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<_> = (0..k)
        .map(|i| {
            let p = [0.1, 0.25, 0.5][rng.random_range(0..3)];
            usrds_family(p, rng.random_range(30..41) as f64, i as u32 + 1).unwrap()
        })
        .collect();
    RegimenGrid::new(specs, 1).unwrap()
}

#[test]
fn censor_visit_matches_brute_force_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let opts = CloneOptions::default();
    for i in 0..10_000 {
        let s = random_subject(&mut rng, i);
        let spec = usrds_family([0.1, 0.25, 0.5][i % 3], rng.random_range(30..41) as f64, 1).unwrap();
        let start_t = rng.random_range(0..3);
        let trace = adherence_trace(&spec, &s, start_t, &opts);
        assert_eq!(trace.censor_visit, brute_force_censor(&spec, &s, start_t), "subject {i}");
    }
}

#[test]
fn two_clones_diverge_like_the_worked_subject() {
    // On a steady dose: marker 33 through month 7, 37 for months 8-11, then 40.
    let markers: Vec<f64> = (0..15).map(|t| if t < 8 { 33.0 } else if t < 12 { 37.0 } else { 40.0 }).collect();
    let visits = markers
        .iter()
        .enumerate()
        .map(|(t, &m)| Visit { t: t as u32, marker: Some(m), dose: Some(10.0), aux: BTreeMap::new() })
        .collect();
    let subject = SubjectHistory {
        id: "fig".into(),
        baseline: baseline(),
        visits,
        event_time: None,
        last_followup: 14,
        event_observed: false,
    };
    let grid = RegimenGrid::new(vec![usrds_family(0.25, 33.0, 1).unwrap(), usrds_family(0.25, 36.0, 2).unwrap()], 1).unwrap();
    let cohort = Cohort::new(vec![subject.clone()], Schema::default()).unwrap();
    let opts = CloneOptions::default();
    let table = clone_cohort(&cohort, &grid, 3, &opts);

    let censor_of = |id: u32| table.rows.iter().filter(|r| r.regimen_id == id && r.censored).map(|r| r.t).next();
    assert_eq!(censor_of(1), Some(8));
    assert_eq!(censor_of(2), Some(12));
    for spec in &grid.specs {
        assert_eq!(adherence_trace(spec, &subject, 3, &opts).censor_visit, censor_of(spec.id));
    }
    let adherent = |id: u32| -> Vec<u32> { table.rows.iter().filter(|r| r.regimen_id == id && r.adherent).map(|r| r.t).collect() };
    let both: Vec<u32> = adherent(1).into_iter().filter(|t| adherent(2).contains(t)).collect();
    assert_eq!(both, (3..=7).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clone_rows_follow_the_trace(seed in any::<u64>(), k in 1usize..5, start_t in 0u32..3) {
        let cohort = random_cohort(seed, 40);
        let grid = random_grid(seed ^ 1, k);
        let opts = CloneOptions::default();
        let table = clone_cohort(&cohort, &grid, start_t, &opts);
        for span in table.spans() {
            let rows = &table.rows[span.start..span.end];
            let subject = &cohort.subjects[span.subject];
            let trace = adherence_trace(grid.get(span.regimen_id).unwrap(), subject, start_t, &opts);
            // censored(t) = 0 before the censor visit and 1 at it; C = 1 - A.
            for (j, r) in rows.iter().enumerate() {
                prop_assert_eq!(r.censored, !r.adherent);
                prop_assert_eq!(r.censored, Some(r.t) == trace.censor_visit);
                prop_assert!(!r.censored || j == rows.len() - 1);
                prop_assert_eq!(r.t, start_t + j as u32);
            }
        }
    }

    #[test]
    fn clones_share_the_event_time(seed in any::<u64>(), k in 2usize..5) {
        let cohort = random_cohort(seed, 40);
        let grid = random_grid(seed ^ 2, k);
        let table = clone_cohort(&cohort, &grid, 0, &CloneOptions::default());
        let mut events: HashMap<usize, Vec<u32>> = HashMap::new();
        for span in table.spans() {
            let rows = &table.rows[span.start..span.end];
            let subject = &cohort.subjects[span.subject];
            if let Some(ev) = subject.event_visit() {
                let last = rows.last().unwrap();
                if last.t == ev && last.adherent {
                    prop_assert!(last.event);
                }
            }
            if let Some(r) = rows.iter().find(|r| r.event) {
                events.entry(span.subject).or_default().push(r.t);
            }
        }
        for times in events.values() {
            prop_assert!(times.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn smaller_p_allows_more_outside_target(p in 0.01f64..0.98, dp in 0.001f64..0.5, prev in 0.1f64..50.0, new in 0.0f64..100.0, m in prop::sample::select(vec![20.0, 45.0])) {
        let q = (p + dp).min(0.99);
        let loose = usrds_family(p, 33.0, 1).unwrap();
        let strict = usrds_family(q, 33.0, 2).unwrap();
        let rule = Default::default();
        if dtr_core::regimen::is_adherent(&strict, prev, m, new, rule) {
            prop_assert!(dtr_core::regimen::is_adherent(&loose, prev, m, new, rule));
        }
    }

    #[test]
    fn at_most_k_rows_per_person_month(seed in any::<u64>(), k in 1usize..6) {
        let cohort = random_cohort(seed, 30);
        let grid = random_grid(seed ^ 3, k);
        let table = clone_cohort(&cohort, &grid, 0, &CloneOptions::default());
        let person_months: usize = cohort.subjects.iter().map(|s| s.visits.len()).sum();
        prop_assert!(table.rows.len() <= k * person_months);
    }
}
