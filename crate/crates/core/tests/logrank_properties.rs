use approx::assert_abs_diff_eq;
use dtr_core::logrank::{self, ArmObs, PairedSurvival};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn unit(x: u32, delta: bool) -> ArmObs {
    ArmObs { entry: 0, x, delta, weights: vec![1.0; x as usize + 1] }
}

fn random_pairs(seed: u64, n: usize) -> PairedSurvival {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arm = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.15) {
            return None;
        }
        let entry = rng.random_range(0..3);
        let x = entry + rng.random_range(0..8);
        let weights = (entry..=x).map(|_| rng.random_range(0.2..3.0)).collect();
        Some(ArmObs { entry, x, delta: rng.random_bool(0.5), weights })
    };
    PairedSurvival { subjects: (0..n).map(|_| [arm(&mut rng), arm(&mut rng)]).collect() }
}

/// Textbook log-rank on independent arms: (O1 - E1, hypergeometric variance).
fn classical(arm1: &[(u32, bool)], arm2: &[(u32, bool)]) -> (f64, f64) {
    let tmax = arm1.iter().chain(arm2).map(|o| o.0).max().unwrap();
    let (mut u, mut v) = (0.0, 0.0);
    for t in 0..=tmax {
        let y1 = arm1.iter().filter(|o| o.0 >= t).count() as f64;
        let y2 = arm2.iter().filter(|o| o.0 >= t).count() as f64;
        let d1 = arm1.iter().filter(|o| o.0 == t && o.1).count() as f64;
        let d2 = arm2.iter().filter(|o| o.0 == t && o.1).count() as f64;
        let (y, d) = (y1 + y2, d1 + d2);
        if y1 == 0.0 || y2 == 0.0 || d == 0.0 {
            continue;
        }
        u += d1 - y1 * d / y;
        if y > 1.0 {
            v += d * (y1 / y) * (y2 / y) * (y - d) / (y - 1.0);
        }
    }
    (u, v)
}

fn independent(arm1: &[(u32, bool)], arm2: &[(u32, bool)]) -> PairedSurvival {
    let mut subjects: Vec<[Option<ArmObs>; 2]> = arm1.iter().map(|&(x, d)| [Some(unit(x, d)), None]).collect();
    subjects.extend(arm2.iter().map(|&(x, d)| [None, Some(unit(x, d))]));
    PairedSurvival { subjects }
}

/// Discrete exponential event visit with geometric censoring, capped at `horizon`.
fn draw_arm(rng: &mut ChaCha8Rng, rate: f64, censor: f64, horizon: u32) -> (u32, bool) {
    let t = (-rng.random::<f64>().ln() / rate).floor().min(f64::from(u32::MAX)) as u32;
    let c = (-rng.random::<f64>().ln() / censor).floor().min(f64::from(u32::MAX)) as u32;
    match (t <= c, t.min(c)) {
        (true, t) if t <= horizon => (t, true),
        (_, x) => (x.min(horizon), false),
    }
}

#[test]
fn textbook_six_subject_instance() {
    let arm1 = [(1, true), (3, true), (4, false)];
    let arm2 = [(2, true), (3, true), (5, true)];
    let data = independent(&arm1, &arm2);
    let r = logrank::test(&data).unwrap();
    // O - E by hand: 0.5 at t=1, -0.4 at t=2, 0 at t=3.
    assert_abs_diff_eq!(r.wstar, 0.1 / 6f64.sqrt(), epsilon = 1e-12);
    assert_eq!(r.tau, 4);
    let (u, _) = classical(&arm1, &arm2);
    assert_abs_diff_eq!(r.wstar, u / 6f64.sqrt(), epsilon = 1e-12);
}

#[test]
fn nelson_matches_hand_enumeration() {
    let data = PairedSurvival {
        subjects: vec![
            [Some(ArmObs { entry: 0, x: 1, delta: true, weights: vec![1.0, 2.0] }), None],
            [Some(ArmObs { entry: 0, x: 2, delta: false, weights: vec![1.0, 1.0, 0.5] }), None],
            [Some(ArmObs { entry: 0, x: 2, delta: true, weights: vec![2.0, 2.0, 3.0] }), None],
            [None, Some(unit(3, false))],
        ],
    };
    let path = logrank::weighted_nelson(&data, 0);
    assert_eq!(path.t0, 0);
    assert_abs_diff_eq!(path.cumhaz[0], 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(path.cumhaz[1], 2.0 / 5.0, epsilon = 1e-12);
    assert_abs_diff_eq!(path.cumhaz[2], 2.0 / 5.0 + 3.0 / 3.5, epsilon = 1e-12);
    assert_abs_diff_eq!(path.cumhaz[3], path.cumhaz[2], epsilon = 1e-12);
    assert!(path.skipped.is_empty());
}

#[test]
fn constant_weights_leave_nelson_unchanged() {
    let data = random_pairs(7, 40);
    let mut scaled = data.clone();
    for o in scaled.subjects.iter_mut().flatten().flatten() {
        o.weights.iter_mut().for_each(|w| *w = 1.0);
    }
    let base = logrank::weighted_nelson(&scaled, 1);
    for o in scaled.subjects.iter_mut().flatten().flatten() {
        o.weights.iter_mut().for_each(|w| *w = 3.7);
    }
    let tripled = logrank::weighted_nelson(&scaled, 1);
    for (a, b) in base.cumhaz.iter().zip(&tripled.cumhaz) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn variance_matches_classical_with_independent_arms() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let arm1: Vec<_> = (0..1000).map(|_| draw_arm(&mut rng, 0.08, 0.03, 30)).collect();
    let arm2: Vec<_> = (0..1000).map(|_| draw_arm(&mut rng, 0.10, 0.03, 30)).collect();
    let data = independent(&arm1, &arm2);
    let n = data.n() as f64;
    let (u, v) = classical(&arm1, &arm2);
    let r = logrank::test(&data).unwrap();
    assert_abs_diff_eq!(r.wstar, u / n.sqrt(), epsilon = 1e-10);
    let ratio = r.sigma2_hat * n / v;
    assert!((0.9..=1.1).contains(&ratio), "variance ratio {ratio}");
}

#[test]
fn null_rejection_rate_is_nominal() {
    let reps = 2000;
    let rejected: usize = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(1_000 + rep as u64);
            let subjects = (0..500)
                .map(|i| {
                    let (x, d) = draw_arm(&mut rng, 0.1, 0.05, 24);
                    if i % 2 == 0 {
                        [Some(unit(x, d)), None]
                    } else {
                        [None, Some(unit(x, d))]
                    }
                })
                .collect();
            let r = logrank::test(&PairedSurvival { subjects }).unwrap();
            usize::from(r.p_value < 0.05)
        })
        .sum();
    let rate = rejected as f64 / reps as f64;
    assert!((0.035..=0.065).contains(&rate), "rejection rate {rate}");
}

#[test]
fn separated_arms_are_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let subjects = (0..500)
        .map(|i| {
            let rate = if i % 2 == 0 { 0.05 } else { 0.5 };
            let (x, d) = draw_arm(&mut rng, rate, 0.02, 24);
            if i % 2 == 0 {
                [Some(unit(x, d)), None]
            } else {
                [None, Some(unit(x, d))]
            }
        })
        .collect();
    let r = logrank::test(&PairedSurvival { subjects }).unwrap();
    assert!(r.p_value < 0.001, "p = {}", r.p_value);
}

/// Shared event time per subject with independent censoring in each arm.
fn exchangeable_pairs(rng: &mut ChaCha8Rng, n: usize) -> PairedSurvival {
    let subjects = (0..n)
        .map(|_| {
            let t = (-rng.random::<f64>().ln() / 0.12).floor().min(20.0) as u32;
            let arm = |rng: &mut ChaCha8Rng| {
                let c = (-rng.random::<f64>().ln() / 0.08).floor().min(20.0) as u32;
                let x = t.min(c);
                Some(ArmObs { entry: 0, x, delta: t <= c && t < 20, weights: vec![1.0; x as usize + 1] })
            };
            [arm(rng), arm(rng)]
        })
        .collect();
    PairedSurvival { subjects }
}

#[test]
fn normal_p_agrees_with_pair_permutation() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let data = exchangeable_pairs(&mut rng, 150);
        let observed = logrank::test(&data).unwrap();
        let perms = 2000;
        let extreme = (0..perms)
            .filter(|_| {
                let mut shuffled = data.clone();
                for pair in &mut shuffled.subjects {
                    if rng.random_bool(0.5) {
                        pair.swap(0, 1);
                    }
                }
                logrank::wstar(&shuffled).unwrap().abs() >= observed.wstar.abs() - 1e-12
            })
            .count();
        let p_perm = extreme as f64 / perms as f64;
        let p_norm = 2.0 * normal.cdf(-observed.z.abs());
        assert!((p_perm - observed.p_value).abs() <= 0.05, "seed {seed}: permutation {p_perm} vs normal {p_norm}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn processes_match_naive_summation(seed in any::<u64>(), n in 2usize..30) {
        let data = random_pairs(seed, n);
        for k in 0..2 {
            let p = logrank::weighted_processes(&data, k);
            for (j, (&y, &d)) in p.at_risk.iter().zip(&p.deaths).enumerate() {
                let t = p.t0 + j as u32;
                let (mut y_naive, mut d_naive) = (0.0, 0.0);
                for o in data.subjects.iter().filter_map(|s| s[k].as_ref()) {
                    if o.entry <= t && t <= o.x {
                        y_naive += o.weights[(t - o.entry) as usize];
                        if o.delta && t == o.x {
                            d_naive += o.weights[(t - o.entry) as usize];
                        }
                    }
                }
                prop_assert!((y - y_naive).abs() < 1e-12 && (d - d_naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn common_weight_scale_leaves_z_unchanged(seed in any::<u64>(), n in 3usize..30, c in 0.1f64..10.0) {
        let data = random_pairs(seed, n);
        let Ok(base) = logrank::test(&data) else { return Ok(()) };
        prop_assume!(!base.degenerate);
        let mut scaled = data.clone();
        for o in scaled.subjects.iter_mut().flatten().flatten() {
            o.weights.iter_mut().for_each(|w| *w *= c);
        }
        let r = logrank::test(&scaled).unwrap();
        // W* and sigma are both linear in the weights, so only z is scale free.
        prop_assert!((r.wstar - c * base.wstar).abs() <= 1e-9 * (1.0 + base.wstar.abs() * c));
        prop_assert!((r.sigma2_hat - c * c * base.sigma2_hat).abs() <= 1e-9 * (1.0 + c * c * base.sigma2_hat));
        prop_assert!((r.z - base.z).abs() < 1e-8);
    }

    #[test]
    fn relabeling_negates_wstar(seed in any::<u64>(), n in 3usize..30) {
        let data = random_pairs(seed, n);
        let Ok(a) = logrank::test(&data) else { return Ok(()) };
        let b = logrank::test(&data.swapped()).unwrap();
        prop_assert!((a.wstar + b.wstar).abs() < 1e-12);
        prop_assert!((a.sigma2_hat - b.sigma2_hat).abs() < 1e-12 * (1.0 + a.sigma2_hat));
        prop_assert_eq!(a.tau, b.tau);
    }

    #[test]
    fn nothing_past_tau_contributes(seed in any::<u64>(), n in 3usize..30, f in 0.1f64..10.0) {
        let data = random_pairs(seed, n);
        let Ok(base) = logrank::test(&data) else { return Ok(()) };
        let mut moved = data.clone();
        for o in moved.subjects.iter_mut().flatten().flatten() {
            for t in (base.tau + 1).max(o.entry)..=o.x {
                o.weights[(t - o.entry) as usize] *= f;
            }
        }
        let r = logrank::test(&moved).unwrap();
        prop_assert_eq!(r.tau, base.tau);
        prop_assert!((r.wstar - base.wstar).abs() < 1e-12);
        prop_assert!((r.sigma2_hat - base.sigma2_hat).abs() < 1e-12 * (1.0 + base.sigma2_hat));
    }
}
