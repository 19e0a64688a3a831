use dtr_core::glm::{self, cluster_sandwich_covariance, fit_logistic, log_likelihood, score, spline_basis, FitOptions};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Problem {
    x: DMatrix<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    names: Vec<String>,
}

fn problem(seed: u64, n: usize, p: usize, weighted: bool) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta: Vec<f64> = (0..p).map(|j| if j == 0 { -0.5 } else { rng.random_range(-0.8..0.8) }).collect();
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
    let y = (0..n)
        .map(|i| {
            let eta: f64 = (0..p).map(|j| x[(i, j)] * beta[j]).sum();
            f64::from(rng.random_bool(glm::expit(eta)))
        })
        .collect();
    let w = (0..n).map(|_| if weighted { rng.random_range(0.3..2.5) } else { 1.0 }).collect();
    let names = (0..p).map(|j| format!("x{j}")).collect();
    Problem { x, y, w, names }
}

fn stack(x: &DMatrix<f64>, times: usize) -> DMatrix<f64> {
    let n = x.nrows();
    DMatrix::from_fn(n * times, x.ncols(), |i, j| x[(i % n, j)])
}

#[test]
fn spline_second_differences_are_continuous_at_knots() {
    let knots = [0.5, 2.7, 5.1, 9.0, 11.5];
    let f = |t: f64| spline_basis(t, &knots).unwrap();
    let h = 1e-3;
    let second = |t: f64| -> Vec<f64> {
        let (a, b, c) = (f(t - h), f(t), f(t + h));
        (0..a.len()).map(|j| (a[j] - 2.0 * b[j] + c[j]) / (h * h)).collect()
    };
    for &k in &knots {
        let (lo, hi) = (f(k - 1e-6), f(k + 1e-6));
        let (dlo, dhi) = (second(k - 1e-6), second(k + 1e-6));
        for j in 0..lo.len() {
            assert!((lo[j] - hi[j]).abs() < 1e-5, "jump in basis {j} at {k}");
            assert!((dlo[j] - dhi[j]).abs() < 1e-2, "second difference jump in basis {j} at {k}");
        }
    }
    // Natural boundary: curvature vanishes outside the boundary knots.
    for t in [-3.0, 0.0, 12.0, 20.0] {
        assert!(second(t).iter().all(|v| v.abs() < 1e-6), "curvature at {t}");
    }
}

#[test]
fn robust_and_model_se_agree_for_independent_rows() {
    let pr = problem(21, 5000, 3, false);
    let fit = fit_logistic(&pr.x, &pr.names, &pr.y, &pr.w, &FitOptions::default()).unwrap();
    let clusters: Vec<usize> = (0..pr.y.len()).collect();
    let robust = cluster_sandwich_covariance(&fit, &pr.x, &pr.y, &pr.w, &clusters).unwrap();
    for j in 0..3 {
        let ratio = (robust[(j, j)] / fit.model_covariance[(j, j)]).sqrt();
        assert!((0.9..=1.1).contains(&ratio), "coefficient {j}: ratio {ratio}");
    }
}

#[test]
fn singleton_clusters_reduce_to_hc0() {
    let pr = problem(3, 400, 3, true);
    let fit = fit_logistic(&pr.x, &pr.names, &pr.y, &pr.w, &FitOptions::default()).unwrap();
    let clusters: Vec<usize> = (0..pr.y.len()).collect();
    let robust = cluster_sandwich_covariance(&fit, &pr.x, &pr.y, &pr.w, &clusters).unwrap();
    let mu = fit.predict(&pr.x);
    let p = pr.x.ncols();
    let (mut info, mut meat) = (DMatrix::<f64>::zeros(p, p), DMatrix::<f64>::zeros(p, p));
    for i in 0..pr.y.len() {
        let row = pr.x.row(i).transpose();
        let r = pr.w[i] * (pr.y[i] - mu[i]);
        info += &row * row.transpose() * (pr.w[i] * mu[i] * (1.0 - mu[i]));
        meat += &row * row.transpose() * (r * r);
    }
    let bread = info.try_inverse().unwrap();
    let hc0 = &bread * meat * &bread;
    assert!((&robust - &hc0).abs().max() < 1e-8 * hc0.abs().max());
}

#[test]
fn shared_cluster_duplicates_double_the_robust_variance() {
    let pr = problem(8, 300, 3, true);
    let n = pr.y.len();
    let x2 = stack(&pr.x, 2);
    let y2: Vec<f64> = pr.y.iter().chain(&pr.y).copied().collect();
    let w2: Vec<f64> = pr.w.iter().chain(&pr.w).copied().collect();
    let fit = fit_logistic(&x2, &pr.names, &y2, &w2, &FitOptions::default()).unwrap();
    let singletons: Vec<usize> = (0..2 * n).collect();
    let paired: Vec<usize> = (0..2 * n).map(|i| i % n).collect();
    let v1 = cluster_sandwich_covariance(&fit, &x2, &y2, &w2, &singletons).unwrap();
    let v2 = cluster_sandwich_covariance(&fit, &x2, &y2, &w2, &paired).unwrap();
    assert!((&v2 - &v1 * 2.0).abs().max() < 1e-10 * v1.abs().max());
}

#[test]
fn half_weight_duplicates_reproduce_coefficients() {
    let pr = problem(13, 250, 4, true);
    let base = fit_logistic(&pr.x, &pr.names, &pr.y, &pr.w, &FitOptions::default()).unwrap();
    let y2: Vec<f64> = pr.y.iter().chain(&pr.y).copied().collect();
    let w2: Vec<f64> = pr.w.iter().chain(&pr.w).map(|w| w / 2.0).collect();
    let dup = fit_logistic(&stack(&pr.x, 2), &pr.names, &y2, &w2, &FitOptions::default()).unwrap();
    assert!((&base.coefficients - &dup.coefficients).abs().max() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn score_vanishes_at_convergence(seed in any::<u64>(), p in 1usize..5) {
        let pr = problem(seed, 300, p, true);
        let fit = fit_logistic(&pr.x, &pr.names, &pr.y, &pr.w, &FitOptions::default());
        prop_assume!(fit.as_ref().is_ok_and(|f| f.converged));
        let s = score(&pr.x, &pr.y, &pr.w, &fit.unwrap().coefficients);
        prop_assert!(s.amax() < 1e-6, "score {}", s.amax());
    }

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>(), p in 1usize..5) {
        let pr = problem(seed, 40, p, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let beta = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let g = score(&pr.x, &pr.y, &pr.w, &beta);
        let h = 1e-5;
        for j in 0..p {
            let (mut up, mut down) = (beta.clone(), beta.clone());
            up[j] += h;
            down[j] -= h;
            let fd = (log_likelihood(&pr.x, &pr.y, &pr.w, &up) - log_likelihood(&pr.x, &pr.y, &pr.w, &down)) / (2.0 * h);
            prop_assert!((g[j] - fd).abs() <= 1e-4 * g[j].abs().max(1.0), "component {j}: {} vs {fd}", g[j]);
        }
    }

    #[test]
    fn sandwich_is_symmetric_psd(seed in any::<u64>(), p in 1usize..5, cluster_size in 1usize..6) {
        let pr = problem(seed, 200, p, true);
        let fit = fit_logistic(&pr.x, &pr.names, &pr.y, &pr.w, &FitOptions::default());
        prop_assume!(fit.is_ok());
        let fit = fit.unwrap();
        let clusters: Vec<usize> = (0..pr.y.len()).map(|i| i / cluster_size).collect();
        let v = cluster_sandwich_covariance(&fit, &pr.x, &pr.y, &pr.w, &clusters).unwrap();
        let scale = v.abs().max().max(f64::MIN_POSITIVE);
        prop_assert!((&v - v.transpose()).abs().max() <= 1e-10 * scale);
        let trace = v.trace();
        let eig = v.symmetric_eigenvalues();
        prop_assert!(eig.iter().all(|&e| e >= -1e-10 * trace), "eigenvalues {eig}");
    }
}
