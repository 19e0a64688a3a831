use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{DtrError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub max_halvings: usize,
    pub coef_tol: f64,
    pub deviance_rtol: f64,
    pub separation_bound: f64,
    pub rank_tol: f64,
    /// Ridge scale used only when the unpenalized fit is rank deficient.
    pub ridge_rescue: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 50,
            max_halvings: 10,
            coef_tol: 1e-8,
            deviance_rtol: 1e-10,
            separation_bound: 15.0,
            rank_tol: 1e-10,
            ridge_rescue: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedGlm {
    pub names: Vec<String>,
    pub coefficients: DVector<f64>,
    pub model_covariance: DMatrix<f64>,
    pub robust_covariance: Option<DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub deviance: f64,
    /// Ridge penalty actually applied, if the rescue was needed.
    pub ridge: Option<f64>,
}

impl FittedGlm {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (x * &self.coefficients).iter().map(|&e| expit(e)).collect()
    }

    pub fn coef(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }

    /// Robust covariance if computed, else model-based.
    pub fn covariance(&self) -> &DMatrix<f64> {
        self.robust_covariance.as_ref().unwrap_or(&self.model_covariance)
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn check_inputs(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<()> {
    if x.nrows() != y.len() || y.len() != w.len() {
        return Err(DtrError::Data(format!(
            "design has {} rows but response {} and weights {}",
            x.nrows(),
            y.len(),
            w.len()
        )));
    }
    if let Some(i) = w.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(DtrError::Data(format!("prior weight at row {i} is not positive and finite")));
    }
    if let Some(i) = y.iter().position(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(DtrError::Data(format!("response at row {i} outside [0, 1]")));
    }
    Ok(())
}

/// Weighted Bernoulli log-likelihood.
pub fn log_likelihood(x: &DMatrix<f64>, y: &[f64], w: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(y)
        .zip(w)
        .map(|((&e, &yi), &wi)| {
            // log(1 + exp(e)) computed stably
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            wi * (yi * e - softplus)
        })
        .sum()
}

/// Gradient of the weighted log-likelihood.
pub fn score(x: &DMatrix<f64>, y: &[f64], w: &[f64], beta: &DVector<f64>) -> DVector<f64> {
    let eta = x * beta;
    let r = DVector::from_iterator(y.len(), eta.iter().zip(y).zip(w).map(|((&e, &yi), &wi)| wi * (yi - expit(e))));
    x.transpose() * r
}

fn deviance(x: &DMatrix<f64>, y: &[f64], w: &[f64], beta: &DVector<f64>) -> f64 {
    -2.0 * log_likelihood(x, y, w, beta)
}

struct WeightedQr {
    r: DMatrix<f64>,
    qtb: DVector<f64>,
}

/// QR of sqrt(W) X with optional ridge rows appended; returns R and (Q^T b)[..p].
fn weighted_qr(x: &DMatrix<f64>, sw: &[f64], z: Option<&[f64]>, ridge: Option<f64>) -> WeightedQr {
    let (n, p) = x.shape();
    let extra = if ridge.is_some() { p } else { 0 };
    let mut a = DMatrix::<f64>::zeros(n + extra, p);
    for j in 0..p {
        let src = x.column(j);
        let mut dst = a.column_mut(j);
        for i in 0..n {
            dst[i] = sw[i] * src[i];
        }
    }
    let mut b = DVector::<f64>::zeros(n + extra);
    if let Some(z) = z {
        for i in 0..n {
            b[i] = sw[i] * z[i];
        }
    }
    if let Some(l) = ridge {
        let s = l.sqrt();
        for j in 0..p {
            a[(n + j, j)] = s;
        }
    }
    let qr = a.qr();
    qr.q_tr_mul(&mut b);
    let r = qr.r();
    WeightedQr { r, qtb: b.rows(0, p).into_owned() }
}

fn small_pivots(r: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let d: Vec<f64> = (0..r.ncols()).map(|i| r[(i, i)].abs()).collect();
    let max = d.iter().cloned().fold(0.0, f64::max);
    (0..d.len()).filter(|&i| !(d[i] > tol * max)).collect()
}

fn inverse_from_r(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = r.ncols();
    let rinv = r
        .clone()
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| DtrError::Numerical("singular R factor".into()))?;
    let cov = &rinv * rinv.transpose();
    Ok((&cov + cov.transpose()) * 0.5)
}

struct Working {
    sw: Vec<f64>,
    z: Vec<f64>,
}

fn working(x: &DMatrix<f64>, y: &[f64], w: &[f64], beta: &DVector<f64>) -> Working {
    let eta = x * beta;
    let mut sw = Vec::with_capacity(y.len());
    let mut z = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let mu = expit(eta[i]).clamp(1e-15, 1.0 - 1e-15);
        let v = mu * (1.0 - mu);
        sw.push((w[i] * v).sqrt());
        z.push(eta[i] + (y[i] - mu) / v);
    }
    Working { sw, z }
}

/// Weighted logistic regression by IRLS with QR solves and step-halving.
pub fn fit_logistic(x: &DMatrix<f64>, names: &[String], y: &[f64], w: &[f64], opts: &FitOptions) -> Result<FittedGlm> {
    check_inputs(x, y, w)?;
    let p = x.ncols();
    if names.len() != p {
        return Err(DtrError::Data(format!("{} column names for {p} columns", names.len())));
    }
    let mut beta = DVector::<f64>::zeros(p);
    let mut dev = deviance(x, y, w, &beta);
    let mut ridge: Option<f64> = None;
    let mut prev_step: Option<DVector<f64>> = None;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let wk = working(x, y, w, &beta);
        let mut qr = weighted_qr(x, &wk.sw, Some(&wk.z), ridge);
        let bad = small_pivots(&qr.r, opts.rank_tol);
        if !bad.is_empty() {
            match (opts.ridge_rescue, ridge) {
                (Some(scale), None) => {
                    let info_trace: f64 = (0..p).map(|j| x.column(j).iter().zip(&wk.sw).map(|(v, s)| (v * s).powi(2)).sum::<f64>()).sum();
                    let l = scale * (info_trace / p as f64).max(1e-300);
                    log::warn!("rank-deficient design; applying ridge {l:e}");
                    ridge = Some(l);
                    qr = weighted_qr(x, &wk.sw, Some(&wk.z), ridge);
                }
                _ => return Err(DtrError::RankDeficient { columns: bad.iter().map(|&i| names[i].clone()).collect() }),
            }
        }
        let target = qr
            .r
            .solve_upper_triangular(&qr.qtb)
            .ok_or_else(|| DtrError::Numerical("singular R factor".into()))?;
        let mut step = &target - &beta;
        let mut cand = &beta + &step;
        let mut cand_dev = deviance(x, y, w, &cand);
        let mut halvings = 0;
        while !(cand_dev <= dev + 1e-12 * dev.abs()) && halvings < opts.max_halvings {
            step *= 0.5;
            cand = &beta + &step;
            cand_dev = deviance(x, y, w, &cand);
            halvings += 1;
        }
        let max_step = step.amax();
        let rel_dev = (dev - cand_dev).abs() / (cand_dev.abs() + 0.1);
        if let Some((j, b)) = cand.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())) {
            if b.abs() > opts.separation_bound {
                let growing = prev_step.as_ref().is_some_and(|ps: &DVector<f64>| step[j].abs() >= ps[j].abs() * 0.5);
                if growing && !(max_step < opts.coef_tol) {
                    return Err(DtrError::Separation { column: names[j].clone() });
                }
            }
        }
        beta = cand;
        dev = cand_dev;
        prev_step = Some(step);
        if max_step < opts.coef_tol || rel_dev < opts.deviance_rtol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("logistic fit did not converge in {} iterations", opts.max_iter);
    }
    let wk = working(x, y, w, &beta);
    let qr = weighted_qr(x, &wk.sw, None, ridge);
    let bad = small_pivots(&qr.r, opts.rank_tol);
    if !bad.is_empty() && ridge.is_none() {
        return Err(DtrError::RankDeficient { columns: bad.iter().map(|&i| names[i].clone()).collect() });
    }
    let model_covariance = inverse_from_r(&qr.r)?;
    Ok(FittedGlm {
        names: names.to_vec(),
        coefficients: beta,
        model_covariance,
        robust_covariance: None,
        converged,
        iterations,
        deviance: dev,
        ridge,
    })
}

/// Working-independence sandwich: bread * (sum of per-cluster score outer
/// products) * bread, with bread the model-based covariance.
pub fn cluster_sandwich_covariance(
    fit: &FittedGlm,
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    clusters: &[usize],
) -> Result<DMatrix<f64>> {
    check_inputs(x, y, w)?;
    if clusters.len() != y.len() {
        return Err(DtrError::Data("cluster ids and rows differ in length".into()));
    }
    let p = x.ncols();
    let eta = x * &fit.coefficients;
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut sums: Vec<DVector<f64>> = Vec::new();
    for i in 0..y.len() {
        let k = *slot.entry(clusters[i]).or_insert_with(|| {
            sums.push(DVector::zeros(p));
            sums.len() - 1
        });
        let r = w[i] * (y[i] - expit(eta[i]));
        if r != 0.0 {
            let s = &mut sums[k];
            for j in 0..p {
                s[j] += r * x[(i, j)];
            }
        }
    }
    if sums.len() < 2 {
        return Err(DtrError::SingleCluster);
    }
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for u in &sums {
        meat.ger(1.0, u, u, 1.0);
    }
    let b = &fit.model_covariance;
    let v = b * meat * b;
    Ok((&v + v.transpose()) * 0.5)
}
