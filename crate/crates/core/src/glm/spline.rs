use crate::error::{DtrError, Result};

/// Natural (restricted) cubic spline basis: `t` followed by one truncated-cubic
/// term per interior knot. Linear beyond the boundary knots. Nonlinear terms
/// are scaled by the squared knot span so they stay on the scale of `t`.
pub fn spline_basis(t: f64, knots: &[f64]) -> Result<Vec<f64>> {
    let k = knots.len();
    if k < 2 {
        return Err(DtrError::DegenerateBasis(format!("need at least 2 knots, got {k}")));
    }
    if knots.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(DtrError::DegenerateBasis("knots must be strictly increasing".into()));
    }
    let mut out = Vec::with_capacity(k - 1);
    out.push(t);
    let (tk1, tk) = (knots[k - 2], knots[k - 1]);
    let scale = (tk - knots[0]).powi(2);
    let cube = |x: f64| if x > 0.0 { x * x * x } else { 0.0 };
    for &tj in &knots[..k - 2] {
        let v = cube(t - tj) - cube(t - tk1) * (tk - tj) / (tk - tk1) + cube(t - tk) * (tk1 - tj) / (tk - tk1);
        out.push(v / scale);
    }
    Ok(out)
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Default knots at the 5/35/65/95% quantiles of the observed values, with
/// duplicates removed.
pub fn default_knots(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Vec::new();
    }
    v.sort_by(f64::total_cmp);
    let mut knots: Vec<f64> = [0.05, 0.35, 0.65, 0.95].iter().map(|&q| quantile_sorted(&v, q)).collect();
    knots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    knots
}
