//! Weighted log-rank test for two regimens on cloned (paired) survival data.
//!
//! Time is the discrete visit grid. A clone is at risk at `t` when its entry
//! visit is at most `t` and `t <= X` (so it is at risk at its own event time).
//! The variance comes from per-subject influence contributions, differenced
//! within each subject to carry the correlation between its two clones.

use std::collections::BTreeMap;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{DtrError, Result};
use crate::longitudinal_data::Cohort;
use crate::regimen::CloneTable;

/// One clone's observed follow-up in one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmObs {
    /// First visit at risk.
    pub entry: u32,
    /// Last uncensored visit (event or censoring time).
    pub x: u32,
    pub delta: bool,
    /// Weights for t = entry..=x.
    pub weights: Vec<f64>,
}

impl ArmObs {
    pub fn weight_at(&self, t: u32) -> Option<f64> {
        if t < self.entry || t > self.x {
            return None;
        }
        self.weights.get((t - self.entry) as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairedSurvival {
    /// Per subject, the clone in arm 1 and arm 2 (either may be absent).
    pub subjects: Vec<[Option<ArmObs>; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedProcesses {
    /// Grid start; index j corresponds to time `t0 + j`.
    pub t0: u32,
    pub at_risk: Vec<f64>,
    pub deaths: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelsonPath {
    pub t0: u32,
    pub cumhaz: Vec<f64>,
    /// Times with weighted deaths but no weighted at-risk mass.
    pub skipped: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRankResult {
    pub wstar: f64,
    pub sigma2_hat: f64,
    pub z: f64,
    pub p_value: f64,
    pub tau: u32,
    pub n: usize,
    /// Set when both W* and the variance are zero; p is then reported as 1.
    pub degenerate: bool,
}

impl PairedSurvival {
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    fn grid(&self) -> Option<(u32, u32)> {
        let arms = self.subjects.iter().flat_map(|s| s.iter().flatten());
        let mut lo = u32::MAX;
        let mut hi = 0;
        let mut any = false;
        for a in arms {
            any = true;
            lo = lo.min(a.entry);
            hi = hi.max(a.x);
        }
        any.then_some((lo, hi))
    }

    /// Swap arm labels.
    pub fn swapped(&self) -> PairedSurvival {
        PairedSurvival { subjects: self.subjects.iter().map(|[a, b]| [b.clone(), a.clone()]).collect() }
    }

    /// Build from a weighted clone table: arm 1 = regimen `a`, arm 2 = `b`.
    /// Censored rows are dropped; when `weighted` each kept row needs `w_total`.
    pub fn from_clones(clones: &CloneTable, cohort: &Cohort, a: u32, b: u32, weighted: bool) -> Result<PairedSurvival> {
        let mut by_subject: BTreeMap<usize, [Option<ArmObs>; 2]> = BTreeMap::new();
        for span in clones.spans() {
            let arm = if span.regimen_id == a {
                0
            } else if span.regimen_id == b {
                1
            } else {
                continue;
            };
            let rows: Vec<_> = clones.rows[span.start..span.end].iter().filter(|r| r.adherent).collect();
            let Some(last) = rows.last() else { continue };
            let mut weights = Vec::with_capacity(rows.len());
            for r in &rows {
                let w = if weighted {
                    r.w_total.ok_or_else(|| DtrError::MissingWeight {
                        subject: cohort.subjects[r.subject].id.clone(),
                        regimen: r.regimen_id,
                        t: r.t,
                    })?
                } else {
                    1.0
                };
                weights.push(w);
            }
            let obs = ArmObs { entry: rows[0].t, x: last.t, delta: last.event, weights };
            by_subject.entry(span.subject).or_default()[arm] = Some(obs);
        }
        Ok(PairedSurvival { subjects: by_subject.into_values().collect() })
    }

    /// Build from flat records `(subject key, regimen, t, censored, event, weight)`
    /// such as a weighted clone table read back from disk.
    pub fn from_records<I>(records: I, a: u32, b: u32) -> Result<PairedSurvival>
    where
        I: IntoIterator<Item = (String, u32, u32, bool, bool, f64)>,
    {
        let mut by_subject: BTreeMap<String, [Vec<(u32, bool, f64)>; 2]> = BTreeMap::new();
        for (s, k, t, censored, event, w) in records {
            let arm = if k == a {
                0
            } else if k == b {
                1
            } else {
                continue;
            };
            if censored {
                continue;
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(DtrError::Data(format!("subject {s}, regimen {k}, t={t}: weight {w} not positive")));
            }
            by_subject.entry(s).or_default()[arm].push((t, event, w));
        }
        let mut subjects = Vec::with_capacity(by_subject.len());
        for (s, arms) in by_subject {
            let mut pair: [Option<ArmObs>; 2] = [None, None];
            for (k, mut rows) in arms.into_iter().enumerate() {
                if rows.is_empty() {
                    continue;
                }
                rows.sort_by_key(|r| r.0);
                if rows.windows(2).any(|w| w[1].0 != w[0].0 + 1) {
                    return Err(DtrError::Data(format!("subject {s}: clone rows are not consecutive visits")));
                }
                let last = rows[rows.len() - 1];
                pair[k] = Some(ArmObs { entry: rows[0].0, x: last.0, delta: last.1, weights: rows.iter().map(|r| r.2).collect() });
            }
            subjects.push(pair);
        }
        Ok(PairedSurvival { subjects })
    }
}

/// Weighted at-risk mass and weighted deaths for arm `k` (0 or 1).
pub fn weighted_processes(data: &PairedSurvival, k: usize) -> WeightedProcesses {
    let Some((t0, t1)) = data.grid() else {
        return WeightedProcesses { t0: 0, at_risk: Vec::new(), deaths: Vec::new() };
    };
    let len = (t1 - t0 + 1) as usize;
    let mut at_risk = vec![0.0; len];
    let mut deaths = vec![0.0; len];
    for obs in data.subjects.iter().filter_map(|s| s[k].as_ref()) {
        for (j, &w) in obs.weights.iter().enumerate() {
            at_risk[(obs.entry - t0) as usize + j] += w;
        }
        if obs.delta {
            deaths[(obs.x - t0) as usize] += obs.weights[obs.weights.len() - 1];
        }
    }
    WeightedProcesses { t0, at_risk, deaths }
}

/// Weighted Nelson cumulative hazard for arm `k`.
pub fn weighted_nelson(data: &PairedSurvival, k: usize) -> NelsonPath {
    let p = weighted_processes(data, k);
    let mut acc = 0.0;
    let mut skipped = Vec::new();
    let cumhaz = p
        .at_risk
        .iter()
        .zip(&p.deaths)
        .enumerate()
        .map(|(j, (&y, &d))| {
            if y > 0.0 {
                acc += d / y;
            } else if d > 0.0 {
                skipped.push(p.t0 + j as u32);
            }
            acc
        })
        .collect();
    NelsonPath { t0: p.t0, cumhaz, skipped }
}

struct Usable {
    t0: u32,
    p1: WeightedProcesses,
    p2: WeightedProcesses,
    ok: Vec<bool>,
    tau: u32,
}

fn usable(data: &PairedSurvival) -> Result<Usable> {
    let (p1, p2) = (weighted_processes(data, 0), weighted_processes(data, 1));
    let ok: Vec<bool> = p1.at_risk.iter().zip(&p2.at_risk).map(|(&a, &b)| a > 0.0 && b > 0.0).collect();
    let last = ok.iter().rposition(|&v| v).ok_or(DtrError::TauUndefined)?;
    let t0 = p1.t0;
    let events: f64 = (0..=last).filter(|&j| ok[j]).map(|j| p1.deaths[j] + p2.deaths[j]).sum();
    if events <= 0.0 {
        return Err(DtrError::Data("log-rank test needs at least one event while both arms are at risk".into()));
    }
    Ok(Usable { t0, p1, p2, ok, tau: t0 + last as u32 })
}

/// W* = n^{-1/2} sum_t [d1 - Y1 (d1+d2)/(Y1+Y2)] over times where both arms are at risk.
pub fn wstar(data: &PairedSurvival) -> Result<f64> {
    let u = usable(data)?;
    Ok(wstar_from(&u, data.n()))
}

fn wstar_from(u: &Usable, n: usize) -> f64 {
    let mut s = 0.0;
    for j in 0..u.ok.len() {
        if u.ok[j] {
            let (y1, y2, d1, d2) = (u.p1.at_risk[j], u.p2.at_risk[j], u.p1.deaths[j], u.p2.deaths[j]);
            s += (d1 * y2 - d2 * y1) / (y1 + y2);
        }
    }
    s / (n as f64).sqrt()
}

fn influence(obs: &ArmObs, u: &Usable, coef: &[f64], g: &[f64]) -> f64 {
    let mut e = 0.0;
    let last = obs.x.min(u.tau);
    if obs.entry > last {
        return 0.0;
    }
    for t in obs.entry..=last {
        let j = (t - u.t0) as usize;
        if u.ok[j] {
            let w = obs.weights[(t - obs.entry) as usize];
            e -= w * g[j];
            if obs.delta && t == obs.x {
                e += w * coef[j];
            }
        }
    }
    e
}

/// sigma^2 = n^{-1} sum_i (e_i1 - e_i2)^2 with e_ik the subject's plug-in
/// influence contribution in arm k.
pub fn variance_estimate(data: &PairedSurvival) -> Result<f64> {
    if data.n() < 2 {
        return Err(DtrError::Data("variance needs at least two subjects".into()));
    }
    let u = usable(data)?;
    Ok(variance_from(&u, data))
}

fn variance_from(u: &Usable, data: &PairedSurvival) -> f64 {
    let m = u.ok.len();
    // c_k(t) = Y_other/(Y1+Y2); g_k(t) = c_k(t) d_k(t)/Y_k(t)
    let mut c = [vec![0.0; m], vec![0.0; m]];
    let mut g = [vec![0.0; m], vec![0.0; m]];
    for j in 0..m {
        if !u.ok[j] {
            continue;
        }
        let (y1, y2) = (u.p1.at_risk[j], u.p2.at_risk[j]);
        c[0][j] = y2 / (y1 + y2);
        c[1][j] = y1 / (y1 + y2);
        g[0][j] = c[0][j] * u.p1.deaths[j] / y1;
        g[1][j] = c[1][j] * u.p2.deaths[j] / y2;
    }
    let total: f64 = data
        .subjects
        .iter()
        .map(|pair| {
            let e1 = pair[0].as_ref().map_or(0.0, |o| influence(o, u, &c[0], &g[0]));
            let e2 = pair[1].as_ref().map_or(0.0, |o| influence(o, u, &c[1], &g[1]));
            (e1 - e2).powi(2)
        })
        .sum();
    total / data.n() as f64
}

/// Full test: W*, variance, z and two-sided normal p-value.
pub fn test(data: &PairedSurvival) -> Result<LogRankResult> {
    if data.n() < 2 {
        return Err(DtrError::Data("log-rank test needs at least two subjects".into()));
    }
    let u = usable(data)?;
    let w = wstar_from(&u, data.n());
    let s2 = variance_from(&u, data);
    let scale: f64 = u.p1.deaths.iter().chain(&u.p2.deaths).sum::<f64>() / (data.n() as f64).sqrt();
    let tiny = 1e-12 * scale.max(1e-300);
    if s2 <= tiny * tiny {
        if w.abs() <= tiny {
            return Ok(LogRankResult { wstar: w, sigma2_hat: s2, z: 0.0, p_value: 1.0, tau: u.tau, n: data.n(), degenerate: true });
        }
        return Err(DtrError::DegenerateVariance { wstar: w });
    }
    let z = w / s2.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p_value = (2.0 * normal.cdf(-z.abs())).min(1.0);
    Ok(LogRankResult { wstar: w, sigma2_hat: s2, z, p_value, tau: u.tau, n: data.n(), degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(x: u32, delta: bool, w: f64) -> ArmObs {
        ArmObs { entry: 0, x, delta, weights: vec![w; x as usize + 1] }
    }

    #[test]
    fn unit_weights_give_counts() {
        let d = PairedSurvival {
            subjects: vec![[Some(obs(2, true, 1.0)), None], [Some(obs(4, false, 1.0)), None], [None, Some(obs(1, true, 1.0))]],
        };
        let p = weighted_processes(&d, 0);
        assert_eq!(p.at_risk, vec![2.0, 2.0, 2.0, 1.0, 1.0]);
        assert_eq!(p.deaths, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn weighted_death_uses_event_time_weight() {
        let mut o = obs(2, true, 1.0);
        o.weights[2] = 2.0;
        let d = PairedSurvival { subjects: vec![[Some(o), None]] };
        assert_eq!(weighted_processes(&d, 0).deaths[2], 2.0);
    }

    #[test]
    fn nelson_reduces_to_classic() {
        let d = PairedSurvival {
            subjects: vec![[Some(obs(1, true, 1.0)), None], [Some(obs(2, true, 1.0)), None], [Some(obs(3, false, 1.0)), None]],
        };
        let n = weighted_nelson(&d, 0);
        assert!((n.cumhaz[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((n.cumhaz[2] - (1.0 / 3.0 + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn symmetric_pairs_are_degenerate() {
        let subjects = (0..5).map(|i| [Some(obs(i + 1, i % 2 == 0, 1.3)), Some(obs(i + 1, i % 2 == 0, 1.3))]).collect();
        let d = PairedSurvival { subjects };
        assert_eq!(wstar(&d).unwrap(), 0.0);
        let r = test(&d).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn no_overlap_errors() {
        let d = PairedSurvival { subjects: vec![[Some(obs(2, true, 1.0)), None], [Some(obs(1, true, 1.0)), None]] };
        assert!(matches!(wstar(&d), Err(DtrError::TauUndefined)));
    }
}
