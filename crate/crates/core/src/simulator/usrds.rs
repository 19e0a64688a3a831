//! Synthetic dialysis-like cohort: monthly hematocrit-style markers that
//! respond to dose, dose changes that mostly follow a personal target range,
//! and a monthly hazard that falls with the marker up to a plateau.
//!
//! Because each candidate regimen holds the marker near its own target range,
//! the regimen effect on survival declines with the target midpoint until the
//! plateau and is flat beyond it.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal as NormalDist};
use serde::{Deserialize, Serialize};

use crate::error::{DtrError, Result};
use crate::glm::expit;
use crate::longitudinal_data::{BaselineCovariates, Cohort, Race, Schema, Sex, SubjectHistory, Visit};

/// Baseline covariate holding the subject's own target midpoint, as a
/// facility dosing protocol would record it.
pub const TARGET_KEY: &str = "target_mid";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UsrdsLikeConfig {
    pub n_subjects: usize,
    /// Visits 0..=last_month.
    pub last_month: u32,
    /// Personal target midpoints, drawn uniformly.
    pub target_midpoints: Vec<f64>,
    /// Monthly log-odds of death at marker 33.
    pub base_logit: f64,
    /// Log-odds change per marker unit below the plateau.
    pub marker_slope: f64,
    /// Marker level above which the hazard no longer falls.
    pub plateau: f64,
    /// Log-odds of an off-rule dose change at marker 33.
    pub deviation_logit: f64,
    /// Change in those log-odds per marker unit below 33.
    pub deviation_slope: f64,
    pub ltfu_rate: f64,
    pub missing_marker_rate: f64,
}

impl Default for UsrdsLikeConfig {
    fn default() -> UsrdsLikeConfig {
        UsrdsLikeConfig {
            n_subjects: 50_000,
            last_month: 12,
            target_midpoints: (30..=40).map(f64::from).collect(),
            base_logit: -3.9,
            marker_slope: -0.25,
            plateau: 34.0,
            deviation_logit: -2.8,
            deviation_slope: 0.1,
            ltfu_rate: 0.01,
            missing_marker_rate: 0.02,
        }
    }
}

/// Marker relaxes toward 33 + 6 ln(dose) with noise.
fn next_marker<R: Rng>(rng: &mut R, marker: f64, dose: f64) -> f64 {
    let noise = NormalDist::new(0.0, 1.2).expect("valid sd");
    0.5 * marker + 0.5 * (33.0 + 6.0 * dose.max(1e-3).ln()) + noise.sample(rng)
}

/// Monthly event probability at a marker value.
pub fn monthly_hazard(cfg: &UsrdsLikeConfig, marker: f64, age: f64) -> f64 {
    expit(cfg.base_logit + cfg.marker_slope * (marker.min(cfg.plateau) - 33.0) + 0.01 * (age - 60.0))
}

/// Personal dose rule around target x: cut below 0.75 when above x+3,
/// stay within ±20% inside, raise by more than 25% below x-3. Off-rule
/// changes happen more often at low markers.
fn next_dose<R: Rng>(rng: &mut R, cfg: &UsrdsLikeConfig, x: f64, marker: f64, dose: f64) -> f64 {
    let deviate = rng.random::<f64>() < expit(cfg.deviation_logit + cfg.deviation_slope * (33.0 - marker));
    let ratio = if deviate {
        rng.random_range(0.5..1.6)
    } else if marker > x + 3.0 {
        rng.random_range(0.55..0.74)
    } else if marker < x - 3.0 {
        rng.random_range(1.26..1.6)
    } else {
        rng.random_range(0.8..1.2)
    };
    ((dose * ratio * 100.0).round() / 100.0).max(0.05)
}

pub fn simulate_usrds_like<R: Rng>(rng: &mut R, cfg: &UsrdsLikeConfig) -> Result<Cohort> {
    if cfg.target_midpoints.is_empty() || cfg.n_subjects == 0 {
        return Err(DtrError::Config("need target midpoints and subjects".into()));
    }
    let age_dist = NormalDist::new(62.0, 14.0).expect("valid sd");
    let start = NormalDist::new(31.0, 3.0).expect("valid sd");
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    for i in 0..cfg.n_subjects {
        let age = f64::clamp(age_dist.sample(rng), 18.0, 95.0);
        let baseline = BaselineCovariates {
            sex: if rng.random::<f64>() < 0.55 { Sex::Male } else { Sex::Female },
            age,
            race: match rng.random_range(0..10) {
                0..=5 => Race::White,
                6..=8 => Race::Black,
                _ => Race::Other,
            },
            diabetes: rng.random::<f64>() < 0.45,
            hypertension: rng.random::<f64>() < 0.3,
            extra: BTreeMap::new(),
        };
        let x = cfg.target_midpoints[rng.random_range(0..cfg.target_midpoints.len())];
        let mut baseline = baseline;
        baseline.extra.insert(TARGET_KEY.into(), x);
        let mut marker: f64 = start.sample(rng);
        let mut dose = (rng.random_range(0.6..1.6_f64) * 100.0).round() / 100.0;
        let mut visits = Vec::new();
        let mut event_time = None;
        let mut last = 0;
        for t in 0..=cfg.last_month {
            if t > 0 {
                dose = next_dose(rng, cfg, x, marker, dose);
            }
            let recorded = (t == 0 || rng.random::<f64>() >= cfg.missing_marker_rate).then_some((marker * 10.0).round() / 10.0);
            visits.push(Visit { t, marker: recorded, dose: Some(dose), aux: BTreeMap::new() });
            last = t;
            if rng.random::<f64>() < monthly_hazard(cfg, marker, age) {
                event_time = Some(t as f64 + rng.random_range(0.01..1.0));
                break;
            }
            if t == cfg.last_month || rng.random::<f64>() < cfg.ltfu_rate {
                break;
            }
            marker = next_marker(rng, marker, dose);
        }
        subjects.push(SubjectHistory {
            id: format!("u{i:06}"),
            baseline,
            visits,
            event_observed: event_time.is_some(),
            event_time,
            last_followup: last,
        });
    }
    Cohort::new(subjects, Schema { baseline_extra: vec![TARGET_KEY.into()], aux: Vec::new() })
}
