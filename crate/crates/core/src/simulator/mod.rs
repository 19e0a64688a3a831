//! Simulation studies with known structural hazard ratios.
//!
//! Each subject is native to one of K regimens and follows it until death.
//! Adherence to the neighbouring regimens is drawn visit by visit and then
//! written into marker and dose series so that the regular cloning pipeline
//! recovers exactly the drawn adherence. A scalar baseline covariate `v`
//! raises both the hazard (through a Gaussian copula on the event time) and,
//! under selection bias, the probability of staying coadherent.

mod calibrate;
mod selection;
pub mod usrds;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{DtrError, Result};
use crate::glm::DesignSpec;
use crate::longitudinal_data::{BaselineCovariates, Cohort, Race, Schema, Sex, SubjectHistory, Visit};
use crate::msm::{build_person_time, fit_msm, hazard_ratio, Comparison, EffectForm, MsmSpec, Z975};
use crate::regimen::{clone_cohort, usrds_family, CloneOptions, CloneTable, RegimenGrid};
use crate::weights::{attach_weights, combine_weights, compute_stabilized_weights, fit_adherence_models, WeightModelSpec};

pub use calibrate::{calibrate_rates, cell_log_hr, closed_form_cells, Calibration, Cell, CALIBRATION_RTOL};
pub use selection::SelectionModel;

/// Baseline covariate holding the native regimen id.
pub const NATIVE_KEY: &str = "native_regimen";
/// Baseline covariate holding the selection-bias covariate.
pub const V_KEY: &str = "v";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasLevel {
    #[default]
    None,
    Moderate,
    Severe,
}

impl std::str::FromStr for BiasLevel {
    type Err = DtrError;

    fn from_str(s: &str) -> Result<BiasLevel> {
        match s {
            "none" => Ok(BiasLevel::None),
            "moderate" => Ok(BiasLevel::Moderate),
            "severe" => Ok(BiasLevel::Severe),
            other => Err(DtrError::Config(format!("unknown bias level `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Number of regimens K; ids are 1..=K.
    pub k: usize,
    pub n_per_regimen: usize,
    /// λ_k / λ_ref per regimen.
    pub target_hr: Vec<f64>,
    pub reference: u32,
    /// Comparisons (against the reference) that the study reports.
    pub reported: Vec<u32>,
    /// Regimens whose rates are solved for during calibration.
    pub calibrated: Vec<u32>,
    pub lambda_ref: f64,
    /// q[native][target], 0-indexed; per-visit probability of staying adherent.
    pub coadherence: Vec<Vec<f64>>,
    pub bias_level: BiasLevel,
    pub gamma_moderate: f64,
    pub gamma_severe: f64,
    /// Coadherence pairs that depend on `v`, with the sign and relative size
    /// of the dependence.
    pub selection: Vec<SelectionLoading>,
    /// Correlation between `v` and the latent normal driving the event time.
    pub v_rho: f64,
    /// Follow-up months; visits run 0..horizon.
    pub horizon: u32,
    pub replications: usize,
    pub seed: u64,
    /// Regimen k is G(p[k], x[k]-3, x[k]+3).
    pub regimen_p: Vec<f64>,
    pub regimen_x: Vec<f64>,
}

/// Selection on `v` for clones of `target` among subjects native to `native`:
/// the per-visit log-odds of staying adherent move by `loading · γ · v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionLoading {
    pub native: u32,
    pub target: u32,
    pub loading: f64,
}

/// Clones of regimens 4 and 5 keep the subjects who die sooner, and native-4
/// clones of the reference keep those who live longer. The smaller opposite
/// pull on native-1 clones of regimen 2 leaves the 2-vs-3 comparison
/// close to unbiased.
fn default_selection() -> Vec<SelectionLoading> {
    let pair = |native, target, loading| SelectionLoading { native, target, loading };
    vec![
        pair(3, 4, 1.0),
        pair(5, 4, 1.0),
        pair(4, 5, 1.0),
        pair(6, 5, 1.0),
        pair(4, 3, -1.0),
        pair(1, 2, -0.35),
    ]
}

impl Default for SimConfig {
    fn default() -> SimConfig {
        SimConfig::desk(BiasLevel::None)
    }
}

impl SimConfig {
    /// Six regimens, n_k = 500, 200 replications.
    pub fn desk(bias_level: BiasLevel) -> SimConfig {
        SimConfig {
            k: 6,
            n_per_regimen: 500,
            target_hr: vec![0.8, 0.91, 1.0, 1.17, 1.28, 1.45],
            reference: 3,
            reported: vec![2, 4, 5],
            calibrated: vec![1, 6],
            lambda_ref: 0.06,
            coadherence: vec![
                vec![1.0, 0.8826, 0.0, 0.0, 0.0, 0.0],
                vec![0.9012, 1.0, 0.9843, 0.0, 0.0, 0.0],
                vec![0.0, 0.915, 1.0, 0.5704, 0.0, 0.0],
                vec![0.0, 0.0, 0.5631, 1.0, 0.8756, 0.0],
                vec![0.0, 0.0, 0.0, 0.9839, 1.0, 0.8991],
                vec![0.0, 0.0, 0.0, 0.0, 0.92, 1.0],
            ],
            bias_level,
            gamma_moderate: 0.8,
            gamma_severe: 2.5,
            selection: default_selection(),
            v_rho: 0.9,
            horizon: 12,
            replications: 200,
            seed: 20140601,
            regimen_p: (1..=6).map(|k| 0.03 * k as f64).collect(),
            regimen_x: (1..=6).map(|k| 26.0 + 4.0 * k as f64).collect(),
        }
    }

    /// Published scale: n_k = 2500, 500 replications.
    pub fn full_scale(bias_level: BiasLevel) -> SimConfig {
        SimConfig { n_per_regimen: 2500, replications: 500, ..SimConfig::desk(bias_level) }
    }

    pub fn gamma(&self) -> f64 {
        match self.bias_level {
            BiasLevel::None => 0.0,
            BiasLevel::Moderate => self.gamma_moderate,
            BiasLevel::Severe => self.gamma_severe,
        }
    }

    fn idx(&self, id: u32) -> Result<usize> {
        if id == 0 || id as usize > self.k {
            return Err(DtrError::Config(format!("regimen {id} outside 1..={}", self.k)));
        }
        Ok(id as usize - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k;
        if k < 2 {
            return Err(DtrError::Config("need at least two regimens".into()));
        }
        if self.n_per_regimen == 0 {
            return Err(DtrError::Config("n_per_regimen must be positive".into()));
        }
        if self.target_hr.len() != k || self.regimen_p.len() != k || self.regimen_x.len() != k {
            return Err(DtrError::Config(format!("target_hr, regimen_p and regimen_x need {k} entries")));
        }
        let r = self.idx(self.reference)?;
        if (self.target_hr[r] - 1.0).abs() > 1e-12 {
            return Err(DtrError::Config("target_hr of the reference must be 1".into()));
        }
        if self.target_hr.iter().any(|&h| !(h > 0.0)) || !(self.lambda_ref > 0.0) {
            return Err(DtrError::Config("rates must be positive".into()));
        }
        for &id in self.reported.iter().chain(&self.calibrated) {
            self.idx(id)?;
        }
        for s in &self.selection {
            self.idx(s.native)?;
            self.idx(s.target)?;
            if s.native == s.target || !s.loading.is_finite() {
                return Err(DtrError::Config(format!(
                    "selection pair {} -> {} needs distinct regimens and a finite loading",
                    s.native, s.target
                )));
            }
        }
        if self.calibrated.contains(&self.reference) {
            return Err(DtrError::Config("the reference rate is fixed".into()));
        }
        if self.coadherence.len() != k || self.coadherence.iter().any(|row| row.len() != k) {
            return Err(DtrError::Config(format!("coadherence must be {k} x {k}")));
        }
        for (i, row) in self.coadherence.iter().enumerate() {
            if row.iter().any(|q| !(0.0..=1.0).contains(q)) {
                return Err(DtrError::Config("coadherence entries must lie in [0, 1]".into()));
            }
            if row[i] != 1.0 {
                return Err(DtrError::Config("coadherence diagonal must be 1".into()));
            }
        }
        if !(self.v_rho.abs() < 1.0) {
            return Err(DtrError::Config("v_rho must lie in (-1, 1)".into()));
        }
        if self.horizon == 0 {
            return Err(DtrError::Config("horizon must be positive".into()));
        }
        Ok(())
    }

    /// Extra conditions for writing adherence into marker and dose series:
    /// only adjacent regimens may coadhere, targets are spaced by 4 with width
    /// 6, and the maintain band (±25%) contains every realized dose ratio.
    pub fn validate_realizable(&self) -> Result<()> {
        self.validate()?;
        for (i, row) in self.coadherence.iter().enumerate() {
            for (j, &q) in row.iter().enumerate() {
                if q > 0.0 && i.abs_diff(j) > 1 {
                    return Err(DtrError::Config(format!(
                        "coadherence between non-adjacent regimens {} and {} cannot be realized",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        if self.regimen_x.windows(2).any(|w| (w[1] - w[0] - 4.0).abs() > 1e-12) {
            return Err(DtrError::Config("regimen midpoints must be spaced by 4".into()));
        }
        if self.regimen_p.windows(2).any(|w| !(w[0] < w[1])) || self.regimen_p[0] <= 0.0 {
            return Err(DtrError::Config("regimen p must be positive and increasing".into()));
        }
        if self.regimen_p[self.k - 1] + 0.01 > 0.25 {
            return Err(DtrError::Config("regimen p must stay below 0.24 to realize coadherence".into()));
        }
        Ok(())
    }

    pub fn regimen_grid(&self) -> Result<RegimenGrid> {
        let specs = (0..self.k)
            .map(|i| usrds_family(self.regimen_p[i], self.regimen_x[i], i as u32 + 1))
            .collect::<Result<Vec<_>>>()?;
        RegimenGrid::new(specs, self.reference)
    }

    /// Weight model: adherence given time, native regimen and `v`; the
    /// numerator omits `v`. Native clones are adherent by construction.
    pub fn weight_spec(&self) -> WeightModelSpec {
        // Stay probabilities given native regimen are constant over visits;
        // selection on v bends each native's intercept path differently.
        let num = ["1", "cat(native_regimen)"];
        let den = [
            "1",
            "t",
            "logt",
            "cat(native_regimen)",
            "cat(native_regimen):t",
            "cat(native_regimen):logt",
            "v",
        ];
        WeightModelSpec {
            numerator: DesignSpec::parse(&num).expect("valid terms"),
            denominator: DesignSpec::parse(&den).expect("valid terms"),
            stratify_by_regimen: true,
            truncation: None,
            structural_key: Some(NATIVE_KEY.into()),
        }
    }
}

/// Event time and covariate of one simulated subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSubject {
    /// Native regimen id.
    pub native: u32,
    pub v: f64,
    pub event_time: f64,
    /// Last visit with a row: min(ceil(T) - 1, horizon - 1).
    pub last_visit: u32,
}

impl SimSubject {
    pub fn event_observed(&self, horizon: u32) -> bool {
        self.event_time <= horizon as f64
    }

    /// Native adherence: 1 at every visit through the last one.
    pub fn native_adherence(&self) -> Vec<bool> {
        vec![true; self.last_visit as usize + 1]
    }
}

/// Exponential event time with rate λ_native; `v` is correlated with the
/// latent normal so that larger `v` means earlier events.
pub fn generate_subject<R: Rng>(rng: &mut R, native: u32, rates: &[f64], cfg: &SimConfig) -> SimSubject {
    let z: f64 = rng.sample(StandardNormal);
    let e: f64 = rng.sample(StandardNormal);
    let upper = Normal::standard().cdf(-z);
    // U = Φ(z); T = -ln U / λ, written to stay accurate when U is near 1.
    let event_time = -(-upper).ln_1p() / rates[native as usize - 1];
    let v = cfg.v_rho * z + (1.0 - cfg.v_rho * cfg.v_rho).sqrt() * e;
    let last_visit = ((event_time.ceil() as u32).max(1) - 1).min(cfg.horizon - 1);
    SimSubject { native, v, event_time, last_visit }
}

/// Intended adherence of every clone, indexed [regimen - 1][visit].
#[derive(Debug, Clone, PartialEq)]
pub struct IntendedAdherence(pub Vec<Vec<bool>>);

impl IntendedAdherence {
    /// First nonadherent visit for a regimen, if any.
    pub fn censor_visit(&self, regimen: u32) -> Option<u32> {
        self.0[regimen as usize - 1].iter().position(|a| !a).map(|t| t as u32)
    }
}

/// Draws adherence to the K-1 non-native regimens. A(0) = 1 for every clone;
/// afterwards each visit is kept with the selection model's probability and
/// the first failure censors the clone for good.
pub fn simulate_coadherence<R: Rng>(
    rng: &mut R,
    subject: &SimSubject,
    cfg: &SimConfig,
    selection: &SelectionModel,
) -> IntendedAdherence {
    let n_visits = subject.last_visit as usize + 1;
    let mut out = Vec::with_capacity(cfg.k);
    for target in 1..=cfg.k as u32 {
        let mut a = vec![false; n_visits];
        a[0] = true;
        if target == subject.native {
            a.fill(true);
        } else {
            for t in 1..n_visits {
                let p = selection.probability(cfg, subject.native, target, t as u32, subject.v);
                if !a[t - 1] || p <= 0.0 {
                    break;
                }
                a[t] = p >= 1.0 || rng.random::<f64>() < p;
            }
        }
        out.push(a);
    }
    IntendedAdherence(out)
}

/// Marker and dose series realizing `intended` under the simulation grid.
///
/// With native midpoint x, from visit 1 on: marker x-2 keeps the left
/// neighbour within target, x+2 keeps the right one; a right neighbour kept
/// together with the left needs an increase of at least its p, which the dose
/// ratio supplies while staying below the p of the regimen after it.
pub fn realize_visits(subject: &SimSubject, intended: &IntendedAdherence, cfg: &SimConfig) -> Vec<Visit> {
    let k = subject.native as usize - 1;
    let x = cfg.regimen_x[k];
    let p = &cfg.regimen_p;
    let mut visits = Vec::with_capacity(subject.last_visit as usize + 1);
    let mut dose = 1.0;
    visits.push(Visit { t: 0, marker: Some(x), dose: Some(dose), aux: BTreeMap::new() });
    for t in 1..=subject.last_visit as usize {
        let left = k > 0 && intended.0[k - 1][t];
        let right = k + 1 < cfg.k && intended.0[k + 1][t];
        let (marker, ratio) = match (left, right) {
            (true, true) => {
                let r = match p.get(k + 2) {
                    Some(p2) => 1.0 + 0.5 * (p[k + 1] + p2),
                    None => 1.0 + p[k + 1] + 0.01,
                };
                (x - 2.0, r)
            }
            (true, false) => (x - 2.0, 1.0),
            (false, true) => (x + 2.0, 1.0),
            (false, false) => (x, 1.0),
        };
        dose *= ratio;
        visits.push(Visit { t: t as u32, marker: Some(marker), dose: Some(dose), aux: BTreeMap::new() });
    }
    visits
}

fn subject_history(index: usize, subject: &SimSubject, intended: &IntendedAdherence, cfg: &SimConfig) -> SubjectHistory {
    let mut extra = BTreeMap::new();
    extra.insert(V_KEY.to_string(), subject.v);
    extra.insert(NATIVE_KEY.to_string(), subject.native as f64);
    SubjectHistory {
        id: format!("k{}-{index:06}", subject.native),
        baseline: BaselineCovariates {
            sex: if index.is_multiple_of(2) { Sex::Female } else { Sex::Male },
            age: 60.0,
            race: Race::White,
            diabetes: false,
            hypertension: false,
            extra,
        },
        visits: realize_visits(subject, intended, cfg),
        event_time: Some(subject.event_time),
        last_followup: subject.last_visit,
        event_observed: subject.event_observed(cfg.horizon),
    }
}

/// A simulated cohort with its generating quantities.
#[derive(Debug, Clone)]
pub struct SimCohort {
    pub cohort: Cohort,
    pub subjects: Vec<SimSubject>,
    pub intended: Vec<IntendedAdherence>,
}

/// n_per_regimen subjects per native regimen, natives in id order.
pub fn simulate_cohort<R: Rng>(rng: &mut R, cfg: &SimConfig, rates: &[f64], selection: &SelectionModel) -> Result<SimCohort> {
    cfg.validate_realizable()?;
    let n = cfg.n_per_regimen * cfg.k;
    let mut subjects = Vec::with_capacity(n);
    let mut intended = Vec::with_capacity(n);
    let mut histories = Vec::with_capacity(n);
    for native in 1..=cfg.k as u32 {
        for _ in 0..cfg.n_per_regimen {
            let s = generate_subject(rng, native, rates, cfg);
            let a = simulate_coadherence(rng, &s, cfg, selection);
            histories.push(subject_history(histories.len(), &s, &a, cfg));
            subjects.push(s);
            intended.push(a);
        }
    }
    let schema = Schema { baseline_extra: vec![V_KEY.into(), NATIVE_KEY.into()], aux: Vec::new() };
    Ok(SimCohort { cohort: Cohort::new(histories, schema)?, subjects, intended })
}

/// Deterministic stream for one replication.
pub fn replication_rng(seed: u64, replication: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replication as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    CompleteData,
    ClonesUnweighted,
    ClonesWeighted,
}

impl Analysis {
    pub const ALL: [Analysis; 3] = [Analysis::CompleteData, Analysis::ClonesUnweighted, Analysis::ClonesWeighted];

    pub fn name(self) -> &'static str {
        match self {
            Analysis::CompleteData => "complete_data",
            Analysis::ClonesUnweighted => "clones_unweighted",
            Analysis::ClonesWeighted => "clones_weighted",
        }
    }
}

impl std::str::FromStr for Analysis {
    type Err = DtrError;

    fn from_str(s: &str) -> Result<Analysis> {
        Analysis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| DtrError::Data(format!("unknown analysis `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub replication: usize,
    pub comparison: u32,
    pub analysis: Analysis,
    pub log_hr: f64,
    pub se: f64,
}

fn native_only(clones: &CloneTable, cohort: &Cohort) -> CloneTable {
    let rows = clones
        .rows
        .iter()
        .filter(|r| cohort.subjects[r.subject].baseline.value(NATIVE_KEY) == Some(r.regimen_id as f64))
        .cloned()
        .collect();
    CloneTable { rows, ..clones.clone() }
}

fn estimates_for(
    replication: usize,
    analysis: Analysis,
    clones: &CloneTable,
    cohort: &Cohort,
    weighted: bool,
    spec: &MsmSpec,
    cfg: &SimConfig,
) -> Result<Vec<Estimate>> {
    let table = build_person_time(clones, cohort, weighted)?;
    let fit = fit_msm(&table, spec)?;
    cfg.reported
        .iter()
        .map(|&k| {
            let h = hazard_ratio(&fit, Comparison::Pair(k, cfg.reference), None)?;
            Ok(Estimate { replication, comparison: k, analysis, log_hr: h.log_hr, se: h.se })
        })
        .collect()
}

/// One replication through the regular pipeline: clone, weight, fit the
/// factor MSM for the complete data, the unweighted clones and the weighted
/// clones.
pub fn run_replication(cfg: &SimConfig, rates: &[f64], replication: usize) -> Result<Vec<Estimate>> {
    let wrap = |analysis: &str| {
        let analysis = analysis.to_string();
        move |e: DtrError| DtrError::Replication { replication: replication as u64, analysis: analysis.clone(), source: Box::new(e) }
    };
    let mut rng = replication_rng(cfg.seed, replication);
    let selection = SelectionModel::new(cfg, rates, cfg.gamma());
    let sim = simulate_cohort(&mut rng, cfg, rates, &selection).map_err(wrap("generation"))?;
    let grid = cfg.regimen_grid()?;
    let cohort = &sim.cohort;
    let mut clones = clone_cohort(cohort, &grid, 0, &CloneOptions::default());
    let spec = MsmSpec::new(EffectForm::Factor, &grid, 0);

    let mut out = Vec::new();
    let complete = native_only(&clones, cohort);
    out.extend(
        estimates_for(replication, Analysis::CompleteData, &complete, cohort, false, &spec, cfg)
            .map_err(wrap(Analysis::CompleteData.name()))?,
    );
    out.extend(
        estimates_for(replication, Analysis::ClonesUnweighted, &clones, cohort, false, &spec, cfg)
            .map_err(wrap(Analysis::ClonesUnweighted.name()))?,
    );
    let mut weighted = || -> Result<Vec<Estimate>> {
        let wspec = cfg.weight_spec();
        let models = fit_adherence_models(&clones, cohort, &wspec)?;
        let table = compute_stabilized_weights(&clones, cohort, &models)?;
        let combined = combine_weights(&clones, &[&table], wspec.truncation)?;
        attach_weights(&mut clones, &[&table], &combined);
        estimates_for(replication, Analysis::ClonesWeighted, &clones, cohort, true, &spec, cfg)
    };
    out.extend(weighted().map_err(wrap(Analysis::ClonesWeighted.name()))?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub comparison: u32,
    pub analysis: Analysis,
    pub true_hr: f64,
    pub median_hr: f64,
    /// Standard deviation of the log HR estimates, times the median HR.
    pub ese: f64,
    /// Mean robust SE of the log HR, times the median HR.
    pub ase: f64,
    /// Percentage of 95% intervals containing the true HR.
    pub ecp: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub replications: usize,
    pub rows: Vec<SummaryRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median HR, ESE, ASE and ECP per (comparison, analysis). `truth` maps each
/// comparison to its true HR.
pub fn summarize(estimates: &[Estimate], truth: &BTreeMap<u32, f64>) -> Result<SimSummary> {
    let mut groups: BTreeMap<(u32, Analysis), Vec<&Estimate>> = BTreeMap::new();
    for e in estimates {
        groups.entry((e.comparison, e.analysis)).or_default().push(e);
    }
    let mut reps: Vec<usize> = estimates.iter().map(|e| e.replication).collect();
    reps.sort_unstable();
    reps.dedup();
    if reps.len() < 2 {
        return Err(DtrError::Data("a summary needs at least two replications".into()));
    }
    let mut rows = Vec::new();
    for ((comparison, analysis), es) in groups {
        let th = *truth
            .get(&comparison)
            .ok_or_else(|| DtrError::Data(format!("no true HR for comparison {comparison}")))?;
        let n = es.len();
        let logs: Vec<f64> = es.iter().map(|e| e.log_hr).collect();
        let median_hr = median(logs.iter().map(|l| l.exp()).collect());
        // Shifted by the first value so identical estimates give exactly 0.
        let d: Vec<f64> = logs.iter().map(|l| l - logs[0]).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 { (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        let mean_se = es.iter().map(|e| e.se).sum::<f64>() / n as f64;
        let lt = th.ln();
        let covered = es.iter().filter(|e| (e.log_hr - lt).abs() <= Z975 * e.se).count();
        rows.push(SummaryRow {
            comparison,
            analysis,
            true_hr: th,
            median_hr,
            ese: median_hr * sd,
            ase: median_hr * mean_se,
            ecp: 100.0 * covered as f64 / n as f64,
            n,
        });
    }
    Ok(SimSummary { replications: reps.len(), rows })
}

impl SimSummary {
    pub fn row(&self, comparison: u32, analysis: Analysis) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.comparison == comparison && r.analysis == analysis)
    }

    pub fn write_dsv<W: Write>(&self, sink: W, delimiter: u8) -> Result<()> {
        let header = ["comparison", "analysis", "true_hr", "median_hr", "ese", "ase", "ecp", "n"];
        let mut sink = sink;
        writeln!(sink, "# columns: {} (replications={})", header.join(" "), self.replications)?;
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(sink);
        w.write_record(header)?;
        for r in &self.rows {
            w.write_record([
                r.comparison.to_string(),
                r.analysis.name().to_string(),
                format!("{:.4}", r.true_hr),
                format!("{:.4}", r.median_hr),
                format!("{:.4}", r.ese),
                format!("{:.4}", r.ase),
                format!("{:.1}", r.ecp),
                r.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-replication estimates, lossless (shortest round-trip float format).
pub fn write_estimates<W: Write>(estimates: &[Estimate], sink: W, delimiter: u8) -> Result<()> {
    let header = ["replication", "comparison", "analysis", "log_hr", "se"];
    let mut sink = sink;
    writeln!(sink, "# columns: {}", header.join(" "))?;
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(sink);
    w.write_record(header)?;
    for e in estimates {
        w.write_record([
            e.replication.to_string(),
            e.comparison.to_string(),
            e.analysis.name().to_string(),
            format!("{:?}", e.log_hr),
            format!("{:?}", e.se),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_estimates<R: Read>(source: R, delimiter: u8) -> Result<Vec<Estimate>> {
    let mut r = csv::ReaderBuilder::new().delimiter(delimiter).comment(Some(b'#')).from_reader(source);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| DtrError::Schema(format!("estimate row has {} fields", rec.len())));
        let num = |i: usize| -> Result<f64> {
            field(i)?.parse().map_err(|_| DtrError::Data(format!("bad number `{}`", rec.get(i).unwrap_or(""))))
        };
        out.push(Estimate {
            replication: num(0)? as usize,
            comparison: num(1)? as u32,
            analysis: field(2)?.parse()?,
            log_hr: num(3)?,
            se: num(4)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub calibration: Calibration,
    pub estimates: Vec<Estimate>,
    pub summary: SimSummary,
}

/// Calibrates the rates, runs every replication in parallel and summarizes.
/// Results are merged in replication order, so thread count does not change
/// the output.
pub fn run_study(cfg: &SimConfig) -> Result<StudyResult> {
    cfg.validate_realizable()?;
    let calibration = calibrate_rates(cfg)?;
    let per_rep: Vec<Result<Vec<Estimate>>> =
        (0..cfg.replications).into_par_iter().map(|i| run_replication(cfg, &calibration.rates, i)).collect();
    let mut estimates = Vec::new();
    for r in per_rep {
        estimates.extend(r?);
    }
    let summary = summarize(&estimates, &calibration.post_cloning_hr)?;
    Ok(StudyResult { calibration, estimates, summary })
}
