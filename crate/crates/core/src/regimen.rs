//! Dose-change regimens keyed to marker zones, per-visit adherence, and
//! expansion of a cohort into artificially censored clones.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DtrError, Result};
use crate::longitudinal_data::{Cohort, MarkerMode, SubjectHistory};

/// Relative slack applied to finite interval endpoints so that a dose
/// reconstructed by floating-point multiplication is not judged by its last bit.
const ENDPOINT_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Zone {
    /// Marker above b2: decrease rule (p1, p2).
    Above,
    /// Marker in [b1, b2]: maintain rule (p3, p4).
    Within,
    /// Marker below b1: increase rule (p5, p6).
    Below,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimenSpec {
    pub id: u32,
    pub p: [f64; 6],
    pub b: (f64, f64),
    pub label: String,
}

/// Closed dose interval; `hi` may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoseInterval {
    pub lo: f64,
    pub hi: f64,
}

impl DoseInterval {
    pub fn contains(&self, x: f64) -> bool {
        let lo_ok = x >= self.lo - ENDPOINT_RTOL * self.lo.abs();
        let hi_ok = self.hi.is_infinite() || x <= self.hi + ENDPOINT_RTOL * self.hi.abs();
        lo_ok && hi_ok
    }
}

/// How a zero previous dose is judged, where multiplicative change is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroDoseRule {
    /// Increase zone: any positive dose adheres. Maintain/decrease zones: only 0 adheres.
    #[default]
    ScaleFree,
    /// Every transition from a zero dose is nonadherent.
    Nonadherent,
}

impl RegimenSpec {
    pub fn new(id: u32, p: [f64; 6], b: (f64, f64), label: impl Into<String>) -> Result<RegimenSpec> {
        let spec = RegimenSpec { id, p, b, label: label.into() };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks invariants; returns warnings that do not invalidate the spec.
    pub fn validate(&self) -> Result<Vec<String>> {
        let p = &self.p;
        let bad = |m: String| Err(DtrError::Config(format!("regimen {} ({}): {m}", self.id, self.label)));
        if !(self.b.0 < self.b.1) {
            return bad(format!("target bounds {} < {} violated", self.b.0, self.b.1));
        }
        if p.iter().any(|x| x.is_nan() || *x < 0.0) {
            return bad("factor bounds must be nonnegative".into());
        }
        if !(p[0] <= p[1] && p[2] <= p[3] && p[4] <= p[5]) {
            return bad("each zone needs lower factor <= upper factor".into());
        }
        let mut warnings = Vec::new();
        if !(p[2] <= 1.0 && 1.0 <= p[3]) {
            warnings.push(format!("regimen {}: within-target factors do not include 1", self.label));
        }
        Ok(warnings)
    }

    pub fn zone(&self, marker: f64) -> Zone {
        if marker > self.b.1 {
            Zone::Above
        } else if marker < self.b.0 {
            Zone::Below
        } else {
            Zone::Within
        }
    }

    pub fn factors(&self, zone: Zone) -> (f64, f64) {
        match zone {
            Zone::Above => (self.p[0], self.p[1]),
            Zone::Within => (self.p[2], self.p[3]),
            Zone::Below => (self.p[4], self.p[5]),
        }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.b.0 + self.b.1)
    }
}

pub fn allowable_dose_interval(spec: &RegimenSpec, prev_dose: f64, marker: f64) -> Result<DoseInterval> {
    if !(prev_dose > 0.0) {
        return Err(DtrError::Data(format!("allowable interval needs a positive previous dose, got {prev_dose}")));
    }
    if marker.is_nan() {
        return Err(DtrError::Data("marker must be resolved before adherence evaluation".into()));
    }
    let (lo, hi) = spec.factors(spec.zone(marker));
    Ok(DoseInterval { lo: prev_dose * lo, hi: prev_dose * hi })
}

pub fn is_adherent(spec: &RegimenSpec, prev_dose: f64, marker: f64, new_dose: f64, rule: ZeroDoseRule) -> bool {
    if prev_dose <= 0.0 {
        return match rule {
            ZeroDoseRule::Nonadherent => false,
            ZeroDoseRule::ScaleFree => match spec.zone(marker) {
                Zone::Below => new_dose > 0.0,
                Zone::Within | Zone::Above => new_dose == 0.0,
            },
        };
    }
    match allowable_dose_interval(spec, prev_dose, marker) {
        Ok(iv) => iv.contains(new_dose),
        Err(_) => false,
    }
}

/// What to do when a visit has no marker even after carry-forward, or when
/// the user prefers censoring over carry-forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingMarker {
    #[default]
    CarryForward,
    Censor,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CloneOptions {
    pub marker_mode: MarkerMode,
    pub missing_marker: MissingMarker,
    pub zero_dose: ZeroDoseRule,
    /// Optional cap on the last analyzed visit (defaults to the cohort horizon).
    pub horizon: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdherenceTrace {
    /// (t, A(t)) for visits from start_t up to and including the censor visit.
    pub adherence: Vec<(u32, bool)>,
    pub censor_visit: Option<u32>,
}

/// Adherence of one subject to one regimen from `start_t` onward. A(start_t) = 1.
/// A visit lacking a dose (current or previous) cannot be verified and is
/// treated as nonadherent.
pub fn adherence_trace(spec: &RegimenSpec, subject: &SubjectHistory, start_t: u32, opts: &CloneOptions) -> AdherenceTrace {
    let Some(i0) = subject.visit_index(start_t) else {
        return AdherenceTrace { adherence: Vec::new(), censor_visit: None };
    };
    let markers = subject.marker_series(opts.marker_mode);
    let raw_missing: Vec<bool> = subject.visits.iter().map(|v| v.marker.is_none()).collect();
    let mut adherence = vec![(start_t, true)];
    for i in i0 + 1..subject.visits.len() {
        let v = &subject.visits[i];
        let ok = match (subject.visits[i - 1].dose, v.dose, markers[i]) {
            _ if opts.missing_marker == MissingMarker::Censor && raw_missing[i] => false,
            (Some(pd), Some(nd), Some(m)) => is_adherent(spec, pd, m, nd, opts.zero_dose),
            _ => false,
        };
        adherence.push((v.t, ok));
        if !ok {
            return AdherenceTrace { adherence, censor_visit: Some(v.t) };
        }
    }
    AdherenceTrace { adherence, censor_visit: None }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimenGrid {
    pub specs: Vec<RegimenSpec>,
    pub reference_id: u32,
}

impl RegimenGrid {
    pub fn new(specs: Vec<RegimenSpec>, reference_id: u32) -> Result<RegimenGrid> {
        if specs.is_empty() {
            return Err(DtrError::Config("regimen grid is empty".into()));
        }
        let mut ids: Vec<u32> = specs.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(DtrError::Config("regimen ids must be unique".into()));
        }
        if !ids.contains(&reference_id) {
            return Err(DtrError::Config(format!("reference regimen {reference_id} not in grid")));
        }
        for s in &specs {
            for w in s.validate()? {
                log::warn!("{w}");
            }
        }
        Ok(RegimenGrid { specs, reference_id })
    }

    /// Family grid G(p, x-3, x+3) over all (p, x) pairs, ids assigned from 1 in
    /// p-major order.
    pub fn family(ps: &[f64], xs: &[f64], reference: (f64, f64)) -> Result<RegimenGrid> {
        let mut specs = Vec::new();
        let mut reference_id = None;
        for &p in ps {
            for &x in xs {
                let id = specs.len() as u32 + 1;
                if (p - reference.0).abs() < 1e-12 && (x - reference.1).abs() < 1e-12 {
                    reference_id = Some(id);
                }
                specs.push(usrds_family(p, x, id)?);
            }
        }
        let reference_id =
            reference_id.ok_or_else(|| DtrError::Config(format!("reference G({}, {}) not in family", reference.0, reference.1)))?;
        RegimenGrid::new(specs, reference_id)
    }

    pub fn get(&self, id: u32) -> Option<&RegimenSpec> {
        self.specs.iter().find(|s| s.id == id)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

fn fmt_num(x: f64) -> String {
    let s = format!("{x}");
    s
}

/// G(p, x-3, x+3): decrease by at least p above target, change by at most 25%
/// within [x-3, x+3], increase by at least p below target.
pub fn usrds_family(p: f64, x: f64, id: u32) -> Result<RegimenSpec> {
    if !(p > 0.0 && p < 1.0) {
        return Err(DtrError::Config(format!("family parameter p={p} outside (0, 1)")));
    }
    if x - 3.0 < 0.0 {
        return Err(DtrError::Config(format!("family midpoint x={x} gives a negative target bound")));
    }
    let label = format!("G({},{},{})", fmt_num(p), fmt_num(x - 3.0), fmt_num(x + 3.0));
    RegimenSpec::new(id, [0.0, 1.0 - p, 0.75, 1.25, 1.0 + p, f64::INFINITY], (x - 3.0, x + 3.0), label)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloneRow {
    /// Index into `Cohort::subjects`.
    pub subject: usize,
    /// Index into the subject's visits.
    pub visit: usize,
    pub regimen_id: u32,
    pub t: u32,
    pub adherent: bool,
    pub censored: bool,
    pub event: bool,
    pub marker: Option<f64>,
    pub marker_imputed: bool,
    pub prev_dose: Option<f64>,
    pub dose: Option<f64>,
    pub sw_adherence: Option<f64>,
    pub sw_admin: Option<f64>,
    pub sw_ltfu: Option<f64>,
    pub w_total: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloneTable {
    pub rows: Vec<CloneRow>,
    pub n_subjects: usize,
    pub n_regimens: usize,
    pub horizon: u32,
    pub start_t: u32,
    pub regimen_ids: Vec<u32>,
}

/// Contiguous row range of one clone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CloneSpan {
    pub subject: usize,
    pub regimen_id: u32,
    pub start: usize,
    pub end: usize,
}

impl CloneTable {
    /// Row ranges of each clone, in table order.
    pub fn spans(&self) -> Vec<CloneSpan> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.rows.len() {
            let boundary = i == self.rows.len()
                || self.rows[i].subject != self.rows[start].subject
                || self.rows[i].regimen_id != self.rows[start].regimen_id;
            if boundary {
                out.push(CloneSpan {
                    subject: self.rows[start].subject,
                    regimen_id: self.rows[start].regimen_id,
                    start,
                    end: i,
                });
                start = i;
            }
        }
        if self.rows.is_empty() {
            out.clear();
        }
        out
    }

    /// Write every CloneRow field; weight columns are empty until filled.
    pub fn write_dsv<W: Write>(&self, cohort: &Cohort, sink: W, delimiter: u8) -> Result<()> {
        let header = [
            "subject_id", "regimen_id", "t", "adherent", "censored", "event", "marker", "marker_imputed", "prev_dose",
            "dose", "sw_adherence", "sw_admin", "sw_ltfu", "w_total",
        ];
        let mut sink = sink;
        writeln!(sink, "# columns: {}", header.join(" "))?;
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(sink);
        w.write_record(header)?;
        let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                cohort.subjects[r.subject].id.clone(),
                r.regimen_id.to_string(),
                r.t.to_string(),
                (r.adherent as u8).to_string(),
                (r.censored as u8).to_string(),
                (r.event as u8).to_string(),
                f(r.marker),
                (r.marker_imputed as u8).to_string(),
                f(r.prev_dose),
                f(r.dose),
                f(r.sw_adherence),
                f(r.sw_admin),
                f(r.sw_ltfu),
                f(r.w_total),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn clone_subject(
    si: usize,
    subject: &SubjectHistory,
    grid: &RegimenGrid,
    start_t: u32,
    horizon: u32,
    opts: &CloneOptions,
) -> Vec<CloneRow> {
    let mut rows = Vec::new();
    let Some(i0) = subject.visit_index(start_t) else {
        return rows;
    };
    if let Some(ev) = subject.event_visit() {
        if ev < start_t {
            return rows;
        }
    }
    let resolved = subject.resolved_markers();
    let markers = subject.marker_series(opts.marker_mode);
    let stop = subject.last_followup.min(horizon).min(subject.event_visit().unwrap_or(u32::MAX));
    let mut specs: Vec<&RegimenSpec> = grid.specs.iter().collect();
    specs.sort_by_key(|s| s.id);
    for spec in specs {
        let trace = adherence_trace(spec, subject, start_t, opts);
        let before = rows.len();
        for (j, &(t, a)) in trace.adherence.iter().enumerate() {
            if t > stop {
                break;
            }
            let vi = i0 + j;
            debug_assert_eq!(subject.visits[vi].t, t);
            let event = a && subject.event_visit() == Some(t);
            rows.push(CloneRow {
                subject: si,
                visit: vi,
                regimen_id: spec.id,
                t,
                adherent: a,
                censored: !a,
                event,
                marker: markers[vi],
                marker_imputed: resolved[vi].imputed,
                prev_dose: vi.checked_sub(1).and_then(|k| subject.visits[k].dose),
                dose: subject.visits[vi].dose,
                sw_adherence: None,
                sw_admin: None,
                sw_ltfu: None,
                w_total: None,
            });
        }
        if !rows[before..].iter().any(|r| r.adherent) {
            rows.truncate(before);
        }
    }
    rows
}

/// One clone per (subject, regimen) with adherent person-time. Rows run from
/// `start_t` to the first of: censor visit (kept, flagged censored), event
/// visit, last follow-up, horizon. Output is ordered by (subject, regimen, t).
pub fn clone_cohort(cohort: &Cohort, grid: &RegimenGrid, start_t: u32, opts: &CloneOptions) -> CloneTable {
    let horizon = opts.horizon.unwrap_or(cohort.visit_horizon).min(cohort.visit_horizon);
    let per_subject: Vec<Vec<CloneRow>> = cohort
        .subjects
        .par_iter()
        .enumerate()
        .map(|(si, s)| clone_subject(si, s, grid, start_t, horizon, opts))
        .collect();
    let n_subjects = per_subject.iter().filter(|r| !r.is_empty()).count();
    let mut ids: Vec<u32> = grid.specs.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    CloneTable {
        rows: per_subject.into_iter().flatten().collect(),
        n_subjects,
        n_regimens: grid.len(),
        horizon,
        start_t,
        regimen_ids: ids,
    }
}
