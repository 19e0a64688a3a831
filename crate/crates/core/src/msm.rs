//! Marginal structural Cox models fit as weighted pooled logistic regressions
//! on cloned person-time, with subject-clustered robust covariance.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{DtrError, Result};
use crate::glm::{cluster_sandwich_covariance, fit_logistic, DesignSpec, FitOptions, FittedGlm, Frame, Term};
use crate::longitudinal_data::Cohort;
use crate::regimen::{CloneTable, RegimenGrid, RegimenSpec};

pub const Z975: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectForm {
    Linear,
    Factor,
    LinearXLogtime,
    FactorXLogtime,
}

impl EffectForm {
    pub fn has_time_interaction(self) -> bool {
        matches!(self, EffectForm::LinearXLogtime | EffectForm::FactorXLogtime)
    }

    pub fn is_linear(self) -> bool {
        matches!(self, EffectForm::Linear | EffectForm::LinearXLogtime)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsmSpec {
    pub effect_form: EffectForm,
    /// Baseline-covariate block shared by all regimens (no intercept).
    pub baseline_terms: DesignSpec,
    /// Time-specific intercept, `ind(t)` by default.
    pub time_intercept: DesignSpec,
    pub reference_regimen: u32,
    /// Ordinal per regimen for linear forms; regimens absent from the map are
    /// left out of linear fits.
    pub regimen_order: BTreeMap<u32, f64>,
    pub start_t: u32,
}

impl MsmSpec {
    /// Spec with an `ind(t)` time intercept, the grid reference and, when the
    /// grid midpoints are distinct, a midpoint-rank regimen order.
    pub fn new(effect_form: EffectForm, grid: &RegimenGrid, start_t: u32) -> MsmSpec {
        let spec = MsmSpec {
            effect_form,
            baseline_terms: DesignSpec::default(),
            time_intercept: DesignSpec::new(vec![Term::Indicators { var: "t".into(), levels: None }]),
            reference_regimen: grid.reference_id,
            regimen_order: BTreeMap::new(),
            start_t,
        };
        spec.clone().with_midpoint_order(&grid.specs).unwrap_or(spec)
    }

    /// Ordinal = rank of the target midpoint among `specs` (1 = lowest).
    pub fn with_midpoint_order(mut self, specs: &[RegimenSpec]) -> Result<MsmSpec> {
        let mut mids: Vec<f64> = specs.iter().map(|s| s.midpoint()).collect();
        mids.sort_by(f64::total_cmp);
        if mids.windows(2).any(|w| w[0] == w[1]) {
            return Err(DtrError::Config("linear regimen order needs distinct target midpoints".into()));
        }
        self.regimen_order = specs
            .iter()
            .map(|s| (s.id, 1.0 + mids.iter().position(|&m| m == s.midpoint()).unwrap_or(0) as f64))
            .collect();
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.effect_form.is_linear() {
            let mut v: Vec<f64> = self.regimen_order.values().copied().collect();
            v.sort_by(f64::total_cmp);
            if v.windows(2).any(|w| w[0] == w[1]) {
                return Err(DtrError::Config("regimen ordinals must be unique".into()));
            }
            if !self.regimen_order.contains_key(&self.reference_regimen) {
                return Err(DtrError::Config(format!("reference regimen {} has no ordinal", self.reference_regimen)));
            }
        }
        if self.baseline_terms.terms.contains(&Term::Intercept) {
            return Err(DtrError::Config("baseline terms must not include an intercept".into()));
        }
        Ok(())
    }

    fn log_time(&self, month: u32) -> Result<f64> {
        if month < self.start_t {
            return Err(DtrError::Config(format!("month {month} precedes analysis start {}", self.start_t)));
        }
        Ok(((month - self.start_t) as f64 + 1.0).ln())
    }
}

/// At-risk person-time: one row per uncensored clone visit.
#[derive(Debug, Clone)]
pub struct PersonTime {
    pub frame: Frame,
    pub event: Vec<f64>,
    pub weight: Vec<f64>,
    pub cluster: Vec<usize>,
    pub regimen: Vec<u32>,
    pub t: Vec<u32>,
    pub start_t: u32,
}

impl PersonTime {
    pub fn len(&self) -> usize {
        self.event.len()
    }

    pub fn is_empty(&self) -> bool {
        self.event.is_empty()
    }

    fn select(&self, rows: &[usize]) -> PersonTime {
        PersonTime {
            frame: self.frame.select(rows),
            event: rows.iter().map(|&i| self.event[i]).collect(),
            weight: rows.iter().map(|&i| self.weight[i]).collect(),
            cluster: rows.iter().map(|&i| self.cluster[i]).collect(),
            regimen: rows.iter().map(|&i| self.regimen[i]).collect(),
            t: rows.iter().map(|&i| self.t[i]).collect(),
            start_t: self.start_t,
        }
    }
}

/// Analysis rows from a clone table. With `weighted`, every row needs `w_total`.
pub fn build_person_time(clones: &CloneTable, cohort: &Cohort, weighted: bool) -> Result<PersonTime> {
    let rows: Vec<usize> = (0..clones.rows.len()).filter(|&i| clones.rows[i].adherent).collect();
    let n = rows.len();
    let mut weight = Vec::with_capacity(n);
    for &i in &rows {
        let r = &clones.rows[i];
        weight.push(if weighted {
            r.w_total.ok_or_else(|| DtrError::MissingWeight {
                subject: cohort.subjects[r.subject].id.clone(),
                regimen: r.regimen_id,
                t: r.t,
            })?
        } else {
            1.0
        });
    }
    let mut frame = Frame::new(n);
    let t: Vec<u32> = rows.iter().map(|&i| clones.rows[i].t).collect();
    let regimen: Vec<u32> = rows.iter().map(|&i| clones.rows[i].regimen_id).collect();
    frame.insert("t", t.iter().map(|&v| v as f64).collect());
    frame.insert("t_rel", t.iter().map(|&v| (v - clones.start_t) as f64).collect());
    frame.insert("logt", t.iter().map(|&v| ((v - clones.start_t) as f64 + 1.0).ln()).collect());
    frame.insert("regimen", regimen.iter().map(|&v| v as f64).collect());
    let mut names: Vec<String> =
        ["male", "age", "race", "diabetes", "hypertension"].iter().map(|s| s.to_string()).collect();
    names.extend(cohort.schema.baseline_extra.iter().cloned());
    for name in names {
        let col =
            rows.iter().map(|&i| cohort.subjects[clones.rows[i].subject].baseline.value(&name).unwrap_or(f64::NAN)).collect();
        frame.insert(name, col);
    }
    Ok(PersonTime {
        frame,
        event: rows.iter().map(|&i| clones.rows[i].event as u8 as f64).collect(),
        weight,
        cluster: rows.iter().map(|&i| clones.rows[i].subject).collect(),
        regimen,
        t,
        start_t: clones.start_t,
    })
}

#[derive(Debug, Clone)]
pub struct MsmFit {
    pub spec: MsmSpec,
    pub glm: FittedGlm,
    pub n_rows: usize,
    /// Kish effective sample size of the weights per regimen.
    pub ess: BTreeMap<u32, f64>,
    /// Regimens in the fit.
    pub regimens: Vec<u32>,
    /// Regimens with no events; left out of the fit.
    pub unstable: Vec<u32>,
}

fn effect_terms(spec: &MsmSpec, regimens: &[u32]) -> Vec<Term> {
    let levels: Vec<i64> = regimens.iter().map(|&r| r as i64).collect();
    let cat = Term::Categorical { var: "regimen".into(), levels: Some(levels), reference: Some(spec.reference_regimen as i64) };
    let ord = Term::Numeric("regimen_ord".into());
    let logt = Term::Numeric("logt".into());
    match spec.effect_form {
        EffectForm::Factor => vec![cat],
        EffectForm::Linear => vec![ord],
        EffectForm::FactorXLogtime => vec![cat.clone(), Term::Interaction(Box::new(cat), Box::new(logt))],
        EffectForm::LinearXLogtime => vec![ord.clone(), Term::Interaction(Box::new(ord), Box::new(logt))],
    }
}

/// Weighted pooled logistic fit of the chosen effect form with the time
/// intercept and shared baseline block; robust covariance clusters by subject.
pub fn fit_msm(table: &PersonTime, spec: &MsmSpec) -> Result<MsmFit> {
    spec.validate()?;
    let mut keep: Vec<usize> = (0..table.len()).collect();
    if spec.effect_form.is_linear() {
        keep.retain(|&i| spec.regimen_order.contains_key(&table.regimen[i]));
    }
    let mut events: BTreeMap<u32, f64> = BTreeMap::new();
    for &i in &keep {
        *events.entry(table.regimen[i]).or_default() += table.event[i];
    }
    if !events.contains_key(&spec.reference_regimen) {
        return Err(DtrError::Data(format!("reference regimen {} has no person-time", spec.reference_regimen)));
    }
    let unstable: Vec<u32> = events.iter().filter(|(_, &e)| e == 0.0).map(|(&k, _)| k).collect();
    if unstable.contains(&spec.reference_regimen) {
        return Err(DtrError::Data(format!("reference regimen {} has no events", spec.reference_regimen)));
    }
    for k in &unstable {
        log::warn!("regimen {k} has no events; its effect is not estimable");
    }
    keep.retain(|&i| !unstable.contains(&table.regimen[i]));
    let regimens: Vec<u32> = events.keys().copied().filter(|k| !unstable.contains(k)).collect();
    let mut sub = table.select(&keep);
    if spec.effect_form.is_linear() {
        let ord = sub.regimen.iter().map(|r| spec.regimen_order[r]).collect();
        sub.frame.insert("regimen_ord", ord);
    }
    if sub.event.iter().all(|&e| e == 0.0) {
        return Err(DtrError::Data("no events in the person-time table".into()));
    }
    let mut terms = spec.time_intercept.terms.clone();
    terms.extend(effect_terms(spec, &regimens));
    terms.extend(spec.baseline_terms.terms.iter().cloned());
    let design = DesignSpec::new(terms).resolve(&sub.frame)?;
    let (x, names) = design.build(&sub.frame)?;
    let mut glm = fit_logistic(&x, &names, &sub.event, &sub.weight, &FitOptions::default())?;
    glm.robust_covariance = Some(cluster_sandwich_covariance(&glm, &x, &sub.event, &sub.weight, &sub.cluster)?);
    let mut ess = BTreeMap::new();
    for &k in &regimens {
        let (s, s2) = sub
            .regimen
            .iter()
            .zip(&sub.weight)
            .filter(|(r, _)| **r == k)
            .fold((0.0, 0.0), |(a, b), (_, &w)| (a + w, b + w * w));
        ess.insert(k, s * s / s2);
    }
    Ok(MsmFit { spec: spec.clone(), glm, n_rows: sub.len(), ess, regimens, unstable })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Comparison {
    /// Log hazard ratio of the first regimen relative to the second.
    Pair(u32, u32),
    /// One-unit increase in the regimen ordinal (linear forms).
    UnitIncrease,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HazardRatio {
    pub log_hr: f64,
    pub se: f64,
    pub hr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl HazardRatio {
    pub fn from_log(log_hr: f64, se: f64) -> HazardRatio {
        HazardRatio {
            log_hr,
            se,
            hr: log_hr.exp(),
            ci_low: (log_hr - Z975 * se).exp(),
            ci_high: (log_hr + Z975 * se).exp(),
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

fn coef_index(fit: &MsmFit, name: &str) -> Result<usize> {
    fit.glm
        .names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| DtrError::Config(format!("coefficient `{name}` not in fit")))
}

/// Contrast vector for a comparison at an optional month.
pub fn contrast(fit: &MsmFit, comparison: Comparison, month: Option<u32>) -> Result<Vec<f64>> {
    let spec = &fit.spec;
    let form = spec.effect_form;
    let lt = match (form.has_time_interaction(), month) {
        (true, Some(m)) => spec.log_time(m)?,
        (true, None) => return Err(DtrError::Config("a month is required for log-time interaction forms".into())),
        (false, Some(_)) => return Err(DtrError::Config("month given for a form without time interaction".into())),
        (false, None) => 0.0,
    };
    let mut c = vec![0.0; fit.glm.names.len()];
    match (form.is_linear(), comparison) {
        (true, cmp) => {
            let step = match cmp {
                Comparison::UnitIncrease => 1.0,
                Comparison::Pair(a, b) => {
                    let ord = |k: u32| {
                        spec.regimen_order.get(&k).copied().ok_or_else(|| DtrError::Config(format!("regimen {k} has no ordinal")))
                    };
                    ord(a)? - ord(b)?
                }
            };
            c[coef_index(fit, "regimen_ord")?] += step;
            if form.has_time_interaction() {
                c[coef_index(fit, "regimen_ord:logt")?] += step * lt;
            }
        }
        (false, Comparison::UnitIncrease) => {
            return Err(DtrError::Config("unit increase needs a linear effect form".into()));
        }
        (false, Comparison::Pair(a, b)) => {
            for (k, sign) in [(a, 1.0), (b, -1.0)] {
                if !fit.regimens.contains(&k) {
                    return Err(DtrError::Config(format!("regimen {k} is not in the fit")));
                }
                if k == spec.reference_regimen {
                    continue;
                }
                c[coef_index(fit, &format!("regimen[{k}]"))?] += sign;
                if form.has_time_interaction() {
                    c[coef_index(fit, &format!("regimen[{k}]:logt"))?] += sign * lt;
                }
            }
        }
    }
    Ok(c)
}

/// exp(c'beta) with a Wald interval from the robust covariance.
pub fn hazard_ratio(fit: &MsmFit, comparison: Comparison, month: Option<u32>) -> Result<HazardRatio> {
    let c = contrast(fit, comparison, month)?;
    let beta = &fit.glm.coefficients;
    let cov = fit.glm.covariance();
    let log_hr: f64 = c.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
    let mut var = 0.0;
    for i in 0..c.len() {
        if c[i] == 0.0 {
            continue;
        }
        for j in 0..c.len() {
            var += c[i] * cov[(i, j)] * c[j];
        }
    }
    Ok(HazardRatio::from_log(log_hr, var.max(0.0).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HrRow {
    pub comparison: String,
    pub regimen: Option<u32>,
    pub month: Option<u32>,
    pub hr: Option<HazardRatio>,
    pub reference: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub x: f64,
    pub series: String,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HazardRatioReport {
    pub effect_form: EffectForm,
    pub rows: Vec<HrRow>,
    /// Log hazard ratios with log-scale interval bounds; x is the target
    /// midpoint (factor forms) or the month (linear log-time form).
    pub plot: Vec<PlotPoint>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    /// Months for per-month rows; defaults to start..=last observed month.
    pub months: Option<Vec<u32>>,
    /// Month at which factor x log-time plot data are evaluated.
    pub plot_month: Option<u32>,
}

/// Every regimen versus the reference (factor forms) or unit-increase rows
/// (linear forms), plus plot-ready series.
pub fn report(fit: &MsmFit, grid: &RegimenGrid, opts: &ReportOptions) -> Result<HazardRatioReport> {
    let spec = &fit.spec;
    let form = spec.effect_form;
    let ref_label = grid.get(spec.reference_regimen).map(|s| s.label.clone()).unwrap_or_else(|| spec.reference_regimen.to_string());
    let label = |k: u32| grid.get(k).map(|s| s.label.clone()).unwrap_or_else(|| k.to_string());
    let midpoint = |k: u32| grid.get(k).map(|s| s.midpoint()).unwrap_or(k as f64);
    let last_month = fit.spec.start_t + fit.glm.names.iter().filter(|n| n.starts_with("t==")).count().saturating_sub(1) as u32;
    let months = opts.months.clone().unwrap_or_else(|| (spec.start_t..=last_month.max(spec.start_t)).collect());
    let mut rows = Vec::new();
    let mut plot = Vec::new();
    let mut regimens: Vec<u32> = grid.specs.iter().map(|s| s.id).collect();
    if form.is_linear() {
        regimens.retain(|k| spec.regimen_order.contains_key(k));
    }
    regimens.sort_by(|a, b| midpoint(*a).total_cmp(&midpoint(*b)).then(a.cmp(b)));
    match form {
        EffectForm::Factor | EffectForm::FactorXLogtime => {
            let row_months: Vec<Option<u32>> =
                if form == EffectForm::Factor { vec![None] } else { months.iter().map(|&m| Some(m)).collect() };
            for &m in &row_months {
                for &k in &regimens {
                    let reference = k == spec.reference_regimen;
                    let hr = if reference {
                        Some(HazardRatio::from_log(0.0, 0.0))
                    } else if fit.regimens.contains(&k) {
                        Some(hazard_ratio(fit, Comparison::Pair(k, spec.reference_regimen), m)?)
                    } else {
                        None
                    };
                    rows.push(HrRow { comparison: format!("{} vs {}", label(k), ref_label), regimen: Some(k), month: m, hr, reference });
                }
            }
            let pm = if form == EffectForm::Factor { None } else { Some(opts.plot_month.unwrap_or(*months.last().unwrap_or(&spec.start_t))) };
            for &k in &regimens {
                let h = if k == spec.reference_regimen {
                    Some(HazardRatio::from_log(0.0, 0.0))
                } else if fit.regimens.contains(&k) {
                    Some(hazard_ratio(fit, Comparison::Pair(k, spec.reference_regimen), pm)?)
                } else {
                    None
                };
                if let Some(h) = h {
                    plot.push(PlotPoint {
                        x: midpoint(k),
                        series: pm.map(|m| format!("log_hr_month_{m}")).unwrap_or_else(|| "log_hr".into()),
                        value: h.log_hr,
                        ci_low: h.log_hr - Z975 * h.se,
                        ci_high: h.log_hr + Z975 * h.se,
                    });
                }
            }
        }
        EffectForm::Linear => {
            let h = hazard_ratio(fit, Comparison::UnitIncrease, None)?;
            rows.push(HrRow { comparison: "unit increase".into(), regimen: None, month: None, hr: Some(h), reference: false });
            plot.push(PlotPoint { x: 1.0, series: "log_hr_unit".into(), value: h.log_hr, ci_low: h.log_hr - Z975 * h.se, ci_high: h.log_hr + Z975 * h.se });
        }
        EffectForm::LinearXLogtime => {
            for &m in &months {
                let h = hazard_ratio(fit, Comparison::UnitIncrease, Some(m))?;
                rows.push(HrRow { comparison: "unit increase".into(), regimen: None, month: Some(m), hr: Some(h), reference: false });
                plot.push(PlotPoint {
                    x: m as f64,
                    series: "log_hr_unit".into(),
                    value: h.log_hr,
                    ci_low: h.log_hr - Z975 * h.se,
                    ci_high: h.log_hr + Z975 * h.se,
                });
            }
        }
    }
    Ok(HazardRatioReport { effect_form: form, rows, plot })
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

impl HazardRatioReport {
    /// Numeric table: comparison, month, log_hr, se, hr, ci_low, ci_high.
    pub fn write_table<W: Write>(&self, sink: W, delimiter: u8) -> Result<()> {
        let header = ["comparison", "month", "log_hr", "se", "hr", "ci_low", "ci_high"];
        let mut sink = sink;
        writeln!(sink, "# columns: {}", header.join(" "))?;
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(sink);
        w.write_record(header)?;
        for r in &self.rows {
            let month = r.month.map(|m| m.to_string()).unwrap_or_else(|| "overall".into());
            let vals = match r.hr {
                Some(h) => vec![num(h.log_hr), num(h.se), num(h.hr), num(h.ci_low), num(h.ci_high)],
                None => vec!["NA".into(); 5],
            };
            let mut rec = vec![r.comparison.clone(), month];
            rec.extend(vals);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Three-column published layout: "Regimen comparison" (or "Month"),
    /// "Hazard ratio", "95% CI", with the reference row marked.
    pub fn published_rows(&self) -> (Vec<String>, Vec<[String; 3]>) {
        let by_month = self.effect_form == EffectForm::LinearXLogtime;
        let first = if by_month { "Month" } else { "Regimen comparison" };
        let header = vec![first.to_string(), "Hazard ratio".into(), "95% CI".into()];
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let key = if by_month {
                    r.month.map(|m| m.to_string()).unwrap_or_default()
                } else {
                    match r.month {
                        Some(m) if self.effect_form == EffectForm::FactorXLogtime => format!("{} (month {m})", r.comparison),
                        _ => r.comparison.clone(),
                    }
                };
                match (r.reference, r.hr) {
                    (true, _) => [key, "Reference".into(), "--".into()],
                    (false, Some(h)) => [key, format!("{:.3}", h.hr), format!("({:.3}, {:.3})", h.ci_low, h.ci_high)],
                    (false, None) => [key, "NA".into(), "NA".into()],
                }
            })
            .collect();
        (header, rows)
    }

    pub fn write_published<W: Write>(&self, sink: W, delimiter: u8) -> Result<()> {
        let (header, rows) = self.published_rows();
        let mut sink = sink;
        writeln!(sink, "# columns: {}", header.join(" | "))?;
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(sink);
        w.write_record(&header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Plot data: x, series, value, ci_low, ci_high.
    pub fn write_plot<W: Write>(&self, sink: W, delimiter: u8) -> Result<()> {
        write_plot_points(&self.plot, sink, delimiter)
    }
}

pub fn write_plot_points<W: Write>(points: &[PlotPoint], sink: W, delimiter: u8) -> Result<()> {
    let header = ["x", "series", "value", "ci_low", "ci_high"];
    let mut sink = sink;
    writeln!(sink, "# columns: {}", header.join(" "))?;
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(sink);
    w.write_record(header)?;
    for p in points {
        w.write_record([format!("{}", p.x), p.series.clone(), num(p.value), num(p.ci_low), num(p.ci_high)])?;
    }
    w.flush()?;
    Ok(())
}
