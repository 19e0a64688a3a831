//! Stabilized inverse-probability weights for nonadherence (artificial
//! censoring), administrative censoring and loss to follow-up.


use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DtrError, Result};
use crate::glm::{fit_logistic, quantile_sorted, DesignSpec, FitOptions, FittedGlm, Frame, Term};
use crate::longitudinal_data::Cohort;
use crate::regimen::{CloneSpan, CloneTable};

/// Covariates that change over visits and so may not enter numerator models.
pub const TIME_VARYING: [&str; 7] = ["marker", "marker_prev", "marker_diff", "marker_avg2", "prev_dose", "dose", "marker_imputed"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightModelSpec {
    pub numerator: DesignSpec,
    pub denominator: DesignSpec,
    pub stratify_by_regimen: bool,
    /// Lower and upper percentiles (fractions) for winsorizing `w_total`.
    pub truncation: Option<(f64, f64)>,
    /// Baseline covariate that, when equal to a clone's regimen id, marks the
    /// clone as adherent by construction: its rows are left out of the models
    /// and contribute probability 1.
    pub structural_key: Option<String>,
}

impl WeightModelSpec {
    /// Spline in time, demographics, previous dose, two-visit-average marker
    /// bands and the marker change; the numerator drops the time-varying terms.
    pub fn default_terms() -> WeightModelSpec {
        let base = ["1", "ns(t)", "male", "age", "cat(race)", "diabetes", "hypertension"];
        let mut den: Vec<&str> = base.to_vec();
        den.extend(["prev_dose", "bins(marker_avg2; 0,28; 28,32; 36,40; 40,inf)", "marker_diff"]);
        WeightModelSpec {
            numerator: DesignSpec::parse(&base).expect("valid default terms"),
            denominator: DesignSpec::parse(&den).expect("valid default terms"),
            stratify_by_regimen: true,
            truncation: None,
            structural_key: None,
        }
    }

    pub fn validate(&self, cohort: &Cohort) -> Result<()> {
        for term in &self.numerator.terms {
            for v in term.variables() {
                if TIME_VARYING.contains(&v.as_str()) || cohort.schema.aux.contains(&v) {
                    return Err(DtrError::Config(format!("numerator term `{term}` uses time-varying covariate `{v}`")));
                }
            }
        }
        let den = self.denominator.to_strings();
        for t in self.numerator.to_strings() {
            if !den.contains(&t) {
                return Err(DtrError::Config(format!("denominator must extend numerator; `{t}` missing")));
            }
        }
        if let Some((lo, hi)) = self.truncation {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return Err(DtrError::Config(format!("truncation ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Adherence,
    Admin,
    Ltfu,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Adherence => "adherence",
            Component::Admin => "admin",
            Component::Ltfu => "ltfu",
        }
    }
}

/// Per-row covariates for weight models: baseline values, time (`t`, `t_rel`,
/// `logt` = ln(t_rel + 1)), marker and
/// dose history. Missing doses are carried forward (0 before the first
/// recorded dose); a missing previous marker is replaced by the current one.
pub fn covariate_frame(clones: &CloneTable, cohort: &Cohort) -> Frame {
    let n = clones.rows.len();
    let mut frame = Frame::new(n);
    let col = |f: &dyn Fn(usize) -> f64| (0..n).map(f).collect::<Vec<f64>>();
    let rows = &clones.rows;
    frame.insert("t", col(&|i| rows[i].t as f64));
    frame.insert("t_rel", col(&|i| (rows[i].t - clones.start_t) as f64));
    frame.insert("logt", col(&|i| ((rows[i].t - clones.start_t) as f64).ln_1p()));
    frame.insert("regimen", col(&|i| rows[i].regimen_id as f64));
    let mut names: Vec<String> =
        ["male", "age", "race", "diabetes", "hypertension"].iter().map(|s| s.to_string()).collect();
    names.extend(cohort.schema.baseline_extra.iter().cloned());
    for name in &names {
        frame.insert(
            name.clone(),
            col(&|i| cohort.subjects[rows[i].subject].baseline.value(name).unwrap_or(f64::NAN)),
        );
    }
    let carried_dose = |si: usize, vi: Option<usize>| -> f64 {
        let visits = &cohort.subjects[si].visits;
        vi.and_then(|v| visits[..=v].iter().rev().find_map(|x| x.dose)).unwrap_or(0.0)
    };
    let marker = col(&|i| rows[i].marker.unwrap_or(f64::NAN));
    let marker_prev: Vec<f64> = col(&|i| {
        let r = &rows[i];
        let s = &cohort.subjects[r.subject];
        let resolved = s.resolved_markers();
        r.visit.checked_sub(1).and_then(|k| resolved[k].value).unwrap_or(marker[i])
    });
    frame.insert("marker_diff", marker.iter().zip(&marker_prev).map(|(a, b)| a - b).collect());
    frame.insert("marker_avg2", marker.iter().zip(&marker_prev).map(|(a, b)| 0.5 * (a + b)).collect());
    frame.insert("marker_prev", marker_prev);
    frame.insert("marker", marker);
    frame.insert("marker_imputed", col(&|i| rows[i].marker_imputed as u8 as f64));
    frame.insert("prev_dose", col(&|i| carried_dose(rows[i].subject, rows[i].visit.checked_sub(1))));
    frame.insert("dose", col(&|i| carried_dose(rows[i].subject, Some(rows[i].visit))));
    for name in &cohort.schema.aux {
        frame.insert(
            name.clone(),
            col(&|i| {
                let r = &rows[i];
                cohort.subjects[r.subject].visits[r.visit].aux.get(name).copied().unwrap_or(f64::NAN)
            }),
        );
    }
    frame
}

/// Fitted numerator/denominator pair for one stratum.
#[derive(Debug, Clone)]
pub struct StratumModel {
    /// Regimen id, or `None` for a pooled model.
    pub regimen: Option<u32>,
    pub n_records: usize,
    /// Records with response 0 (the censoring event).
    pub n_events: usize,
    pub numerator: Option<(DesignSpec, FittedGlm)>,
    pub denominator: Option<(DesignSpec, FittedGlm)>,
    /// True when the stratum lacked events (or non-events) and weights fall back to 1.
    pub degenerate: bool,
    /// Categorical levels and marker bins (label, records) whose outcome was
    /// constant in the stratum; their records were left out and take factor 1.
    pub determined_levels: Vec<(String, usize)>,
}

/// Fitted models for one censoring process with per-row transition probabilities.
#[derive(Debug, Clone)]
pub struct ProcessModels {
    pub component: Component,
    pub strata: Vec<StratumModel>,
    /// Probability of remaining uncensored on the transition into each clone
    /// row, `None` when no transition is modeled (first row, structural rows,
    /// degenerate strata).
    pub p_num: Vec<Option<f64>>,
    pub p_den: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// One modeled transition: covariates from `source_row`, evaluated at time `t`.
#[derive(Debug, Clone, Copy)]
struct Record {
    source_row: usize,
    /// Clone row the transition leads into, if it exists.
    target_row: Option<usize>,
    t: u32,
    stay: bool,
    regimen: u32,
}

fn stratum_key(spec: &WeightModelSpec, regimen: u32) -> Option<u32> {
    spec.stratify_by_regimen.then_some(regimen)
}

fn structural(cohort: &Cohort, key: &Option<String>, span: &CloneSpan) -> bool {
    key.as_ref()
        .is_some_and(|k| cohort.subjects[span.subject].baseline.value(k) == Some(span.regimen_id as f64))
}

fn adherence_records(clones: &CloneTable, cohort: &Cohort, spec: &WeightModelSpec) -> Vec<Record> {
    let mut out = Vec::new();
    for span in clones.spans() {
        if structural(cohort, &spec.structural_key, &span) {
            continue;
        }
        for i in span.start + 1..span.end {
            let r = &clones.rows[i];
            out.push(Record { source_row: i, target_row: Some(i), t: r.t, stay: r.adherent, regimen: r.regimen_id });
        }
    }
    out
}

fn censoring_records(clones: &CloneTable, which: Component) -> Vec<Record> {
    let mut out = Vec::new();
    for span in clones.spans() {
        for i in span.start + 1..span.end {
            out.push(Record {
                source_row: i - 1,
                target_row: Some(i),
                t: clones.rows[i].t,
                stay: true,
                regimen: span.regimen_id,
            });
        }
        let last = &clones.rows[span.end - 1];
        let reason = if last.event || last.censored {
            None
        } else if last.t >= clones.horizon {
            Some(Component::Admin)
        } else {
            Some(Component::Ltfu)
        };
        // Censoring after the last analyzed visit changes no row's weight.
        if reason == Some(which) && last.t < clones.horizon {
            out.push(Record { source_row: span.end - 1, target_row: None, t: last.t + 1, stay: false, regimen: span.regimen_id });
        }
    }
    out
}

/// A group of records picked out by one categorical level or one bin.
#[derive(Debug, Clone, PartialEq)]
enum Cell {
    Level(String, i64),
    /// `lo < x <= hi`; `None` stands for values outside every bin.
    Bin(String, Option<(f64, f64)>, Vec<(f64, f64)>),
}

impl Cell {
    fn contains(&self, frame: &Frame, i: usize) -> bool {
        match self {
            Cell::Level(var, level) => frame.get(var).map(|c| c[i].round() as i64 == *level).unwrap_or(false),
            Cell::Bin(var, bin, edges) => frame
                .get(var)
                .map(|c| {
                    let x = c[i];
                    match bin {
                        Some((lo, hi)) => *lo < x && x <= *hi,
                        None => !edges.iter().any(|(lo, hi)| *lo < x && x <= *hi),
                    }
                })
                .unwrap_or(false),
        }
    }

    fn label(&self) -> String {
        match self {
            Cell::Level(var, level) => format!("{var}={level}"),
            Cell::Bin(var, Some((lo, hi)), _) => format!("{var}({lo},{hi}]"),
            Cell::Bin(var, None, _) => format!("{var} outside bins"),
        }
    }
}

fn cells_of(term: &Term, idx: &[usize], frame: &Frame) -> Vec<Cell> {
    match term {
        Term::Categorical { var, .. } | Term::Indicators { var, .. } => {
            let Ok(col) = frame.get(var) else { return Vec::new() };
            let mut levels: Vec<i64> = idx.iter().map(|&i| col[i].round() as i64).collect();
            levels.sort_unstable();
            levels.dedup();
            levels.into_iter().map(|l| Cell::Level(var.clone(), l)).collect()
        }
        Term::Bins { var, edges } => edges
            .iter()
            .map(|&e| Cell::Bin(var.clone(), Some(e), edges.clone()))
            .chain(std::iter::once(Cell::Bin(var.clone(), None, edges.clone())))
            .collect(),
        _ => Vec::new(),
    }
}

/// Cells whose outcome never varies within the stratum. The maximum-likelihood
/// fit would push those cells to probability 0 or 1 (quasi-complete
/// separation); taking that limit directly keeps the remaining coefficients
/// finite.
fn determined_cells_pass(idx: &[usize], records: &[Record], frame: &Frame, design: &DesignSpec) -> Vec<(Cell, usize)> {
    let mut out = Vec::new();
    for term in &design.terms {
        let cells = cells_of(term, idx, frame);
        let counts: Vec<(usize, usize)> = cells
            .iter()
            .map(|cell| {
                idx.iter()
                    .filter(|&&i| cell.contains(frame, i))
                    .fold((0, 0), |(n, stays), &i| (n + 1, stays + records[i].stay as usize))
            })
            .collect();
        if counts.iter().filter(|(n, _)| *n > 0).count() < 2 {
            continue;
        }
        for (cell, (n, stays)) in cells.into_iter().zip(counts) {
            if n > 0 && (stays == 0 || stays == n) {
                out.push((cell, n));
            }
        }
    }
    out
}

fn drop_determined_cells(
    mut idx: Vec<usize>,
    records: &[Record],
    frame: &Frame,
    design: &DesignSpec,
) -> (Vec<usize>, Vec<(String, usize)>) {
    let mut dropped = Vec::new();
    loop {
        let found = determined_cells_pass(&idx, records, frame, design);
        if found.is_empty() {
            return (idx, dropped);
        }
        idx.retain(|&i| !found.iter().any(|(cell, _)| cell.contains(frame, i)));
        dropped.extend(found.into_iter().map(|(cell, n)| (cell.label(), n)));
    }
}

fn fit_records(
    clones: &CloneTable,
    frame: &Frame,
    spec: &WeightModelSpec,
    component: Component,
    records: Vec<Record>,
) -> Result<ProcessModels> {
    let n_rows = clones.rows.len();
    let mut keys: Vec<Option<u32>> = records.iter().map(|r| stratum_key(spec, r.regimen)).collect();
    keys.sort_unstable();
    keys.dedup();
    let source: Vec<usize> = records.iter().map(|r| r.source_row).collect();
    let mut rec_frame = frame.select(&source);
    rec_frame.insert("t", records.iter().map(|r| r.t as f64).collect());
    rec_frame.insert("t_rel", records.iter().map(|r| (r.t - clones.start_t) as f64).collect());
    rec_frame.insert("logt", records.iter().map(|r| ((r.t - clones.start_t) as f64).ln_1p()).collect());

    let fits: Vec<Result<(StratumModel, Vec<(usize, f64, f64)>)>> = keys
        .par_iter()
        .map(|&key| {
            let idx: Vec<usize> = (0..records.len()).filter(|&i| stratum_key(spec, records[i].regimen) == key).collect();
            let (idx, dropped) = drop_determined_cells(idx, &records, &rec_frame, &spec.denominator);
            let sub = rec_frame.select(&idx);
            let y: Vec<f64> = idx.iter().map(|&i| records[i].stay as u8 as f64).collect();
            let n_events = y.iter().filter(|&&v| v == 0.0).count();
            let mut model = StratumModel {
                regimen: key,
                n_records: idx.len(),
                n_events,
                numerator: None,
                denominator: None,
                degenerate: n_events == 0 || n_events == idx.len(),
                determined_levels: dropped,
            };
            if model.degenerate {
                return Ok((model, Vec::new()));
            }
            let w = vec![1.0; idx.len()];
            let fit_one = |design: &DesignSpec| -> Result<(DesignSpec, FittedGlm, Vec<f64>)> {
                let resolved = design.resolve(&sub)?;
                let (x, names) = resolved.build(&sub)?;
                let fit = fit_logistic(&x, &names, &y, &w, &FitOptions::default())?;
                let p = fit.predict(&x);
                Ok((resolved, fit, p))
            };
            let (ns, nf, pn) = fit_one(&spec.numerator)?;
            let (ds, df, pd) = fit_one(&spec.denominator)?;
            model.numerator = Some((ns, nf));
            model.denominator = Some((ds, df));
            let probs = idx.iter().enumerate().map(|(j, &i)| (i, pn[j], pd[j])).collect();
            Ok((model, probs))
        })
        .collect();

    let mut p_num = vec![None; n_rows];
    let mut p_den = vec![None; n_rows];
    let mut strata = Vec::new();
    let mut warnings = Vec::new();
    for res in fits {
        let (model, probs) = res?;
        if model.degenerate {
            let label = model.regimen.map(|r| format!("regimen {r}")).unwrap_or_else(|| "pooled stratum".into());
            let msg = format!("{}: {label} has no censoring events or no survivors; weights set to 1", component.name());
            // Censoring processes often have no events inside the window.
            if component == Component::Adherence {
                log::warn!("{msg}");
            } else {
                log::info!("{msg}");
            }
            warnings.push(msg);
        }
        for (cell, n) in &model.determined_levels {
            log::debug!("{}: {cell} has a constant outcome over {n} records; factor 1", component.name());
        }
        for (i, pn, pd) in probs {
            if let Some(row) = records[i].target_row {
                p_num[row] = Some(pn);
                p_den[row] = Some(pd);
            }
        }
        strata.push(model);
    }
    Ok(ProcessModels { component, strata, p_num, p_den, warnings })
}

/// Per-stratum numerator and denominator models for remaining adherent. The
/// risk set is every clone row after the first (adherent through the previous
/// visit by construction); the response is adherence at the row.
pub fn fit_adherence_models(clones: &CloneTable, cohort: &Cohort, spec: &WeightModelSpec) -> Result<ProcessModels> {
    spec.validate(cohort)?;
    let frame = covariate_frame(clones, cohort);
    fit_records(clones, &frame, spec, Component::Adherence, adherence_records(clones, cohort, spec))
}

/// Models for remaining uncensored by administrative end of follow-up or loss
/// to follow-up. Each transition into visit t uses covariates from visit t-1.
pub fn fit_censoring_models(
    clones: &CloneTable,
    cohort: &Cohort,
    which: Component,
    spec: &WeightModelSpec,
) -> Result<ProcessModels> {
    if which == Component::Adherence {
        return fit_adherence_models(clones, cohort, spec);
    }
    spec.validate(cohort)?;
    let frame = covariate_frame(clones, cohort);
    fit_records(clones, &frame, spec, which, censoring_records(clones, which))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    pub component: Component,
    pub p_num: Vec<f64>,
    pub p_den: Vec<f64>,
    pub sw: Vec<f64>,
}

/// Cumulative products of p_num/p_den within each clone, starting at 1 on
/// the first row.
pub fn compute_stabilized_weights(clones: &CloneTable, cohort: &Cohort, models: &ProcessModels) -> Result<WeightTable> {
    let n = clones.rows.len();
    let mut p_num = vec![1.0; n];
    let mut p_den = vec![1.0; n];
    let mut sw = vec![1.0; n];
    for span in clones.spans() {
        let mut acc = 1.0;
        for i in span.start..span.end {
            if i > span.start {
                if let (Some(pn), Some(pd)) = (models.p_num[i], models.p_den[i]) {
                    if pd < 1e-12 {
                        let r = &clones.rows[i];
                        return Err(DtrError::Positivity {
                            subject: cohort.subjects[r.subject].id.clone(),
                            regimen: r.regimen_id,
                            t: r.t,
                            p: pd,
                        });
                    }
                    p_num[i] = pn;
                    p_den[i] = pd;
                    acc *= pn / pd;
                }
            }
            sw[i] = acc;
        }
    }
    Ok(WeightTable { component: models.component, p_num, p_den, sw })
}

pub fn compute_censoring_weights(
    clones: &CloneTable,
    cohort: &Cohort,
    which: Component,
    spec: &WeightModelSpec,
) -> Result<(ProcessModels, WeightTable)> {
    let models = fit_censoring_models(clones, cohort, which, spec)?;
    let table = compute_stabilized_weights(clones, cohort, &models)?;
    Ok((models, table))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WeightSummary {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub p01: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p99: f64,
    pub max: f64,
}

impl WeightSummary {
    pub fn of(values: &[f64]) -> WeightSummary {
        if values.is_empty() {
            return WeightSummary::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p| quantile_sorted(&v, p);
        WeightSummary {
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            p01: q(0.01),
            p25: q(0.25),
            p50: q(0.5),
            p75: q(0.75),
            p99: q(0.99),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedWeights {
    pub w_total: Vec<f64>,
    pub before: WeightSummary,
    pub after: WeightSummary,
}

/// Product of component weights, then optional winsorizing at percentiles of
/// the pre-truncation distribution over at-risk (uncensored) rows.
pub fn combine_weights(clones: &CloneTable, tables: &[&WeightTable], truncation: Option<(f64, f64)>) -> Result<CombinedWeights> {
    let n = clones.rows.len();
    if tables.iter().any(|t| t.sw.len() != n) {
        return Err(DtrError::Data("weight tables do not match the clone table".into()));
    }
    let mut w: Vec<f64> = (0..n).map(|i| tables.iter().map(|t| t.sw[i]).product()).collect();
    let at_risk: Vec<usize> = (0..n).filter(|&i| clones.rows[i].adherent).collect();
    let pick = |w: &[f64]| at_risk.iter().map(|&i| w[i]).collect::<Vec<_>>();
    let before = WeightSummary::of(&pick(&w));
    if let Some((lo, hi)) = truncation {
        let mut sorted = pick(&w);
        sorted.sort_by(f64::total_cmp);
        if !sorted.is_empty() {
            let (a, b) = (quantile_sorted(&sorted, lo), quantile_sorted(&sorted, hi));
            for x in &mut w {
                *x = x.clamp(a, b);
            }
        }
    }
    let after = WeightSummary::of(&pick(&w));
    Ok(CombinedWeights { w_total: w, before, after })
}

/// Copy component weights and the total into the clone rows.
pub fn attach_weights(clones: &mut CloneTable, tables: &[&WeightTable], combined: &CombinedWeights) {
    for (i, row) in clones.rows.iter_mut().enumerate() {
        for t in tables {
            let slot = match t.component {
                Component::Adherence => &mut row.sw_adherence,
                Component::Admin => &mut row.sw_admin,
                Component::Ltfu => &mut row.sw_ltfu,
            };
            *slot = Some(t.sw[i]);
        }
        row.w_total = Some(combined.w_total[i]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratumDiagnostics {
    pub n_rows: usize,
    pub min_p_den: f64,
    pub max_p_den: f64,
    pub n_below: usize,
    pub n_above: usize,
    pub weights: WeightSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositivityReport {
    pub component: Component,
    /// One entry per regimen in the clone table; `None` when nothing was modeled.
    pub strata: Vec<(u32, Option<StratumDiagnostics>)>,
}

/// Extremes of fitted denominator probabilities (below 0.01, above 0.99) and
/// weight distributions per regimen.
pub fn positivity_diagnostics(models: &ProcessModels, table: &WeightTable, clones: &CloneTable) -> PositivityReport {
    let strata = clones
        .regimen_ids
        .iter()
        .map(|&k| {
            let rows: Vec<usize> = (0..clones.rows.len())
                .filter(|&i| clones.rows[i].regimen_id == k && models.p_den[i].is_some())
                .collect();
            if rows.is_empty() {
                return (k, None);
            }
            let p: Vec<f64> = rows.iter().map(|&i| models.p_den[i].unwrap_or(1.0)).collect();
            let sw: Vec<f64> = rows.iter().map(|&i| table.sw[i]).collect();
            (
                k,
                Some(StratumDiagnostics {
                    n_rows: rows.len(),
                    min_p_den: p.iter().cloned().fold(f64::INFINITY, f64::min),
                    max_p_den: p.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    n_below: p.iter().filter(|&&x| x < 0.01).count(),
                    n_above: p.iter().filter(|&&x| x > 0.99).count(),
                    weights: WeightSummary::of(&sw),
                }),
            )
        })
        .collect();
    PositivityReport { component: models.component, strata }
}
