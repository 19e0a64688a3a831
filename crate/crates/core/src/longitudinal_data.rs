//! Canonical visit-indexed cohort: ingestion, validation, emission and
//! descriptive summaries.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{DtrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Race {
    White,
    Black,
    Other,
}

impl Race {
    pub fn code(self) -> f64 {
        match self {
            Race::White => 0.0,
            Race::Black => 1.0,
            Race::Other => 2.0,
        }
    }

    fn parse(s: &str) -> Option<Race> {
        match s.trim().to_ascii_lowercase().as_str() {
            "white" | "0" => Some(Race::White),
            "black" | "1" => Some(Race::Black),
            "other" | "2" => Some(Race::Other),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Race::White => "white",
            Race::Black => "black",
            Race::Other => "other",
        }
    }
}

impl Sex {
    fn parse(s: &str) -> Option<Sex> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m" | "male" | "1" => Some(Sex::Male),
            "f" | "female" | "0" => Some(Sex::Female),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "M",
            Sex::Female => "F",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCovariates {
    pub sex: Sex,
    pub age: f64,
    pub race: Race,
    pub diabetes: bool,
    pub hypertension: bool,
    pub extra: BTreeMap<String, f64>,
}

impl BaselineCovariates {
    /// Numeric value of a named baseline covariate, as used in design matrices.
    pub fn value(&self, name: &str) -> Option<f64> {
        match name {
            "male" => Some(if self.sex == Sex::Male { 1.0 } else { 0.0 }),
            "age" => Some(self.age),
            "race" => Some(self.race.code()),
            "diabetes" => Some(self.diabetes as u8 as f64),
            "hypertension" => Some(self.hypertension as u8 as f64),
            other => self.extra.get(other).copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub t: u32,
    pub marker: Option<f64>,
    pub dose: Option<f64>,
    pub aux: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectHistory {
    pub id: String,
    pub baseline: BaselineCovariates,
    pub visits: Vec<Visit>,
    pub event_time: Option<f64>,
    pub last_followup: u32,
    pub event_observed: bool,
}

/// Which marker value drives adherence decisions and weight covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerMode {
    #[default]
    Current,
    TwoVisitAverage,
}

/// Marker at a visit after last-observation-carried-forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedMarker {
    pub value: Option<f64>,
    /// True when the value was carried forward from an earlier visit.
    pub imputed: bool,
}

impl SubjectHistory {
    pub fn visit_index(&self, t: u32) -> Option<usize> {
        self.visits.binary_search_by_key(&t, |v| v.t).ok()
    }

    pub fn max_visit(&self) -> Option<u32> {
        self.visits.last().map(|v| v.t)
    }

    /// Markers with missing values carried forward and flagged.
    pub fn resolved_markers(&self) -> Vec<ResolvedMarker> {
        let mut last = None;
        self.visits
            .iter()
            .map(|v| match v.marker {
                Some(m) => {
                    last = Some(m);
                    ResolvedMarker { value: Some(m), imputed: false }
                }
                None => ResolvedMarker { value: last, imputed: last.is_some() },
            })
            .collect()
    }

    /// Marker series under the chosen mode (carry-forward applied first).
    pub fn marker_series(&self, mode: MarkerMode) -> Vec<Option<f64>> {
        let resolved = self.resolved_markers();
        match mode {
            MarkerMode::Current => resolved.iter().map(|r| r.value).collect(),
            MarkerMode::TwoVisitAverage => (0..resolved.len())
                .map(|i| {
                    let cur = resolved[i].value?;
                    match i.checked_sub(1).and_then(|j| resolved[j].value) {
                        Some(prev) => Some(0.5 * (cur + prev)),
                        None => Some(cur),
                    }
                })
                .collect(),
        }
    }

    /// Visit row to which the observed event is attributed, if any.
    pub fn event_visit(&self) -> Option<u32> {
        if !self.event_observed {
            return None;
        }
        let t = self.event_time?;
        Some((t.ceil() as u32).saturating_sub(1))
    }
}

/// 1 iff the event occurs in the interval (t, t+1].
pub fn event_indicator(subject: &SubjectHistory, t: u32) -> bool {
    match (subject.event_observed, subject.event_time) {
        (true, Some(et)) => (t as f64) < et && et <= t as f64 + 1.0,
        _ => false,
    }
}

/// Declared covariate names beyond the fixed baseline set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub baseline_extra: Vec<String>,
    pub aux: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub subjects: Vec<SubjectHistory>,
    pub visit_horizon: u32,
    pub schema: Schema,
}

impl Cohort {
    pub fn new(subjects: Vec<SubjectHistory>, schema: Schema) -> Result<Cohort> {
        let mut ids = HashSet::new();
        for s in &subjects {
            if !ids.insert(s.id.as_str()) {
                return Err(DtrError::Data(format!("duplicate subject id {}", s.id)));
            }
            validate_subject(s, &schema)?;
        }
        let visit_horizon = subjects
            .iter()
            .map(|s| s.last_followup.max(s.max_visit().unwrap_or(0)))
            .max()
            .unwrap_or(0);
        Ok(Cohort { subjects, visit_horizon, schema })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}

fn validate_subject(s: &SubjectHistory, schema: &Schema) -> Result<()> {
    let bad = |msg: String| Err(DtrError::Data(format!("subject {}: {msg}", s.id)));
    if !(s.baseline.age >= 0.0) {
        return bad(format!("age {} is negative or missing", s.baseline.age));
    }
    for key in s.baseline.extra.keys() {
        if !schema.baseline_extra.contains(key) {
            return bad(format!("undeclared baseline covariate `{key}`"));
        }
    }
    for w in s.visits.windows(2) {
        if w[1].t == w[0].t {
            return Err(DtrError::DuplicateVisit { subject: s.id.clone(), t: w[1].t });
        }
        if w[1].t < w[0].t {
            return Err(DtrError::NonMonotone { subject: s.id.clone(), prev: w[0].t, t: w[1].t });
        }
    }
    for v in &s.visits {
        if let Some(d) = v.dose {
            if !(d >= 0.0) {
                return bad(format!("negative dose at t={}", v.t));
            }
        }
        if let Some(m) = v.marker {
            if !(m > 0.0 && m < 100.0) {
                return bad(format!("marker {m} outside (0, 100) at t={}", v.t));
            }
        }
        if v.aux.keys().any(|k| !schema.aux.contains(k)) {
            return bad(format!("undeclared aux column at t={}", v.t));
        }
    }
    if let Some(et) = s.event_time {
        if !(et > 0.0) {
            return bad(format!("event_time {et} must be positive"));
        }
    }
    if s.event_observed && s.event_time.is_none() {
        return bad("event_observed without event_time".into());
    }
    if let Some(mt) = s.max_visit() {
        if mt > s.last_followup {
            return bad(format!("visit at t={mt} after last follow-up {}", s.last_followup));
        }
    }
    Ok(())
}

/// Column names used when reading a cohort file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub subject_id: String,
    pub t: String,
    pub marker: String,
    pub dose: String,
    pub sex: String,
    pub age: String,
    pub race: String,
    pub diabetes: String,
    pub hypertension: String,
    pub extra: Vec<String>,
    pub aux: Vec<String>,
    pub delimiter: char,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            subject_id: "subject_id".into(),
            t: "t".into(),
            marker: "marker".into(),
            dose: "dose".into(),
            sex: "sex".into(),
            age: "age".into(),
            race: "race".into(),
            diabetes: "diabetes".into(),
            hypertension: "hypertension".into(),
            extra: Vec::new(),
            aux: Vec::new(),
            delimiter: ',',
        }
    }
}

impl ColumnMap {
    pub fn for_schema(schema: &Schema) -> ColumnMap {
        ColumnMap { extra: schema.baseline_extra.clone(), aux: schema.aux.clone(), ..Default::default() }
    }

    fn delimiter_byte(&self) -> Result<u8> {
        u8::try_from(self.delimiter)
            .map_err(|_| DtrError::Config(format!("delimiter {:?} is not a single byte", self.delimiter)))
    }
}

/// A rejected input row and the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct RowDiagnostic {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub cohort: Cohort,
    pub rejected: Vec<RowDiagnostic>,
}

fn parse_opt(field: &str) -> std::result::Result<Option<f64>, String> {
    let f = field.trim();
    if f.is_empty() {
        return Ok(None);
    }
    f.parse::<f64>().map(Some).map_err(|_| format!("cannot parse `{f}` as a number"))
}

fn parse_bool(field: &str) -> Option<bool> {
    match field.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

struct RawRow {
    line: u64,
    t: u32,
    record: csv::StringRecord,
}

/// Read a visit file. Lines starting with `#` are comments.
pub fn ingest_cohort<R: Read>(source: R, columns: &ColumnMap) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(columns.delimiter_byte()?)
        .comment(Some(b'#'))
        .flexible(false)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DtrError::Schema(format!("missing required column `{name}`")))
    };
    let i_id = find(&columns.subject_id)?;
    let i_t = find(&columns.t)?;
    let i_marker = find(&columns.marker)?;
    let i_dose = find(&columns.dose)?;
    let i_sex = find(&columns.sex)?;
    let i_age = find(&columns.age)?;
    let i_race = find(&columns.race)?;
    let i_diab = find(&columns.diabetes)?;
    let i_htn = find(&columns.hypertension)?;
    let i_extra: Vec<usize> = columns.extra.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let i_aux: Vec<usize> = columns.aux.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let mut rejected = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<RawRow>> = HashMap::new();
    for rec in reader.records() {
        let record = rec?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = record.get(i_id).unwrap_or("").trim().to_string();
        if id.is_empty() {
            rejected.push(RowDiagnostic { line, message: "empty subject_id".into() });
            continue;
        }
        let t = match record.get(i_t).unwrap_or("").trim().parse::<u32>() {
            Ok(t) => t,
            Err(_) => {
                rejected.push(RowDiagnostic { line, message: format!("subject {id}: unparseable visit index") });
                continue;
            }
        };
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(RawRow { line, t, record });
    }

    let schema = Schema { baseline_extra: columns.extra.clone(), aux: columns.aux.clone() };
    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let rows = groups.remove(&id).expect("grouped id");
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert(r.t) {
                return Err(DtrError::DuplicateVisit { subject: id, t: r.t });
            }
        }
        for w in rows.windows(2) {
            if w[1].t < w[0].t {
                return Err(DtrError::NonMonotone { subject: id, prev: w[0].t, t: w[1].t });
            }
        }
        let mut visits = Vec::with_capacity(rows.len());
        let mut baseline: Option<BaselineCovariates> = None;
        for r in &rows {
            let visit = (|| -> std::result::Result<Visit, String> {
                let marker = parse_opt(&r.record[i_marker])?;
                if let Some(m) = marker {
                    if !(m > 0.0 && m < 100.0) {
                        return Err(format!("marker {m} outside (0, 100)"));
                    }
                }
                let dose = parse_opt(&r.record[i_dose])?;
                if let Some(d) = dose {
                    if d < 0.0 {
                        return Err(format!("negative dose {d}"));
                    }
                }
                let mut aux = BTreeMap::new();
                for (name, &i) in columns.aux.iter().zip(&i_aux) {
                    if let Some(v) = parse_opt(&r.record[i])? {
                        aux.insert(name.clone(), v);
                    }
                }
                Ok(Visit { t: r.t, marker, dose, aux })
            })();
            let visit = match visit {
                Ok(v) => v,
                Err(msg) => {
                    rejected.push(RowDiagnostic { line: r.line, message: format!("subject {id}, t={}: {msg}", r.t) });
                    continue;
                }
            };
            if baseline.is_none() {
                match parse_baseline(&r.record, [i_sex, i_age, i_race, i_diab, i_htn], &columns.extra, &i_extra) {
                    Ok(b) => baseline = Some(b),
                    Err(msg) => {
                        rejected.push(RowDiagnostic {
                            line: r.line,
                            message: format!("subject {id}, t={}: baseline {msg}", r.t),
                        });
                        continue;
                    }
                }
            }
            visits.push(visit);
        }
        let Some(baseline) = baseline else {
            rejected.push(RowDiagnostic { line: rows[0].line, message: format!("subject {id}: no valid baseline row") });
            continue;
        };
        let last_followup = visits.last().map(|v| v.t).unwrap_or(0);
        subjects.push(SubjectHistory { id, baseline, visits, event_time: None, last_followup, event_observed: false });
    }
    Ok(Ingested { cohort: Cohort::new(subjects, schema)?, rejected })
}

fn parse_baseline(
    rec: &csv::StringRecord,
    idx: [usize; 5],
    extra_names: &[String],
    extra_idx: &[usize],
) -> std::result::Result<BaselineCovariates, String> {
    let sex = Sex::parse(&rec[idx[0]]).ok_or_else(|| format!("sex `{}` not recognized", &rec[idx[0]]))?;
    let age = parse_opt(&rec[idx[1]])?.ok_or("age missing")?;
    if age < 0.0 {
        return Err(format!("age {age} negative"));
    }
    let race = Race::parse(&rec[idx[2]]).ok_or_else(|| format!("race `{}` not in {{white, black, other}}", &rec[idx[2]]))?;
    let diabetes = parse_bool(&rec[idx[3]]).ok_or("diabetes not binary")?;
    let hypertension = parse_bool(&rec[idx[4]]).ok_or("hypertension not binary")?;
    let mut extra = BTreeMap::new();
    for (name, &i) in extra_names.iter().zip(extra_idx) {
        let v = parse_opt(&rec[i])?.ok_or_else(|| format!("{name} missing"))?;
        extra.insert(name.clone(), v);
    }
    Ok(BaselineCovariates { sex, age, race, diabetes, hypertension, extra })
}

/// Merge an outcomes file (subject_id, event_time, event_observed, last_followup).
pub fn ingest_outcomes<R: Read>(source: R, cohort: &mut Cohort, delimiter: char) -> Result<Vec<RowDiagnostic>> {
    let delim = u8::try_from(delimiter).map_err(|_| DtrError::Config("delimiter must be one byte".into()))?;
    let mut reader = csv::ReaderBuilder::new().delimiter(delim).comment(Some(b'#')).from_reader(source);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DtrError::Schema(format!("outcomes file missing column `{name}`")))
    };
    let (i_id, i_et, i_obs, i_lf) =
        (find("subject_id")?, find("event_time")?, find("event_observed")?, find("last_followup")?);
    let index: HashMap<String, usize> = cohort.subjects.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
    let mut rejected = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let id = rec[i_id].trim();
        let Some(&si) = index.get(id) else {
            rejected.push(RowDiagnostic { line, message: format!("unknown subject {id}") });
            continue;
        };
        let parsed = (|| -> std::result::Result<(Option<f64>, bool, u32), String> {
            let et = parse_opt(&rec[i_et])?;
            let obs = parse_bool(&rec[i_obs]).ok_or("event_observed not binary")?;
            let lf = rec[i_lf].trim().parse::<u32>().map_err(|_| "last_followup not a visit index".to_string())?;
            Ok((et, obs, lf))
        })();
        match parsed {
            Ok((et, obs, lf)) => {
                let s = &mut cohort.subjects[si];
                s.event_time = et;
                s.event_observed = obs;
                s.last_followup = lf;
                validate_subject(s, &cohort.schema)?;
            }
            Err(msg) => rejected.push(RowDiagnostic { line, message: format!("subject {id}: {msg}") }),
        }
    }
    cohort.visit_horizon = cohort
        .subjects
        .iter()
        .map(|s| s.last_followup.max(s.max_visit().unwrap_or(0)))
        .max()
        .unwrap_or(0);
    Ok(rejected)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write the canonical visit table. Baseline values are repeated on every row.
pub fn emit_cohort<W: Write>(cohort: &Cohort, sink: W, delimiter: char) -> Result<()> {
    let delim = u8::try_from(delimiter).map_err(|_| DtrError::Config("delimiter must be one byte".into()))?;
    let mut header: Vec<String> = ["subject_id", "t", "marker", "dose", "sex", "age", "race", "diabetes", "hypertension"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(cohort.schema.baseline_extra.iter().cloned());
    header.extend(cohort.schema.aux.iter().cloned());
    let mut sink = sink;
    writeln!(sink, "# columns: {}", header.join(" "))?;
    let mut w = csv::WriterBuilder::new().delimiter(delim).from_writer(sink);
    w.write_record(&header)?;
    for s in &cohort.subjects {
        let b = &s.baseline;
        for v in &s.visits {
            let mut row = vec![
                s.id.clone(),
                v.t.to_string(),
                fmt_opt(v.marker),
                fmt_opt(v.dose),
                b.sex.as_str().to_string(),
                b.age.to_string(),
                b.race.as_str().to_string(),
                (b.diabetes as u8).to_string(),
                (b.hypertension as u8).to_string(),
            ];
            row.extend(cohort.schema.baseline_extra.iter().map(|k| fmt_opt(b.extra.get(k).copied())));
            row.extend(cohort.schema.aux.iter().map(|k| fmt_opt(v.aux.get(k).copied())));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn emit_outcomes<W: Write>(cohort: &Cohort, sink: W, delimiter: char) -> Result<()> {
    let delim = u8::try_from(delimiter).map_err(|_| DtrError::Config("delimiter must be one byte".into()))?;
    let mut sink = sink;
    writeln!(sink, "# columns: subject_id event_time event_observed last_followup")?;
    let mut w = csv::WriterBuilder::new().delimiter(delim).from_writer(sink);
    w.write_record(["subject_id", "event_time", "event_observed", "last_followup"])?;
    for s in &cohort.subjects {
        w.write_record([
            s.id.clone(),
            fmt_opt(s.event_time),
            (s.event_observed as u8).to_string(),
            s.last_followup.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Dose-change category of one consecutive visit pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoseChange {
    Increase,
    Decrease,
    Maintain,
}

pub fn classify_dose_change(prev: f64, new: f64, threshold: f64) -> DoseChange {
    let ratio = new / prev;
    let eps = 1e-12;
    if ratio >= 1.0 + threshold - eps {
        DoseChange::Increase
    } else if ratio <= 1.0 - threshold + eps {
        DoseChange::Decrease
    } else {
        DoseChange::Maintain
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileBin {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub increase: Option<f64>,
    pub decrease: Option<f64>,
    pub maintain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoseChangeProfile {
    pub threshold: f64,
    pub bins: Vec<ProfileBin>,
    /// Pairs lacking a dose, with previous dose 0, with a visit gap, or with no marker.
    pub ineligible: usize,
    /// Eligible pairs whose marker lies outside every bin.
    pub out_of_range: usize,
}

/// Share of person-months with dose increases, decreases and maintenance,
/// binned by the marker at the later visit of each pair. Bins are `[lo, hi)`.
pub fn dose_change_profile(cohort: &Cohort, threshold: f64, edges: &[f64]) -> Result<DoseChangeProfile> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(DtrError::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(DtrError::Config("marker bin edges must be strictly increasing, at least two".into()));
    }
    let nb = edges.len() - 1;
    let mut counts = vec![[0usize; 3]; nb];
    let mut ineligible = 0;
    let mut out_of_range = 0;
    for s in &cohort.subjects {
        let markers = s.resolved_markers();
        for i in 1..s.visits.len() {
            let (a, b) = (&s.visits[i - 1], &s.visits[i]);
            let (Some(pd), Some(nd), Some(m)) = (a.dose, b.dose, markers[i].value) else {
                ineligible += 1;
                continue;
            };
            if pd <= 0.0 || b.t != a.t + 1 {
                ineligible += 1;
                continue;
            }
            let Some(bin) = (0..nb).find(|&j| m >= edges[j] && m < edges[j + 1]) else {
                out_of_range += 1;
                continue;
            };
            let slot = match classify_dose_change(pd, nd, threshold) {
                DoseChange::Increase => 0,
                DoseChange::Decrease => 1,
                DoseChange::Maintain => 2,
            };
            counts[bin][slot] += 1;
        }
    }
    let bins = counts
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let n = c.iter().sum::<usize>();
            let share = |k: usize| (n > 0).then(|| c[k] as f64 / n as f64);
            ProfileBin { lo: edges[j], hi: edges[j + 1], n, increase: share(0), decrease: share(1), maintain: share(2) }
        })
        .collect();
    Ok(DoseChangeProfile { threshold, bins, ineligible, out_of_range })
}

#[derive(Debug, Clone, PartialEq)]
pub enum SummaryCell {
    Count { n: usize, pct: Option<f64> },
    MeanSd { mean: Option<f64>, sd: Option<f64>, n: usize },
}

impl std::fmt::Display for SummaryCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SummaryCell::Count { n, pct: Some(p) } => write!(f, "{n} ({p:.1})"),
            SummaryCell::Count { n, pct: None } => write!(f, "{n} (-)"),
            SummaryCell::MeanSd { mean: Some(m), sd: Some(s), .. } => write!(f, "{m:.2} ({s:.2})"),
            SummaryCell::MeanSd { mean: Some(m), sd: None, .. } => write!(f, "{m:.2} (-)"),
            SummaryCell::MeanSd { mean: None, .. } => write!(f, "-"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variable: String,
    pub level: String,
    pub cells: Vec<SummaryCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemographicTable {
    pub columns: Vec<String>,
    pub rows: Vec<SummaryRow>,
}

impl DemographicTable {
    pub fn write_dsv<W: Write>(&self, sink: W, delimiter: u8) -> Result<()> {
        let mut sink = sink;
        let mut header = vec!["variable".to_string(), "level".to_string()];
        header.extend(self.columns.iter().cloned());
        writeln!(sink, "# columns: {}", header.join(" "))?;
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(sink);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.variable.clone(), r.level.clone()];
            rec.extend(r.cells.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_sd(xs: &[f64]) -> SummaryCell {
    let n = xs.len();
    if n == 0 {
        return SummaryCell::MeanSd { mean: None, sd: None, n };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    SummaryCell::MeanSd { mean: Some(mean), sd, n }
}

/// Table of baseline characteristics, overall and split by a binary covariate
/// (`sex`, `diabetes`, `hypertension` or a 0/1 extra covariate).
pub fn summarize_cohort(cohort: &Cohort, split_by: &str) -> Result<DemographicTable> {
    let key = if split_by == "sex" { "male" } else { split_by };
    let (hi_label, lo_label) = if split_by == "sex" {
        ("Male".to_string(), "Female".to_string())
    } else {
        (format!("{split_by}=1"), format!("{split_by}=0"))
    };
    let mut groups: [Vec<&SubjectHistory>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for s in &cohort.subjects {
        let v = s
            .baseline
            .value(key)
            .ok_or_else(|| DtrError::Config(format!("unknown split covariate `{split_by}`")))?;
        groups[0].push(s);
        match v {
            1.0 => groups[1].push(s),
            0.0 => groups[2].push(s),
            _ => return Err(DtrError::Config(format!("split covariate `{split_by}` is not binary"))),
        }
    }
    let count_row = |variable: &str, level: &str, pred: &dyn Fn(&SubjectHistory) -> bool| SummaryRow {
        variable: variable.into(),
        level: level.into(),
        cells: groups
            .iter()
            .map(|g| {
                let n = g.iter().filter(|s| pred(s)).count();
                SummaryCell::Count { n, pct: (!g.is_empty()).then(|| 100.0 * n as f64 / g.len() as f64) }
            })
            .collect(),
    };
    let mut rows = vec![count_row("N", "", &|_| true)];
    rows.push(SummaryRow {
        variable: "age".into(),
        level: "mean (SD)".into(),
        cells: groups.iter().map(|g| mean_sd(&g.iter().map(|s| s.baseline.age).collect::<Vec<_>>())).collect(),
    });
    rows.push(count_row("sex", "male", &|s| s.baseline.sex == Sex::Male));
    rows.push(count_row("sex", "female", &|s| s.baseline.sex == Sex::Female));
    for race in [Race::White, Race::Black, Race::Other] {
        rows.push(count_row("race", race.as_str(), &move |s| s.baseline.race == race));
    }
    rows.push(count_row("diabetes", "yes", &|s| s.baseline.diabetes));
    rows.push(count_row("hypertension", "yes", &|s| s.baseline.hypertension));
    for name in &cohort.schema.baseline_extra {
        rows.push(SummaryRow {
            variable: name.clone(),
            level: "mean (SD)".into(),
            cells: groups
                .iter()
                .map(|g| mean_sd(&g.iter().filter_map(|s| s.baseline.extra.get(name).copied()).collect::<Vec<_>>()))
                .collect(),
        });
    }
    Ok(DemographicTable { columns: vec!["overall".into(), hi_label, lo_label], rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "subject_id,t,marker,dose,sex,age,race,diabetes,hypertension\n";

    fn ingest(body: &str) -> Result<Ingested> {
        ingest_cohort(format!("{HEADER}{body}").as_bytes(), &ColumnMap::default())
    }

    pub(crate) fn subject(id: &str, age: f64, sex: Sex) -> SubjectHistory {
        SubjectHistory {
            id: id.into(),
            baseline: BaselineCovariates {
                sex,
                age,
                race: Race::White,
                diabetes: false,
                hypertension: true,
                extra: BTreeMap::new(),
            },
            visits: vec![Visit { t: 0, marker: Some(33.0), dose: Some(1.0), aux: BTreeMap::new() }],
            event_time: None,
            last_followup: 0,
            event_observed: false,
        }
    }

    #[test]
    fn two_rows_one_subject() {
        let c = ingest("a,0,33,1,M,50,white,0,1\na,1,34,1.2,,,,,\n").unwrap().cohort;
        assert_eq!(c.len(), 1);
        assert_eq!(c.subjects[0].visits.len(), 2);
        assert_eq!(c.subjects[0].baseline.age, 50.0);
    }

    #[test]
    fn duplicate_visit_names_pair() {
        let err = ingest("7,3,33,1,M,50,white,0,1\n7,3,34,1,M,50,white,0,1\n").unwrap_err();
        match err {
            DtrError::DuplicateVisit { subject, t } => assert_eq!((subject.as_str(), t), ("7", 3)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_monotone_rejected() {
        let err = ingest("7,2,33,1,M,50,white,0,1\n7,1,34,1,M,50,white,0,1\n").unwrap_err();
        assert!(matches!(err, DtrError::NonMonotone { prev: 2, t: 1, .. }));
    }

    #[test]
    fn missing_column_is_schema_error() {
        let err = ingest_cohort("subject_id,t,marker\n1,0,33\n".as_bytes(), &ColumnMap::default()).unwrap_err();
        assert!(matches!(err, DtrError::Schema(_)));
    }

    #[test]
    fn bad_required_field_rejects_row() {
        let out = ingest("a,0,33,1,M,50,white,0,1\na,1,abc,1,M,50,white,0,1\n").unwrap();
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.cohort.subjects[0].visits.len(), 1);
    }

    #[test]
    fn event_indicator_interval_is_right_closed() {
        let mut s = subject("x", 40.0, Sex::Male);
        s.event_observed = true;
        s.event_time = Some(3.4);
        assert!(event_indicator(&s, 3));
        assert!(!event_indicator(&s, 2));
        s.event_time = Some(4.0);
        assert!(event_indicator(&s, 3));
        assert!(!event_indicator(&s, 4));
        assert_eq!(s.event_visit(), Some(3));
    }

    #[test]
    fn carry_forward_flags_imputed_markers() {
        let c = ingest("a,0,33,1,M,50,white,0,1\na,1,,1,,,,,\na,2,35,1,,,,,\n").unwrap().cohort;
        let r = c.subjects[0].resolved_markers();
        assert_eq!(r[1], ResolvedMarker { value: Some(33.0), imputed: true });
        assert_eq!(c.subjects[0].marker_series(MarkerMode::TwoVisitAverage)[2], Some(34.0));
    }

    #[test]
    fn dose_change_buckets() {
        assert_eq!(classify_dose_change(10.0, 14.0, 0.25), DoseChange::Increase);
        assert_eq!(classify_dose_change(10.0, 10.0, 0.25), DoseChange::Maintain);
        assert_eq!(classify_dose_change(10.0, 7.5, 0.25), DoseChange::Decrease);
    }

    #[test]
    fn empty_bin_is_absent() {
        let c = ingest("a,0,33,10,M,50,white,0,1\na,1,33,14,,,,,\n").unwrap().cohort;
        let p = dose_change_profile(&c, 0.25, &[20.0, 30.0, 40.0]).unwrap();
        assert_eq!(p.bins[0].increase, None);
        assert_eq!(p.bins[1].increase, Some(1.0));
    }

    #[test]
    fn summary_mean_and_sd() {
        let c = Cohort::new(vec![subject("a", 40.0, Sex::Male), subject("b", 60.0, Sex::Male)], Schema::default())
            .unwrap();
        let t = summarize_cohort(&c, "sex").unwrap();
        match &t.rows[1].cells[0] {
            SummaryCell::MeanSd { mean, sd, .. } => {
                assert_eq!(*mean, Some(50.0));
                assert!((sd.unwrap() - 14.142).abs() < 1e-3);
            }
            c => panic!("{c:?}"),
        }
        assert_eq!(t.rows[0].cells[2], SummaryCell::Count { n: 0, pct: None });
    }
}
