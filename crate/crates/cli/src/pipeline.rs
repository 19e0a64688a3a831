//! Staged pipeline: ingest, clone, weights, log-rank, MSM, report. Every stage
//! writes its tables into the output directory; a manifest records hashes of
//! the config and of every artifact.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use dtr_core::logrank::{self, LogRankResult, PairedSurvival};
use dtr_core::longitudinal_data::{
    dose_change_profile, emit_cohort, emit_outcomes, ingest_cohort, ingest_outcomes, summarize_cohort, RowDiagnostic,
};
use dtr_core::msm::{build_person_time, fit_msm, report, write_plot_points, EffectForm, PlotPoint, ReportOptions, Z975};
use dtr_core::regimen::{clone_cohort, CloneTable, RegimenGrid};
use dtr_core::simulator::usrds::simulate_usrds_like;
use dtr_core::simulator::{
    calibrate_rates, replication_rng, run_study, simulate_cohort, write_estimates, SelectionModel, StudyResult,
};
use dtr_core::weights::{
    attach_weights, combine_weights, compute_censoring_weights, compute_stabilized_weights, fit_adherence_models,
    positivity_diagnostics, Component, ProcessModels, WeightSummary, WeightTable,
};
use dtr_core::{Cohort, DtrError, HazardRatioReport};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, InputConfig, RegimenConfig, RunConfig};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Clone,
    Weights,
    Logrank,
    Msm,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Clone => "clone",
            Stage::Weights => "weights",
            Stage::Logrank => "logrank",
            Stage::Msm => "msm",
            Stage::Report => "report",
        }
    }
}

fn at(stage: &'static str) -> impl Fn(DtrError) -> CliError {
    move |source| CliError::Stage { stage, source }
}

pub fn form_name(form: EffectForm) -> &'static str {
    match form {
        EffectForm::Linear => "linear",
        EffectForm::Factor => "factor",
        EffectForm::LinearXLogtime => "linear_x_logtime",
        EffectForm::FactorXLogtime => "factor_x_logtime",
    }
}

/// Writes `# columns:` followed by a delimited table.
pub fn write_table<W: Write>(sink: W, delimiter: u8, header: &[&str], rows: &[Vec<String>]) -> dtr_core::Result<()> {
    let mut sink = sink;
    writeln!(sink, "# columns: {}", header.join(" "))?;
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(sink);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

/// Output directory bookkeeping.
pub struct Artifacts {
    dir: PathBuf,
    delimiter: u8,
    files: Vec<String>,
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    status: &'a str,
    config_sha256: String,
    seeds: Seeds,
    artifacts: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct Seeds {
    run: u64,
    simulation: u64,
}

impl Artifacts {
    pub fn new(dir: &Path, delimiter: u8) -> Result<Artifacts, CliError> {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Output { path: dir.display().to_string(), source })?;
        let marker = dir.join(FAILURE_MARKER);
        if marker.exists() {
            std::fs::remove_file(&marker).map_err(|source| CliError::Output { path: marker.display().to_string(), source })?;
        }
        Ok(Artifacts { dir: dir.to_path_buf(), delimiter, files: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Create `name`, hand it to `f`, and record it. Errors from `f` belong to `stage`.
    pub fn write<F>(&mut self, stage: &'static str, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<File>, u8) -> dtr_core::Result<()>,
    {
        let path = self.path(name);
        let file = File::create(&path).map_err(|source| CliError::Output { path: path.display().to_string(), source })?;
        let mut w = BufWriter::new(file);
        f(&mut w, self.delimiter).map_err(at(stage))?;
        w.flush().map_err(|source| CliError::Output { path: path.display().to_string(), source })?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    fn fail(&self, err: &CliError) {
        let text = format!("stage: {}\nexit_code: {}\nerror: {err}\n", err.stage(), err.exit_code());
        if let Err(e) = std::fs::write(self.path(FAILURE_MARKER), text) {
            log::error!("cannot write failure marker: {e}");
        }
    }

    fn manifest(&self, cfg: &RunConfig, command: &str, status: &str) -> Result<(), CliError> {
        let mut files = self.files.clone();
        files.sort();
        let mut artifacts = Vec::with_capacity(files.len());
        for f in files {
            let path = self.path(&f);
            let bytes = std::fs::read(&path).map_err(|source| CliError::Output { path: path.display().to_string(), source })?;
            artifacts.push(ManifestEntry { file: f, bytes: bytes.len() as u64, sha256: hex(&Sha256::digest(&bytes)) });
        }
        let m = Manifest {
            tool: "dtr",
            version: env!("CARGO_PKG_VERSION"),
            command,
            status,
            config_sha256: cfg.hash(),
            seeds: Seeds { run: cfg.seed, simulation: cfg.simulation.seed },
            artifacts,
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
        let path = self.path(MANIFEST);
        std::fs::write(&path, text).map_err(|source| CliError::Output { path: path.display().to_string(), source })
    }

    /// Manifest on success; failure marker plus manifest of what exists otherwise.
    pub fn finish<T>(&self, cfg: &RunConfig, command: &str, result: Result<T, CliError>) -> Result<T, CliError> {
        match result {
            Ok(v) => {
                self.manifest(cfg, command, "ok")?;
                Ok(v)
            }
            Err(e) => {
                self.fail(&e);
                if let Err(m) = self.manifest(cfg, command, "failed") {
                    log::error!("cannot write manifest: {m}");
                }
                Err(e)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogrankRow {
    pub a: u32,
    pub b: u32,
    pub weighted: bool,
    pub result: LogRankResult,
}

/// Everything the stages produced, for callers that continue in memory.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub cohort: Option<Cohort>,
    pub clones: Option<CloneTable>,
    pub logrank: Vec<LogrankRow>,
    pub reports: Vec<HazardRatioReport>,
    pub artifacts: Vec<String>,
}

/// Runs every stage up to and including `until`.
pub fn run_pipeline(cfg: &RunConfig, until: Stage) -> Result<RunOutput, CliError> {
    let grid = cfg.validate()?;
    let mut art = Artifacts::new(&cfg.output_dir, cfg.delimiter_byte()?)?;
    let result = run_stages(cfg, &grid, until, &mut art);
    let mut out = art.finish(cfg, until.name(), result)?;
    out.artifacts = art.files().to_vec();
    Ok(out)
}

fn run_stages(cfg: &RunConfig, grid: &RegimenGrid, until: Stage, art: &mut Artifacts) -> Result<RunOutput, CliError> {
    let mut out = RunOutput::default();
    log::info!("ingest");
    let cohort = ingest(cfg, art)?;
    if until >= Stage::Clone {
        log::info!("clone: {} subjects x {} regimens", cohort.len(), grid.len());
        let mut clones = clone_cohort(&cohort, grid, cfg.start_t, &cfg.clone);
        write_clones(&clones, &cohort, grid, art)?;
        let weighted = !cfg.weights.components.is_empty();
        if until >= Stage::Weights && weighted {
            log::info!("weights: {:?}", cfg.weights.components);
            weights(cfg, &cohort, &mut clones, art)?;
        }
        if until >= Stage::Logrank {
            out.logrank = logrank_stage(cfg, grid, &cohort, &clones, weighted, art)?;
        }
        if until >= Stage::Msm {
            out.reports = msm_stage(cfg, grid, &cohort, &clones, weighted, until >= Stage::Report, art)?;
        }
        out.clones = Some(clones);
    }
    out.cohort = Some(cohort);
    Ok(out)
}

/// Loads or generates the cohort and writes the canonical copies plus the
/// descriptive tables.
pub fn ingest(cfg: &RunConfig, art: &mut Artifacts) -> Result<Cohort, CliError> {
    let stage = "ingest";
    let mut rejected: Vec<RowDiagnostic> = Vec::new();
    let cohort = match &cfg.input {
        InputConfig::Files { cohort, outcomes, columns } => {
            let open = |p: &Path| File::open(p).map_err(|e| at(stage)(DtrError::Data(format!("{}: {e}", p.display()))));
            let ing = ingest_cohort(open(cohort)?, columns).map_err(at(stage))?;
            let mut c = ing.cohort;
            rejected.extend(ing.rejected);
            if let Some(o) = outcomes {
                rejected.extend(ingest_outcomes(open(o)?, &mut c, columns.delimiter).map_err(at(stage))?);
            }
            c
        }
        InputConfig::UsrdsLike(u) => simulate_usrds_like(&mut ChaCha20Rng::seed_from_u64(cfg.seed), u).map_err(at(stage))?,
        InputConfig::Simulation => simulated_cohort(cfg).map_err(at(stage))?,
    };
    let delim = char::from(cfg.delimiter_byte()?);
    art.write(stage, "cohort.csv", |w, _| emit_cohort(&cohort, w, delim))?;
    art.write(stage, "outcomes.csv", |w, _| emit_outcomes(&cohort, w, delim))?;
    let rows: Vec<Vec<String>> = rejected.iter().map(|r| vec![r.line.to_string(), r.message.clone()]).collect();
    art.write(stage, "ingest_rejected.csv", |w, d| write_table(w, d, &["line", "message"], &rows))?;
    if !rejected.is_empty() {
        log::warn!("{} input rows rejected", rejected.len());
    }
    let demo = summarize_cohort(&cohort, &cfg.profile.split_by).map_err(at(stage))?;
    art.write(stage, "demographics.csv", |w, d| demo.write_dsv(w, d))?;
    let points = dose_change_points(&cohort, cfg.profile.threshold, &cfg.profile.marker_edges).map_err(at(stage))?;
    art.write(stage, "plot_dose_change.csv", |w, d| write_plot_points(&points, w, d))?;
    Ok(cohort)
}

/// Replication 0 of the configured simulation scenario.
fn simulated_cohort(cfg: &RunConfig) -> dtr_core::Result<Cohort> {
    let sim = &cfg.simulation;
    let cal = calibrate_rates(sim)?;
    let selection = SelectionModel::new(sim, &cal.rates, sim.gamma());
    Ok(simulate_cohort(&mut replication_rng(sim.seed, 0), sim, &cal.rates, &selection)?.cohort)
}

/// Wilson score interval for k successes out of n.
fn wilson(k: usize, n: usize) -> (f64, f64) {
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let z2 = Z975 * Z975;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = Z975 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Share of person-months with each dose-change category per marker bin, one
/// row per (bin, category); x is the bin midpoint.
pub fn dose_change_points(cohort: &Cohort, threshold: f64, edges: &[f64]) -> dtr_core::Result<Vec<PlotPoint>> {
    let profile = dose_change_profile(cohort, threshold, edges)?;
    let mut points = Vec::new();
    for b in &profile.bins {
        for (series, share) in [("increase", b.increase), ("decrease", b.decrease), ("maintain", b.maintain)] {
            if let Some(p) = share {
                let (lo, hi) = wilson((p * b.n as f64).round() as usize, b.n);
                points.push(PlotPoint { x: 0.5 * (b.lo + b.hi), series: series.into(), value: p, ci_low: lo, ci_high: hi });
            }
        }
    }
    Ok(points)
}

fn write_clones(clones: &CloneTable, cohort: &Cohort, grid: &RegimenGrid, art: &mut Artifacts) -> Result<(), CliError> {
    art.write("clone", "clones.csv", |w, d| clones.write_dsv(cohort, w, d))?;
    let mut rows = Vec::new();
    for spec in &grid.specs {
        let spans = clones.spans();
        let mine: Vec<_> = spans.iter().filter(|s| s.regimen_id == spec.id).collect();
        let rs = || mine.iter().flat_map(|s| &clones.rows[s.start..s.end]);
        rows.push(vec![
            spec.id.to_string(),
            spec.label.clone(),
            mine.len().to_string(),
            rs().filter(|r| r.adherent).count().to_string(),
            rs().filter(|r| r.event).count().to_string(),
            rs().filter(|r| r.censored).count().to_string(),
        ]);
    }
    let header = ["regimen_id", "label", "clones", "person_months", "events", "artificially_censored"];
    art.write("clone", "clone_summary.csv", |w, d| write_table(w, d, &header, &rows))
}

fn summary_cells(s: &WeightSummary) -> Vec<String> {
    [s.mean, s.min, s.p01, s.p50, s.p99, s.max].iter().map(|&x| num(x)).collect()
}

fn weights(cfg: &RunConfig, cohort: &Cohort, clones: &mut CloneTable, art: &mut Artifacts) -> Result<(), CliError> {
    let stage = "weights";
    let spec = &cfg.weights.model;
    spec.validate(cohort).map_err(at(stage))?;
    let mut fitted: Vec<(ProcessModels, WeightTable)> = Vec::new();
    for &c in &cfg.weights.components {
        let pair = match c {
            Component::Adherence => {
                let m = fit_adherence_models(clones, cohort, spec).map_err(at(stage))?;
                let t = compute_stabilized_weights(clones, cohort, &m).map_err(at(stage))?;
                (m, t)
            }
            other => compute_censoring_weights(clones, cohort, other, spec).map_err(at(stage))?,
        };
        fitted.push(pair);
    }
    let tables: Vec<&WeightTable> = fitted.iter().map(|(_, t)| t).collect();
    let combined = combine_weights(clones, &tables, spec.truncation).map_err(at(stage))?;
    attach_weights(clones, &tables, &combined);

    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for (models, table) in &fitted {
        let name = models.component.name();
        for (k, diag) in positivity_diagnostics(models, table, clones).strata {
            let Some(d) = diag else { continue };
            let mut r = vec![name.to_string(), k.to_string(), d.n_rows.to_string(), num(d.min_p_den), num(d.max_p_den)];
            r.extend([d.n_below.to_string(), d.n_above.to_string()]);
            r.extend(summary_cells(&d.weights));
            rows.push(r);
        }
        for s in &models.strata {
            let k = s.regimen.map(|k| k.to_string()).unwrap_or_else(|| "pooled".into());
            if s.degenerate {
                notes.push(vec![name.into(), k.clone(), "degenerate stratum, weights set to 1".into()]);
            }
            for (label, n) in &s.determined_levels {
                notes.push(vec![name.into(), k.clone(), format!("{label}: outcome constant in {n} records, factor 1")]);
            }
        }
        notes.extend(models.warnings.iter().map(|w| vec![name.into(), String::new(), w.clone()]));
    }
    for (label, s) in [("total_before_truncation", &combined.before), ("total", &combined.after)] {
        let mut r = vec![label.to_string(), "all".into(), s.n.to_string(), "NA".into(), "NA".into(), "NA".into(), "NA".into()];
        r.extend(summary_cells(s));
        rows.push(r);
    }
    let header = [
        "component", "regimen_id", "n_rows", "min_p_den", "max_p_den", "n_p_den_below_0.01", "n_p_den_above_0.99", "mean",
        "min", "p01", "p50", "p99", "max",
    ];
    art.write(stage, "weight_summary.csv", |w, d| write_table(w, d, &header, &rows))?;
    art.write(stage, "weight_notes.csv", |w, d| write_table(w, d, &["component", "regimen_id", "note"], &notes))?;
    let cl: &CloneTable = clones;
    art.write(stage, "weights.csv", |w, d| cl.write_dsv(cohort, w, d))
}

const LOGRANK_HEADER: [&str; 11] =
    ["regimen_a", "regimen_b", "weighted", "wstar", "sigma2_hat", "z", "p_value", "tau", "n", "degenerate", "comparison"];

fn logrank_record(row: &LogrankRow, comparison: &str) -> Vec<String> {
    let r = &row.result;
    vec![
        row.a.to_string(),
        row.b.to_string(),
        (row.weighted as u8).to_string(),
        num(r.wstar),
        num(r.sigma2_hat),
        num(r.z),
        format!("{:.6e}", r.p_value),
        r.tau.to_string(),
        r.n.to_string(),
        (r.degenerate as u8).to_string(),
        comparison.to_string(),
    ]
}

fn path_rows(data: &PairedSurvival, ids: (u32, u32)) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (arm, k) in [(0, ids.0), (1, ids.1)] {
        let path = logrank::weighted_nelson(data, arm);
        for (j, h) in path.cumhaz.iter().enumerate() {
            rows.push(vec![format!("{}v{}", ids.0, ids.1), k.to_string(), (path.t0 + j as u32).to_string(), num(*h)]);
        }
    }
    rows
}

fn logrank_stage(
    cfg: &RunConfig,
    grid: &RegimenGrid,
    cohort: &Cohort,
    clones: &CloneTable,
    weighted: bool,
    art: &mut Artifacts,
) -> Result<Vec<LogrankRow>, CliError> {
    let stage = "logrank";
    let label = |k: u32| grid.get(k).map(|s| s.label.clone()).unwrap_or_else(|| k.to_string());
    let mut results = Vec::new();
    let mut rows = Vec::new();
    let mut paths = Vec::new();
    for (a, b) in cfg.logrank_pairs(grid) {
        let data = PairedSurvival::from_clones(clones, cohort, a, b, weighted).map_err(at(stage))?;
        let result = logrank::test(&data).map_err(at(stage))?;
        let row = LogrankRow { a, b, weighted, result };
        rows.push(logrank_record(&row, &format!("{} vs {}", label(a), label(b))));
        paths.extend(path_rows(&data, (a, b)));
        results.push(row);
    }
    art.write(stage, "logrank.csv", |w, d| write_table(w, d, &LOGRANK_HEADER, &rows))?;
    art.write(stage, "logrank_paths.csv", |w, d| write_table(w, d, &["pair", "regimen_id", "t", "cumhaz"], &paths))?;
    if let RegimenConfig::Family { p, x, .. } = &cfg.regimens {
        let table = logrank_grid(grid, p, x, &results);
        art.write(stage, "logrank_published.csv", |w, d| {
            let header: Vec<String> = std::iter::once("x".to_string()).chain(p.iter().map(|v| format!("p={v}"))).collect();
            let h: Vec<&str> = header.iter().map(String::as_str).collect();
            write_table(w, d, &h, &table)
        })?;
    }
    Ok(results)
}

fn fmt_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

/// p-values of every regimen against the reference laid out by midpoint
/// (rows) and p (columns).
fn logrank_grid(grid: &RegimenGrid, ps: &[f64], xs: &[f64], results: &[LogrankRow]) -> Vec<Vec<String>> {
    let reference = grid.reference_id;
    xs.iter()
        .enumerate()
        .map(|(xi, x)| {
            let mut row = vec![format!("{x}")];
            for pi in 0..ps.len() {
                let id = (pi * xs.len() + xi) as u32 + 1;
                let cell = if id == reference {
                    "Reference".to_string()
                } else {
                    results
                        .iter()
                        .find(|r| r.a == id && r.b == reference)
                        .map(|r| fmt_p(r.result.p_value))
                        .unwrap_or_else(|| "NA".into())
                };
                row.push(cell);
            }
            row
        })
        .collect()
}

fn msm_stage(
    cfg: &RunConfig,
    grid: &RegimenGrid,
    cohort: &Cohort,
    clones: &CloneTable,
    weighted: bool,
    publish: bool,
    art: &mut Artifacts,
) -> Result<Vec<HazardRatioReport>, CliError> {
    let stage = "msm";
    let table = build_person_time(clones, cohort, weighted).map_err(at(stage))?;
    let mut reports = Vec::new();
    for m in &cfg.msm {
        let spec = cfg.msm_spec(m, grid)?;
        log::info!("msm: {}", form_name(m.effect_form));
        let fit = fit_msm(&table, &spec).map_err(at(stage))?;
        let rep = report(&fit, grid, &ReportOptions { months: None, plot_month: m.plot_month }).map_err(at(stage))?;
        let name = form_name(m.effect_form);
        art.write(stage, &format!("msm_{name}.csv"), |w, d| rep.write_table(w, d))?;
        let coef: Vec<Vec<String>> = fit
            .glm
            .names
            .iter()
            .enumerate()
            .map(|(j, n)| {
                let cov = fit.glm.robust_covariance.as_ref().unwrap_or(&fit.glm.model_covariance);
                vec![n.clone(), num(fit.glm.coefficients[j]), num(cov[(j, j)].max(0.0).sqrt())]
            })
            .collect();
        art.write(stage, &format!("msm_{name}_coefficients.csv"), |w, d| {
            write_table(w, d, &["term", "estimate", "robust_se"], &coef)
        })?;
        if publish {
            art.write("report", &format!("table_{name}.csv"), |w, d| rep.write_published(w, d))?;
            art.write("report", &format!("plot_{name}.csv"), |w, d| rep.write_plot(w, d))?;
        }
        reports.push(rep);
    }
    Ok(reports)
}

/// Options of the `simulate` command.
#[derive(Debug, Clone, Default)]
pub struct SimulateOptions {
    pub cohort_only: bool,
}

/// Runs the simulation study of `cfg.simulation`, or with `cohort_only`
/// writes the first replication's cohort.
pub fn run_simulation(cfg: &RunConfig, opts: &SimulateOptions) -> Result<Option<StudyResult>, CliError> {
    cfg.simulation.validate_realizable().map_err(|e| CliError::Config(e.to_string()))?;
    let mut art = Artifacts::new(&cfg.output_dir, cfg.delimiter_byte()?)?;
    let result = (|| {
        if opts.cohort_only {
            let cohort_cfg = RunConfig { input: InputConfig::Simulation, ..cfg.clone() };
            ingest(&cohort_cfg, &mut art)?;
            return Ok(None);
        }
        let study = run_study(&cfg.simulation).map_err(at("simulate"))?;
        art.write("simulate", "sim_estimates.csv", |w, d| write_estimates(&study.estimates, w, d))?;
        art.write("simulate", "sim_summary.csv", |w, d| study.summary.write_dsv(w, d))?;
        let cal = &study.calibration;
        let rows: Vec<Vec<String>> = (1..=cfg.simulation.k as u32)
            .map(|k| {
                let opt = |m: &std::collections::BTreeMap<u32, f64>| m.get(&k).map(|v| num(*v)).unwrap_or_else(|| "NA".into());
                vec![
                    k.to_string(),
                    format!("{:.8}", cal.rates[k as usize - 1]),
                    num(cfg.simulation.target_hr[k as usize - 1]),
                    opt(&cal.complete_hr),
                    opt(&cal.post_cloning_hr),
                    opt(&cal.residuals),
                    (cal.excluded.contains(&k) as u8).to_string(),
                ]
            })
            .collect();
        let header = ["regimen_id", "rate", "target_hr", "complete_hr", "post_cloning_hr", "log_residual", "excluded"];
        art.write("simulate", "sim_calibration.csv", |w, d| write_table(w, d, &header, &rows))?;
        Ok(Some(study))
    })();
    art.finish(cfg, "simulate", result)
}

/// Reads a clone table written by the `clone` or `weights` stage and tests
/// regimen `a` against `b`; empty `w_total` cells count as weight 1.
pub fn logrank_from_file<R: Read>(source: R, delimiter: u8, a: u32, b: u32) -> Result<(LogRankResult, PairedSurvival), CliError> {
    let stage = "logrank";
    let mut r = csv::ReaderBuilder::new().delimiter(delimiter).comment(Some(b'#')).from_reader(source);
    let headers = r.headers().map_err(|e| at(stage)(e.into()))?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| at(stage)(DtrError::Schema(format!("missing column `{name}`"))))
    };
    let idx = [col("subject_id")?, col("regimen_id")?, col("t")?, col("censored")?, col("event")?, col("w_total")?];
    let mut records = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| at(stage)(e.into()))?;
        let field = |i: usize| rec.get(idx[i]).unwrap_or("").trim();
        let bad = |what: &str| at(stage)(DtrError::Data(format!("row {}: bad {what} `{}`", line + 1, rec.as_slice())));
        let int = |i: usize, what: &str| field(i).parse::<u32>().map_err(|_| bad(what));
        let w = match field(5) {
            "" => 1.0,
            s => s.parse::<f64>().map_err(|_| bad("w_total"))?,
        };
        records.push((field(0).to_string(), int(1, "regimen_id")?, int(2, "t")?, int(3, "censored")? == 1, int(4, "event")? == 1, w));
    }
    let data = PairedSurvival::from_records(records, a, b).map_err(at(stage))?;
    let result = logrank::test(&data).map_err(at(stage))?;
    Ok((result, data))
}

/// Writes the standalone log-rank result and paths.
pub fn write_logrank_file_result(
    dir: &Path,
    delimiter: u8,
    ids: (u32, u32),
    result: &LogRankResult,
    data: &PairedSurvival,
    weighted: bool,
) -> Result<Vec<String>, CliError> {
    let mut art = Artifacts::new(dir, delimiter)?;
    let row = LogrankRow { a: ids.0, b: ids.1, weighted, result: *result };
    let rows = vec![logrank_record(&row, &format!("{} vs {}", ids.0, ids.1))];
    art.write("logrank", "logrank.csv", |w, d| write_table(w, d, &LOGRANK_HEADER, &rows))?;
    let paths = path_rows(data, ids);
    art.write("logrank", "logrank_paths.csv", |w, d| write_table(w, d, &["pair", "regimen_id", "t", "cumhaz"], &paths))?;
    Ok(art.files().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_bounds() {
        let (lo, hi) = wilson(0, 10);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.2 && hi < 0.35);
        let (lo, hi) = wilson(50, 100);
        assert!((lo + hi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn p_formatting() {
        assert_eq!(fmt_p(0.0004), "<0.001");
        assert_eq!(fmt_p(0.0321), "0.032");
    }

    #[test]
    fn table_has_schema_line() {
        let mut buf = Vec::new();
        write_table(&mut buf, b',', &["a", "b"], &[vec!["1".into(), "2".into()]]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "# columns: a b\na,b\n1,2\n");
    }
}
