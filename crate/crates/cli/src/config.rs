//! Run configuration, read from and printed as TOML.

use std::path::{Path, PathBuf};

use dtr_core::longitudinal_data::ColumnMap;
use dtr_core::msm::{EffectForm, MsmSpec};
use dtr_core::regimen::{CloneOptions, RegimenGrid, RegimenSpec};
use dtr_core::simulator::usrds::UsrdsLikeConfig;
use dtr_core::simulator::{BiasLevel, SimConfig};
use dtr_core::weights::{Component, WeightModelSpec};
use dtr_core::{DesignSpec, DtrError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for synthetic inputs.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Field delimiter of every output table.
    pub delimiter: char,
    /// Visit at which clones start.
    pub start_t: u32,
    pub input: InputConfig,
    pub regimens: RegimenConfig,
    pub clone: CloneOptions,
    pub weights: WeightsConfig,
    pub msm: Vec<MsmConfig>,
    pub logrank: LogrankConfig,
    pub profile: ProfileConfig,
    /// Scenario used by the `simulate` command and by `source = "simulation"`.
    pub simulation: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum InputConfig {
    /// A visit file plus an optional outcome file.
    Files {
        cohort: PathBuf,
        outcomes: Option<PathBuf>,
        #[serde(default)]
        columns: ColumnMap,
    },
    /// Synthetic dialysis-like cohort drawn from `seed`.
    UsrdsLike(UsrdsLikeConfig),
    /// First replication of the `[simulation]` scenario.
    Simulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegimenConfig {
    /// G(p, x-3, x+3) for every (p, x); `reference` is (p, x).
    Family { p: Vec<f64>, x: Vec<f64>, reference: (f64, f64) },
    Explicit { specs: Vec<RegimenSpec>, reference_id: u32 },
    /// The grid of the `[simulation]` scenario.
    Simulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    /// Censoring processes to weight for; empty means an unweighted analysis.
    pub components: Vec<Component>,
    pub model: WeightModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MsmConfig {
    pub effect_form: EffectForm,
    /// Month at which factor x log-time plot data are evaluated.
    #[serde(default)]
    pub plot_month: Option<u32>,
    /// Baseline covariate terms added to the model.
    #[serde(default)]
    pub baseline_terms: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogrankConfig {
    /// Regimen id pairs; empty means every regimen against the reference.
    pub pairs: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    /// Relative dose change counted as an increase or decrease.
    pub threshold: f64,
    pub marker_edges: Vec<f64>,
    /// Binary baseline covariate splitting the demographic table.
    pub split_by: String,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        WeightsConfig {
            components: vec![Component::Adherence, Component::Admin, Component::Ltfu],
            model: WeightModelSpec { truncation: Some((0.05, 0.95)), ..WeightModelSpec::default_terms() },
        }
    }
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            threshold: 0.25,
            marker_edges: (11..=22).map(|i| 2.0 * i as f64).collect(),
            split_by: "sex".into(),
        }
    }
}

impl Default for RunConfig {
    /// The synthetic dialysis-like analysis: regimens G(0.25, x-3, x+3) for
    /// x = 31..40 against x = 33, clones from month 3, and four MSM forms.
    fn default() -> Self {
        let msm = |effect_form, plot_month| MsmConfig { effect_form, plot_month, baseline_terms: Vec::new() };
        RunConfig {
            seed: 20140601,
            output_dir: PathBuf::from("dtr-out"),
            delimiter: ',',
            start_t: 3,
            input: InputConfig::UsrdsLike(UsrdsLikeConfig::default()),
            regimens: RegimenConfig::Family { p: vec![0.25], x: (31..=40).map(f64::from).collect(), reference: (0.25, 33.0) },
            clone: CloneOptions::default(),
            weights: WeightsConfig::default(),
            msm: vec![
                msm(EffectForm::Linear, None),
                msm(EffectForm::Factor, None),
                msm(EffectForm::LinearXLogtime, None),
                msm(EffectForm::FactorXLogtime, Some(9)),
            ],
            logrank: LogrankConfig::default(),
            profile: ProfileConfig::default(),
            simulation: SimConfig::default(),
        }
    }
}

impl RunConfig {
    /// One simulated cohort analyzed the way the simulation study does it.
    pub fn for_simulation(simulation: SimConfig) -> RunConfig {
        let reference = simulation.reference;
        let pairs = simulation.reported.iter().map(|&k| (k, reference)).collect();
        RunConfig {
            seed: simulation.seed,
            start_t: 0,
            input: InputConfig::Simulation,
            regimens: RegimenConfig::Simulation,
            weights: WeightsConfig { components: vec![Component::Adherence], model: simulation.weight_spec() },
            msm: vec![MsmConfig { effect_form: EffectForm::Factor, plot_month: None, baseline_terms: Vec::new() }],
            logrank: LogrankConfig { pairs },
            simulation,
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<RunConfig, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn delimiter_byte(&self) -> Result<u8, CliError> {
        u8::try_from(self.delimiter).map_err(|_| CliError::Config(format!("delimiter {:?} is not one byte", self.delimiter)))
    }

    pub fn grid(&self) -> Result<RegimenGrid, CliError> {
        let grid = match &self.regimens {
            RegimenConfig::Family { p, x, reference } => RegimenGrid::family(p, x, *reference),
            RegimenConfig::Explicit { specs, reference_id } => RegimenGrid::new(specs.clone(), *reference_id),
            RegimenConfig::Simulation => self.simulation.regimen_grid(),
        };
        grid.map_err(config_error)
    }

    pub fn msm_spec(&self, m: &MsmConfig, grid: &RegimenGrid) -> Result<MsmSpec, CliError> {
        let mut spec = MsmSpec::new(m.effect_form, grid, self.start_t);
        spec.baseline_terms = DesignSpec::parse(&m.baseline_terms).map_err(config_error)?;
        Ok(spec)
    }

    /// Log-rank pairs, defaulting to every regimen against the reference.
    pub fn logrank_pairs(&self, grid: &RegimenGrid) -> Vec<(u32, u32)> {
        if !self.logrank.pairs.is_empty() {
            return self.logrank.pairs.clone();
        }
        grid.specs.iter().map(|s| s.id).filter(|&k| k != grid.reference_id).map(|k| (k, grid.reference_id)).collect()
    }

    /// Checks that need no data: regimen ids, term syntax, output directory.
    pub fn validate(&self) -> Result<RegimenGrid, CliError> {
        self.delimiter_byte()?;
        let grid = self.grid()?;
        let known = |id: u32| grid.get(id).is_some();
        for &(a, b) in &self.logrank.pairs {
            for id in [a, b] {
                if !known(id) {
                    return Err(CliError::Config(format!("log-rank pair ({a}, {b}) references unknown regimen {id}")));
                }
            }
            if a == b {
                return Err(CliError::Config(format!("log-rank pair ({a}, {b}) compares a regimen with itself")));
            }
        }
        for m in &self.msm {
            if let Some(pm) = m.plot_month {
                if pm < self.start_t {
                    return Err(CliError::Config(format!("plot month {pm} precedes start month {}", self.start_t)));
                }
            }
            self.msm_spec(m, &grid)?;
        }
        if let Some((lo, hi)) = self.weights.model.truncation {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return Err(CliError::Config(format!("truncation ({lo}, {hi}) must satisfy 0 <= lo < hi <= 1")));
            }
        }
        if matches!(self.input, InputConfig::Simulation) || matches!(self.regimens, RegimenConfig::Simulation) {
            self.simulation.validate_realizable().map_err(config_error)?;
        }
        if let InputConfig::Simulation = self.input {
            if self.simulation.bias_level != BiasLevel::None && self.weights.components.is_empty() {
                log::warn!("biased simulation analyzed without weights");
            }
        }
        check_writable(&self.output_dir)?;
        Ok(grid)
    }
}

fn config_error(e: DtrError) -> CliError {
    match e {
        DtrError::Config(m) => CliError::Config(m),
        other => CliError::Config(other.to_string()),
    }
}

fn check_writable(dir: &Path) -> Result<(), CliError> {
    let fail = |e: std::io::Error| CliError::Config(format!("output directory {} is not writable: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(fail)?;
    let probe = dir.join(".dtr-write-probe");
    std::fs::write(&probe, b"").map_err(fail)?;
    std::fs::remove_file(&probe).map_err(fail)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
