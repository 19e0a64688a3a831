//! Dynamic treatment regimen analysis by cloning, artificial censoring and
//! inverse-probability weighting.
//!
//! Subjects are copied once per candidate regimen and each copy is censored at
//! its first nonadherent visit. Stabilized weights undo the selection that
//! censoring induces. Regimens are then compared with a paired weighted
//! log-rank test and with marginal structural Cox models fit as weighted pooled
//! logistic regressions.

pub mod error;
pub mod glm;
pub mod logrank;
pub mod longitudinal_data;
pub mod msm;
pub mod regimen;
pub mod simulator;
pub mod weights;

pub use error::{DtrError, ErrorKind, Result};
pub use glm::{DesignSpec, FittedGlm, Frame, Term};
pub use logrank::{LogRankResult, PairedSurvival};
pub use longitudinal_data::{BaselineCovariates, Cohort, SubjectHistory, Visit};
pub use msm::{EffectForm, HazardRatioReport, MsmFit, MsmSpec};
pub use regimen::{CloneRow, CloneTable, RegimenGrid, RegimenSpec};
pub use simulator::{SimConfig, SimSummary};
pub use weights::{WeightModelSpec, WeightTable};
