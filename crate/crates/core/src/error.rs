use thiserror::Error;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum DtrError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("duplicate visit for subject {subject} at t={t}")]
    DuplicateVisit { subject: String, t: u32 },
    #[error("non-monotone visits for subject {subject}: t={t} follows t={prev}")]
    NonMonotone { subject: String, prev: u32, t: u32 },
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate spline basis: {0}")]
    DegenerateBasis(String),
    #[error("perfect separation detected on column `{column}`")]
    Separation { column: String },
    #[error("rank-deficient design; dependent columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },
    #[error("sandwich covariance needs at least two clusters")]
    SingleCluster,
    #[error("positivity violation: p_den={p:e} for subject {subject}, regimen {regimen}, t={t}")]
    Positivity { subject: String, regimen: u32, t: u32, p: f64 },
    #[error("weight missing for at-risk row: subject {subject}, regimen {regimen}, t={t}")]
    MissingWeight { subject: String, regimen: u32, t: u32 },
    #[error("no time at which both arms are at risk")]
    TauUndefined,
    #[error("log-rank variance is zero but W*={wstar}")]
    DegenerateVariance { wstar: f64 },
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("rate calibration failed for comparison {comparison}: residual {residual:.4}")]
    Calibration { comparison: u32, residual: f64 },
    #[error("replication {replication}, {analysis}: {source}")]
    Replication { replication: u64, analysis: String, #[source] source: Box<DtrError> },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl DtrError {
    pub fn kind(&self) -> ErrorKind {
        use DtrError::*;
        match self {
            Config(_) => ErrorKind::Config,
            Schema(_) | DuplicateVisit { .. } | NonMonotone { .. } | Data(_) | MissingWeight { .. } | Io(_) | Csv(_) => {
                ErrorKind::Data
            }
            Replication { source, .. } => source.kind(),
            _ => ErrorKind::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, DtrError>;
