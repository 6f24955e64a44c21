use thiserror::Error;

use crate::propagate::PropagationResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input {coord} = {value} lies outside the domain [{lo}, {hi}]{}", row_suffix(*.row))]
    DomainViolation {
        row: Option<usize>,
        coord: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error(
        "{clamped_weight:.4} of the input-posterior weight lies outside the basis domain \
         (limit 0.01); enlarge the domain and refit the surrogate"
    )]
    DomainCoverage { clamped_weight: f64, n_clamped: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("underdetermined fit: {n_s} training samples for {n_p} basis functions")]
    Underdetermined { n_s: usize, n_p: usize },

    #[error(
        "singular design matrix (condition number {condition:.3e} > 1e12); \
         near-dependent columns: {columns:?}"
    )]
    SingularDesign { condition: f64, columns: Vec<usize> },

    #[error(
        "coefficient covariance undefined: (N_s - N_p) * N_x - 2 = ({n_s} - {n_p}) * {n_x} - 2 <= 0"
    )]
    CovarianceUndefined {
        n_s: usize,
        n_p: usize,
        n_x: usize,
        /// Propagation result without the surrogate term, when one was computed.
        naive: Option<Box<PropagationResult>>,
    },

    #[error("evidence undefined: N_sx = {n_sx} must exceed N_bx = {n_bx}")]
    EvidenceUndefined { n_sx: usize, n_bx: usize },

    #[error(
        "chi2_min = {chi2_min:e} is below the 1e-300 floor; the surrogate interpolates the \
         training data exactly, handle the exact fit separately"
    )]
    InterpolationDegenerate { chi2_min: f64 },

    #[error("kernel matrix is not positive definite; increase the nugget")]
    KernelSingular,

    #[error("all {} candidates failed: {}", .0.len(), join_failures(.0))]
    AllFailed(Vec<(usize, String)>),

    #[error("quadrature did not converge: successive refinements differ by {rel_change:.3e} (limit 1e-4)")]
    QuadratureNotConverged { rel_change: f64 },

    #[error("parse error at line {line}{}: {message}", column_suffix(.column))]
    Parse {
        line: usize,
        column: Option<String>,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn row_suffix(row: Option<usize>) -> String {
    row.map(|r| format!(" (sample row {r})")).unwrap_or_default()
}

fn column_suffix(column: &Option<String>) -> String {
    column
        .as_ref()
        .map(|c| format!(", column '{c}'"))
        .unwrap_or_default()
}

fn join_failures(failures: &[(usize, String)]) -> String {
    failures
        .iter()
        .map(|(id, msg)| format!("#{id}: {msg}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors that stem from numerics or violated data contracts
    /// rather than I/O.
    pub fn is_numerical(&self) -> bool {
        !matches!(self, Error::Io(_))
    }

    /// Short kebab-case tag used in report tables.
    pub fn status_tag(&self) -> &'static str {
        match self {
            Error::DomainViolation { .. } => "domain-violation",
            Error::DomainCoverage { .. } => "domain-coverage",
            Error::Contract(_) => "contract",
            Error::Underdetermined { .. } => "underdetermined",
            Error::SingularDesign { .. } => "singular-design",
            Error::CovarianceUndefined { .. } => "covariance-undefined",
            Error::EvidenceUndefined { .. } => "evidence-undefined",
            Error::InterpolationDegenerate { .. } => "interpolation-degenerate",
            Error::KernelSingular => "kernel-singular",
            Error::AllFailed(_) => "all-failed",
            Error::QuadratureNotConverged { .. } => "quadrature-not-converged",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
