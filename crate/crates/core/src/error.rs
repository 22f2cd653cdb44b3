use thiserror::Error;

/// Errors produced by panel construction and the estimators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unbalanced panel: no row for entity `{entity}` in year {year}")]
    Unbalanced { entity: String, year: i64 },

    #[error("duplicate row for entity `{entity}` in year {year}")]
    DuplicateRow { entity: String, year: i64 },

    #[error("non-numeric value `{value}` at row {row}, column `{column}`")]
    NonNumeric { row: usize, column: String, value: String },

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("no informative entities: every entity has an all-zero outcome")]
    NoInformativeEntities,

    #[error("rank deficient design: collinear columns {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("no convergence after {iterations} Newton iterations (gradient norm {grad_norm:.3e})")]
    NotConverged {
        iterations: usize,
        grad_norm: f64,
        trace: Vec<f64>,
    },

    #[error("unbounded likelihood direction along `{0}`")]
    Separation(String),

    #[error("{failed} of {reps} replications failed (limit 5%); first failure: {first}")]
    ReplicationFailures { failed: usize, reps: usize, first: String },

    #[error("explosive parameters: conditional mean {0:.3e} exceeds 1e9")]
    Explosive(f64),

    #[error("empty event sample")]
    EmptyEventSample,

    #[error("event years outside the panel window: {0:?}")]
    EventOutsideWindow(Vec<(String, i64)>),

    #[error("J undefined: model is exactly identified")]
    ExactlyIdentified,

    #[error("insufficient periods: {0}")]
    InsufficientPeriods(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    /// Stable snake_case identifier of the variant, for machine-readable reports.
    pub fn reason(&self) -> &'static str {
        match self {
            Error::Unbalanced { .. } => "unbalanced_panel",
            Error::DuplicateRow { .. } => "duplicate_row",
            Error::NonNumeric { .. } => "non_numeric",
            Error::UnknownColumn(_) => "unknown_column",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::InvalidData(_) => "invalid_data",
            Error::NoInformativeEntities => "no_informative_entities",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::Singular(_) => "singular_matrix",
            Error::NotConverged { .. } => "not_converged",
            Error::Separation(_) => "separation",
            Error::ReplicationFailures { .. } => "replication_failures",
            Error::Explosive(_) => "explosive",
            Error::EmptyEventSample => "empty_event_sample",
            Error::EventOutsideWindow(_) => "event_outside_window",
            Error::ExactlyIdentified => "exactly_identified",
            Error::InsufficientPeriods(_) => "insufficient_periods",
            Error::Csv(_) => "csv",
            Error::Io(_) => "io",
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::UnknownColumn(_) | Error::InvalidSpec(_) => ErrorKind::Config,
            Error::Unbalanced { .. }
            | Error::DuplicateRow { .. }
            | Error::NonNumeric { .. }
            | Error::InvalidData(_)
            | Error::NoInformativeEntities
            | Error::EmptyEventSample
            | Error::EventOutsideWindow(_)
            | Error::InsufficientPeriods(_)
            | Error::Csv(_)
            | Error::Io(_) => ErrorKind::Data,
            Error::RankDeficient { .. }
            | Error::Singular(_)
            | Error::NotConverged { .. }
            | Error::Separation(_)
            | Error::ReplicationFailures { .. }
            | Error::Explosive(_)
            | Error::ExactlyIdentified => ErrorKind::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
