use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("sigma at index {0} must be positive and finite")]
    NonPositiveSigma(usize),

    #[error("non-finite value at index {0}")]
    NonFiniteValue(usize),

    #[error("column length mismatch: {what}")]
    LengthMismatch { what: String },

    #[error("sample must contain at least one observation")]
    EmptySample,

    #[error("fold count {k} invalid for n = {n} (need 2 <= K <= n)")]
    BadFoldCount { n: usize, k: usize },

    #[error("group count {k} invalid for n = {n} (need 1 <= k <= n)")]
    BadGroupCount { n: usize, k: usize },

    #[error("invalid bandwidth: {0}")]
    InvalidBandwidth(String),

    #[error("kernel weights underflow at query sigma = {sigma}")]
    DegenerateWeights { sigma: f64 },

    #[error("every grid cell was degenerate")]
    AllCellsDegenerate,

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("Monte Carlo sample size must be positive")]
    EmptyMonteCarlo,

    #[error("value outside the family's domain: {0}")]
    DomainError(String),

    #[error("zero probability mass at support point {0}")]
    ZeroMass(usize),

    #[error("no feasible sigma_M for the requested variance ratio {ratio}")]
    NoFeasibleRoot { ratio: f64 },

    #[error("selection event has zero tail mass at t = {t}")]
    ZeroTailMass { t: f64 },

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("nonsensical counts on line {line}: {what}")]
    NonsensicalCounts { line: usize, what: String },

    #[error("parse error on line {line}: {what}")]
    Parse { line: usize, what: String },

    #[error("io: {0}")]
    Io(String),

    #[error("at index {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("replication {rep}: {source}")]
    InRep {
        rep: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at(index: usize, source: Error) -> Self {
        Error::AtIndex {
            index,
            source: Box::new(source),
        }
    }

    /// Stable identifier of the innermost error variant.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::NonPositiveSigma(_) => "non_positive_sigma",
            Error::NonFiniteValue(_) => "non_finite_value",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::EmptySample => "empty_sample",
            Error::BadFoldCount { .. } => "bad_fold_count",
            Error::BadGroupCount { .. } => "bad_group_count",
            Error::InvalidBandwidth(_) => "invalid_bandwidth",
            Error::DegenerateWeights { .. } => "degenerate_weights",
            Error::AllCellsDegenerate => "all_cells_degenerate",
            Error::InvalidGrid(_) => "invalid_grid",
            Error::EmptyMonteCarlo => "empty_monte_carlo",
            Error::DomainError(_) => "domain_error",
            Error::ZeroMass(_) => "zero_mass",
            Error::NoFeasibleRoot { .. } => "no_feasible_root",
            Error::ZeroTailMass { .. } => "zero_tail_mass",
            Error::InvalidPrior(_) => "invalid_prior",
            Error::InvalidScenario(_) => "invalid_scenario",
            Error::NonsensicalCounts { .. } => "nonsensical_counts",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::AtIndex { .. } | Error::InRep { .. } => unreachable!("root strips wrappers"),
        }
    }

    /// The innermost error, with positional wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIndex { source, .. } | Error::InRep { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
