use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid group scheme: {0}")]
    InvalidScheme(String),
    #[error("invalid snapshot {query_id}/day {day}: {reason}")]
    InvalidSnapshot {
        query_id: String,
        day: u32,
        reason: String,
    },
    #[error("invalid proportions: {0}")]
    InvalidProportions(String),
    #[error("no labeled, non-missing entries in range")]
    EmptyLabeledPool,
    #[error("cutoff k={k} outside 1..={len}")]
    CutoffOutOfRange { k: usize, len: usize },
    #[error("label `{0}` is not part of the scheme")]
    UnknownLabel(String),
    #[error("target proportion for `{0}` is zero")]
    ZeroTargetProportion(String),
    #[error("degenerate target proportion {0}; must lie strictly inside (0, 1)")]
    DegenerateProportion(f64),
    #[error("day {day} missing from series `{query_id}`")]
    DayMissing { query_id: String, day: u32 },
    #[error("invalid day pair {start} -> {end}; start must precede end")]
    InvalidDayPair { start: u32, end: u32 },
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("empty candidate pool")]
    EmptyPool,
    #[error("label `{0}` has no target proportion")]
    LabelWithoutProportion(String),
    #[error("invalid score for `{id}`: {score}")]
    InvalidScore { id: String, score: f64 },
    #[error("too few groups for a random-intercept fit: {0}")]
    TooFewGroups(usize),
    #[error("too few observations: {n} for {p} coefficients")]
    TooFewObservations { n: usize, p: usize },
    #[error("design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("covariate `{0}` missing from an observation")]
    MissingCovariate(String),
    #[error("variance-ratio search did not converge: {0}")]
    NonConvergence(String),
    #[error("coefficient `{0}` not in fit")]
    CoefficientMissing(String),
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("inconsistent heatmap grid: {0}")]
    InconsistentGrid(String),
    #[error("io: {0}")]
    Io(String),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::Parse {
            line,
            reason: e.to_string(),
        }
    }
}
