use thiserror::Error;

use crate::fixpoint::Outcome;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("coordinate {coord:?} lies outside the array domain")]
    OutOfDomain { coord: Vec<i64> },
    #[error("expected {expected} values, got {actual}")]
    ArityMismatch { expected: usize, actual: usize },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("unknown array `{0}`")]
    UnknownArray(String),
    #[error("array `{name}` has no version {version}")]
    UnknownVersion { name: String, version: u64 },
    #[error("unknown dimension `{0}`")]
    UnknownDimension(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("aggregate list is empty")]
    EmptyAggList,
    #[error("bad window offsets: {0}")]
    BadOffsets(String),
    #[error("bad block extents: {0}")]
    BadBlock(String),
    #[error("expression type error: {0}")]
    ExpressionType(String),
    #[error("expression syntax error at offset {offset}: {message}")]
    ExpressionSyntax { offset: usize, message: String },
    #[error("arrays share no dimension names")]
    NoCommonDims,
    #[error("dimensions {0:?} are not present in the source array")]
    NotASubsetOfDims(Vec<String>),
    #[error("unsupported assignment function: {0}")]
    UnsupportedAssignment(String),
    #[error("no convergence after {} iterations", .0.trace.len())]
    NonConvergence(Box<Outcome>),
    #[error("cannot run incrementally: {0}")]
    NotIncrementalizable(String),
    #[error("overlap radius {radius:?} is smaller than window offsets {offsets:?}")]
    OverlapTooSmall { radius: Vec<i64>, offsets: Vec<i64> },
    #[error("overlap radius {radius:?} must be smaller than chunk extents {extents:?}")]
    OverlapTooLarge { radius: Vec<i64>, extents: Vec<i64> },
    #[error("bad pyramid spec: {0}")]
    BadPyramidSpec(String),
    #[error("seeded array at level {level} is not a valid intermediate state: {reason}")]
    SeedInvalid { level: usize, reason: String },
    #[error("no prior multi-resolution run to reuse")]
    NoPriorState,
    #[error("need at least {needed} points, array has {available}")]
    TooFewPoints { needed: usize, available: usize },
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("strategy unavailable: {0}")]
    StrategyUnavailable(String),
    #[error("malformed array dump, line {line}: {message}")]
    Dump { line: usize, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
