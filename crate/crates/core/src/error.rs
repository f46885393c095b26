use thiserror::Error;

use crate::expr::{EvalError, ParseError};

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("depth {depth} out of range (process covers depths 0..{available})")]
    DepthOutOfRange { depth: usize, available: usize },
    #[error("processes live on different scenario trees or depths")]
    TreeMismatch,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("scenario tree too large: {leaves} leaves exceeds cap {cap}")]
    TreeTooLarge { leaves: usize, cap: usize },
    #[error(
        "infeasible rollout at depth {depth}, node {node}: control {value} outside [{lo}, {hi}]"
    )]
    Infeasible {
        depth: usize,
        node: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("support of {atoms} atoms exceeds cap {cap}")]
    SupportTooLarge { atoms: usize, cap: usize },
    #[error("policy undefined at state {0:?}")]
    PolicyUndefined(Vec<f64>),
    #[error("transport solver failed: {0}")]
    Solver(String),
    #[error("grid search over {combinations} combinations exceeds cap {cap}")]
    GridTooLarge { combinations: f64, cap: f64 },
    #[error("stationary pair rejected: distance {distance} exceeds {tol}")]
    NotStationary { distance: f64, tol: f64 },
    #[error("no candidate passed stationarity verification")]
    NoStationaryCandidate,
    #[error("telescoping identity violated: rotated sum {rotated} vs {telescoped}")]
    IdentityViolation { rotated: f64, telescoped: f64 },
    #[error("comparison function undefined or zero at {0}")]
    DegenerateComparison(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, Error>;
