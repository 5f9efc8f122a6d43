use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("graph is not strongly connected")]
    NotStronglyConnected,

    #[error("reducible chain: states {unreachable:?} are not mutually reachable with state 0")]
    ReducibleChain { unreachable: Vec<usize> },

    #[error("feature matrix is rank deficient after {attempts} draws")]
    RankDeficient { attempts: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("singular KKT system (Assumption 2(a): aggregate A must be full rank and C positive definite)")]
    SingularKkt,

    #[error("message for node {to} delivered to node {node}")]
    Misrouted { to: usize, node: usize },

    #[error("protocol violation at node {node}: {detail}")]
    Protocol { node: usize, detail: String },

    #[error("Assumption {assumption} violated: {detail}")]
    Assumption { assumption: &'static str, detail: String },

    #[error("contraction ratio undefined at z = z*")]
    UndefinedRatio,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
