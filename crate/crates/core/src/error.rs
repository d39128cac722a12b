use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("agent {0} has a self-loop")]
    SelfLoop(usize),
    #[error("edge {from}->{to} has non-positive weight {weight}")]
    NonPositiveWeight { from: usize, to: usize, weight: f64 },
    #[error("agent id {id} outside 1..={n}")]
    AgentOutOfRange { id: usize, n: usize },
    #[error("no directed spanning tree rooted at the leader; unreachable agents: {unreachable:?}")]
    NoSpanningTree { unreachable: Vec<usize> },
    #[error("pinned Laplacian is singular (sigma_min = {sigma_min:e})")]
    SingularPinnedLaplacian { sigma_min: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown agent index {0}")]
    UnknownAgent(usize),
    #[error("(A, B_{agent}) is not reachable (rank {rank} < {n})")]
    NotReachable { agent: usize, rank: usize, n: usize },
    #[error("agent {agent}: missing or unexpected neighbor input for neighbor {neighbor}")]
    MissingNeighborInput { agent: usize, neighbor: usize },
    #[error("agent {agent}: neighbor order is not a permutation of its neighbor set")]
    BadNeighborOrder { agent: usize },
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("numerical divergence at step {step}: {what}")]
    NumericalDivergence { step: usize, what: String },

    #[error("operation requires {expected} game mode")]
    WrongMode { expected: &'static str },
    #[error("weight matrix {name} is singular or not positive definite")]
    SingularWeight { name: String },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("tail estimate {tail_fraction:.3e} of totals exceeds 1% for agent {agent}")]
    TailTooLarge { agent: usize, tail_fraction: f64 },

    #[error("{block} block has wrong curvature for the requested extremum")]
    WrongCurvature { block: &'static str },
    #[error("singular matrix in {0}")]
    Singular(&'static str),
    #[error("Schur complement is singular in {0}")]
    SingularSchurComplement(&'static str),
    #[error("block action matrix is singular (condition number {cond:e})")]
    SingularBlockMatrix { cond: f64 },
    #[error("regression matrix rank {rank} < {needed} parameters (persistence of excitation violated)")]
    RankDeficient { rank: usize, needed: usize },
    #[error("least-squares residual RMS {rms:e} above threshold {threshold:e}")]
    ResidualTooLarge { rms: f64, threshold: f64 },
    #[error("initial policies are not admissible (closed-loop spectral radius {spectral_radius})")]
    NotAdmissible { spectral_radius: f64 },
    #[error("maximum iterations ({0}) reached without convergence")]
    MaxIterations(usize),
    #[error("no convergence after {iterations} iterations (last change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },
    #[error("ill-posed saddle: disturbance curvature not negative definite")]
    IllPosedSaddle,
    #[error("agent must be pinned with no neighbors for the single-agent oracle")]
    NotIsolated,

    #[error("weights became non-finite in {0}")]
    NonFiniteWeights(&'static str),
    #[error("reference weights are required")]
    MissingReference,

    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SelfLoop(_)
            | Error::NonPositiveWeight { .. }
            | Error::AgentOutOfRange { .. }
            | Error::NoSpanningTree { .. }
            | Error::NotReachable { .. }
            | Error::InvalidWeights(_)
            | Error::SingularWeight { .. }
            | Error::EmptyHorizon
            | Error::NotAdmissible { .. }
            | Error::Parse(_)
            | Error::Validation(_) => 2,
            Error::NumericalDivergence { .. } | Error::NonFiniteWeights(_) => 3,
            Error::MaxIterations(_) | Error::NoConvergence { .. } => 4,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
