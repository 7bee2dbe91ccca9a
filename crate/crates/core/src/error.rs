use thiserror::Error;

use crate::conccl::PlanError;
use crate::interference::KernelClass;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse {what}: {source}")]
    Json {
        what: &'static str,
        #[source]
        source: serde_json::Error,
    },

    #[error("failed to parse {what}: {source}")]
    Csv {
        what: &'static str,
        #[source]
        source: csv::Error,
    },

    #[error("invalid machine descriptor: {0}")]
    InvalidMachine(String),

    #[error("invalid workload: {0}")]
    InvalidWorkload(String),

    #[error("invalid slowdown table: {0}")]
    InvalidTable(String),

    #[error("no slowdown table for kernel class `{0}`")]
    MissingTable(KernelClass),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("machine has zero memory bandwidth")]
    ZeroBandwidth,

    #[error("collective spans {n_ranks} ranks but the node has {gpus} GPUs")]
    TooManyRanks { n_ranks: u32, gpus: u32 },

    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },

    #[error("ideal speedup must exceed 1, got {0}")]
    IdealNotAboveOne(f64),

    #[error("transfer plan rejected: {0}")]
    Plan(#[from] PlanError),

    #[error("simulation failed: {0}")]
    Simulation(String),

    #[error(
        "work not conserved for {kernel}: integrated {integrated:.12e} s vs work {work:.12e} s"
    )]
    WorkNotConserved {
        kernel: String,
        integrated: f64,
        work: f64,
    },

    #[error("calibration failed: {0}")]
    Calibration(String),
}

impl Error {
    pub(crate) fn json(what: &'static str) -> impl FnOnce(serde_json::Error) -> Self {
        move |source| Error::Json { what, source }
    }

    pub(crate) fn csv(what: &'static str) -> impl FnOnce(csv::Error) -> Self {
        move |source| Error::Csv { what, source }
    }
}
