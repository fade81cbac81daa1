use thiserror::Error;

/// Problems found while loading a configuration document.
///
/// Every variant carries the field path of the offending value so that a
/// user can find it in the document.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("malformed document: {0}")]
    Syntax(String),
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: must be positive, got {value}")]
    NonPositive { path: String, value: String },
    #[error("{path}: must be non-negative, got {value}")]
    Negative { path: String, value: String },
    #[error("{path}: duplicate datacenter id `{id}`")]
    DuplicateId { path: String, id: String },
    #[error("{path}: unknown datacenter `{id}`")]
    UnknownDatacenter { path: String, id: String },
    #[error("{path}: latency {forward} ms disagrees with reverse entry ({reverse} ms)")]
    AsymmetricLatency {
        path: String,
        forward: f64,
        reverse: f64,
    },
    #[error("wan.latency_ms: missing entry for pair `{a}|{b}`")]
    MissingPair { a: String, b: String },
}

impl ConfigError {
    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Field path of the error, when there is one.
    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::Syntax(_) => None,
            ConfigError::MissingPair { .. } => Some("wan.latency_ms"),
            ConfigError::Schema { path, .. }
            | ConfigError::NonPositive { path, .. }
            | ConfigError::Negative { path, .. }
            | ConfigError::DuplicateId { path, .. }
            | ConfigError::UnknownDatacenter { path, .. }
            | ConfigError::AsymmetricLatency { path, .. } => Some(path),
        }
    }
}

/// Errors raised while turning a workload into a parallelism plan.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("not enough GPUs: {partitions_left} of {partitions} partitions unplaced with D={dp_cells}, C={cell_size}")]
    InsufficientGpus {
        partitions: u32,
        partitions_left: u32,
        dp_cells: u32,
        cell_size: u32,
    },
    #[error("invalid plan parameter: {0}")]
    InvalidParameter(String),
    #[error("dc_order must be a permutation of the topology datacenters: {0}")]
    BadOrder(String),
}

/// Errors raised by schedule generation and execution.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("memory limit must be at least 1 in-flight microbatch")]
    InfeasibleMemLimit,
    #[error("deadlock: {remaining} work items blocked; first blocked: {blocked:?}")]
    Deadlock {
        remaining: usize,
        blocked: Vec<String>,
    },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}
