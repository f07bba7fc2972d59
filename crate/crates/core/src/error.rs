use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("weights must be non-negative and sum to 1")]
    InvalidWeights,
    #[error("Rényi order must be > 1, got {0}")]
    InvalidOrder(f64),
    #[error("noise scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("RDP curves are defined on different order grids")]
    GridMismatch,
    #[error("delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("invalid privacy budget: {0}")]
    InvalidBudget(String),
    #[error("noise calibration failed: {0}")]
    NoConvergence(String),
    #[error("event {event} has fewer than {min_hits} hits under both inputs")]
    InsufficientMass { event: usize, min_hits: u64 },
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("by-speaker partition needs at least {needed} private speakers, found {found}")]
    TooFewSpeakers { needed: usize, found: usize },
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("no alignment of {labels} labels fits in {frames} frames")]
    InfeasibleAlignment { labels: usize, frames: usize },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    DivergenceDetected { epoch: usize },
    #[error("teacher subset {0} is empty")]
    EmptySubset(usize),
    #[error("privacy budget exceeded: spent ε = {spent}, target ε = {target}")]
    BudgetExceeded { spent: f64, target: f64 },
    #[error("budget allows {steps} steps, fewer than one epoch ({per_epoch} steps)")]
    BudgetExhaustedBeforeOneEpoch { steps: usize, per_epoch: usize },
    #[error("target of {labels} labels is infeasible in {frames} frames")]
    InfeasibleTarget { labels: usize, frames: usize },
    #[error("similarity undefined for a zero vector")]
    ZeroVector,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
