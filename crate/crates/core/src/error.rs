use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not Hermitian (asymmetry {asymmetry:.3e})")]
    NonHermitianInput { asymmetry: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("time {t} outside the unit interval")]
    OutOfDomain { t: f64 },
    #[error("noise path exhausted: time {t} needs segment {segment}, path has {len}")]
    PathExhausted { t: f64, segment: usize, len: usize },
    #[error("norm drift {drift:.3e} exceeds tolerance {tolerance:.3e} at t = {t}")]
    NormDriftExceeded { drift: f64, tolerance: f64, t: f64 },
    #[error("initial perturbation is not tangent at e_1 (Re<y0,e1> = {re:.3e})")]
    TangencyViolated { re: f64 },
    #[error("spectrum of the drift matrix is degenerate (gap {gap:.3e})")]
    DegenerateSpectrum { gap: f64 },
    #[error("coupling <B e_1, e_{index}> = {value:.3e} is below tolerance")]
    DegenerateCoupling { index: usize, value: f64 },
    #[error("moment system is ill-conditioned (condition number {condition:.3e})")]
    IllConditioned { condition: f64 },
    #[error("local steering did not converge: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("endpoint outside the local steering basin (distance {distance:.3e} > {radius:.3e})")]
    OutsideBasin { distance: f64, radius: f64 },
    #[error("feedback stalls: |<z0,e1>| = {overlap:.3e} below threshold {threshold:.3e}")]
    StallDetected { overlap: f64, threshold: f64 },
    #[error("feedback did not reach the target radius within time {max_time} (distance {distance:.3e})")]
    Timeout { max_time: f64, distance: f64 },
    #[error("no free-drift step up to {k_max} aligns the phase; retry with Lambda + gamma B, gamma = {suggested_gamma}")]
    AlignmentExhausted { k_max: usize, suggested_gamma: f64 },
    #[error("approach failed after {retries} retries: {last}")]
    ApproachFailed { retries: usize, last: String },
    #[error("bridge between the approach stages failed: {0}")]
    BridgeFailed(String),
    #[error("steering plan misses its target: error {error:.3e} > tolerance {tolerance:.3e}")]
    ToleranceNotMet { error: f64, tolerance: f64 },
    #[error("time reversal needs real Lambda and B in the working coordinates")]
    NonRealSystem,
    #[error("chain samples are degenerate (rank {rank} < {needed})")]
    DegenerateSamples { rank: usize, needed: usize },
    #[error("measures live on different partitions")]
    PartitionMismatch,
    #[error("only {usable} usable points for the rate fit (need 4)")]
    InsufficientSignal { usable: usize },
    #[error("{censored} of {total} hitting-time samples censored at K_max")]
    HeavyCensoring { censored: usize, total: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("serialization: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl Error {
    /// Numerical failures as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        !matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Serialization(_)
                | Error::DimensionMismatch { .. }
                | Error::NonHermitianInput { .. }
                | Error::PartitionMismatch
        )
    }
}
