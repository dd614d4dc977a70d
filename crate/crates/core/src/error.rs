use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("singular matrix: {0}")]
    Singular(&'static str),
    #[error("eigenbasis is singular (|det V| = {det:e} < {floor:e})")]
    SingularBasis { det: f64, floor: f64 },
    #[error("matrix is defective or nearly so (eigenvector condition {cond:e})")]
    Defective { cond: f64 },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("innovation covariance is singular (condition {cond:e})")]
    SingularInnovation { cond: f64 },
    #[error("target time {target} precedes belief time {current}")]
    TimeReversal { current: f64, target: f64 },
    #[error("control schedule leaves [{from}, {to}) uncovered")]
    ScheduleGap { from: f64, to: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in trajectory {trajectory}, interval {interval} (t = {t})")]
    NonFinite {
        trajectory: usize,
        interval: usize,
        t: f64,
    },
    #[error("training aborted after {skips} consecutive skipped batches; last: {last}")]
    TrainingDiverged { skips: usize, last: String },
    #[error("empty dataset")]
    EmptyDataset,
}

impl Error {
    /// Failures caused by numerical values rather than by malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Singular(_)
                | Error::SingularBasis { .. }
                | Error::Defective { .. }
                | Error::NotPositiveDefinite
                | Error::SingularInnovation { .. }
                | Error::NonFinite { .. }
                | Error::TrainingDiverged { .. }
        )
    }
}
