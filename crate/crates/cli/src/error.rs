use formation_core::estimator::EstimatorError;
use formation_core::fisher::FisherError;
use formation_core::formation_opt::OptError;
use formation_core::ranging::RangingError;
use formation_core::scenario::ScenarioError;
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const STALL: i32 = 3;
    pub const JACOBIAN: i32 = 4;
    pub const MONTE_CARLO: i32 = 5;
    pub const UNOBSERVABLE: i32 = 6;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{0}")]
    Validation(String),
    #[error("descent stalled at iteration {iteration}; trace written")]
    Stall { iteration: usize },
    #[error("jacobian check failed: {0}")]
    Jacobian(String),
    #[error("{failed} of {trials} trials failed at checkpoint {checkpoint}; partial report written")]
    MonteCarlo {
        checkpoint: usize,
        failed: usize,
        trials: usize,
    },
    #[error("state is unobservable: FIM rank {rank} of {expected}, null direction {null_direction:?}")]
    Unobservable {
        rank: usize,
        expected: usize,
        null_direction: Vec<f64>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Optimizer(#[from] OptError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Ranging(#[from] RangingError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Scenario(_) | CliError::Validation(_) | CliError::Format { .. } => exit::VALIDATION,
            CliError::Stall { .. } => exit::STALL,
            CliError::Jacobian(_) => exit::JACOBIAN,
            CliError::MonteCarlo { .. } => exit::MONTE_CARLO,
            CliError::Unobservable { .. } => exit::UNOBSERVABLE,
            CliError::Optimizer(OptError::Infeasible { .. } | OptError::BarrierPole { .. }) => exit::VALIDATION,
            CliError::Io { .. } | CliError::Optimizer(_) | CliError::Estimator(_) | CliError::Ranging(_) => {
                exit::FAILURE
            }
        }
    }
}

impl From<FisherError> for CliError {
    fn from(e: FisherError) -> Self {
        match e {
            FisherError::Ranging(r) => CliError::Ranging(r),
            FisherError::Unobservable {
                rank,
                expected,
                null_direction,
            } => CliError::Unobservable {
                rank,
                expected,
                null_direction,
            },
        }
    }
}
