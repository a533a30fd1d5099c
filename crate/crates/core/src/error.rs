use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid design: {0}")]
    Design(String),

    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient data: {members} member units for a minimum node size of {min_node_size}")]
    InsufficientData { members: usize, min_node_size: usize },

    #[error("rank-deficient cross-product matrix")]
    RankDeficient,

    #[error("variance not estimable: joint inclusion probability of units {0} and {1} is zero")]
    VarianceNotEstimable(usize, usize),

    #[error("negative variance {0}")]
    NegativeVariance(f64),

    #[error("empty estimated domain")]
    EmptyDomain,

    #[error("infeasible or collinear constraints (max scaled residual {max_residual:e})")]
    Infeasible {
        max_residual: f64,
        residuals: Vec<f64>,
    },

    #[error("calibration did not converge after {iterations} iterations (max scaled residual {max_residual:e})")]
    NonConvergence {
        iterations: usize,
        max_residual: f64,
        residuals: Vec<f64>,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of a numerical procedure (singular systems, non-convergence,
    /// non-estimable variances) as opposed to bad input data or parameters.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient
                | Error::VarianceNotEstimable(..)
                | Error::NegativeVariance(_)
                | Error::EmptyDomain
                | Error::Infeasible { .. }
                | Error::NonConvergence { .. }
        )
    }
}
