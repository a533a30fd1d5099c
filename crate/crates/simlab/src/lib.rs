//! Monte Carlo laboratory: synthetic populations, repeated-sampling experiments and the
//! partition-convergence diagnostic.

pub mod h5;
pub mod mc;
pub mod population;

pub use h5::{h5_diagnostic, H5Config, H5Point};
pub use mc::{run_mc, EstimatorSpec, McConfig, McData, McRow, McSummary};
pub use population::{gen_h5_population, gen_population, study_name, working_predictors, NoiseReading, SyntheticSpec};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] rfsurvey::Error),

    #[error("unknown model {0} (expected 1 to 8)")]
    UnknownModel(usize),

    #[error("invalid experiment: {0}")]
    Config(String),

    #[error("{estimator} failed in {failures} of {replicates} replicates (first error: {first})")]
    TooManyFailures {
        estimator: String,
        failures: usize,
        replicates: usize,
        first: String,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
