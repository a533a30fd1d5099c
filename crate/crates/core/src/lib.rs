//! Design-based estimation of finite-population totals assisted by random forests.
//!
//! The crate covers the whole chain from a sampling design to a confidence interval:
//!
//! * [`design`]: SRSWOR and stratified SRSWOR with exact `π_k` / `π_kℓ`, and samplers;
//! * [`cart`] and [`forest`]: CART regression trees and random forests whose fits are
//!   exposed as explicit donor weights;
//! * [`estimators`]: Horvitz–Thompson, GREG, model-assisted estimators built on forests,
//!   their case weights and the out-of-bag decomposition;
//! * [`variance`]: the residual-based variance estimator and normal intervals;
//! * [`calibration`]: model calibration yielding one weight system for many variables.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix `f64`.

pub mod calibration;
pub mod cart;
pub mod design;
pub mod error;
pub mod estimators;
pub mod forest;
pub mod linalg;
pub mod population;
pub mod scalar;
pub mod variance;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Population = population::PopulationFrame<f64>;
pub type Design = design::DesignSpec<f64>;
pub type Tree = cart::RegressionTree<f64>;
pub type Forest = forest::ForestModel<f64>;
pub type Weights = forest::PredictionWeightVector<f64>;
pub type Report = estimators::EstimateReport<f64>;
pub type Calibration = calibration::CalibrationProblem<f64>;

pub type Population32 = population::PopulationFrame<f32>;
pub type Design32 = design::DesignSpec<f32>;
pub type Forest32 = forest::ForestModel<f32>;
pub type Report32 = estimators::EstimateReport<f32>;
