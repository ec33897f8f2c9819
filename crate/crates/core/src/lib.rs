//! Shrinkage estimation for heteroscedastic hierarchical linear models,
//! tuned by unbiased risk estimates.

pub mod empirical;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod method;
pub mod model;
pub mod optimize;
pub mod parallel;
pub mod risk;
pub mod semiparam;
pub mod simgen;

pub use error::{Result, ShrinkError};
pub use method::{estimate, Estimate, Method, MethodConfig};
pub use parallel::Execution;
pub use linalg::{DesignMatrix, Metric, ShrinkBasis};
pub use model::{GenericPrior, GroundTruth, HeteroData, Lambda, ModelIIParams, ModelIParams, PriorCovariance, ShrinkOperator};
