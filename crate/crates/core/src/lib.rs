//! Functional linear ODE models for trajectories driven by time-varying
//! forcing functions, fitted by expectation-maximization.

pub mod baselines;
pub mod commands;
pub mod crossval;
pub mod design;
pub mod em;
pub mod error;
pub mod inference;
pub mod io;
pub(crate) mod linalg;
pub mod metrics;
pub mod optim;
pub mod quadrature;
pub mod simulate;
pub mod splines;
pub mod study;

pub use design::{assemble_bundle, DesignBundle, FunctionalDataset};
pub use em::{fit, FitOptions, FlodeFit, FlodeParams, PosteriorMoments};
pub use error::{FlodeError, Result};
pub use inference::{bootstrap_bands, BootstrapResult, CoefficientBand};
pub use splines::BasisSystem;
