//! Latent-space Bayesian optimization of powder weighing schedules.
//!
//! The numerical models are generic over [`Scalar`]; the aliases below fix
//! them at `f64`, which is what the session and the service use.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayesopt;
pub mod constraints;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod gpr;
pub mod linalg;
pub mod pca;
pub mod pipeline;
pub mod scalar;
pub mod session;
pub mod simulator;
pub mod vae;

pub use bayesopt::{Candidate, CandidateStatus, KappaMap, Strategy};
pub use dataset::{Dataset, NormStats, Schedule, Trial, TrialSetup};
pub use error::{Error, Result};
pub use pipeline::{ModelBundle, ModelConfig};
pub use scalar::Scalar;
pub use session::{Outcome, SessionConfig, SessionState};
pub use simulator::{SimConfig, SimResult};

pub type Vae = vae::VaeModel<f64>;
pub type Pca = pca::PcaPair<f64>;
pub type Gpr = gpr::GprModel<f64>;
pub type Kernel = gpr::KernelParams<f64>;
pub type LatentBox = bayesopt::BoundingBox<f64>;
pub type Mat = linalg::Matrix<f64>;
