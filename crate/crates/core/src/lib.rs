//! Model-based policy gradients with parameter-based exploration.
//!
//! Transition models (least-squares conditional density estimation or a
//! Gaussian process) are fitted on a fixed budget of real episodes; the
//! Gaussian prior over linear policy parameters is then improved with PGPE
//! gradients estimated on simulated roll-outs.

pub mod env;
pub mod error;
pub mod estimators;
pub mod gp;
pub mod io;
pub mod lscde;
pub mod model;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use env::{EnvConfig, EnvKind, Trajectory, TransitionSample};
pub use error::{Error, Result};
pub use model::{FitReport, FittedModel, ModelSpec, TransitionModel};
pub use policy::{Basis, GaussianPolicy, LinearPolicy, PriorHyper};
pub use rng::{Purpose, Rng, Streams};
pub use trainer::{Algo, LearningCurve, Schedule, TrainConfig, TrainResult};
