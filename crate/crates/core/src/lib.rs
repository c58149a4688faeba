//! Gaussian belief flows: online learning by pushing a Gaussian belief over
//! model weights through the KL-minimal linear flow consistent with each SGD step.
//!
//! The numeric core is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common case.

pub mod belief;
pub mod cli;
pub mod data;
pub mod flow;
pub mod harness;
pub mod learner;
pub mod model;
pub mod oracle;
pub mod pseudo;
pub mod scalar;
pub mod snapshot;
pub mod verify;

pub use belief::{kl_divergence, BeliefError, BeliefState, Covariance, Variant};
pub use flow::{apply_flow, clamp_nonexpansive, solve, FlowConfig, FlowError, FlowSolution};
pub use learner::{build_learner, Algorithm, LearnerConfig, OnlineLearner, StepOutcome};
pub use model::{Features, LabeledExample, ModelSpec};
pub use scalar::Real;

pub type Belief = BeliefState<f64>;
pub type Belief32 = BeliefState<f32>;
pub type Flow = FlowSolution<f64>;
pub type Flow32 = FlowSolution<f32>;
pub type Dataset = data::Dataset<f64>;
pub type Weights = nalgebra::DVector<f64>;
