//! Neural architecture refinement: an LSTM meta-controller trained with
//! REINFORCE over operator and skip-connection decisions, reward oracles, and
//! the search strategies built on them.
//!
//! The numeric core is generic over [`scalar::Scalar`]; the aliases below fix
//! the common precisions.

pub mod archspace;
pub mod controller;
pub mod nar;
pub mod oracles;
pub mod pgtrainer;
pub mod reward;
pub mod scalar;
pub mod seeding;

pub use archspace::{ArchitectureVector, SearchSpaceSpec, SkipMask};
pub use controller::{ControllerConfig, SampleMode};
pub use nar::{SearchConfig, SearchMode, SearchResult};
pub use scalar::Scalar;

pub type ControllerParamsF64 = controller::ControllerParams<f64>;
pub type ControllerParamsF32 = controller::ControllerParams<f32>;
pub type DecisionTraceF64 = controller::DecisionTrace<f64>;
pub type DecisionTraceF32 = controller::DecisionTrace<f32>;
pub type SampleBatchF64 = pgtrainer::SampleBatch<f64>;
pub type SampleBatchF32 = pgtrainer::SampleBatch<f32>;
pub type AdamF64 = pgtrainer::Adam<f64>;
pub type AdamF32 = pgtrainer::Adam<f32>;
/// Exact cardinalities of operator and skip spaces.
pub type Cardinality = (num_bigint::BigUint, num_bigint::BigUint);
