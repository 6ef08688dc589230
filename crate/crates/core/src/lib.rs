//! Black-box memorization auditing for language models.
//!
//! Inputs are perturbed with seeded bit flips at increasing intensities, the
//! model is prompted several times per perturbed input, and the outputs are
//! scored against a reference. A sample whose score collapses between two
//! consecutive intensities by more than a calibrated threshold is flagged
//! as memorized.

pub mod calibrate;
pub mod corpus;
pub mod metrics;
pub mod modelgw;
pub mod perturb;
pub mod pipeline;
pub mod sensitivity;
pub mod simlab;

pub use corpus::{Label, Sample, SplitSample, TaskKind, TaskSpec};
pub use metrics::MetricKind;
pub use modelgw::{Gateway, GatewayConfig, OutputSet};
pub use perturb::{PerturbMode, PerturbationPlan, PerturbedVariant};
pub use pipeline::{RunConfig, RunReport};
pub use sensitivity::{PerformanceCurve, SensitivityVerdict};
