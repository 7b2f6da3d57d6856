//! Diabetic-retinopathy screening engine.
//!
//! Turns per-image classifier scores into calibrated refer/no-refer proposals
//! with lesion annotations, and provides the statistics used to evaluate
//! graders and the automated system against each other.
//!
//! Data-parallel loops (batch screening, bootstrap resampling, quadrature
//! steps, per-channel image work) go through [`par::Execution`]. With the
//! default `parallel` feature they run on rayon; without it every path is
//! sequential and produces identical results.

pub mod analytics;
pub mod attribution;
pub mod backend;
pub mod calibration;
pub mod enhancement;
pub mod gold_standard;
pub mod metrics;
pub mod orchestrator;
pub mod par;
pub mod study;
pub mod synth;

pub use backend::{BackendError, InferenceBackend};
pub use orchestrator::{OrchestratorConfig, ScreeningError};
pub use par::Execution;
pub use study::{
    AnnotationCircle, Category, EyeProposal, EyeStudy, FieldCategory, FieldScores, FundusImage, Laterality,
    StudyProposal,
};
