//! Action-guided self-derived distillation of a toy vision-language-action
//! policy.
//!
//! The pipeline has three stages:
//!
//! 1. a teacher backbone is trained on synthetic episodes and frozen, then
//!    per-layer graph encoders and auxiliary action heads are fitted on its
//!    hidden states ([`probe`]);
//! 2. a student initialised as a copy of the teacher learns a per-input
//!    layer router under semantic, action and load-balancing losses
//!    ([`losses`], [`trainer`]);
//! 3. at inference only layers whose gate clears a threshold run, and the
//!    saved computation is accounted analytically ([`student`], [`metrics`]).
//!
//! Everything is built on a small reverse-mode autodiff tape ([`autodiff`])
//! and checked against central finite differences ([`gradcheck`]).

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod student;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use autodiff::{Gradients, Graph, Var};
pub use backbone::{Backbone, BackboneConfig};
pub use checkpoint::Container;
pub use config::Config;
pub use error::{Error, IntegrityKind, Result};
pub use graph::{CapsuleParams, EncoderKind, GraphConfig, SparseAdjacency};
pub use losses::{LossReport, LossWeights};
pub use metrics::{EvalReport, FlopsModel};
pub use nn::Module;
pub use probe::TeacherProbe;
pub use student::{GateVector, RouterParams, StudentModel};
pub use tensor::Tensor;
pub use trainer::{RunManifest, TrainSchedule};
pub use world::{Dataset, Episode, WorldConfig};
