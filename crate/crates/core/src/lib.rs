//! Block-structured localist attention.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense matrices, stable softmax, entropy.
//! - [`attention`]: block partitions with anchor sets, single-layer multi-head
//!   attention, logit margins and localization diagnostics.
//! - [`bounds`]: closed-form concentration, entropy and fidelity bounds, the
//!   penalty threshold, and harnesses that check them against measurements.
//! - [`trainer`]: proximal gradient training with group-lasso penalties on
//!   block column groups, KKT certification and rule injection.
//! - [`recruit`]: penalized-likelihood accounting in nats and block recruitment.
//! - [`hierarchy`]: model registry, routing and specialist recruitment.
//! - [`synth`]: rule-governed synthetic data with controllable geometry.
//! - [`dial`]: locality-dial presets and penalty schedules.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision, clippy::needless_range_loop)]

pub mod attention;
pub mod bounds;
pub mod dial;
mod error;
pub mod hierarchy;
pub mod linalg;
pub mod recruit;
pub mod spectral;
pub mod synth;
pub mod trainer;

pub use attention::{AttentionDiagnostics, BlockPartition, HeadParams, RuleTargets};
pub use bounds::{BoundKind, BoundReport, RegularityEstimate};
pub use dial::{DialConfig, PenaltyConfig, Preset};
pub use error::{Error, Result};
pub use hierarchy::{HierAccount, ModelInstance, ModelRegistry, Router, RoutingMode};
pub use linalg::{EntropyUnit, Matrix, ProbVector};
pub use recruit::{MdlAccount, RecruitmentDecision, RecruitmentLedger};
pub use synth::{GeneratorSpec, LabeledBatch};
pub use trainer::{AttentionModel, KktCertificate, RuleSpec, TrainOptions, TrainState};
