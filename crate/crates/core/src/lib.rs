//! Training framework for semi-supervised domain generalization: one labeled
//! source domain plus unlabeled source domains at train time, evaluated on an
//! unseen target domain.
//!
//! The pieces fit together like this: [`data`] produces a [`data::DatasetBundle`]
//! (directory-structured image datasets or the seeded synthetic generator),
//! [`model`] holds the shared feature extractor, the two classifier heads and
//! the domain discriminator, [`dapl`] maintains per-domain class representations
//! and turns classifier outputs into domain-aware pseudo-label scores, [`mixup`]
//! interpolates labeled and pseudo-labeled samples, [`losses`] defines the loss
//! terms and the two optimization objectives, and [`trainer`] runs the per-epoch
//! alternation of optimization, inference, bank update and set migration.
//! [`experiments`] adds run manifests, sweeps and report generation on top.

pub mod config;
pub mod dapl;
pub mod data;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod metrics;
pub mod mixup;
pub mod model;
pub mod sample;
pub mod state;
pub mod trainer;

pub use config::{RepPolicy, TrainConfig};
pub use error::{Error, Result};
pub use sample::{PseudoLabeledSample, Sample, SampleId};
pub use state::TrainState;
