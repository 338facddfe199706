//! Predicting an abnormal serum-creatinine result within a 30-day window from
//! longitudinal laboratory flags.
//!
//! The crate covers the whole pipeline:
//!
//! - [`ingest`]: JSON-lines patient and laboratory files into per-patient timelines
//! - [`synth`]: synthetic cohorts driven by a latent renal-severity process
//! - [`cohort`]: follow-up, eligibility, labelling and the stratified split
//! - [`encode`]: fixed-length multi-hot sequences plus age/sex statics
//! - [`gru`]: GRU encoder with a linear head, exact forward and BPTT backward
//! - [`train`]: mini-batch Adam with early stopping on validation AUC
//! - [`eval`]: ROC/AUC, bootstrap intervals and the confusion matrix
//! - [`tsne`]: exact t-SNE for projecting the learned embeddings
//!
//! Everything that draws random numbers takes an explicit seed; given the same
//! inputs and seeds every function returns bit-identical results.

pub mod baseline;
pub mod checkpoint;
pub mod cohort;
pub mod encode;
pub mod error;
pub mod eval;
pub mod gru;
pub mod ingest;
pub mod rng;
pub mod synth;
pub mod train;
pub mod tsne;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use cohort::{CohortEntry, CohortRules, ExclusionReason, Split, SplitFractions, Window};
pub use encode::{EncodedSequence, EncodingManifest};
pub use error::{Error, Result};
pub use eval::{BootstrapCi, ConfusionMatrix, RocCurve, RocPoint, ScoredSet};
pub use gru::{ForwardCache, GruParams, HeadParams, ModelParams};
pub use ingest::{LabEvent, PatientDemographics, PatientTimeline, Sex, Timelines};
pub use synth::{SynthConfig, SynthTruth};
pub use train::{AdamState, TrainConfig, TrainHistory};
pub use tsne::{Embedding2D, TsneConfig};
pub use vocab::MarkerVocabulary;
