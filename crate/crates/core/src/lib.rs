//! Caption concreteness toolkit.
//!
//! The crate covers the numerical side of concreteness-based dataset curation:
//! reading and writing line-delimited caption corpora, reconstruction
//! similarity primitives, per-length logit standardization, logistic fusion of
//! the two reconstruction scores, budgeted selection, and a line-delimited
//! protocol for talking to external scorer processes.

pub mod corpus;
pub mod curate;
pub mod fusion;
pub mod gateway;
pub mod hashing;
pub mod metrics;
pub mod standardize;

pub use corpus::{AnnotationSet, CaptionRecord, CorpusError, ReadMode, ShardManifest};
pub use curate::{CurateError, SelectionMethod, SelectionOutcome, SelectionSpec, TargetSpace, TrainingBudget};
pub use fusion::{FitConfig, FusionError, FusionParams};
pub use gateway::{Endpoint, GatewayError, ScoreRequest, ScoreResponse};
pub use metrics::{CorrelationReport, MetricsError, Similarity};
pub use standardize::{LengthBucketStats, StandardizationModel, StandardizeError, Transform};
