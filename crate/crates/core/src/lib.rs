//! Scoring back-end for biometric verification.
//!
//! The crate consumes pre-extracted embeddings and trial protocols and
//! produces normalized, calibrated and fused scores together with the
//! usual detection metrics (EER, minDCF, actDCF).
//!
//! Modules map onto the stages of a batch evaluation:
//!
//! - [`protocol`]: trial lists, keys and segment channel metadata
//! - [`embeddings`]: embedding storage, codecs, class-logit fusion and filtering
//! - [`scoring`]: cosine scoring, recognizability and multi-frame aggregation
//! - [`normalization`]: adaptive s-norm and per-channel-pair normalization
//! - [`metrics`]: DET curves, EER, DCF and score distribution reports
//! - [`calib_fusion`]: logistic calibration, linear and greedy fusion
//! - [`cli`]: the `verikit` command-line front end

pub mod calib_fusion;
pub mod cli;
pub mod embeddings;
pub mod metrics;
pub mod normalization;
pub mod numfmt;
pub mod plot;
pub mod protocol;
pub mod scoring;
pub mod stats;
pub mod synth;

pub use calib_fusion::{AffineCalibration, GreedySelection, LinearFusion, NamedScores};
pub use embeddings::{ClLogitSet, EmbeddingRecord, EmbeddingSet};
pub use metrics::{DcfParams, DetCurve, MetricsReport};
pub use normalization::{ChannelPairStats, CohortStats};
pub use protocol::{ChannelPair, Label, SourceType, Trial, TrialSet};
pub use scoring::{AggregationMethod, RecognizabilityParams, ScoreSet, Stage};
