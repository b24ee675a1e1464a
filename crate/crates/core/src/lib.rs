//! Cluster-level verification of predicted segmentation masks.
//!
//! Masks of each class are clustered with complete-linkage HAC. A best-first
//! search over the tree asks a few yes/no questions per cluster and
//! propagates the answers to every member.

pub mod calibration;
pub mod engine;
pub mod error;
pub mod gmm;
pub mod hac;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod service;
pub mod synth;

pub use engine::{
    decide, run_baseline, run_forest, run_selection, Annotator, Decision, Engine, EngineState, ForestResult,
    NoisyOracle, OracleAnnotator, QueueAnnotator, RunResult, Strategy,
};
pub use error::{Error, Result};
pub use hac::{hac_complete_linkage, ClusterNode, Dendrogram, TreeFile};
pub use model::{CostLedger, EngineConfig, LabelSource, MaskRecord, SampleSize, VerificationLabel};
