//! Antibody humanization by per-position sampling from conditional sequence
//! models, with optional oracle guidance through a product of experts.

pub mod metrics;
pub mod sampler;
pub mod scorers;
pub mod selection;
pub mod seqcore;
pub mod stats;
pub mod testkit;

pub use sampler::{generate_batch, Expert, Method, SamplingConfig};
pub use scorers::{ConditionalSequenceModel, ContextProfileModel, OracleScoreMatrix};
pub use seqcore::{AminoAcid, AntibodySequence, Candidate, MaskPolicy, RegionAnnotation};
