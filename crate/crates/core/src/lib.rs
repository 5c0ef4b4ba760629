//! Generate-then-read pipeline with a parametric knowledge module.
//!
//! A small white-box model is tuned on `(instruction, input, output)` triples to
//! emit task-relevant background knowledge; a black-box completion model then
//! answers from a prompt that embeds that background. This crate covers the
//! pieces around those two model calls:
//!
//! - [`corpus`]: dataset ingestion, table flattening, training-triple construction
//! - [`template`]: alignment and answer prompt rendering
//! - [`retrieval`]: BM25 index for the retrieve-then-read baseline
//! - [`backend`]: HTTP/stub model clients with caching, retries, rate limiting
//! - [`guide`]: the guiding strategies and answer extraction
//! - [`fusion`]: one-head cross-attention of text and image features
//! - [`eval`]: accuracy, exact match, per-category breakdowns and reports
//!
//! Numeric kernels are generic over [`Scalar`]; the aliases below fix them to `f64`.

pub mod backend;
pub mod corpus;
pub mod eval;
pub mod fusion;
pub mod guide;
pub mod retrieval;
pub mod scalar;
pub mod template;

pub use scalar::Scalar;

pub use corpus::{DatasetSplit, KnowledgeTriple, SplitName, Table, TaskKind, TaskRecord};
pub use guide::{Background, GuidedAnswer, GuidingStrategy, Prediction};
pub use template::{PromptKind, RenderedPrompt, TemplateSet};

/// Double-precision feature matrix used for fusion inputs and outputs.
pub type FeatureMatrix = fusion::Matrix<f64>;
/// Single-precision feature matrix.
pub type FeatureMatrixF32 = fusion::Matrix<f32>;
/// Double-precision fusion projection weights.
pub type FusionWeights = fusion::FusionWeights<f64>;
/// BM25 parameters in `f64`, the precision used by the pipeline.
pub type Bm25Params = retrieval::Bm25Params<f64>;
