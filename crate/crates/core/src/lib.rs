//! Numeric and decision core of the C3 caption pipeline.
//!
//! Everything in this crate is a pure function over owned or borrowed
//! data and needs only `alloc`. File formats, the LLM gateway and the CLI
//! live in the `c3` companion crate.
//!
//! Modules:
//! - [`linalg`]: dense row-major matrices, softmax, row/column maxima,
//!   central finite differences.
//! - [`embedding`]: embedding matrices and the deterministic synthesizer.
//! - [`attributes`]: attribute normalization and pool merging.
//! - [`completeness`]: bidirectional coverage attention and the unified
//!   completeness score.
//! - [`answer`]: binary Yes/No answer parsing.
//! - [`mdp`]: the ASK/ACCEPT/REJECT verification automaton and traces.
//! - [`retrieval`]: projection heads, symmetric contrastive loss, trainer,
//!   Recall@K.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod answer;
pub mod attributes;
pub mod completeness;
pub mod embedding;
pub mod linalg;
pub mod mdp;
pub mod retrieval;
pub mod rng;

pub use answer::{parse_binary_answer, BinaryAnswer};
pub use attributes::{merge_pools, normalize_attribute, Attribute, AttributePool, AttributeSource};
pub use completeness::{CoverageReport, ProjectionInit, ProjectionSet};
pub use embedding::{synth_embeddings, EmbeddingKind, EmbeddingMatrix};
pub use linalg::{LinalgError, Matrix};
pub use mdp::{Action, EpisodeTrace, MdpState, TraceStep, Verdict};
pub use retrieval::{ProjectionHead, RetrievalMetrics, TrainConfig, TrainState};
