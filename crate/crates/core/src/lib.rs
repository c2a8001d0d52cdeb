//! Dense multi-head audio-visual grounding.
//!
//! Audio and visual featurizers produce dense per-location features split
//! into heads. Every audio position is compared with every image position
//! to form a similarity volume, which is pooled (max over heads and space,
//! mean over time) into one score per pair and trained with a symmetric
//! contrastive loss plus small regularizers. The evaluation side measures
//! prompted localization, cross-modal retrieval and head disentanglement.

pub mod tensor;

pub use tensor::{Graph, Tensor, TensorError, Var};
pub mod featurizers;
pub mod rng;
pub mod losses;
pub mod similarity;
pub mod data;
pub mod json;
pub mod parallel;
pub mod checkpoint;
pub mod training;
pub mod evaluation;
pub mod cli;
