//! Neuron-attention decomposition for CLIP-ResNet attention pooling.
//!
//! The pooled image embedding of CLIP-ResNet is an exact sum of
//! contributions, one per (neuron, head, token) path through the attention
//! pooling layer. This crate computes those contributions from exported
//! tensors and builds the analyses on top of them: rank-1 direction fitting,
//! mean ablation, sparse text decomposition, training-free segmentation,
//! distribution-shift monitoring and register-neuron discovery.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the element type for common use.

pub mod ablation;
pub mod analysis;
pub mod attnpool;
pub mod bundle;
pub mod directions;
pub mod error;
pub mod linalg;
pub mod scalar;
pub mod segmentation;
pub mod sparse_text;
pub mod zeroshot;

#[cfg(test)]
pub(crate) mod testutil;

pub use attnpool::{
    attention_weights, bias_terms, build_tokens, decompose, forward, pool, AttnPoolWeights, AttnWeightMap,
    DecompositionLevel, DecompositionTensor, TokenSequence,
};
pub use bundle::{read_bundle, validate_model_bundle, write_bundle, Tensor, TensorBundle, TensorMap};
pub use directions::{
    ComponentKey, ContributionSamples, ContributionStore, Direction, DirectionSet, ReconstructionMode,
};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Weights64 = AttnPoolWeights<f64>;
pub type Weights32 = AttnPoolWeights<f32>;
pub type Decomposition64 = DecompositionTensor<f64>;
pub type Decomposition32 = DecompositionTensor<f32>;
pub type Direction64 = Direction<f64>;
pub type Direction32 = Direction<f32>;
pub type DirectionSet64 = DirectionSet<f64>;
pub type DirectionSet32 = DirectionSet<f32>;
pub type ContributionStore64<'w> = ContributionStore<'w, f64>;
pub type ContributionStore32<'w> = ContributionStore<'w, f32>;
pub type TextDictionary64 = sparse_text::TextDictionary<f64>;
pub type TextDictionary32 = sparse_text::TextDictionary<f32>;
pub type SparseCode64 = sparse_text::SparseCode<f64>;
pub type SparseCode32 = sparse_text::SparseCode<f32>;
pub type ClassBank64 = zeroshot::ClassBank<f64>;
pub type ClassBank32 = zeroshot::ClassBank<f32>;
