//! Language-unit discovery and suppression for multilingual embeddings.
//!
//! The pipeline has four phases: train a top-k sparse autoencoder on pooled
//! embeddings, measure per-language activation frequencies of its latent
//! units to identify language-associated ones, suppress those units when
//! reconstructing embeddings, and evaluate the edited vectors on
//! mixed-language retrieval with bias diagnostics.

pub mod atlas;
pub mod cli;
pub mod data;
pub mod editor;
pub mod eval;
pub mod numerics;
pub mod retrieval;
pub mod sae;

pub use atlas::{ActivationFrequencyTable, FeatureAtlas, LanguageId, MaskStrategy};
pub use data::EmbeddingSet;
pub use editor::{EditPlan, ZeroVectorPolicy};
pub use numerics::{DenseMatrix, DenseVector, SeededRng};
pub use sae::{SaeModel, SparseCode, TrainConfig, TrainStats};
