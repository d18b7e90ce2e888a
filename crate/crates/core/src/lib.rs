//! Cross-domain sequential recommendation engine.
//!
//! The pipeline models users who interact with items from two catalog
//! domains. Item representations come from propagating embeddings over an
//! item-attribute graph and three item-item transition graphs, aligned
//! across domains by projection losses. Per-domain causal self-attention
//! encoders turn interaction sequences into preference vectors, trained
//! with a next-item objective plus contrastive and alignment terms. At
//! inference time the preference vectors drive exact nearest-neighbor user
//! retrieval, prompt construction for a pluggable text-generation backend,
//! BM25 grounding of the generated text back into item space, and a
//! domain-constrained refinement step that falls back to the sequence
//! model's own ranking whenever the grounded answer leaves the target
//! domain.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod gnn;
pub mod graphs;
pub mod grounding;
pub mod linalg;
pub mod llm;
pub mod model;
pub mod retrieval;
pub mod synth;
pub mod train;

pub use dataset::{Catalog, DomainId, Item, SplitDataset, UserSequence};
pub use graphs::{GraphBundle, SparseGraph};
pub use model::{ModelState, UserPreference};
