//! Representation-alignment toolkit core: kernel alignment between embedding
//! sets, lightweight projectors trained with a contrastive loss, concept-balanced
//! data selection and zero-shot evaluation.
//!
//! The crate is `no_std` with `alloc`; file formats are byte-level
//! encoders/decoders and leave IO to the caller.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod curation;
pub mod embedding;
pub mod embf;
pub mod eval;
pub mod grad;
pub mod kernels;
pub mod matrix;
pub mod projector;
pub mod stats;
pub mod synthetic;
pub mod trainer;

pub use embedding::{EmbeddingSet, Manifest, ManifestEntry, PairedCorpus};
pub use kernels::{cka, CkaScore, KernelSpec};
pub use matrix::Matrix;
pub use projector::{ProjectorStack, TokenBundle};
