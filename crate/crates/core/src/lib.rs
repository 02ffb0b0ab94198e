//! Gist-token context compression for small decoder-only transformers.
//!
//! The crate is organized around a segment-wise compression loop: long inputs
//! are split into fixed-length segments, each segment is summarized into a
//! handful of gist tokens, and only those gists (plus a few sink tokens) stay
//! visible to later segments. Three architectures are supported, selected by
//! where the compressed memory lives (recurrent hidden states vs. reusable KV
//! cache) and how gists are placed (appended after the segment vs. evenly
//! interleaved):
//!
//! - `Coarse-Rec`: trailing gists, hidden-state memory re-fed as embeddings;
//! - `Coarse-KV`: trailing gists, per-layer KV memory;
//! - `Fine-KV`: interleaved gists (one per `r` raw tokens), KV memory;
//!
//! plus a full-attention baseline. Training combines a weighted LM loss with
//! an optional per-gist autoencoding loss ([`train`]) and token reweighting
//! driven by a frozen reference model. The [`probe`] module measures what the
//! compression keeps: sliding-window perplexity, within-segment loss
//! profiles, needle recall, and gist reconstruction probes.
//!
//! `no_std` + `alloc`; all IO lives in the companion CLI crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod decode;
pub mod error;
pub mod gist;
pub mod graph;
pub mod model;
pub mod probe;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{AttentionMask, Graph, TensorId};
pub use tensor::TensorData;
