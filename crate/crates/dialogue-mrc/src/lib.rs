//! Extractive reading comprehension over multi-party dialogue, built around
//! three speaker-aware components on top of a small transformer encoder:
//! dual-channel attention split by same/different speaker, a speaker-link
//! relational graph, and a discourse-relation graph, fused into a span head.
//!
//! Everything numeric runs on the crate's own reverse-mode autodiff tape; see
//! [`autodiff`]. The [`harness`] module holds the training loop, AdamW,
//! EM/F1 evaluation, checkpointing, and a synthetic corpus generator.

pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod model;
pub mod relational_graphs;
pub mod span_model;
pub mod speaker_attention;

pub use error::{Error, Result};
