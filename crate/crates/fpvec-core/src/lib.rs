//! Fingerprint-vector toolkit.
//!
//! Embeds backdoor fingerprints into a tiny byte-level language model,
//! extracts the induced parameter delta as a transferable vector, applies it
//! post hoc to downstream checkpoints, and measures how well the fingerprint
//! survives fine-tuning, merging, and pruning attacks.
//!
//! The checkpoint arithmetic (delta extraction/application, merging, pruning)
//! works on any safetensors checkpoint; the training and trigger-verification
//! paths are specific to the built-in [`toy_lm`] model.

#![forbid(unsafe_code)]

pub mod delta_ops;
pub mod error;
pub mod fingerprint;
pub mod harness;
pub mod jsonl;
pub mod merge_ops;
pub mod prune_ops;
pub mod rng;
pub mod tensor_store;
pub mod toy_lm;

pub use error::{Error, Result};
