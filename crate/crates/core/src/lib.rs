//! Noise-robust cross-modal matching.
//!
//! A small dual encoder is trained on paired image/text features where a share
//! of the pairs are mismatched. Clean pairs are picked out by a two-component
//! mixture over per-sample losses, each training pair gets clean "memory
//! entries" (nearest clean image, nearest clean text), and every batch is
//! re-weighted by how much a one-step probe on the batch hurts those entries.

mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gmm;
pub mod membank;
pub mod model;
pub mod npc;
pub mod objective;
pub mod rng;

pub use codec::write_atomic;
pub use error::{Error, Result};
