//! Hybrid small/large language model inference over a fading uplink.
//!
//! A small model on the device drafts one token per round. The large model at
//! the base station verifies it with speculative rejection sampling, and an
//! uncertainty estimate from temperature perturbation decides whether the
//! draft distribution is worth sending at all.

pub mod backend;
pub mod calibration;
pub mod channel;
pub mod engine;
pub mod error;
pub mod math;
pub mod metrics;
pub mod stream;
pub mod trace;
pub mod uncertainty;
pub mod verify;

pub use error::{BackendError, Error, ErrorKind, Result};
pub use math::{LogitVector, TokenId, TokenSequence, VocabDistribution, Vocabulary};
pub use stream::RandomStream;
