//! Multimodal matching transformer for ranking live comments against a video
//! clip's context (surrounding comments, vision features, audio frames).
//!
//! The crate is `no_std` (it needs `alloc`). It carries the whole numeric
//! pipeline: a small reverse-mode autodiff engine, the modality encoders, the
//! stack of matching blocks, the prediction head, max-margin training with
//! Adam, candidate-set construction and ranking metrics, plus a synthetic
//! corpus generator. File formats and the command-line tool live in the
//! `livematch` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod corpus;
pub mod encoders;
mod error;
pub mod head;
mod init;
pub mod matching;
pub(crate) mod math;
pub mod model;
pub mod ranking;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{CrossTopology, MatchingModel, Modalities, ModelConfig, Pass, Stream, Trace};

pub use tensor::Tensor;

/// Deterministic generator used everywhere randomness is needed.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds a generator from a seed and a stream number; distinct streams give
/// independent sequences for the same seed.
pub fn seeded_rng(seed: u64, stream: u64) -> SeededRng {
    use rand::SeedableRng;
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
