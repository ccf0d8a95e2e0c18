//! Clip records, tokenization, vocabulary, padded batches and the synthetic
//! corpus generator.

mod batch;
mod record;
pub mod synth;
mod tokenize;
mod vocab;

pub use batch::{
    make_batch, Batch, CandidateInput, ClipInput, EncodedCandidate, EncodedClip, PaddedIds,
};
pub use record::{audio_slices, ClipRecord, AUDIO_DIM, AUDIO_SLICES};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{build_vocab, VocabBuilder, Vocabulary, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};
