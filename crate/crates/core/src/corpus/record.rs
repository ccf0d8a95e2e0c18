use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Width of a log-mel audio frame.
pub const AUDIO_DIM: usize = 64;
/// Number of one-second sets an audio clip is sliced into.
pub const AUDIO_SLICES: usize = 5;

/// One (clip context, candidate comment) instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub timestamp_s: u64,
    /// Surrounding comments, each already tokenized.
    pub surrounding: Vec<Vec<String>>,
    /// One feature vector per sampled frame.
    pub vision: Vec<Vec<f64>>,
    /// Log-mel frames spanning the five-second window.
    pub audio: Vec<Vec<f64>>,
    pub candidate: Vec<String>,
    pub is_ground_truth: bool,
}

impl ClipRecord {
    /// Surrounding comments concatenated into one token sequence.
    pub fn comment_tokens(&self) -> impl Iterator<Item = &String> {
        self.surrounding.iter().flatten()
    }

    pub fn vision_dim(&self) -> Option<usize> {
        self.vision.first().map(Vec::len)
    }

    /// Checks the structural invariants. `vision_dim`, when given, pins the
    /// vision feature width.
    pub fn validate(&self, audio_dim: usize, vision_dim: Option<usize>) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::InvalidRecord(format!(
                "clip {}: {msg}",
                self.clip_id
            )))
        };
        if self.surrounding.is_empty() {
            return bad("no surrounding comments".into());
        }
        if self.comment_tokens().next().is_none() {
            return bad("surrounding comments contain no tokens".into());
        }
        if self.candidate.is_empty() {
            return bad("empty candidate".into());
        }
        if self.vision.is_empty() {
            return bad("no vision frames".into());
        }
        let dv = vision_dim.unwrap_or(self.vision[0].len());
        if dv == 0 {
            return bad("zero-width vision features".into());
        }
        for (i, f) in self.vision.iter().enumerate() {
            if f.len() != dv {
                return Err(Error::Dimension {
                    op: "vision frame",
                    left: alloc::vec![i, f.len()],
                    right: alloc::vec![dv],
                });
            }
        }
        if self.audio.len() < AUDIO_SLICES {
            return bad(format!(
                "{} audio frames, need at least {AUDIO_SLICES}",
                self.audio.len()
            ));
        }
        for (i, a) in self.audio.iter().enumerate() {
            if a.len() != audio_dim {
                return Err(Error::Dimension {
                    op: "audio frame",
                    left: alloc::vec![i, a.len()],
                    right: alloc::vec![audio_dim],
                });
            }
        }
        if self
            .vision
            .iter()
            .chain(&self.audio)
            .flatten()
            .any(|v| !v.is_finite())
        {
            return bad("non-finite feature value".into());
        }
        Ok(())
    }
}

/// Splits `n` frames into five contiguous, ordered sets whose sizes differ by
/// at most one.
pub fn audio_slices(n: usize) -> Result<[(usize, usize); AUDIO_SLICES]> {
    if n < AUDIO_SLICES {
        return Err(Error::Slice(format!(
            "{n} frames cannot form {AUDIO_SLICES} nonempty slices"
        )));
    }
    let mut out = [(0, 0); AUDIO_SLICES];
    for (t, s) in out.iter_mut().enumerate() {
        *s = (t * n / AUDIO_SLICES, (t + 1) * n / AUDIO_SLICES);
    }
    Ok(out)
}
