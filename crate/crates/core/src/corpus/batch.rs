use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::record::{audio_slices, AUDIO_SLICES};
use super::{ClipRecord, Vocabulary, PAD_ID};
use crate::{Error, Result};

/// Borrowed model input for one clip context. Masks mark real (unpadded)
/// positions; audio frames outside `audio_slices` are never read.
#[derive(Clone, Copy, Debug)]
pub struct ClipInput<'a> {
    pub comment_ids: &'a [usize],
    pub comment_mask: &'a [bool],
    /// `vision_rows × vision_dim`, row-major.
    pub vision: &'a [f64],
    pub vision_rows: usize,
    pub vision_dim: usize,
    pub vision_mask: &'a [bool],
    /// `audio_rows × audio_dim`, row-major.
    pub audio: &'a [f64],
    pub audio_rows: usize,
    pub audio_dim: usize,
    pub audio_slices: [(usize, usize); AUDIO_SLICES],
}

#[derive(Clone, Copy, Debug)]
pub struct CandidateInput<'a> {
    pub ids: &'a [usize],
    pub mask: &'a [bool],
}

/// Owned, id-encoded clip context.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedClip {
    pub clip_id: String,
    pub comment_ids: Vec<usize>,
    pub comment_mask: Vec<bool>,
    pub vision: Vec<f64>,
    pub vision_rows: usize,
    pub vision_dim: usize,
    pub vision_mask: Vec<bool>,
    pub audio: Vec<f64>,
    pub audio_rows: usize,
    pub audio_dim: usize,
    pub audio_slices: [(usize, usize); AUDIO_SLICES],
}

impl EncodedClip {
    pub fn from_record(record: &ClipRecord, vocab: &Vocabulary) -> Result<Self> {
        let comment_ids: Vec<usize> = record.comment_tokens().map(|t| vocab.id(t)).collect();
        if comment_ids.is_empty() {
            return Err(Error::InvalidRecord(alloc::format!(
                "clip {}: no comment tokens",
                record.clip_id
            )));
        }
        let vision_dim = record.vision_dim().unwrap_or(0);
        let audio_dim = record.audio.first().map_or(0, Vec::len);
        if vision_dim == 0 || audio_dim == 0 {
            return Err(Error::InvalidRecord(alloc::format!(
                "clip {}: missing features",
                record.clip_id
            )));
        }
        Ok(EncodedClip {
            clip_id: record.clip_id.clone(),
            comment_mask: vec![true; comment_ids.len()],
            comment_ids,
            vision: record.vision.concat(),
            vision_rows: record.vision.len(),
            vision_dim,
            vision_mask: vec![true; record.vision.len()],
            audio: record.audio.concat(),
            audio_rows: record.audio.len(),
            audio_dim,
            audio_slices: audio_slices(record.audio.len())?,
        })
    }

    pub fn input(&self) -> ClipInput<'_> {
        ClipInput {
            comment_ids: &self.comment_ids,
            comment_mask: &self.comment_mask,
            vision: &self.vision,
            vision_rows: self.vision_rows,
            vision_dim: self.vision_dim,
            vision_mask: &self.vision_mask,
            audio: &self.audio,
            audio_rows: self.audio_rows,
            audio_dim: self.audio_dim,
            audio_slices: self.audio_slices,
        }
    }
}

/// Owned, id-encoded candidate comment.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EncodedCandidate {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl EncodedCandidate {
    pub fn new(ids: Vec<usize>) -> Self {
        EncodedCandidate {
            mask: vec![true; ids.len()],
            ids,
        }
    }

    pub fn from_tokens(tokens: &[String], vocab: &Vocabulary) -> Self {
        Self::new(vocab.encode(tokens))
    }

    pub fn input(&self) -> CandidateInput<'_> {
        CandidateInput {
            ids: &self.ids,
            mask: &self.mask,
        }
    }
}

/// `rows × len` id matrix padded with [`PAD_ID`], plus its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedIds {
    pub len: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl PaddedIds {
    fn new<'a>(seqs: impl Iterator<Item = (&'a [usize], &'a [bool])> + Clone) -> Self {
        let len = seqs.clone().map(|(s, _)| s.len()).max().unwrap_or(0);
        let mut ids = Vec::new();
        let mut mask = Vec::new();
        for (s, m) in seqs {
            ids.extend_from_slice(s);
            mask.extend_from_slice(m);
            ids.resize(ids.len() + len - s.len(), PAD_ID);
            mask.resize(mask.len() + len - s.len(), false);
        }
        PaddedIds { len, ids, mask }
    }

    pub fn row(&self, b: usize) -> CandidateInput<'_> {
        let r = b * self.len..(b + 1) * self.len;
        CandidateInput {
            ids: &self.ids[r.clone()],
            mask: &self.mask[r],
        }
    }
}

/// Padded arrays for a group of records. Every stream is padded to the batch
/// maximum; padded ids are [`PAD_ID`], padded feature rows are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub clip_ids: Vec<String>,
    pub comments: PaddedIds,
    pub candidates: PaddedIds,
    /// Sampled negative candidates, when attached for training.
    pub negatives: Option<PaddedIds>,
    pub vision_len: usize,
    pub vision_dim: usize,
    /// `B × vision_len × vision_dim`.
    pub vision: Vec<f64>,
    pub vision_mask: Vec<bool>,
    pub audio_len: usize,
    pub audio_dim: usize,
    /// `B × audio_len × audio_dim`.
    pub audio: Vec<f64>,
    pub audio_slices: Vec<[(usize, usize); AUDIO_SLICES]>,
    pub labels: Vec<bool>,
}

impl Batch {
    /// Pads already-encoded clips and candidates; `clips[i]` pairs with
    /// `candidates[i]` and `labels[i]`.
    pub fn from_encoded(
        clips: &[&EncodedClip],
        candidates: &[&EncodedCandidate],
        labels: &[bool],
    ) -> Result<Self> {
        let Some(first) = clips.first() else {
            return Err(Error::Parameter("empty batch".into()));
        };
        if candidates.len() != clips.len() || labels.len() != clips.len() {
            return Err(Error::dim(
                "batch",
                &[clips.len()],
                &[candidates.len(), labels.len()],
            ));
        }
        let (dv, da) = (first.vision_dim, first.audio_dim);
        if let Some(c) = clips
            .iter()
            .find(|c| c.vision_dim != dv || c.audio_dim != da)
        {
            return Err(Error::dim(
                "batch features",
                &[dv, da],
                &[c.vision_dim, c.audio_dim],
            ));
        }
        let comments = PaddedIds::new(
            clips
                .iter()
                .map(|c| (c.comment_ids.as_slice(), c.comment_mask.as_slice())),
        );
        let cands = PaddedIds::new(
            candidates
                .iter()
                .map(|c| (c.ids.as_slice(), c.mask.as_slice())),
        );
        let vision_len = clips.iter().map(|c| c.vision_rows).max().unwrap_or(0);
        let audio_len = clips.iter().map(|c| c.audio_rows).max().unwrap_or(0);
        let mut vision = Vec::with_capacity(clips.len() * vision_len * dv);
        let mut vision_mask = Vec::with_capacity(clips.len() * vision_len);
        let mut audio = Vec::with_capacity(clips.len() * audio_len * da);
        for c in clips {
            vision.extend_from_slice(&c.vision);
            vision.resize(vision.len() + (vision_len - c.vision_rows) * dv, 0.0);
            vision_mask.extend_from_slice(&c.vision_mask);
            vision_mask.resize(vision_mask.len() + vision_len - c.vision_rows, false);
            audio.extend_from_slice(&c.audio);
            audio.resize(audio.len() + (audio_len - c.audio_rows) * da, 0.0);
        }
        Ok(Batch {
            clip_ids: clips.iter().map(|c| c.clip_id.clone()).collect(),
            comments,
            candidates: cands,
            negatives: None,
            vision_len,
            vision_dim: dv,
            vision,
            vision_mask,
            audio_len,
            audio_dim: da,
            audio,
            audio_slices: clips.iter().map(|c| c.audio_slices).collect(),
            labels: labels.to_vec(),
        })
    }

    pub fn with_negatives(mut self, negatives: &[&EncodedCandidate]) -> Result<Self> {
        if negatives.len() != self.len() {
            return Err(Error::dim(
                "batch negatives",
                &[self.len()],
                &[negatives.len()],
            ));
        }
        self.negatives = Some(PaddedIds::new(
            negatives
                .iter()
                .map(|c| (c.ids.as_slice(), c.mask.as_slice())),
        ));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_ids.is_empty()
    }

    pub fn clip(&self, b: usize) -> ClipInput<'_> {
        let lc = self.comments.len;
        let (lf, dv) = (self.vision_len, self.vision_dim);
        let (la, da) = (self.audio_len, self.audio_dim);
        ClipInput {
            comment_ids: &self.comments.ids[b * lc..(b + 1) * lc],
            comment_mask: &self.comments.mask[b * lc..(b + 1) * lc],
            vision: &self.vision[b * lf * dv..(b + 1) * lf * dv],
            vision_rows: lf,
            vision_dim: dv,
            vision_mask: &self.vision_mask[b * lf..(b + 1) * lf],
            audio: &self.audio[b * la * da..(b + 1) * la * da],
            audio_rows: la,
            audio_dim: da,
            audio_slices: self.audio_slices[b],
        }
    }

    pub fn candidate(&self, b: usize) -> CandidateInput<'_> {
        self.candidates.row(b)
    }

    pub fn negative(&self, b: usize) -> Option<CandidateInput<'_>> {
        self.negatives.as_ref().map(|n| n.row(b))
    }
}

/// Encodes and pads `records` (surrounding comments concatenated per clip).
pub fn make_batch(records: &[ClipRecord], vocab: &Vocabulary) -> Result<Batch> {
    if records.is_empty() {
        return Err(Error::Parameter(
            "make_batch needs at least one record".into(),
        ));
    }
    let clips = records
        .iter()
        .map(|r| EncodedClip::from_record(r, vocab))
        .collect::<Result<Vec<_>>>()?;
    let cands: Vec<EncodedCandidate> = records
        .iter()
        .map(|r| EncodedCandidate::from_tokens(&r.candidate, vocab))
        .collect();
    let labels: Vec<bool> = records.iter().map(|r| r.is_ground_truth).collect();
    Batch::from_encoded(
        &clips.iter().collect::<Vec<_>>(),
        &cands.iter().collect::<Vec<_>>(),
        &labels,
    )
}
