//! The full scoring model: encoders, matching stack and prediction head.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::corpus::{CandidateInput, ClipInput, AUDIO_DIM};
use crate::encoders::{encode_audio, encode_comment, encode_vision, EncoderParams};
use crate::head::{cosine_score, fuse_context, weighted_pool, PoolingParams};
use crate::matching::{build_block, matching_stack, FusionGate, MatchingBlock, StreamState};
use crate::{seeded_rng, Error, Result, Tensor};

pub use crate::matching::{Pass, Trace};

/// The four representation streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stream {
    Candidate,
    Comments,
    Vision,
    Audio,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Candidate => "candidate",
            Stream::Comments => "comments",
            Stream::Vision => "vision",
            Stream::Audio => "audio",
        }
    }
}

/// Which context streams feed the model. The candidate stream is always on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modalities {
    pub text: bool,
    pub vision: bool,
    pub audio: bool,
}

impl Modalities {
    pub const ALL: Modalities = Modalities {
        text: true,
        vision: true,
        audio: true,
    };

    pub fn streams(self) -> Vec<Stream> {
        let mut s = alloc::vec![Stream::Candidate];
        for (on, stream) in [
            (self.text, Stream::Comments),
            (self.vision, Stream::Vision),
            (self.audio, Stream::Audio),
        ] {
            if on {
                s.push(stream);
            }
        }
        s
    }
}

impl Default for Modalities {
    fn default() -> Self {
        Self::ALL
    }
}

/// Which streams cross-attend to which.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CrossTopology {
    /// Every stream attends to every other stream, the candidate included.
    #[default]
    Symmetric,
    /// The candidate attends to the context streams; context streams attend
    /// only to each other. Non-normative alternative.
    ContextIndependent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_dim: usize,
    pub vision_dim: usize,
    pub audio_dim: usize,
    pub dropout: f64,
    pub modalities: Modalities,
    pub topology: CrossTopology,
}

impl ModelConfig {
    /// Small dimensions suited to a single CPU core.
    pub fn desk(vocab_size: usize, vision_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            dim: 32,
            heads: 2,
            blocks: 2,
            ffn_dim: 64,
            vision_dim,
            audio_dim: AUDIO_DIM,
            dropout: 0.2,
            modalities: Modalities::ALL,
            topology: CrossTopology::Symmetric,
        }
    }

    /// Published full-size dimensions.
    pub fn paper(vocab_size: usize, vision_dim: usize) -> Self {
        ModelConfig {
            dim: 512,
            heads: 8,
            blocks: 6,
            ffn_dim: 2048,
            ..Self::desk(vocab_size, vision_dim)
        }
    }

    /// Lists every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.vocab_size < 3 {
            problems.push(format!(
                "vocab_size {} leaves no corpus tokens",
                self.vocab_size
            ));
        }
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            problems.push(format!("dim {} must be even and positive", self.dim));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            problems.push(format!("heads {} must divide dim {}", self.heads, self.dim));
        }
        if self.blocks == 0 {
            problems.push("blocks must be at least 1".into());
        }
        if self.ffn_dim == 0 || self.vision_dim == 0 || self.audio_dim == 0 {
            problems.push("ffn_dim, vision_dim and audio_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let m = self.modalities;
        if !(m.text || m.vision || m.audio) {
            problems.push("at least one context modality is required".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(problems.join("; ")))
        }
    }
}

/// All trainable state plus the layout that ties parameters to streams.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingModel {
    config: ModelConfig,
    store: ParamStore,
    streams: Vec<Stream>,
    encoders: EncoderParams,
    blocks: Vec<MatchingBlock>,
    /// One pooling head per active stream, same order as `streams`.
    pools: Vec<PoolingParams>,
    context_gate: Option<FusionGate>,
}

impl MatchingModel {
    /// Builds and initializes the model; the values are a pure function of
    /// `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed, 0x1417);
        let d = config.dim;
        let encoders = EncoderParams::new(
            &mut store,
            &mut rng,
            config.vocab_size,
            d,
            config.vision_dim,
            config.audio_dim,
        )?;
        let streams = config.modalities.streams();
        let names: Vec<&str> = streams.iter().map(|s| s.name()).collect();
        let sources: Vec<Vec<usize>> = (0..streams.len())
            .map(|s| {
                (0..streams.len())
                    .filter(|&o| o != s)
                    .filter(|&o| match config.topology {
                        CrossTopology::Symmetric => true,
                        CrossTopology::ContextIndependent => s == 0 || o != 0,
                    })
                    .collect()
            })
            .collect();
        let blocks = (0..config.blocks)
            .map(|b| {
                build_block(
                    &mut store,
                    &mut rng,
                    b,
                    &names,
                    &sources,
                    d,
                    config.ffn_dim,
                    config.heads,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let pools = names
            .iter()
            .map(|n| PoolingParams::new(&mut store, &mut rng, &format!("pool.{n}"), d))
            .collect();
        let n_ctx = streams.len() - 1;
        let context_gate =
            (n_ctx > 1).then(|| FusionGate::new(&mut store, &mut rng, "context_gate", d, n_ctx));
        Ok(MatchingModel {
            config,
            store,
            streams,
            encoders,
            blocks,
            pools,
            context_gate,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn streams(&self) -> &[Stream] {
        &self.streams
    }

    pub fn encoders(&self) -> &EncoderParams {
        &self.encoders
    }

    fn check_clip(&self, clip: &ClipInput<'_>) -> Result<()> {
        let c = &self.config;
        if clip.vision_dim != c.vision_dim || clip.audio_dim != c.audio_dim {
            return Err(Error::dim(
                "clip features",
                &[c.vision_dim, c.audio_dim],
                &[clip.vision_dim, clip.audio_dim],
            ));
        }
        if clip.comment_ids.len() != clip.comment_mask.len()
            || clip.vision.len() != clip.vision_rows * clip.vision_dim
            || clip.vision_mask.len() != clip.vision_rows
            || clip.audio.len() != clip.audio_rows * clip.audio_dim
        {
            return Err(Error::Contract(
                "clip input arrays disagree with their extents".into(),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns the `1 × 1` score.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        clip: &ClipInput<'_>,
        candidate: &CandidateInput<'_>,
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        self.check_clip(clip)?;
        if candidate.ids.len() != candidate.mask.len() {
            return Err(Error::Contract(
                "candidate ids and mask differ in length".into(),
            ));
        }
        let enc = &self.encoders;
        let mut h = Vec::with_capacity(self.streams.len());
        let mut masks = Vec::with_capacity(self.streams.len());
        for &stream in &self.streams {
            let (x, mask) = match stream {
                Stream::Candidate => (
                    encode_comment(tape, enc, candidate.ids)?,
                    candidate.mask.to_vec(),
                ),
                Stream::Comments => (
                    encode_comment(tape, enc, clip.comment_ids)?,
                    clip.comment_mask.to_vec(),
                ),
                Stream::Vision => {
                    let f =
                        Tensor::new(&[clip.vision_rows, clip.vision_dim], clip.vision.to_vec())?;
                    (encode_vision(tape, enc, f)?, clip.vision_mask.to_vec())
                }
                Stream::Audio => {
                    let a = Tensor::new(&[clip.audio_rows, clip.audio_dim], clip.audio.to_vec())?;
                    let x = encode_audio(tape, enc, &a, &clip.audio_slices)?;
                    (x, alloc::vec![true; clip.audio_slices.len()])
                }
            };
            h.push(pass.dropout(tape, x)?);
            masks.push(mask);
        }
        let out = matching_stack(tape, &self.blocks, StreamState { h, masks }, pass)?;
        let mut pooled = Vec::with_capacity(self.streams.len());
        for ((pool, &x), mask) in self.pools.iter().zip(&out.h).zip(&out.masks) {
            pooled.push(weighted_pool(tape, pool, x, mask)?);
        }
        let context = fuse_context(tape, self.context_gate.as_ref(), &pooled[1..], pass.trace())?;
        cosine_score(tape, context, pooled[0])
    }

    /// Inference score in `[-1, 1]`.
    pub fn score(&self, clip: &ClipInput<'_>, candidate: &CandidateInput<'_>) -> Result<f64> {
        let mut tape = Tape::with_params(&self.store);
        let s = self.forward(&mut tape, clip, candidate, &mut Pass::eval())?;
        Ok(tape.value(s).item())
    }

    /// Inference score plus every attention-weight matrix (with its key
    /// mask) and every matching-block gate (with its slice count).
    pub fn score_traced(
        &self,
        clip: &ClipInput<'_>,
        candidate: &CandidateInput<'_>,
    ) -> Result<(f64, TraceValues)> {
        let mut tape = Tape::with_params(&self.store);
        let mut trace = Trace::default();
        let s = {
            let mut pass = Pass::eval().with_trace(&mut trace);
            self.forward(&mut tape, clip, candidate, &mut pass)?
        };
        let values = TraceValues {
            attention: trace
                .attention
                .iter()
                .map(|(v, m)| (tape.value(*v).clone(), m.clone()))
                .collect(),
            gates: trace
                .gates
                .iter()
                .map(|(v, k)| (tape.value(*v).clone(), *k))
                .collect(),
        };
        Ok((tape.value(s).item(), values))
    }
}

/// Materialized [`Trace`].
#[derive(Clone, Debug, PartialEq)]
pub struct TraceValues {
    pub attention: Vec<(Tensor, Vec<bool>)>,
    pub gates: Vec<(Tensor, usize)>,
}
