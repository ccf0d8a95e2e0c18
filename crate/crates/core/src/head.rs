//! Prediction head: attention-weighted pooling of each stream, gated fusion
//! of the context vectors, and the cosine score.

use alloc::format;

use rand::Rng;

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::matching::{fusional_gate, FusionGate, Trace};
use crate::{init, Error, Result};

/// Floor of the norm product in the cosine score.
pub const COSINE_EPS: f64 = 1e-12;

/// Pooling MLP: `logits = ReLU(H W_1 + b_1) W_2 + b_2`, hidden width `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolingParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl PoolingParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        let g = ParamGroup::Pooling;
        let w1 = store.add(format!("{name}.w1"), g, init::glorot(rng, d, d));
        let b1 = store.add(format!("{name}.b1"), g, init::zeros(d));
        let w2 = store.add(format!("{name}.w2"), g, init::glorot(rng, d, 1));
        let b2 = store.add(format!("{name}.b2"), g, init::zeros(1));
        PoolingParams { w1, b1, w2, b2 }
    }
}

/// Reduces `L × d` to `1 × d` with softmax weights over the unmasked rows.
pub fn weighted_pool(
    tape: &mut Tape<'_>,
    params: &PoolingParams,
    h: Var,
    mask: &[bool],
) -> Result<Var> {
    let l = tape.shape(h)[0];
    if mask.len() != l {
        return Err(Error::dim("weighted_pool", &[l], &[mask.len()]));
    }
    let (w1, b1, w2, b2) = (
        tape.param(params.w1),
        tape.param(params.b1),
        tape.param(params.w2),
        tape.param(params.b2),
    );
    let hidden = tape.matmul(h, w1)?;
    let hidden = tape.add_row(hidden, b1)?;
    let hidden = tape.relu(hidden);
    let logits = tape.matmul(hidden, w2)?;
    let logits = tape.add_row(logits, b2)?;
    // L × 1 → 1 × L so the softmax runs over positions.
    let logits = tape.transpose(logits)?;
    let weights = tape.softmax(logits, Some(mask)).map_err(|e| match e {
        Error::DegenerateMask { .. } => Error::DegenerateMask {
            op: "weighted_pool",
        },
        other => other,
    })?;
    tape.matmul(weights, h)
}

/// Combines pooled context vectors with a fusional gate; a single context
/// vector passes through unchanged.
pub fn fuse_context(
    tape: &mut Tape<'_>,
    gate: Option<&FusionGate>,
    contexts: &[Var],
    trace: Option<&mut Trace>,
) -> Result<Var> {
    match (contexts, gate) {
        ([only], _) => Ok(*only),
        ([], _) => Err(Error::Parameter("no context streams to fuse".into())),
        (_, Some(g)) => fusional_gate(tape, g, contexts, trace),
        (_, None) => Err(Error::Contract("context gate missing".into())),
    }
}

/// `u·v / max(‖u‖‖v‖, COSINE_EPS)`, clamped to `[-1, 1]`.
pub fn cosine_score(tape: &mut Tape<'_>, u: Var, v: Var) -> Result<Var> {
    tape.cosine(u, v, COSINE_EPS)
}

/// Plain-slice version of [`cosine_score`].
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>();
    let denom = (crate::math::sqrt(nu) * crate::math::sqrt(nv)).max(COSINE_EPS);
    (dot / denom).clamp(-1.0, 1.0)
}
