//! Matching blocks: per-stream self-attention and feed-forward, cross
//! attention onto the other streams, a fusional gate over the cross-attention
//! results, and an output feed-forward. Every sub-layer is wrapped as
//! `LayerNorm(x + Dropout(sublayer(x)))`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::{init, math, Error, Result, SeededRng};

/// Variance floor of every layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Attention weights and gate weights recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// Per head: `L_q × L_k` weights and the key mask they were built with.
    pub attention: Vec<(Var, Vec<bool>)>,
    /// Gate weights `L × (k·d)` and the number of slices `k`.
    pub gates: Vec<(Var, usize)>,
}

/// Forward-pass mode: dropout rate and generator in training, plus an
/// optional trace.
pub struct Pass<'r> {
    dropout: f64,
    rng: Option<&'r mut SeededRng>,
    trace: Option<&'r mut Trace>,
}

impl<'r> Pass<'r> {
    /// Inference: dropout is the identity.
    pub fn eval() -> Self {
        Pass {
            dropout: 0.0,
            rng: None,
            trace: None,
        }
    }

    pub fn train(rate: f64, rng: &'r mut SeededRng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        Ok(Pass {
            dropout: rate,
            rng: Some(rng),
            trace: None,
        })
    }

    pub fn with_trace(mut self, trace: &'r mut Trace) -> Self {
        self.trace = Some(trace);
        self
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => tape.dropout(x, self.dropout, true, rng),
            None => Ok(x),
        }
    }

    pub(crate) fn trace(&mut self) -> Option<&mut Trace> {
        self.trace.as_deref_mut()
    }
}

/// Query, key, value and output projections, each `d × d`; head `i` uses
/// columns `i·d_k .. (i+1)·d_k` of the first three.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Parameter(format!(
                "{heads} heads do not divide width {d}"
            )));
        }
        let mut proj = |suffix: &str| {
            let t = init::glorot(rng, d, d);
            store.add(format!("{name}.{suffix}"), ParamGroup::Attention, t)
        };
        Ok(AttentionParams {
            heads,
            wq: proj("wq"),
            wk: proj("wk"),
            wv: proj("wv"),
            wo: proj("wo"),
        })
    }
}

/// `Concat(O_1..O_h) W^O` with `O_i = softmax(Q W_i^Q (K W_i^K)ᵀ / √d_k) V W_i^V`;
/// keys whose mask entry is false get weight exactly 0.
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    params: &AttentionParams,
    q: Var,
    k: Var,
    v: Var,
    key_mask: &[bool],
    mut trace: Option<&mut Trace>,
) -> Result<Var> {
    let lk = tape.shape(k)[0];
    if key_mask.len() != lk || tape.shape(v)[0] != lk {
        return Err(Error::dim(
            "multi_head_attention",
            &[lk],
            &[key_mask.len(), tape.shape(v)[0]],
        ));
    }
    let d = tape.shape(q)[1];
    let h = params.heads;
    let dk = d / h;
    let (wq, wk, wv, wo) = (
        tape.param(params.wq),
        tape.param(params.wk),
        tape.param(params.wv),
        tape.param(params.wo),
    );
    let qp = tape.matmul(q, wq)?;
    let kp = tape.matmul(k, wk)?;
    let vp = tape.matmul(v, wv)?;
    let scale = 1.0 / math::sqrt(dk as f64);
    let mut heads = Vec::with_capacity(h);
    for i in 0..h {
        let (s, e) = (i * dk, (i + 1) * dk);
        let qi = if h == 1 {
            qp
        } else {
            tape.slice_cols(qp, s, e)?
        };
        let ki = if h == 1 {
            kp
        } else {
            tape.slice_cols(kp, s, e)?
        };
        let vi = if h == 1 {
            vp
        } else {
            tape.slice_cols(vp, s, e)?
        };
        let kt = tape.transpose(ki)?;
        let logits = tape.matmul(qi, kt)?;
        let logits = tape.scale(logits, scale);
        let weights = tape.softmax(logits, Some(key_mask))?;
        if let Some(t) = trace.as_deref_mut() {
            t.attention.push((weights, key_mask.to_vec()));
        }
        heads.push(tape.matmul(weights, vi)?);
    }
    let cat = if h == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    tape.matmul(cat, wo)
}

/// `W_2 · ReLU(W_1 h + b_1) + b_2`, applied to every row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        d_ff: usize,
    ) -> Self {
        let g = ParamGroup::FeedForward;
        let w1 = store.add(format!("{name}.w1"), g, init::glorot(rng, d, d_ff));
        let b1 = store.add(format!("{name}.b1"), g, init::zeros(d_ff));
        let w2 = store.add(format!("{name}.w2"), g, init::glorot(rng, d_ff, d));
        let b2 = store.add(format!("{name}.b2"), g, init::zeros(d));
        FeedForward { w1, b1, w2, b2 }
    }
}

pub fn position_wise_ffn(tape: &mut Tape<'_>, params: &FeedForward, x: Var) -> Result<Var> {
    let (w1, b1, w2, b2) = (
        tape.param(params.w1),
        tape.param(params.b1),
        tape.param(params.w2),
        tape.param(params.b2),
    );
    let hidden = tape.matmul(x, w1)?;
    let hidden = tape.add_row(hidden, b1)?;
    let hidden = tape.relu(hidden);
    let out = tape.matmul(hidden, w2)?;
    tape.add_row(out, b2)
}

/// Linear `k·d → k·d` transform whose output is normalized, per feature
/// dimension, across the `k` slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionGate {
    pub inputs: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl FusionGate {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        inputs: usize,
    ) -> Self {
        let n = inputs * d;
        let w = store.add(
            format!("{name}.w"),
            ParamGroup::Gate,
            init::glorot(rng, n, n),
        );
        let b = store.add(format!("{name}.b"), ParamGroup::Gate, init::zeros(n));
        FusionGate { inputs, w, b }
    }
}

/// Convex, per-dimension combination of equally shaped inputs:
/// `g = softmax_k(concat(X_1..X_k) W + b)`, `out = Σ_i g_i ⊙ X_i`.
pub fn fusional_gate(
    tape: &mut Tape<'_>,
    gate: &FusionGate,
    inputs: &[Var],
    trace: Option<&mut Trace>,
) -> Result<Var> {
    let k = gate.inputs;
    if inputs.len() != k || k == 0 {
        return Err(Error::dim("fusional_gate", &[k], &[inputs.len()]));
    }
    let shape = tape.shape(inputs[0]).to_vec();
    for &x in &inputs[1..] {
        if tape.shape(x) != shape.as_slice() {
            return Err(Error::dim("fusional_gate", &shape, tape.shape(x)));
        }
    }
    let d = shape[1];
    let (w, b) = (tape.param(gate.w), tape.param(gate.b));
    let cat = if k == 1 {
        inputs[0]
    } else {
        tape.concat_cols(inputs)?
    };
    let g = tape.matmul(cat, w)?;
    let g = tape.add_row(g, b)?;
    let g = tape.group_softmax(g, k)?;
    if let Some(t) = trace {
        t.gates.push((g, k));
    }
    let mut out = None;
    for (i, &x) in inputs.iter().enumerate() {
        let gi = if k == 1 {
            g
        } else {
            tape.slice_cols(g, i * d, (i + 1) * d)?
        };
        let term = tape.mul(gi, x)?;
        out = Some(match out {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(out.expect("at least one input"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), ParamGroup::LayerNorm, init::ones(d));
        let bias = store.add(
            format!("{name}.bias"),
            ParamGroup::LayerNorm,
            init::zeros(d),
        );
        LayerNormParams { gain, bias }
    }

    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.bias));
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// One stream's parameters inside one matching block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamBlock {
    /// Indices (into the stream state) of the streams this one attends to.
    pub sources: Vec<usize>,
    pub self_attn: AttentionParams,
    pub ffn_in: FeedForward,
    pub cross: Vec<AttentionParams>,
    /// Present when there are at least two sources.
    pub gate: Option<FusionGate>,
    pub ffn_out: FeedForward,
    /// Norms after self-attention, first FFN, cross fusion, output FFN.
    pub norms: [LayerNormParams; 4],
}

impl StreamBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        d_ff: usize,
        heads: usize,
        sources: Vec<usize>,
        source_names: &[&str],
    ) -> Result<Self> {
        let self_attn = AttentionParams::new(store, rng, &format!("{name}.self_attn"), d, heads)?;
        let ffn_in = FeedForward::new(store, rng, &format!("{name}.ffn_in"), d, d_ff);
        let cross = source_names
            .iter()
            .map(|s| AttentionParams::new(store, rng, &format!("{name}.cross_{s}"), d, heads))
            .collect::<Result<Vec<_>>>()?;
        let gate = (sources.len() > 1)
            .then(|| FusionGate::new(store, rng, &format!("{name}.gate"), d, sources.len()));
        let ffn_out = FeedForward::new(store, rng, &format!("{name}.ffn_out"), d, d_ff);
        let norms = [0, 1, 2, 3].map(|i| LayerNormParams::new(store, &format!("{name}.ln{i}"), d));
        Ok(StreamBlock {
            sources,
            self_attn,
            ffn_in,
            cross,
            gate,
            ffn_out,
            norms,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchingBlock {
    pub streams: Vec<StreamBlock>,
}

/// Representations of every active stream (each `L × d`) and their masks.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    pub h: Vec<Var>,
    pub masks: Vec<Vec<bool>>,
}

fn residual_norm(
    tape: &mut Tape<'_>,
    pass: &mut Pass<'_>,
    ln: &LayerNormParams,
    x: Var,
    sub: Var,
) -> Result<Var> {
    let sub = pass.dropout(tape, sub)?;
    let sum = tape.add(x, sub)?;
    ln.apply(tape, sum)
}

/// One matching block over all streams. Cross-attention reads every
/// stream's post-self-attention representation from this same block, so the
/// order in which streams are updated does not matter.
pub fn matching_block(
    tape: &mut Tape<'_>,
    block: &MatchingBlock,
    state: &StreamState,
    pass: &mut Pass<'_>,
) -> Result<StreamState> {
    if block.streams.len() != state.h.len() || state.masks.len() != state.h.len() {
        return Err(Error::dim(
            "matching_block",
            &[block.streams.len()],
            &[state.h.len(), state.masks.len()],
        ));
    }
    let mut hat = Vec::with_capacity(state.h.len());
    for (s, p) in block.streams.iter().enumerate() {
        let x = state.h[s];
        let mask = &state.masks[s];
        let att = multi_head_attention(tape, &p.self_attn, x, x, x, mask, pass.trace())?;
        let a = residual_norm(tape, pass, &p.norms[0], x, att)?;
        let f = position_wise_ffn(tape, &p.ffn_in, a)?;
        hat.push(residual_norm(tape, pass, &p.norms[1], a, f)?);
    }
    let mut out = Vec::with_capacity(hat.len());
    for (s, p) in block.streams.iter().enumerate() {
        let q = hat[s];
        let mut crossed = Vec::with_capacity(p.sources.len());
        for (&src, attn) in p.sources.iter().zip(&p.cross) {
            let kv = hat[src];
            let mask = &state.masks[src];
            crossed.push(multi_head_attention(
                tape,
                attn,
                q,
                kv,
                kv,
                mask,
                pass.trace(),
            )?);
        }
        let b = match (crossed.len(), &p.gate) {
            (0, _) => q,
            (1, _) => residual_norm(tape, pass, &p.norms[2], q, crossed[0])?,
            (_, Some(gate)) => {
                let fused = fusional_gate(tape, gate, &crossed, pass.trace())?;
                residual_norm(tape, pass, &p.norms[2], q, fused)?
            }
            (_, None) => {
                return Err(Error::Contract(
                    "gate missing for multi-source stream".into(),
                ))
            }
        };
        let f = position_wise_ffn(tape, &p.ffn_out, b)?;
        out.push(residual_norm(tape, pass, &p.norms[3], b, f)?);
    }
    Ok(StreamState {
        h: out,
        masks: state.masks.clone(),
    })
}

/// Applies the blocks in order.
pub fn matching_stack<'b>(
    tape: &mut Tape<'_>,
    blocks: impl IntoIterator<Item = &'b MatchingBlock>,
    state: StreamState,
    pass: &mut Pass<'_>,
) -> Result<StreamState> {
    let mut state = state;
    let mut any = false;
    for block in blocks {
        state = matching_block(tape, block, &state, pass)?;
        any = true;
    }
    if !any {
        return Err(Error::Parameter(
            "matching stack needs at least one block".into(),
        ));
    }
    Ok(state)
}

/// Builds one block for streams named `names`, where `sources[s]` lists the
/// streams stream `s` attends to.
#[allow(clippy::too_many_arguments)]
pub fn build_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    index: usize,
    names: &[&str],
    sources: &[Vec<usize>],
    d: usize,
    d_ff: usize,
    heads: usize,
) -> Result<MatchingBlock> {
    let streams = names
        .iter()
        .zip(sources)
        .map(|(name, src)| {
            let src_names: Vec<&str> = src.iter().map(|&i| names[i]).collect();
            let prefix: String = format!("block{index}.{name}");
            StreamBlock::new(store, rng, &prefix, d, d_ff, heads, src.clone(), &src_names)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MatchingBlock { streams })
}

#[cfg(test)]
mod tests;
