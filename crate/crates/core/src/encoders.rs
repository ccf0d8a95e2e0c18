//! Per-modality encoders: token embeddings, vision projection, and a gated
//! recurrent cell over audio slices. Each encoder adds sinusoidal positions
//! that restart at 0 for every stream.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::corpus::{AUDIO_SLICES, PAD_ID};
use crate::{init, math, Error, Result, Tensor};

/// Sinusoidal position vector: element `2i` is `sin(pos / 10000^(2i/d))` and
/// element `2i+1` the matching cosine.
pub fn positional_embedding(pos: usize, d_model: usize) -> Result<Vec<f64>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Parameter(format!(
            "positional embedding needs an even, positive width, got {d_model}"
        )));
    }
    let mut out = Vec::with_capacity(d_model);
    for i in 0..d_model / 2 {
        let angle = pos as f64 / math::pow(10000.0, (2 * i) as f64 / d_model as f64);
        out.push(math::sin(angle));
        out.push(math::cos(angle));
    }
    Ok(out)
}

/// Rows `0..len` of the positional table.
pub fn positional_table(len: usize, d_model: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(len * d_model);
    for pos in 0..len {
        data.extend(positional_embedding(pos, d_model)?);
    }
    Tensor::new(&[len, d_model], data)
}

/// Weights of the gated recurrent cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruParams {
    /// Input transforms for the update, reset and candidate paths.
    pub w: [ParamId; 3],
    /// Recurrent transforms, same order.
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub d_model: usize,
    /// `|V| × d`, shared by surrounding comments and candidates.
    pub embedding: ParamId,
    /// `(weight, bias)`; absent when the vision width already equals `d`.
    pub vision_projection: Option<(ParamId, ParamId)>,
    pub vision_dim: usize,
    pub audio_dim: usize,
    pub gru: GruParams,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        vocab_size: usize,
        d_model: usize,
        vision_dim: usize,
        audio_dim: usize,
    ) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::Parameter("vocabulary is empty".into()));
        }
        let mut table = init::uniform(rng, &[vocab_size, d_model], 0.1);
        table.data_mut()[PAD_ID * d_model..(PAD_ID + 1) * d_model].fill(0.0);
        let embedding = store.add("embedding", ParamGroup::Embedding, table);
        let vision_projection = (vision_dim != d_model).then(|| {
            let w = init::glorot(rng, vision_dim, d_model);
            let w = store.add("vision.weight", ParamGroup::VisionProjection, w);
            let b = store.add(
                "vision.bias",
                ParamGroup::VisionProjection,
                init::zeros(d_model),
            );
            (w, b)
        });
        let gates = ["update", "reset", "candidate"];
        let w = gates.map(|g| {
            let t = init::glorot(rng, audio_dim, d_model);
            store.add(format!("audio.{g}.input"), ParamGroup::Recurrent, t)
        });
        let u = gates.map(|g| {
            let t = init::glorot(rng, d_model, d_model);
            store.add(format!("audio.{g}.recurrent"), ParamGroup::Recurrent, t)
        });
        let b = gates.map(|g| {
            store.add(
                format!("audio.{g}.bias"),
                ParamGroup::Recurrent,
                init::zeros(d_model),
            )
        });
        Ok(EncoderParams {
            d_model,
            embedding,
            vision_projection,
            vision_dim,
            audio_dim,
            gru: GruParams { w, u, b },
        })
    }
}

fn add_positions(tape: &mut Tape<'_>, x: Var, d: usize) -> Result<Var> {
    let len = tape.shape(x)[0];
    let pe = tape.constant(positional_table(len, d)?);
    tape.add(x, pe)
}

/// Row `t` is `M[ids[t]] + PE(t)`. The PAD row stays zero and never
/// receives a gradient.
pub fn encode_comment(tape: &mut Tape<'_>, params: &EncoderParams, ids: &[usize]) -> Result<Var> {
    let table = tape.param(params.embedding);
    let x = tape.gather(table, ids, Some(PAD_ID))?;
    add_positions(tape, x, params.d_model)
}

/// Projects `L_f × D_v` frame features to `d` (identity when `D_v = d`) and
/// adds positions.
pub fn encode_vision(tape: &mut Tape<'_>, params: &EncoderParams, features: Tensor) -> Result<Var> {
    if features.shape().len() != 2 || features.cols() != params.vision_dim {
        return Err(Error::dim(
            "encode_vision",
            features.shape(),
            &[0, params.vision_dim],
        ));
    }
    let f = tape.constant(features);
    let x = match params.vision_projection {
        Some((w, b)) => {
            let (w, b) = (tape.param(w), tape.param(b));
            let y = tape.matmul(f, w)?;
            tape.add_row(y, b)?
        }
        None => f,
    };
    add_positions(tape, x, params.d_model)
}

/// One recurrent step. `xw` holds the precomputed `a W + b` rows for the
/// update, reset and candidate paths.
fn gru_step(tape: &mut Tape<'_>, gru: &GruParams, xw: [Var; 3], h: Option<Var>) -> Result<Var> {
    let Some(h) = h else {
        // From the zero state every recurrent term vanishes and h' = z ⊙ h̃.
        let z = tape.sigmoid(xw[0]);
        let c = tape.tanh(xw[2]);
        return tape.mul(z, c);
    };
    let uz = tape.param(gru.u[0]);
    let ur = tape.param(gru.u[1]);
    let uh = tape.param(gru.u[2]);
    let hz = tape.matmul(h, uz)?;
    let z = tape.add(xw[0], hz)?;
    let z = tape.sigmoid(z);
    let hr = tape.matmul(h, ur)?;
    let r = tape.add(xw[1], hr)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h)?;
    let rhu = tape.matmul(rh, uh)?;
    let c = tape.add(xw[2], rhu)?;
    let c = tape.tanh(c);
    // h' = h + z ⊙ (h̃ − h)
    let delta = tape.sub(c, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

/// Runs the recurrent cell over each slice from a zero state and stacks the
/// last hidden state of every slice, plus positions, into a `5 × d` tensor.
pub fn encode_audio(
    tape: &mut Tape<'_>,
    params: &EncoderParams,
    frames: &Tensor,
    slices: &[(usize, usize); AUDIO_SLICES],
) -> Result<Var> {
    if frames.shape().len() != 2 || frames.cols() != params.audio_dim {
        return Err(Error::dim(
            "encode_audio",
            frames.shape(),
            &[0, params.audio_dim],
        ));
    }
    let n = frames.rows();
    let mut prev_end = 0;
    for (i, &(s, e)) in slices.iter().enumerate() {
        if s >= e || e > n || s != prev_end {
            return Err(Error::Slice(format!(
                "slice {i} = {s}..{e} is empty, out of order or beyond {n} frames"
            )));
        }
        prev_end = e;
    }
    let used = slices[AUDIO_SLICES - 1].1;
    let x = tape.constant(Tensor::new(
        &[used, params.audio_dim],
        frames.data()[..used * params.audio_dim].to_vec(),
    )?);
    let gru = params.gru;
    let mut xw = [x; 3];
    for (g, slot) in xw.iter_mut().enumerate() {
        let w = tape.param(gru.w[g]);
        let b = tape.param(gru.b[g]);
        let y = tape.matmul(x, w)?;
        *slot = tape.add_row(y, b)?;
    }
    let mut last = Vec::with_capacity(AUDIO_SLICES);
    for &(s, e) in slices {
        let mut h = None;
        for t in s..e {
            let step = [
                tape.slice_rows(xw[0], t, t + 1)?,
                tape.slice_rows(xw[1], t, t + 1)?,
                tape.slice_rows(xw[2], t, t + 1)?,
            ];
            h = Some(gru_step(tape, &gru, step, h)?);
        }
        last.push(h.expect("nonempty slice"));
    }
    let stacked = tape.concat_rows(&last)?;
    add_positions(tape, stacked, params.d_model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_params, relative_error};
    use crate::corpus::audio_slices;
    use crate::seeded_rng;
    use alloc::vec;

    fn setup(d: usize, vision_dim: usize, audio_dim: usize) -> (ParamStore, EncoderParams) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(7, 0);
        let p = EncoderParams::new(&mut store, &mut rng, 6, d, vision_dim, audio_dim).unwrap();
        (store, p)
    }

    #[test]
    fn positional_examples() {
        assert_eq!(
            positional_embedding(0, 6).unwrap(),
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        );
        let p = positional_embedding(1, 4).unwrap();
        assert!((p[0] - 0.841_470_984_807_896_5).abs() < 1e-15);
        // element 2 uses 1 / 10000^(2/4) = 0.01
        assert!((p[2] - libm::sin(0.01)).abs() < 1e-15);
        assert!((p[3] - libm::cos(0.01)).abs() < 1e-15);
        assert!(positional_embedding(3, 5).is_err());
        for pos in (0..=10_000).step_by(37) {
            assert!(positional_embedding(pos, 16)
                .unwrap()
                .iter()
                .all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn comment_rows_are_embedding_plus_position() {
        let (store, p) = setup(4, 4, 3);
        let mut tape = Tape::with_params(&store);
        let out = encode_comment(&mut tape, &p, &[2, 2, PAD_ID]).unwrap();
        let v = tape.value(out);
        let m2 = store.value(p.embedding).row(2);
        let pe0 = positional_embedding(0, 4).unwrap();
        let pe1 = positional_embedding(1, 4).unwrap();
        let pe2 = positional_embedding(2, 4).unwrap();
        for j in 0..4 {
            assert_eq!(v.row(0)[j], m2[j] + pe0[j]);
            assert_eq!(
                v.row(0)[j] - v.row(1)[j],
                (m2[j] + pe0[j]) - (m2[j] + pe1[j])
            );
            assert_eq!(v.row(2)[j], pe2[j]);
        }
        let mut tape = Tape::with_params(&store);
        assert!(matches!(
            encode_comment(&mut tape, &p, &[6]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn embedding_gradient_counts_multiplicity() {
        let (store, p) = setup(4, 4, 3);
        let mut tape = Tape::with_params(&store);
        let out = encode_comment(&mut tape, &p, &[2, 3, 2, 2, PAD_ID]).unwrap();
        let s = tape.sum(out);
        let g = tape.backward(s).unwrap();
        let g = g.param(p.embedding).unwrap();
        assert!(g.row(2).iter().all(|v| *v == 3.0));
        assert!(g.row(3).iter().all(|v| *v == 1.0));
        assert!(g.row(PAD_ID).iter().all(|v| *v == 0.0));
        assert!(g.row(4).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vision_identity_when_widths_match() {
        let (store, p) = setup(4, 4, 3);
        assert!(p.vision_projection.is_none());
        let mut tape = Tape::with_params(&store);
        let out = encode_vision(&mut tape, &p, Tensor::zeros(&[3, 4])).unwrap();
        assert_eq!(tape.value(out), &positional_table(3, 4).unwrap());
        let mut tape = Tape::with_params(&store);
        assert!(encode_vision(&mut tape, &p, Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn vision_projection_gradcheck() {
        let (mut store, p) = setup(8, 5, 3);
        let (w, b) = p.vision_projection.unwrap();
        let mut rng = seeded_rng(1, 1);
        let feats = init::uniform(&mut rng, &[3, 5], 1.0);
        let coords: Vec<_> = (0..40)
            .map(|i| (w, i))
            .chain((0..8).map(|i| (b, i)))
            .collect();
        let checks = grad_check_params(&mut store, &coords, 1e-4, |tape| {
            let out = encode_vision(tape, &p, feats.clone())?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(checks.iter().all(|c| c.rel_error <= 1e-6), "{checks:?}");
    }

    #[test]
    fn zero_dynamics_give_positions() {
        let (mut store, p) = setup(4, 4, 3);
        for id in p.gru.w.iter().chain(&p.gru.u).chain(&p.gru.b) {
            store.get_mut(*id).value.data_mut().fill(0.0);
        }
        let mut tape = Tape::with_params(&store);
        let frames = Tensor::zeros(&[7, 3]);
        let out = encode_audio(&mut tape, &p, &frames, &audio_slices(7).unwrap()).unwrap();
        // z = 1/2, h̃ = 0, so h stays 0
        assert_eq!(tape.value(out), &positional_table(5, 4).unwrap());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn single_frame_slice_is_one_step() {
        let (store, p) = setup(4, 4, 3);
        let mut rng = seeded_rng(2, 0);
        let frames = init::uniform(&mut rng, &[5, 3], 1.0);
        let mut tape = Tape::with_params(&store);
        let out = encode_audio(&mut tape, &p, &frames, &audio_slices(5).unwrap()).unwrap();
        let v = tape.value(out).clone();
        let dot = |a: &[f64], w: &Tensor, j: usize| -> f64 {
            a.iter().enumerate().map(|(i, x)| x * w.row(i)[j]).sum()
        };
        for t in 0..5 {
            let a = frames.row(t);
            let pe = positional_embedding(t, 4).unwrap();
            for j in 0..4 {
                let z = math::sigmoid(dot(a, store.value(p.gru.w[0]), j));
                let c = math::tanh(dot(a, store.value(p.gru.w[2]), j));
                assert!((v.row(t)[j] - (z * c + pe[j])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn audio_ignores_frames_of_other_slices_and_beyond() {
        let (store, p) = setup(4, 4, 3);
        let mut rng = seeded_rng(3, 0);
        let frames = init::uniform(&mut rng, &[12, 3], 1.0);
        let slices = audio_slices(10).unwrap();
        let run = |f: &Tensor| {
            let mut tape = Tape::with_params(&store);
            let out = encode_audio(&mut tape, &p, f, &slices).unwrap();
            tape.value(out).clone()
        };
        let base = run(&frames);
        let mut changed = frames.clone();
        changed.data_mut()[0] += 1.0; // frame 0 sits in slice 0
        changed.data_mut()[11 * 3] += 5.0; // frame 11 is outside every slice
        let out = run(&changed);
        assert_ne!(base.row(0), out.row(0));
        for t in 1..5 {
            assert_eq!(base.row(t), out.row(t));
        }
    }

    #[test]
    fn rejects_bad_slices() {
        let (store, p) = setup(4, 4, 3);
        let frames = Tensor::zeros(&[6, 3]);
        let mut tape = Tape::with_params(&store);
        let bad = [(0, 1), (1, 2), (2, 2), (2, 4), (4, 6)];
        assert!(matches!(
            encode_audio(&mut tape, &p, &frames, &bad),
            Err(Error::Slice(_))
        ));
        let beyond = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 9)];
        assert!(encode_audio(&mut tape, &p, &frames, &beyond).is_err());
    }

    #[test]
    fn recurrent_gradcheck_two_steps() {
        let (mut store, p) = setup(8, 8, 3);
        let mut rng = seeded_rng(4, 0);
        for id in p.gru.b {
            store.get_mut(id).value = init::uniform(&mut rng, &[8], 0.5);
        }
        let frames = init::uniform(&mut rng, &[10, 3], 1.0);
        let slices = audio_slices(10).unwrap();
        let mut coords = Vec::new();
        for ids in [p.gru.w, p.gru.u, p.gru.b] {
            for id in ids {
                let n = store.value(id).numel();
                coords.extend((0..n).step_by(3).map(|i| (id, i)));
            }
        }
        let checks = grad_check_params(&mut store, &coords, 1e-4, |tape| {
            let out = encode_audio(tape, &p, &frames, &slices)?;
            let sq = tape.mul(out, out)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        let worst = checks
            .iter()
            .map(|c| relative_error(c.analytic, c.numeric))
            .fold(0.0, f64::max);
        assert!(worst <= 1e-6, "worst {worst}");
        assert!(checks.iter().any(|c| c.analytic.abs() > 1e-3));
    }
}
