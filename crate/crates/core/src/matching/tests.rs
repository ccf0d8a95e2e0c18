use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::autodiff::{grad_check_params, ParamGroup};
use crate::{seeded_rng, Tensor};

fn rand_tensor(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    init::uniform(rng, &[rows, cols], 1.0)
}

fn symmetric_sources(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|s| (0..n).filter(|&o| o != s).collect())
        .collect()
}

const NAMES: [&str; 4] = ["y", "c", "f", "a"];

fn block(store: &mut ParamStore, seed: u64, d: usize, d_ff: usize, heads: usize) -> MatchingBlock {
    let mut rng = seeded_rng(seed, 0);
    build_block(
        store,
        &mut rng,
        0,
        &NAMES,
        &symmetric_sources(4),
        d,
        d_ff,
        heads,
    )
    .unwrap()
}

/// Straight-line attention: loops only, no tape.
fn attention_oracle(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &[bool],
    heads: usize,
    w: [&Tensor; 4],
) -> Vec<Vec<f64>> {
    let d = q.cols();
    let dk = d / heads;
    let proj = |x: &Tensor, w: &Tensor| -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|i| {
                (0..d)
                    .map(|j| (0..d).map(|t| x.row(i)[t] * w.row(t)[j]).sum())
                    .collect()
            })
            .collect()
    };
    let (qp, kp, vp) = (proj(q, w[0]), proj(k, w[1]), proj(v, w[2]));
    let mut cat = vec![vec![0.0; d]; q.rows()];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..q.rows() {
            let logits: Vec<f64> = (0..k.rows())
                .map(|j| {
                    cols.clone().map(|c| qp[i][c] * kp[j][c]).sum::<f64>() / (dk as f64).sqrt()
                })
                .collect();
            let max = (0..k.rows())
                .filter(|&j| mask[j])
                .map(|j| logits[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..k.rows())
                .map(|j| {
                    if mask[j] {
                        (logits[j] - max).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                cat[i][c] = (0..k.rows()).map(|j| e[j] / z * vp[j][c]).sum();
            }
        }
    }
    cat.iter()
        .map(|row| {
            (0..d)
                .map(|j| (0..d).map(|t| row[t] * w[3].row(t)[j]).sum())
                .collect()
        })
        .collect()
}

#[test]
#[allow(clippy::needless_range_loop)]
fn attention_matches_straight_line_oracle() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(1, 0);
    let p = AttentionParams::new(&mut store, &mut rng, "att", 4, 2).unwrap();
    let (q, k, v) = (
        rand_tensor(&mut rng, 3, 4),
        rand_tensor(&mut rng, 3, 4),
        rand_tensor(&mut rng, 3, 4),
    );
    for mask in [
        [true, true, true],
        [true, false, true],
        [false, false, true],
    ] {
        let mut tape = Tape::with_params(&store);
        let (qv, kv, vv) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let out = multi_head_attention(&mut tape, &p, qv, kv, vv, &mask, None).unwrap();
        let w = [p.wq, p.wk, p.wv, p.wo].map(|id| store.value(id));
        let expect = attention_oracle(&q, &k, &v, &mask, 2, w);
        for i in 0..3 {
            for j in 0..4 {
                assert!((tape.value(out).row(i)[j] - expect[i][j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
#[allow(clippy::needless_range_loop)]
fn singleton_key_gets_full_weight() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(2, 0);
    let p = AttentionParams::new(&mut store, &mut rng, "att", 4, 2).unwrap();
    let q = rand_tensor(&mut rng, 3, 4);
    let kv = rand_tensor(&mut rng, 1, 4);
    let mut tape = Tape::with_params(&store);
    let mut trace = Trace::default();
    let (qv, kvv) = (tape.constant(q), tape.constant(kv.clone()));
    let out = multi_head_attention(&mut tape, &p, qv, kvv, kvv, &[true], Some(&mut trace)).unwrap();
    for (w, _) in &trace.attention {
        assert!(tape.value(*w).data().iter().all(|x| *x == 1.0));
    }
    // Each query row is V W^V W^O.
    let vw = attention_oracle(
        &kv,
        &kv,
        &kv,
        &[true],
        1,
        [
            store.value(p.wq),
            store.value(p.wk),
            store.value(p.wv),
            store.value(p.wo),
        ],
    );
    for i in 0..3 {
        for j in 0..4 {
            assert!((tape.value(out).row(i)[j] - vw[0][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_keys_give_uniform_weights() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(3, 0);
    let p = AttentionParams::new(&mut store, &mut rng, "att", 6, 3).unwrap();
    let q = rand_tensor(&mut rng, 2, 6);
    let row = rand_tensor(&mut rng, 1, 6);
    let k = Tensor::from_rows(&vec![row.data().to_vec(); 4]).unwrap();
    let mut tape = Tape::with_params(&store);
    let mut trace = Trace::default();
    let (qv, kv) = (tape.constant(q), tape.constant(k));
    multi_head_attention(&mut tape, &p, qv, kv, kv, &[true; 4], Some(&mut trace)).unwrap();
    assert_eq!(trace.attention.len(), 3);
    for (w, _) in &trace.attention {
        assert!(tape
            .value(*w)
            .data()
            .iter()
            .all(|x| (x - 0.25).abs() < 1e-15));
    }
}

#[test]
fn heads_must_divide_width() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(0, 0);
    assert!(AttentionParams::new(&mut store, &mut rng, "att", 6, 4).is_err());
    assert!(AttentionParams::new(&mut store, &mut rng, "att", 6, 0).is_err());
}

#[test]
fn ffn_examples() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(4, 0);
    let p = FeedForward::new(&mut store, &mut rng, "ffn", 4, 8);
    let x = rand_tensor(&mut rng, 3, 4);
    let perm_rows = vec![x.row(2).to_vec(), x.row(0).to_vec(), x.row(1).to_vec()];
    let run = |store: &ParamStore, x: Tensor| {
        let mut tape = Tape::with_params(store);
        let xv = tape.constant(x);
        let out = position_wise_ffn(&mut tape, &p, xv).unwrap();
        tape.value(out).clone()
    };
    let base = run(&store, x.clone());
    let permuted = run(&store, Tensor::from_rows(&perm_rows).unwrap());
    assert_eq!(permuted.row(0), base.row(2));
    assert_eq!(permuted.row(1), base.row(0));
    assert_eq!(permuted.row(2), base.row(1));

    for id in [p.w1, p.b1, p.w2] {
        store.get_mut(id).value.data_mut().fill(0.0);
    }
    store
        .get_mut(p.b2)
        .value
        .data_mut()
        .copy_from_slice(&[1.0, -2.0, 0.5, 3.0]);
    let out = run(&store, x);
    for i in 0..3 {
        assert_eq!(out.row(i), &[1.0, -2.0, 0.5, 3.0]);
    }
}

#[test]
fn ffn_gradcheck() {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(5, 0);
    let p = FeedForward::new(&mut store, &mut rng, "ffn", 4, 8);
    let x = store.add("x", ParamGroup::FeedForward, rand_tensor(&mut rng, 2, 4));
    let coords: Vec<_> = store
        .ids()
        .flat_map(|id| (0..store.value(id).numel()).map(move |i| (id, i)))
        .collect();
    let checks = grad_check_params(&mut store, &coords, 1e-4, |tape| {
        let xv = tape.param(x);
        let out = position_wise_ffn(tape, &p, xv)?;
        let sq = tape.mul(out, out)?;
        Ok(tape.sum(sq))
    })
    .unwrap();
    for c in checks.iter().filter(|c| !c.excluded) {
        assert!(c.rel_error <= 1e-6, "{c:?}");
    }
    assert!(checks.iter().filter(|c| !c.excluded).count() > coords.len() / 2);
}

fn gate_setup(k: usize, d: usize, seed: u64) -> (ParamStore, FusionGate, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed, 0);
    let gate = FusionGate::new(&mut store, &mut rng, "gate", d, k);
    let xs = (0..k)
        .map(|i| {
            let t = rand_tensor(&mut rng, 2, d);
            store.add(format!("x{i}"), ParamGroup::Gate, t)
        })
        .collect();
    (store, gate, xs)
}

#[test]
fn gate_of_equal_inputs_is_identity() {
    let (store, gate, _) = gate_setup(3, 4, 6);
    let mut rng = seeded_rng(6, 1);
    let x = rand_tensor(&mut rng, 2, 4);
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x.clone());
    let out = fusional_gate(&mut tape, &gate, &[xv, xv, xv], None).unwrap();
    for (a, b) in tape.value(out).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn zero_gate_averages() {
    let (mut store, gate, xs) = gate_setup(3, 4, 7);
    store.get_mut(gate.w).value.data_mut().fill(0.0);
    let mut tape = Tape::with_params(&store);
    let mut trace = Trace::default();
    let vars: Vec<Var> = xs.iter().map(|&id| tape.param(id)).collect();
    let out = fusional_gate(&mut tape, &gate, &vars, Some(&mut trace)).unwrap();
    assert!(tape
        .value(trace.gates[0].0)
        .data()
        .iter()
        .all(|g| (g - 1.0 / 3.0).abs() < 1e-15));
    for i in 0..8 {
        let mean = xs.iter().map(|&id| store.value(id).data()[i]).sum::<f64>() / 3.0;
        assert!((tape.value(out).data()[i] - mean).abs() < 1e-15);
    }
}

#[test]
fn gate_rejects_mismatch() {
    let (store, gate, xs) = gate_setup(3, 4, 8);
    let mut tape = Tape::with_params(&store);
    let vars: Vec<Var> = xs.iter().map(|&id| tape.param(id)).collect();
    assert!(fusional_gate(&mut tape, &gate, &vars[..2], None).is_err());
    let other = tape.constant(Tensor::zeros(&[3, 4]));
    assert!(fusional_gate(&mut tape, &gate, &[vars[0], vars[1], other], None).is_err());
}

#[test]
fn gate_gradcheck() {
    let (mut store, gate, xs) = gate_setup(3, 4, 9);
    let coords: Vec<_> = store
        .ids()
        .flat_map(|id| (0..store.value(id).numel()).map(move |i| (id, i)))
        .collect();
    let checks = grad_check_params(&mut store, &coords, 1e-4, |tape| {
        let vars: Vec<Var> = xs.iter().map(|&id| tape.param(id)).collect();
        let out = fusional_gate(tape, &gate, &vars, None)?;
        let sq = tape.mul(out, out)?;
        Ok(tape.sum(sq))
    })
    .unwrap();
    assert!(checks.iter().all(|c| c.rel_error <= 1e-6), "{checks:?}");
}

fn state(tape: &mut Tape<'_>, rng: &mut SeededRng, lens: [usize; 4], d: usize) -> StreamState {
    StreamState {
        h: lens
            .iter()
            .map(|&l| tape.constant(rand_tensor(rng, l, d)))
            .collect(),
        masks: lens.iter().map(|&l| vec![true; l]).collect(),
    }
}

#[test]
fn block_preserves_shapes() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 10, 8, 16, 2);
    let mut rng = seeded_rng(10, 1);
    for lens in [[1, 1, 1, 1], [6, 20, 5, 5], [3, 2, 7, 5]] {
        let mut tape = Tape::with_params(&store);
        let s = state(&mut tape, &mut rng, lens, 8);
        let out = matching_block(&mut tape, &b, &s, &mut Pass::eval()).unwrap();
        for (v, l) in out.h.iter().zip(lens) {
            assert_eq!(tape.shape(*v), &[l, 8]);
        }
    }
}

#[test]
fn tied_block_is_symmetric() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 11, 8, 16, 2);
    // Give every stream the parameter values of stream 0.
    let per_stream = store.len() / 4;
    for s in 1..4 {
        for i in 0..per_stream {
            let src = store.ids().nth(i).unwrap();
            let dst = store.ids().nth(s * per_stream + i).unwrap();
            let v = store.value(src).clone();
            store.get_mut(dst).value = v;
        }
    }
    let mut rng = seeded_rng(11, 1);
    let x = rand_tensor(&mut rng, 1, 8);
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x);
    let s = StreamState {
        h: vec![xv; 4],
        masks: vec![vec![true]; 4],
    };
    let out = matching_block(&mut tape, &b, &s, &mut Pass::eval()).unwrap();
    let first = tape.value(out.h[0]).clone();
    for v in &out.h[1..] {
        for (a, b) in tape.value(*v).data().iter().zip(first.data()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn candidate_output_depends_on_vision_input() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 12, 8, 16, 2);
    let mut rng = seeded_rng(12, 1);
    let mut tape = Tape::with_params(&store);
    let lens = [3, 4, 2, 5];
    let h: Vec<Var> = lens
        .iter()
        .map(|&l| tape.input(rand_tensor(&mut rng, l, 8)))
        .collect();
    let s = StreamState {
        h: h.clone(),
        masks: lens.iter().map(|&l| vec![true; l]).collect(),
    };
    let out = matching_block(&mut tape, &b, &s, &mut Pass::eval()).unwrap();
    let loss = tape.sum(out.h[0]);
    let weights = tape.constant(rand_tensor(&mut rng, 3, 8));
    let weighted = tape.mul(out.h[0], weights).unwrap();
    let loss2 = tape.sum(weighted);
    let total = tape.add(loss, loss2).unwrap();
    let g = tape.backward(total).unwrap();
    assert!(g.input(h[2]).unwrap().norm() > 0.0);
}

#[test]
fn stack_is_block_composition() {
    let mut store = ParamStore::new();
    let b1 = block(&mut store, 13, 8, 16, 2);
    let mut rng = seeded_rng(13, 9);
    let b2 = build_block(
        &mut store,
        &mut rng,
        1,
        &NAMES,
        &symmetric_sources(4),
        8,
        16,
        2,
    )
    .unwrap();
    let mut rng = seeded_rng(13, 1);
    let mut tape = Tape::with_params(&store);
    let s = state(&mut tape, &mut rng, [2, 3, 4, 5], 8);
    let single = matching_stack(&mut tape, [&b1], s.clone(), &mut Pass::eval()).unwrap();
    let direct = matching_block(&mut tape, &b1, &s, &mut Pass::eval()).unwrap();
    let two = matching_stack(&mut tape, [&b1, &b2], s.clone(), &mut Pass::eval()).unwrap();
    let composed = matching_block(&mut tape, &b2, &direct, &mut Pass::eval()).unwrap();
    for i in 0..4 {
        assert_eq!(tape.value(single.h[i]), tape.value(direct.h[i]));
        assert_eq!(tape.value(two.h[i]), tape.value(composed.h[i]));
    }
    assert!(matching_stack(&mut tape, [], s, &mut Pass::eval()).is_err());
}

#[test]
fn padding_rows_do_not_leak() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 14, 8, 16, 2);
    let mut rng = seeded_rng(14, 1);
    let lens = [3, 4, 2, 5];
    let xs: Vec<Tensor> = lens.iter().map(|&l| rand_tensor(&mut rng, l, 8)).collect();
    let mut tape = Tape::with_params(&store);
    let s = StreamState {
        h: xs.iter().map(|x| tape.constant(x.clone())).collect(),
        masks: lens.iter().map(|&l| vec![true; l]).collect(),
    };
    let base = matching_block(&mut tape, &b, &s, &mut Pass::eval()).unwrap();
    let padded: Vec<Tensor> = xs
        .iter()
        .map(|x| {
            let mut data = x.data().to_vec();
            data.extend((0..7 * 8).map(|i| (i as f64).sin() * 3.0));
            Tensor::new(&[x.rows() + 7, 8], data).unwrap()
        })
        .collect();
    let s2 = StreamState {
        h: padded.iter().map(|x| tape.constant(x.clone())).collect(),
        masks: lens
            .iter()
            .map(|&l| (0..l + 7).map(|i| i < l).collect())
            .collect(),
    };
    let out = matching_block(&mut tape, &b, &s2, &mut Pass::eval()).unwrap();
    for (i, &l) in lens.iter().enumerate() {
        let a = tape.value(base.h[i]).data();
        let b = &tape.value(out.h[i]).data()[..l * 8];
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn block_gradcheck_on_short_streams() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 15, 8, 16, 2);
    let mut rng = seeded_rng(15, 1);
    let xs: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, 4, 8)).collect();
    let target = rand_tensor(&mut rng, 4, 8);
    let coords: Vec<_> = store
        .ids()
        .flat_map(|id| {
            let n = store.value(id).numel();
            [0, n / 3, n - 1].into_iter().map(move |i| (id, i))
        })
        .collect();
    let checks = grad_check_params(&mut store, &coords, 1e-4, |tape| {
        let s = StreamState {
            h: xs.iter().map(|x| tape.constant(x.clone())).collect(),
            masks: vec![vec![true; 4]; 4],
        };
        let out = matching_block(tape, &b, &s, &mut Pass::eval())?;
        let t = tape.constant(target.clone());
        let mut total = None;
        for h in out.h {
            let w = tape.mul(h, t)?;
            let s = tape.sum(w);
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        Ok(total.unwrap())
    })
    .unwrap();
    let verdicts: Vec<_> = checks.iter().filter(|c| !c.excluded).collect();
    assert!(verdicts.len() > checks.len() / 2);
    for c in verdicts {
        assert!(c.rel_error <= 1e-4, "{} {c:?}", store.get(c.param).name);
    }
}

#[test]
fn wide_deep_stack_stays_finite() {
    // One randomly initialized d=512 block applied six times; a full set of
    // six independent blocks would need several gigabytes of weights.
    let mut store = ParamStore::new();
    let b = block(&mut store, 16, 512, 2048, 8);
    let mut rng = seeded_rng(16, 1);
    let mut tape = Tape::with_params(&store);
    let s = state(&mut tape, &mut rng, [4, 6, 5, 5], 512);
    let out = matching_stack(&mut tape, core::iter::repeat_n(&b, 6), s, &mut Pass::eval()).unwrap();
    for h in out.h {
        assert!(tape.value(h).is_finite());
    }
}

#[test]
fn dropout_only_in_training() {
    let mut store = ParamStore::new();
    let b = block(&mut store, 17, 8, 16, 2);
    let mut rng = seeded_rng(17, 1);
    let xs: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, 3, 8)).collect();
    let run = |pass: &mut Pass<'_>| {
        let mut tape = Tape::with_params(&store);
        let s = StreamState {
            h: xs.iter().map(|x| tape.constant(x.clone())).collect(),
            masks: vec![vec![true; 3]; 4],
        };
        let out = matching_block(&mut tape, &b, &s, pass).unwrap();
        tape.value(out.h[0]).clone()
    };
    let a = run(&mut Pass::eval());
    let b2 = run(&mut Pass::eval());
    assert_eq!(a, b2);
    let mut r1 = seeded_rng(1, 1);
    let mut r2 = seeded_rng(1, 1);
    let t1 = run(&mut Pass::train(0.3, &mut r1).unwrap());
    let t2 = run(&mut Pass::train(0.3, &mut r2).unwrap());
    assert_eq!(t1, t2);
    assert_ne!(t1, a);
    let mut r3 = seeded_rng(1, 1);
    assert!(Pass::train(1.0, &mut r3).is_err());
}
