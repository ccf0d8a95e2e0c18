use livematch_core::corpus::synth::{generate, SynthConfig};
use livematch_core::corpus::{detokenize, tokenize, EncodedCandidate, EncodedClip};
use livematch_core::ranking::{build_eval_set, evaluate_model, popular_quota, rank};
use livematch_core::{MatchingModel, ModelConfig};
use proptest::prelude::*;

proptest! {
    #[test]
    fn tokenizing_is_idempotent(s in "[a-zA-Z0-9 !?.,]{0,40}") {
        let once = tokenize(&s);
        prop_assert_eq!(tokenize(&detokenize(&once)), once);
    }

    #[test]
    fn order_is_a_sorted_permutation(
        scores in prop::collection::vec(-3i32..3, 1..40),
        pick in any::<prop::sample::Index>(),
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let gt = pick.index(scores.len());
        let r = rank("c", scores.clone(), gt).unwrap();
        let mut seen = r.order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..scores.len()).collect::<Vec<_>>());
        for w in r.order.windows(2) {
            let (a, b) = (w[0], w[1]);
            prop_assert!(scores[a] > scores[b] || (scores[a] == scores[b] && a < b));
        }
        prop_assert_eq!(r.order[r.gt_rank - 1], gt);
    }
}

#[test]
fn generation_and_scoring_are_reproducible() {
    let make = || generate(12, 20, &SynthConfig::default()).unwrap();
    let (a, b) = (make(), make());
    assert_eq!(a.clips, b.clips);
    let vocab = a.vocabulary().unwrap();
    assert_eq!(vocab.checksum(), b.vocabulary().unwrap().checksum());

    let cfg = ModelConfig {
        dim: 8,
        heads: 2,
        ffn_dim: 16,
        ..ModelConfig::desk(vocab.len(), SynthConfig::default().vision_dim)
    };
    let model = MatchingModel::new(cfg.clone(), 3).unwrap();
    assert_eq!(model, MatchingModel::new(cfg, 3).unwrap());

    let r = &a.clips[0];
    let clip = EncodedClip::from_record(r, &vocab).unwrap();
    let cand = EncodedCandidate::from_tokens(&r.candidate, &vocab);
    let s = model.score(&clip.input(), &cand.input()).unwrap();
    assert!((-1.0..=1.0).contains(&s));
    assert_eq!(s, model.score(&clip.input(), &cand.input()).unwrap());

    let popular = &a.popular[..popular_quota(10)];
    let sets = build_eval_set(&a.clips, popular, &a.pool, 10, &vocab, 1).unwrap();
    assert_eq!(sets.len(), a.clips.len());
    let (rep, results) = evaluate_model(&model, &sets).unwrap();
    assert_eq!(rep.n_clips, sets.len());
    for (res, set) in results.iter().zip(&sets) {
        assert_eq!(set.set.candidates.len(), 10);
        assert_eq!(res.order[res.gt_rank - 1], set.set.ground_truth_index);
    }
    assert_eq!(evaluate_model(&model, &sets).unwrap().0, rep);
}
