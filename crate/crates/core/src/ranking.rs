//! Candidate sets, ranking, and Recall@k / mean rank / mean reciprocal rank.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{ClipRecord, EncodedCandidate, EncodedClip, Vocabulary};
use crate::{seeded_rng, Error, MatchingModel, Result};

/// Number of popular comments placed in a full-size candidate set.
pub const POPULAR_PER_SET: usize = 20;
/// Default candidate-set size.
pub const DEFAULT_SET_SIZE: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    GroundTruth,
    Popular,
    Random,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::GroundTruth => "ground_truth",
            Provenance::Popular => "popular",
            Provenance::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet<T = Vec<String>> {
    pub clip_id: String,
    pub candidates: Vec<T>,
    pub ground_truth_index: usize,
    pub provenance: Vec<Provenance>,
}

/// How many popular comments a set of `size` carries: 20 at the default size
/// of 100, scaled down proportionally for smaller sets.
pub fn popular_quota(size: usize) -> usize {
    POPULAR_PER_SET.min(size / 5)
}

/// Ground truth, then every popular comment not equal to it, then a uniform
/// draw without replacement from the rest of `pool` up to `size`; the result
/// is shuffled so the ground truth lands at a random index.
pub fn build_candidate_set<T: Clone + PartialEq, R: Rng + ?Sized>(
    clip_id: &str,
    ground_truth: &T,
    popular: &[T],
    pool: &[T],
    size: usize,
    rng: &mut R,
) -> Result<CandidateSet<T>> {
    if size < 1 + popular.len() {
        return Err(Error::Construction(format!(
            "set size {size} cannot hold the ground truth and {} popular comments",
            popular.len()
        )));
    }
    let mut entries: Vec<(T, Provenance)> = Vec::with_capacity(size);
    entries.push((ground_truth.clone(), Provenance::GroundTruth));
    for p in popular {
        if !entries.iter().any(|(c, _)| c == p) {
            entries.push((p.clone(), Provenance::Popular));
        }
    }
    let mut eligible: Vec<&T> = Vec::with_capacity(pool.len());
    for c in pool {
        if !entries.iter().any(|(e, _)| e == c) && !eligible.contains(&c) {
            eligible.push(c);
        }
    }
    let need = size - entries.len();
    if eligible.len() < need {
        return Err(Error::Construction(format!(
            "pool offers {} distinct distractors, {need} needed",
            eligible.len()
        )));
    }
    let (chosen, _) = eligible.partial_shuffle(rng, need);
    entries.extend(chosen.iter().map(|c| ((*c).clone(), Provenance::Random)));
    entries.shuffle(rng);
    let ground_truth_index = entries
        .iter()
        .position(|(_, p)| *p == Provenance::GroundTruth)
        .expect("ground truth present");
    let (candidates, provenance) = entries.into_iter().unzip();
    Ok(CandidateSet {
        clip_id: clip_id.into(),
        candidates,
        ground_truth_index,
        provenance,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub clip_id: String,
    pub scores: Vec<f64>,
    /// Candidate indices by descending score, ties by ascending index.
    pub order: Vec<usize>,
    /// 1-based rank of the ground truth.
    pub gt_rank: usize,
}

/// Orders candidates by score and locates the ground truth.
pub fn rank(clip_id: &str, scores: Vec<f64>, ground_truth_index: usize) -> Result<RankingResult> {
    if ground_truth_index >= scores.len() {
        return Err(Error::Index {
            op: "rank",
            index: ground_truth_index,
            limit: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let gt_rank = 1 + order
        .iter()
        .position(|&i| i == ground_truth_index)
        .expect("present");
    Ok(RankingResult {
        clip_id: clip_id.into(),
        scores,
        order,
        gt_rank,
    })
}

fn nonempty(results: &[RankingResult]) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Parameter("no ranking results".into()));
    }
    Ok(())
}

/// Fraction of clips whose ground truth ranks within the top `k`.
pub fn recall_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    nonempty(results)?;
    if k == 0 {
        return Err(Error::Parameter("recall@k needs k >= 1".into()));
    }
    let hits = results.iter().filter(|r| r.gt_rank <= k).count();
    Ok(hits as f64 / results.len() as f64)
}

pub fn mean_rank(results: &[RankingResult]) -> Result<f64> {
    nonempty(results)?;
    Ok(results.iter().map(|r| r.gt_rank as f64).sum::<f64>() / results.len() as f64)
}

pub fn mrr(results: &[RankingResult]) -> Result<f64> {
    nonempty(results)?;
    Ok(results.iter().map(|r| 1.0 / r.gt_rank as f64).sum::<f64>() / results.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub mean_rank: f64,
    pub mrr: f64,
    pub n_clips: usize,
}

impl MetricReport {
    pub fn from_results(results: &[RankingResult]) -> Result<Self> {
        Ok(MetricReport {
            recall_at_1: recall_at_k(results, 1)?,
            recall_at_5: recall_at_k(results, 5)?,
            recall_at_10: recall_at_k(results, 10)?,
            mean_rank: mean_rank(results)?,
            mrr: mrr(results)?,
            n_clips: results.len(),
        })
    }
}

/// The `n` most frequent items, most frequent first, ties in ascending order.
pub fn popular_comments<'a, T: Ord + Clone + 'a>(
    items: impl IntoIterator<Item = &'a T>,
    n: usize,
) -> Vec<T> {
    let mut counts: BTreeMap<&T, usize> = BTreeMap::new();
    for it in items {
        *counts.entry(it).or_insert(0) += 1;
    }
    let mut entries: Vec<(&T, usize)> = counts.into_iter().collect();
    entries.sort_by_key(|e| core::cmp::Reverse(e.1));
    entries
        .into_iter()
        .take(n)
        .map(|(t, _)| t.clone())
        .collect()
}

/// One clip ready for ranking: encoded context, its candidate set, and the
/// encoded candidates in set order.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalClip {
    pub clip: EncodedClip,
    pub set: CandidateSet,
    pub candidates: Vec<EncodedCandidate>,
}

/// Builds a candidate set of `size` for every ground-truth record. Clip `i`
/// draws from its own generator stream, so sets do not depend on which other
/// clips are present before it.
pub fn build_eval_set(
    records: &[ClipRecord],
    popular: &[Vec<String>],
    pool: &[Vec<String>],
    size: usize,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Vec<EvalClip>> {
    let quota = popular_quota(size).min(popular.len());
    let popular = &popular[..quota];
    records
        .iter()
        .filter(|r| r.is_ground_truth)
        .enumerate()
        .map(|(i, r)| {
            let mut rng = seeded_rng(seed, 0xe7a1_0000 + i as u64);
            let set = build_candidate_set(&r.clip_id, &r.candidate, popular, pool, size, &mut rng)?;
            let candidates = set
                .candidates
                .iter()
                .map(|c| EncodedCandidate::from_tokens(c, vocab))
                .collect();
            Ok(EvalClip {
                clip: EncodedClip::from_record(r, vocab)?,
                set,
                candidates,
            })
        })
        .collect()
}

/// Scores every candidate of every clip with `scorer` and aggregates.
pub fn evaluate<F>(clips: &[EvalClip], mut scorer: F) -> Result<(MetricReport, Vec<RankingResult>)>
where
    F: FnMut(&EncodedClip, &EncodedCandidate) -> Result<f64>,
{
    let results = clips
        .iter()
        .map(|c| {
            let scores = c
                .candidates
                .iter()
                .map(|cand| scorer(&c.clip, cand))
                .collect::<Result<Vec<_>>>()?;
            rank(&c.set.clip_id, scores, c.set.ground_truth_index)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((MetricReport::from_results(&results)?, results))
}

/// [`evaluate`] with the model's inference score.
pub fn evaluate_model(
    model: &MatchingModel,
    clips: &[EvalClip],
) -> Result<(MetricReport, Vec<RankingResult>)> {
    evaluate(clips, |clip, cand| {
        model.score(&clip.input(), &cand.input())
    })
}
