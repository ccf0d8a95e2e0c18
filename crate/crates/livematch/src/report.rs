//! Line-delimited logs and the human-readable metric table.

use std::fmt::Write as _;

use livematch_core::corpus::detokenize;
use livematch_core::ranking::{EvalClip, MetricReport, RankingResult};
use livematch_core::training::EpochReport;
use serde::Serialize;

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    mean_loss: f64,
    #[serde(rename = "dev_recall@1")]
    dev_recall_at_1: Option<f64>,
    lr: f64,
}

pub fn epoch_line(r: &EpochReport) -> String {
    serde_json::to_string(&EpochLine {
        epoch: r.epoch,
        mean_loss: r.mean_loss,
        dev_recall_at_1: r.dev_recall_at_1,
        lr: r.lr,
    })
    .expect("epoch line serializes")
}

#[derive(Serialize)]
struct MetricLine<'a> {
    split: &'a str,
    seed: u64,
    candidates: usize,
    #[serde(rename = "recall@1")]
    recall_at_1: f64,
    #[serde(rename = "recall@5")]
    recall_at_5: f64,
    #[serde(rename = "recall@10")]
    recall_at_10: f64,
    mr: f64,
    mrr: f64,
    n_clips: usize,
}

pub fn metric_line(split: &str, seed: u64, candidates: usize, m: &MetricReport) -> String {
    serde_json::to_string(&MetricLine {
        split,
        seed,
        candidates,
        recall_at_1: m.recall_at_1,
        recall_at_5: m.recall_at_5,
        recall_at_10: m.recall_at_10,
        mr: m.mean_rank,
        mrr: m.mrr,
        n_clips: m.n_clips,
    })
    .expect("metric line serializes")
}

pub fn metric_table(split: &str, m: &MetricReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "split      {split} ({} clips)", m.n_clips);
    let _ = writeln!(out, "Recall@1   {:.4}", m.recall_at_1);
    let _ = writeln!(out, "Recall@5   {:.4}", m.recall_at_5);
    let _ = writeln!(out, "Recall@10  {:.4}", m.recall_at_10);
    let _ = writeln!(out, "MR         {:.2}", m.mean_rank);
    let _ = writeln!(out, "MRR        {:.4}", m.mrr);
    out
}

#[derive(Serialize)]
struct TopEntry {
    candidate: String,
    score: f64,
    provenance: &'static str,
}

#[derive(Serialize)]
struct AuditLine<'a> {
    clip_id: &'a str,
    gt_rank: usize,
    top5: Vec<TopEntry>,
}

/// One line per clip: the ground-truth rank and the five best candidates.
pub fn audit_lines(clips: &[EvalClip], results: &[RankingResult]) -> String {
    let mut out = String::new();
    for (c, r) in clips.iter().zip(results) {
        let top5 = r
            .order
            .iter()
            .take(5)
            .map(|&i| TopEntry {
                candidate: detokenize(&c.set.candidates[i]),
                score: r.scores[i],
                provenance: c.set.provenance[i].name(),
            })
            .collect();
        let line = AuditLine {
            clip_id: &r.clip_id,
            gt_rank: r.gt_rank,
            top5,
        };
        out.push_str(&serde_json::to_string(&line).expect("audit line serializes"));
        out.push('\n');
    }
    out
}
