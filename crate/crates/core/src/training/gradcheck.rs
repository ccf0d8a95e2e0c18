//! Finite-difference check of the whole model, grouped by parameter kind.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;

use crate::autodiff::{grad_check_params, OpKind, ParamGroup, ParamId};
use crate::corpus::{EncodedCandidate, EncodedClip};
use crate::{seeded_rng, MatchingModel, Pass, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Large enough that the hinge stays active for any pair of cosines.
    pub margin: f64,
    /// Coordinates checked per parameter tensor, not counting those
    /// excluded for crossing a kink.
    pub coords_per_param: usize,
    pub seed: u64,
    /// Corrupts one backward rule, to prove the check can fail.
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-4,
            tolerance: 1e-4,
            margin: 2.0,
            coords_per_param: 4,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a ReLU kink.
    pub excluded: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradcheck {
    pub groups: Vec<GroupCheck>,
}

impl ModelGradcheck {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Candidate coordinates drawn per tensor, as a multiple of the quota.
const RESERVE: usize = 8;

/// Compares the analytic gradient of `margin + s(neg) - s(pos)` against
/// central differences on sampled coordinates of every parameter. Embedding
/// coordinates are drawn from the rows the three sequences actually use. A
/// group with no checked coordinate fails.
pub fn check_model_gradients(
    model: &MatchingModel,
    clip: &EncodedClip,
    positive: &EncodedCandidate,
    negative: &EncodedCandidate,
    opts: &GradcheckOptions,
) -> Result<ModelGradcheck> {
    let mut rng = seeded_rng(opts.seed, 0x9c);
    let embedding = model.encoders().embedding;
    let d = model.config().dim;
    let mut used: Vec<usize> = clip
        .comment_ids
        .iter()
        .chain(&positive.ids)
        .chain(&negative.ids)
        .copied()
        .filter(|&id| id != crate::corpus::PAD_ID)
        .collect();
    used.sort_unstable();
    used.dedup();

    // Per tensor, a shuffled queue of candidate coordinates. Coordinates whose
    // perturbation crosses a kink are replaced from the queue until the quota
    // is met or the queue runs dry.
    let want = opts.coords_per_param;
    let mut queues: Vec<(ParamId, Vec<usize>)> = Vec::new();
    for (id, p) in model.params().iter() {
        let (n, rows) = if id == embedding {
            (used.len() * d, Some(&used))
        } else {
            (p.value.numel(), None)
        };
        let picks = sample(&mut rng, n, (want * RESERVE).min(n));
        let picks = picks
            .into_iter()
            .map(|i| rows.map_or(i, |r| r[i / d] * d + i % d))
            .collect();
        queues.push((id, picks));
    }

    let margin = opts.margin;
    let fault = opts.fault;
    // The tape reads parameters from this copy, so perturbing it perturbs the model.
    let mut store = model.params().clone();
    let mut checks = Vec::new();
    let mut good = vec![0usize; queues.len()];
    let mut cursor = vec![0usize; queues.len()];
    loop {
        let mut coords: Vec<(ParamId, usize)> = Vec::new();
        for (q, (id, picks)) in queues.iter().enumerate() {
            let take = want.saturating_sub(good[q]).min(picks.len() - cursor[q]);
            coords.extend(picks[cursor[q]..cursor[q] + take].iter().map(|&i| (*id, i)));
            cursor[q] += take;
        }
        if coords.is_empty() {
            break;
        }
        let round = grad_check_params(&mut store, &coords, opts.step, |tape| {
            if let Some(kind) = fault {
                tape.inject_backward_fault(kind);
            }
            let mut pass = Pass::eval();
            let sp = model.forward(tape, &clip.input(), &positive.input(), &mut pass)?;
            let sn = model.forward(tape, &clip.input(), &negative.input(), &mut pass)?;
            let diff = tape.sub(sn, sp)?;
            Ok(tape.add_scalar(diff, margin))
        })?;
        for c in &round {
            if !c.excluded {
                let q = queues
                    .iter()
                    .position(|(id, _)| *id == c.param)
                    .expect("queued");
                good[q] += 1;
            }
        }
        checks.extend(round);
    }

    let groups = ParamGroup::ALL
        .iter()
        .filter_map(|&group| {
            let of_group: Vec<_> = checks
                .iter()
                .filter(|c| store.get(c.param).group == group)
                .collect();
            if of_group.is_empty() {
                return None;
            }
            let verdicts: Vec<_> = of_group.iter().filter(|c| !c.excluded).collect();
            let max_rel_error = verdicts.iter().map(|c| c.rel_error).fold(0.0, f64::max);
            Some(GroupCheck {
                group,
                checked: verdicts.len(),
                excluded: of_group.len() - verdicts.len(),
                max_rel_error,
                passed: !verdicts.is_empty() && max_rel_error <= opts.tolerance,
            })
        })
        .collect();
    Ok(ModelGradcheck { groups })
}
