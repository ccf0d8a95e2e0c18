//! Max-margin training with uniform negative sampling, Adam, and learning-rate
//! halving on dev Recall@1 drops.

mod gradcheck;

use alloc::format;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{ParamStore, Tape};
use crate::corpus::{ClipRecord, EncodedCandidate, EncodedClip, Vocabulary};
use crate::ranking::{evaluate_model, EvalClip};
use crate::{seeded_rng, Error, MatchingModel, Pass, Result, SeededRng, Tensor};

pub use gradcheck::{check_model_gradients, GradcheckOptions, GroupCheck, ModelGradcheck};

/// `max(0, margin + s_neg - s_pos)`.
pub fn margin_loss(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (margin + (s_neg - s_pos)).max(0.0)
}

/// Uniform draw from `pool` over the entries not equal to `ground_truth`.
pub fn sample_negative<'a, T: PartialEq, R: Rng + ?Sized>(
    ground_truth: &T,
    pool: &'a [T],
    rng: &mut R,
) -> Result<&'a T> {
    let eligible = pool.iter().filter(|c| *c != ground_truth).count();
    if eligible == 0 {
        return Err(Error::Sampling(format!(
            "no pool entry differs from the ground truth ({} entries)",
            pool.len()
        )));
    }
    let pick = rng.gen_range(0..eligible);
    Ok(pool
        .iter()
        .filter(|c| *c != ground_truth)
        .nth(pick)
        .expect("pick < eligible"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 9e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, p), (m, v))| {
                    m.shape() == p.value.shape() && v.shape() == p.value.shape()
                })
    }
}

/// One bias-corrected Adam update from the gradients held in `store`. A
/// parameter without a gradient is updated as if its gradient were zero;
/// frozen parameters are left alone.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !state.matches(store) {
        return Err(Error::Contract(
            "optimizer state does not match the parameters".into(),
        ));
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - crate::math::pow(cfg.beta1, t);
    let c2 = 1.0 - crate::math::pow(cfg.beta2, t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = store.get_mut(id);
        if !p.requires_grad {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let grad = p.grad.as_ref().map(Tensor::data);
        for (j, x) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad.map_or(0.0, |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= cfg.lr * m_hat / (crate::math::sqrt(v_hat) + cfg.eps);
        }
    }
    Ok(())
}

/// Halves `lr` when the latest dev metric fell below the previous one.
pub fn lr_schedule(history: &[f64], lr: f64) -> f64 {
    match history {
        [.., prev, last] if last < prev => lr / 2.0,
        _ => lr,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub negatives_per_clip: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Candidate-set size for the per-epoch dev evaluation.
    pub dev_candidates: usize,
    /// Training stops once the learning rate falls below this.
    pub min_lr: f64,
    /// Halve the learning rate whenever dev Recall@1 drops.
    pub halve_on_drop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.1,
            adam: AdamConfig::default(),
            batch_size: 64,
            negatives_per_clip: 1,
            max_epochs: 50,
            seed: 0,
            dev_candidates: 100,
            min_lr: 1e-7,
            halve_on_drop: true,
        }
    }
}

impl TrainConfig {
    /// Lists every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.margin.is_nan() || self.margin <= 0.0 {
            problems.push(format!("margin {} must be positive", self.margin));
        }
        if self.adam.lr.is_nan() || self.adam.lr < 0.0 {
            problems.push(format!("lr {} must be non-negative", self.adam.lr));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            problems.push("adam betas must lie in [0, 1)".into());
        }
        if self.adam.eps.is_nan() || self.adam.eps <= 0.0 {
            problems.push("adam eps must be positive".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if self.negatives_per_clip == 0 {
            problems.push("negatives_per_clip must be at least 1".into());
        }
        if self.dev_candidates == 0 {
            problems.push("dev_candidates must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(problems.join("; ")))
        }
    }
}

/// Encoded training clips, their positives, the negative pool and the dev
/// candidate sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub clips: Vec<EncodedClip>,
    pub positives: Vec<EncodedCandidate>,
    /// Comments that negatives are drawn from: the training ground truths,
    /// repeats included, so a comment is a negative as often as a positive.
    pub negative_pool: Vec<EncodedCandidate>,
    pub dev: Vec<EvalClip>,
}

impl TrainData {
    /// Uses the ground-truth records of `train`.
    pub fn new(train: &[ClipRecord], dev: Vec<EvalClip>, vocab: &Vocabulary) -> Result<Self> {
        let mut clips = Vec::new();
        let mut positives = Vec::new();
        for r in train.iter().filter(|r| r.is_ground_truth) {
            let cand = EncodedCandidate::from_tokens(&r.candidate, vocab);
            if cand.ids.is_empty() {
                return Err(Error::InvalidRecord(format!(
                    "clip {}: empty candidate",
                    r.clip_id
                )));
            }
            clips.push(EncodedClip::from_record(r, vocab)?);
            positives.push(cand);
        }
        if clips.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(TrainData {
            clips,
            negative_pool: positives.clone(),
            positives,
            dev,
        })
    }
}

/// Everything besides the model that a resumed run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub optimizer: OptimizerState,
    /// Dev Recall@1 after each epoch.
    pub history: Vec<f64>,
    pub best: Option<f64>,
}

impl TrainState {
    pub fn new(model: &MatchingModel, cfg: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            lr: cfg.adam.lr,
            optimizer: OptimizerState::new(model.params()),
            history: Vec::new(),
            best: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// `None` without dev clips.
    pub dev_recall_at_1: Option<f64>,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Dev Recall@1 beat every earlier epoch.
    pub improved: bool,
}

/// A (clip, positive, negative) training triple.
pub type Instance<'a> = (&'a EncodedClip, &'a EncodedCandidate, &'a EncodedCandidate);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Mean margin loss over the batch.
    pub loss: f64,
    /// Instances with a positive hinge.
    pub active: usize,
    /// An optimizer step was taken.
    pub updated: bool,
}

/// Scores every instance, backpropagates the mean margin loss and applies
/// one Adam step. A batch with no positive hinge has identically zero
/// gradients and leaves the parameters and optimizer state untouched.
pub fn train_step(
    model: &mut MatchingModel,
    batch: &[Instance<'_>],
    margin: f64,
    adam: &AdamConfig,
    optimizer: &mut OptimizerState,
    mut rng: Option<&mut SeededRng>,
    batch_id: usize,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let scale = 1.0 / batch.len() as f64;
    let rate = model.config().dropout;
    let mut total = 0.0;
    let mut active = 0;
    model.params_mut().zero_grads();
    for (clip, pos, neg) in batch {
        let grads = {
            let mut tape = Tape::with_params(model.params());
            let mut pass = match rng.as_deref_mut() {
                Some(r) => Pass::train(rate, r)?,
                None => Pass::eval(),
            };
            let sp = model.forward(&mut tape, &clip.input(), &pos.input(), &mut pass)?;
            let sn = model.forward(&mut tape, &clip.input(), &neg.input(), &mut pass)?;
            let raw = margin + (tape.value(sn).item() - tape.value(sp).item());
            if !raw.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: batch_id,
                    loss: raw,
                    param_norm: model.params().global_norm(),
                });
            }
            if raw <= 0.0 {
                continue;
            }
            total += raw;
            active += 1;
            let diff = tape.sub(sn, sp)?;
            let loss = tape.scale(diff, scale);
            tape.backward(loss)?
        };
        model.params_mut().accumulate(&grads);
    }
    let updated = active > 0;
    if updated {
        adam_step(model.params_mut(), optimizer, adam)?;
        model.params_mut().zero_grads();
    }
    Ok(StepOutcome {
        loss: total * scale,
        active,
        updated,
    })
}

/// One pass over the training clips in a seed- and epoch-determined order,
/// then dev evaluation and the learning-rate schedule.
pub fn train_epoch(
    model: &mut MatchingModel,
    data: &TrainData,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<EpochReport> {
    cfg.validate()?;
    if data.clips.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !state.optimizer.matches(model.params()) {
        return Err(Error::Contract(
            "optimizer state does not match the model".into(),
        ));
    }
    let epoch = state.epoch + 1;
    let mut rng = seeded_rng(cfg.seed, 0x7e00_0000 + epoch as u64);
    let mut order: Vec<usize> = (0..data.clips.len()).collect();
    order.shuffle(&mut rng);
    let adam = AdamConfig {
        lr: state.lr,
        ..cfg.adam
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for (batch_id, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let mut batch = Vec::with_capacity(chunk.len() * cfg.negatives_per_clip);
        for &i in chunk {
            for _ in 0..cfg.negatives_per_clip {
                let neg = sample_negative(&data.positives[i], &data.negative_pool, &mut rng)?;
                batch.push((&data.clips[i], &data.positives[i], neg));
            }
        }
        let out = train_step(
            model,
            &batch,
            cfg.margin,
            &adam,
            &mut state.optimizer,
            Some(&mut rng),
            batch_id,
        )?;
        total += out.loss * batch.len() as f64;
        count += batch.len();
    }
    let used_lr = state.lr;
    let mut dev_recall_at_1 = None;
    let mut improved = false;
    if !data.dev.is_empty() {
        let (report, _) = evaluate_model(model, &data.dev)?;
        let r1 = report.recall_at_1;
        improved = state.best.is_none_or(|b| r1 > b);
        if improved {
            state.best = Some(r1);
        }
        state.history.push(r1);
        if cfg.halve_on_drop {
            state.lr = lr_schedule(&state.history, state.lr);
        }
        dev_recall_at_1 = Some(r1);
    }
    state.epoch = epoch;
    Ok(EpochReport {
        epoch,
        mean_loss: total / count as f64,
        dev_recall_at_1,
        lr: used_lr,
        improved,
    })
}

/// Runs epochs until `max_epochs`, the learning rate drops below `min_lr`,
/// or `on_epoch` breaks.
pub fn fit<E, F>(
    model: &mut MatchingModel,
    data: &TrainData,
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: F,
) -> Result<Vec<EpochReport>, E>
where
    E: From<Error>,
    F: FnMut(&EpochReport, &MatchingModel, &TrainState) -> Result<ControlFlow<()>, E>,
{
    let mut reports = Vec::new();
    while state.epoch < cfg.max_epochs && state.lr >= cfg.min_lr {
        let report = train_epoch(model, data, cfg, state)?;
        reports.push(report);
        if on_epoch(&report, model, state)?.is_break() {
            break;
        }
    }
    Ok(reports)
}
