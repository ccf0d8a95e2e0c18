//! The five commands, as library functions returning their results.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::Path;

use livematch_core::autodiff::OpKind;
use livematch_core::corpus::synth::{generate, SynthConfig};
use livematch_core::corpus::{
    detokenize, ClipRecord, EncodedCandidate, EncodedClip, Vocabulary, AUDIO_DIM,
};
use livematch_core::ranking::{
    build_eval_set, evaluate_model, popular_comments, popular_quota, rank as rank_scores, EvalClip,
    MetricReport, RankingResult, POPULAR_PER_SET,
};
use livematch_core::training::{
    check_model_gradients, fit, EpochReport, GradcheckOptions, ModelGradcheck, TrainData,
    TrainState,
};
use livematch_core::{MatchingModel, ModelConfig};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::{
    load_clips, load_comments, load_vocab, write_clips, write_comments, write_vocab,
};
use crate::report::{audit_lines, epoch_line, metric_line};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const POOL_FILE: &str = "pool.txt";
pub const POPULAR_FILE: &str = "popular.txt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_text()).map_err(Error::io(&path))
}

/// Writes a synthetic corpus into `data_dir`: three splits, the distractor
/// pool, the popular comments and the vocabulary.
pub fn synth(cfg: &RunConfig) -> Result<()> {
    if cfg.n_clips == 0 {
        return Err(Error::Usage("n_clips must be at least 1".into()));
    }
    let corpus = generate(cfg.seed, cfg.n_clips, &SynthConfig::default())?;
    let vocab = corpus.vocabulary()?;
    let dir = &cfg.data_dir;
    write_config(dir, cfg)?;
    let [train, dev, test] = corpus.split();
    write_clips(&dir.join(TRAIN_FILE), train)?;
    write_clips(&dir.join(DEV_FILE), dev)?;
    write_clips(&dir.join(TEST_FILE), test)?;
    write_comments(&dir.join(POOL_FILE), &corpus.pool)?;
    write_comments(&dir.join(POPULAR_FILE), &corpus.popular)?;
    write_vocab(&dir.join(VOCAB_FILE), &vocab)
}

/// What every command reads from the data directory.
pub struct Corpus {
    pub vocab: Vocabulary,
    pub train: Vec<ClipRecord>,
    pub pool: Vec<Vec<String>>,
    /// Most popular first.
    pub popular: Vec<Vec<String>>,
    pub vision_dim: usize,
}

impl Corpus {
    /// Popular comments come from `popular.txt` when present, else from the
    /// most frequent ground-truth candidates of the training split.
    pub fn load(data_dir: &Path, vision_dim: Option<usize>) -> Result<Self> {
        let vocab = load_vocab(&data_dir.join(VOCAB_FILE))?;
        let train = load_clips(&data_dir.join(TRAIN_FILE), AUDIO_DIM, vision_dim)?;
        let vision_dim = match vision_dim.or_else(|| train.first().and_then(ClipRecord::vision_dim))
        {
            Some(d) => d,
            None => {
                return Err(Error::Data(format!(
                    "{}: no records",
                    data_dir.join(TRAIN_FILE).display()
                )))
            }
        };
        let pool = load_comments(&data_dir.join(POOL_FILE))?;
        let popular_path = data_dir.join(POPULAR_FILE);
        let popular = if popular_path.exists() {
            load_comments(&popular_path)?
        } else {
            let gts = train
                .iter()
                .filter(|r| r.is_ground_truth)
                .map(|r| &r.candidate);
            popular_comments(gts, POPULAR_PER_SET)
        };
        Ok(Corpus {
            vocab,
            train,
            pool,
            popular,
            vision_dim,
        })
    }

    pub fn split(&self, data_dir: &Path, split: &str) -> Result<Vec<ClipRecord>> {
        let file = match split {
            "train" => return Ok(self.train.clone()),
            "dev" => DEV_FILE,
            "test" => TEST_FILE,
            other => {
                return Err(Error::Usage(format!(
                    "unknown split {other:?} (train, dev or test)"
                )))
            }
        };
        load_clips(&data_dir.join(file), AUDIO_DIM, Some(self.vision_dim))
    }

    pub fn eval_set(
        &self,
        records: &[ClipRecord],
        size: usize,
        seed: u64,
    ) -> Result<Vec<EvalClip>> {
        let quota = popular_quota(size).min(self.popular.len());
        Ok(build_eval_set(
            records,
            &self.popular[..quota],
            &self.pool,
            size,
            &self.vocab,
            seed,
        )?)
    }
}

fn check_vocab(ckpt: &Checkpoint, vocab: &Vocabulary) -> Result<()> {
    if ckpt.vocab_checksum != vocab.checksum() {
        return Err(Error::Data(format!(
            "vocabulary checksum {:016x} differs from the checkpoint's {:016x}",
            vocab.checksum(),
            ckpt.vocab_checksum
        )));
    }
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub reports: Vec<EpochReport>,
    pub state: TrainState,
    pub model: MatchingModel,
}

/// Trains from scratch or from `resume`, writing `config.txt`, the epoch log,
/// `last.ckpt` after every epoch and `best.ckpt` whenever dev Recall@1
/// improves (every epoch when there is no dev split). A resumed run appends
/// to the existing epoch log.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let resumed = resume.map(Checkpoint::load).transpose()?;
    let vision_dim = resumed.as_ref().map(|c| c.model.config().vision_dim);
    let corpus = Corpus::load(&cfg.data_dir, vision_dim)?;
    let dev_path = cfg.data_dir.join(DEV_FILE);
    let dev_records = if dev_path.exists() {
        corpus.split(&cfg.data_dir, "dev")?
    } else {
        Vec::new()
    };
    let dev = if dev_records.is_empty() {
        Vec::new()
    } else {
        corpus.eval_set(&dev_records, cfg.candidates, cfg.seed)?
    };
    let data = TrainData::new(&corpus.train, dev, &corpus.vocab)?;
    let tcfg = cfg.train_config();
    let wanted = cfg.model_config(corpus.vocab.len(), corpus.vision_dim);

    let (mut model, mut state) = match resumed {
        Some(ck) => {
            check_vocab(&ck, &corpus.vocab)?;
            if *ck.model.config() != wanted {
                return Err(Error::Usage(format!(
                    "model settings differ from the checkpoint's: {:?} vs {:?}",
                    wanted,
                    ck.model.config()
                )));
            }
            (ck.model, ck.state)
        }
        None => {
            let model = MatchingModel::new(wanted, cfg.seed)?;
            let state = TrainState::new(&model, &tcfg);
            (model, state)
        }
    };

    let out = &cfg.out_dir;
    write_config(out, cfg)?;
    let log_path = out.join(EPOCH_LOG);
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(Error::io(&log_path))?;
    let checksum = corpus.vocab.checksum();
    let save = |name: &str, model: &MatchingModel, state: &TrainState| -> Result<()> {
        Checkpoint {
            config: cfg.clone(),
            vocab_checksum: checksum,
            model: model.clone(),
            state: state.clone(),
        }
        .save(&out.join(name))
    };
    if state.epoch == 0 {
        save(LAST_CHECKPOINT, &model, &state)?;
        save(BEST_CHECKPOINT, &model, &state)?;
    }
    let no_dev = data.dev.is_empty();
    let reports = fit::<Error, _>(
        &mut model,
        &data,
        &tcfg,
        &mut state,
        |report, model, state| {
            writeln!(log, "{}", epoch_line(report)).map_err(Error::io(&log_path))?;
            save(LAST_CHECKPOINT, model, state)?;
            if report.improved || no_dev {
                save(BEST_CHECKPOINT, model, state)?;
            }
            Ok(ControlFlow::Continue(()))
        },
    )?;
    Ok(TrainOutcome {
        reports,
        state,
        model,
    })
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub results: Vec<RankingResult>,
    pub clips: Vec<EvalClip>,
}

/// Ranks every clip of `split` against its candidate set and writes
/// `metrics.jsonl`, `audit.jsonl` and `config.txt` to `out_dir`.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, split: &str) -> Result<EvalOutcome> {
    let ck = Checkpoint::load(checkpoint)?;
    let corpus = Corpus::load(&cfg.data_dir, Some(ck.model.config().vision_dim))?;
    check_vocab(&ck, &corpus.vocab)?;
    let records = corpus.split(&cfg.data_dir, split)?;
    let clips = corpus.eval_set(&records, cfg.candidates, cfg.seed)?;
    if clips.is_empty() {
        return Err(Error::Data(format!(
            "split {split} has no ground-truth clips"
        )));
    }
    let (report, results) = evaluate_model(&ck.model, &clips)?;
    let out = &cfg.out_dir;
    write_config(out, cfg)?;
    let metrics = out.join(METRICS_FILE);
    let line = metric_line(split, cfg.seed, cfg.candidates, &report);
    fs::write(&metrics, format!("{line}\n")).map_err(Error::io(&metrics))?;
    let audit = out.join(AUDIT_FILE);
    fs::write(&audit, audit_lines(&clips, &results)).map_err(Error::io(&audit))?;
    Ok(EvalOutcome {
        report,
        results,
        clips,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedCandidate {
    pub rank: usize,
    pub score: f64,
    pub candidate: String,
    pub ground_truth: bool,
}

/// Scores each line of `candidates_file` against the single clip in
/// `clip_file` and returns them best first. A clip labelled as ground truth
/// flags the candidate equal to its own comment.
pub fn rank(
    cfg: &RunConfig,
    checkpoint: &Path,
    clip_file: &Path,
    candidates_file: &Path,
) -> Result<Vec<RankedCandidate>> {
    let ck = Checkpoint::load(checkpoint)?;
    let vocab = load_vocab(&cfg.data_dir.join(VOCAB_FILE))?;
    check_vocab(&ck, &vocab)?;
    let mut clips = load_clips(clip_file, AUDIO_DIM, Some(ck.model.config().vision_dim))?;
    if clips.len() != 1 {
        return Err(Error::Data(format!(
            "{}: expected exactly one clip record, found {}",
            clip_file.display(),
            clips.len()
        )));
    }
    let record = clips.remove(0);
    let candidates = load_comments(candidates_file)?;
    if candidates.is_empty() {
        return Err(Error::Data(format!(
            "{}: no candidates",
            candidates_file.display()
        )));
    }
    let clip = EncodedClip::from_record(&record, &vocab)?;
    let scores = candidates
        .iter()
        .map(|c| {
            ck.model.score(
                &clip.input(),
                &EncodedCandidate::from_tokens(c, &vocab).input(),
            )
        })
        .collect::<livematch_core::Result<Vec<f64>>>()?;
    let ranked = rank_scores(&record.clip_id, scores, 0)?;
    Ok(ranked
        .order
        .iter()
        .enumerate()
        .map(|(pos, &i)| RankedCandidate {
            rank: pos + 1,
            score: ranked.scores[i],
            candidate: detokenize(&candidates[i]),
            ground_truth: record.is_ground_truth && candidates[i] == record.candidate,
        })
        .collect())
}

/// Finite-difference check of the full loss on a tiny model built from
/// `cfg`'s dimensions and a four-clip synthetic corpus.
pub fn gradcheck(cfg: &RunConfig, fault: Option<OpKind>) -> Result<ModelGradcheck> {
    let synth = SynthConfig::default();
    let corpus = generate(cfg.seed, 4, &synth)?;
    let vocab = corpus.vocabulary()?;
    let model_cfg = ModelConfig {
        dropout: 0.0,
        ..cfg.model_config(vocab.len(), synth.vision_dim)
    };
    let model = MatchingModel::new(model_cfg, cfg.seed)?;
    let data = TrainData::new(&corpus.clips, Vec::new(), &vocab)?;
    let negative = data
        .positives
        .iter()
        .find(|c| **c != data.positives[0])
        .ok_or_else(|| Error::Data("synthetic clips share one comment".into()))?;
    let opts = GradcheckOptions {
        seed: cfg.seed,
        fault,
        ..GradcheckOptions::default()
    };
    Ok(check_model_gradients(
        &model,
        &data.clips[0],
        &data.positives[0],
        negative,
        &opts,
    )?)
}

/// Default dimensions for `gradcheck` when no flag overrides them.
pub fn gradcheck_defaults() -> [(&'static str, String); 4] {
    [
        ("dim", "8".into()),
        ("heads", "2".into()),
        ("blocks", "2".into()),
        ("ffn_dim", "16".into()),
    ]
}
