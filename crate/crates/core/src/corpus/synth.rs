//! Synthetic corpus whose ground-truth comments are predictable from the clip.
//!
//! Every clip draws three independent topics: one planted in the vision
//! features (prototype mean plus noise), one in the audio frames, and one in
//! the surrounding comments. The ground-truth comment names all three. The
//! comment-side words for the text topic are disjoint from the words the
//! surrounding comments use, so a model has to learn the association rather
//! than copy tokens.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{ClipRecord, VocabBuilder, Vocabulary, AUDIO_DIM};
use crate::math::standard_normal;
use crate::{seeded_rng, Error, Result, SeededRng};

const VISION_WORDS: [[&str; 2]; 8] = [
    ["cat", "kitty"],
    ["dog", "puppy"],
    ["car", "truck"],
    ["sea", "ocean"],
    ["fire", "flame"],
    ["snow", "ice"],
    ["tree", "forest"],
    ["bird", "eagle"],
];
const AUDIO_WORDS: [[&str; 2]; 8] = [
    ["music", "melody"],
    ["drum", "beat"],
    ["scream", "shout"],
    ["rain", "thunder"],
    ["guitar", "piano"],
    ["laugh", "giggle"],
    ["engine", "motor"],
    ["song", "singing"],
];
/// Text-topic words used inside candidate comments.
const MOOD_WORDS: [[&str; 2]; 8] = [
    ["cute", "adorable"],
    ["scary", "creepy"],
    ["funny", "hilarious"],
    ["sad", "crying"],
    ["cool", "awesome"],
    ["weird", "strange"],
    ["epic", "legendary"],
    ["boring", "sleepy"],
];
/// Text-topic words used inside surrounding comments.
const CHAT_MOOD_WORDS: [[&str; 2]; 8] = [
    ["aww", "sweet"],
    ["help", "run"],
    ["lmao", "rofl"],
    ["tears", "sob"],
    ["nice", "wow"],
    ["huh", "what"],
    ["goat", "insane"],
    ["yawn", "zzz"],
];
const FILLERS: [&str; 12] = [
    "this", "is", "so", "the", "a", "look", "at", "that", "really", "very", "my", "here",
];
const CHATTER: [&str; 12] = [
    "lol", "hi", "again", "first", "anyone", "watching", "in", "2024", "same", "me", "too", "who",
];
const POPULAR_WORDS: [&str; 16] = [
    "666", "hahaha", "2333", "gg", "omg", "yes", "bravo", "replay", "legend", "clap", "wait",
    "bro", "ok", "lit", "oof", "yay",
];

/// Largest supported `n_topics`.
pub const MAX_TOPICS: usize = 8;
/// Number of designated popular comments.
pub const N_POPULAR: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_topics: usize,
    /// Surrounding comments per clip.
    pub n_comments: usize,
    pub n_frames: usize,
    pub vision_dim: usize,
    pub audio_frames: usize,
    /// Standard deviation of the noise added to feature prototypes.
    pub feature_noise: f64,
    /// Probability that a surrounding comment carries the text topic.
    pub topic_comment_rate: f64,
    /// Probability that a clip's ground truth is a popular comment, which
    /// carries no topic signal.
    pub popular_gt_rate: f64,
    /// Distractor pool size; 0 picks `max(200, 2 * n_clips)`.
    pub pool_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_topics: 5,
            n_comments: 5,
            n_frames: 5,
            vision_dim: 32,
            audio_frames: 20,
            feature_noise: 0.5,
            topic_comment_rate: 0.6,
            popular_gt_rate: 0.05,
            pool_size: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_topics == 0 || self.n_topics > MAX_TOPICS {
            problems.push(format!("n_topics must be in 1..={MAX_TOPICS}"));
        }
        if self.n_comments == 0 {
            problems.push("n_comments must be positive".to_string());
        }
        if self.n_frames == 0 || self.vision_dim == 0 {
            problems.push("n_frames and vision_dim must be positive".to_string());
        }
        if self.audio_frames < super::AUDIO_SLICES {
            problems.push(format!(
                "audio_frames must be at least {}",
                super::AUDIO_SLICES
            ));
        }
        for (name, p) in [
            ("topic_comment_rate", self.topic_comment_rate),
            ("popular_gt_rate", self.popular_gt_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                problems.push(format!("{name} must be in [0, 1]"));
            }
        }
        if self.feature_noise.is_nan() || self.feature_noise < 0.0 {
            problems.push("feature_noise must be non-negative".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(problems.join("; ")))
        }
    }
}

/// Generator-side labels for one clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipTruth {
    pub vision_topic: usize,
    pub audio_topic: usize,
    pub text_topic: usize,
    /// The ground truth is a popular comment rather than a topic comment.
    pub popular_gt: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    /// Ground-truth records, one per clip.
    pub clips: Vec<ClipRecord>,
    pub truth: Vec<ClipTruth>,
    /// Distinct distractor comments, popular ones included.
    pub pool: Vec<Vec<String>>,
    pub popular: Vec<Vec<String>>,
    pub vision_prototypes: Vec<Vec<f64>>,
    pub audio_prototypes: Vec<Vec<f64>>,
}

/// Train/dev/test sizes for `n` clips: 80/10/10, with dev and test holding at
/// least one clip once `n >= 3`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    if n < 3 {
        return (n, 0, 0);
    }
    let held = (n / 10).max(1);
    (n - 2 * held, held, held)
}

impl SynthCorpus {
    /// Splits the clips into train/dev/test by position.
    pub fn split(&self) -> [&[ClipRecord]; 3] {
        let (tr, dv, _) = split_sizes(self.clips.len());
        let (train, rest) = self.clips.split_at(tr);
        let (dev, test) = rest.split_at(dv);
        [train, dev, test]
    }

    /// Vocabulary over the training split and the distractor pool.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        let mut b = VocabBuilder::new();
        for r in self.split()[0] {
            b.add_record(r);
        }
        for c in &self.pool {
            b.add(c);
        }
        b.finish(1)
    }
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, words: &[&'a str]) -> &'a str {
    words[rng.gen_range(0..words.len())]
}

fn prototypes(rng: &mut SeededRng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| standard_normal(rng)).collect())
        .collect()
}

fn noisy_frames(rng: &mut SeededRng, proto: &[f64], n: usize, noise: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            proto
                .iter()
                .map(|m| m + noise * standard_normal(rng))
                .collect()
        })
        .collect()
}

/// A comment naming the given topic triple.
fn topic_comment(rng: &mut SeededRng, tv: usize, ta: usize, tt: usize) -> Vec<String> {
    let mut words = vec![
        pick(rng, &VISION_WORDS[tv]),
        pick(rng, &AUDIO_WORDS[ta]),
        pick(rng, &MOOD_WORDS[tt]),
    ];
    for _ in 0..rng.gen_range(1..=3) {
        words.push(pick(rng, &FILLERS));
    }
    words.shuffle(rng);
    if rng.gen_bool(0.4) {
        words.push("!");
    }
    words.into_iter().map(String::from).collect()
}

fn popular_comments(rng: &mut SeededRng) -> Vec<Vec<String>> {
    let mut seen = BTreeSet::new();
    while seen.len() < N_POPULAR {
        let len = rng.gen_range(4..=7);
        let c: Vec<String> = (0..len)
            .map(|_| pick(rng, &POPULAR_WORDS).to_string())
            .collect();
        seen.insert(c);
    }
    let mut out: Vec<_> = seen.into_iter().collect();
    out.shuffle(rng);
    out
}

/// Zipf(1) draw over `n` ranks.
fn zipf_index(rng: &mut SeededRng, n: usize) -> usize {
    let total: f64 = (1..=n).map(|r| 1.0 / r as f64).sum();
    let mut u = rng.gen::<f64>() * total;
    for r in 1..=n {
        u -= 1.0 / r as f64;
        if u <= 0.0 {
            return r - 1;
        }
    }
    n - 1
}

fn surrounding_comment(
    rng: &mut SeededRng,
    cfg: &SynthConfig,
    tt: usize,
    popular: &[Vec<String>],
) -> Vec<String> {
    if rng.gen_bool(cfg.topic_comment_rate) {
        let mut words = vec![pick(rng, &CHAT_MOOD_WORDS[tt])];
        for _ in 0..rng.gen_range(1..=3) {
            words.push(pick(rng, &CHATTER));
        }
        words.shuffle(rng);
        words.into_iter().map(String::from).collect()
    } else if rng.gen_bool(0.5) {
        popular[rng.gen_range(0..popular.len())].clone()
    } else {
        (0..rng.gen_range(2..=4))
            .map(|_| pick(rng, &CHATTER).to_string())
            .collect()
    }
}

/// Generates `n_clips` ground-truth records and a distractor pool. The output
/// is a pure function of `(seed, n_clips, cfg)`.
pub fn generate(seed: u64, n_clips: usize, cfg: &SynthConfig) -> Result<SynthCorpus> {
    if n_clips == 0 {
        return Err(Error::Parameter("n_clips must be at least 1".into()));
    }
    cfg.validate()?;
    let mut rng = seeded_rng(seed, 0);
    let vision_prototypes = prototypes(&mut rng, cfg.n_topics, cfg.vision_dim);
    let audio_prototypes = prototypes(&mut rng, cfg.n_topics, AUDIO_DIM);
    let popular = popular_comments(&mut rng);

    let mut clips = Vec::with_capacity(n_clips);
    let mut truth = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let mut rng = seeded_rng(seed, 1 + i as u64);
        let t = ClipTruth {
            vision_topic: rng.gen_range(0..cfg.n_topics),
            audio_topic: rng.gen_range(0..cfg.n_topics),
            text_topic: rng.gen_range(0..cfg.n_topics),
            popular_gt: rng.gen_bool(cfg.popular_gt_rate),
        };
        let surrounding = (0..cfg.n_comments)
            .map(|_| surrounding_comment(&mut rng, cfg, t.text_topic, &popular))
            .collect();
        let vision = noisy_frames(
            &mut rng,
            &vision_prototypes[t.vision_topic],
            cfg.n_frames,
            cfg.feature_noise,
        );
        let audio = noisy_frames(
            &mut rng,
            &audio_prototypes[t.audio_topic],
            cfg.audio_frames,
            cfg.feature_noise,
        );
        let candidate = if t.popular_gt {
            popular[zipf_index(&mut rng, popular.len())].clone()
        } else {
            topic_comment(&mut rng, t.vision_topic, t.audio_topic, t.text_topic)
        };
        clips.push(ClipRecord {
            clip_id: format!("clip{i:05}"),
            timestamp_s: 7 * i as u64,
            surrounding,
            vision,
            audio,
            candidate,
            is_ground_truth: true,
        });
        truth.push(t);
    }

    let pool_size = if cfg.pool_size == 0 {
        (2 * n_clips).max(200)
    } else {
        cfg.pool_size.max(N_POPULAR + 1)
    };
    let mut rng = seeded_rng(seed, u64::MAX);
    let mut seen: BTreeSet<Vec<String>> = popular.iter().cloned().collect();
    let mut pool = popular.clone();
    let mut attempts = 0usize;
    while pool.len() < pool_size {
        attempts += 1;
        if attempts > 100 * pool_size {
            return Err(Error::Parameter(format!(
                "cannot draw {pool_size} distinct distractors"
            )));
        }
        let [tv, ta, tt] = [(); 3].map(|_| rng.gen_range(0..cfg.n_topics));
        let c = topic_comment(&mut rng, tv, ta, tt);
        if seen.insert(c.clone()) {
            pool.push(c);
        }
    }

    Ok(SynthCorpus {
        clips,
        truth,
        pool,
        popular,
        vision_prototypes,
        audio_prototypes,
    })
}
