//! Flat `key = value` run configuration.
//!
//! Resolution order, later wins: profile defaults, command defaults, config
//! file, command-line flags. The profile itself is taken from the flags, else the file, else
//! `desk`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use livematch_core::corpus::AUDIO_DIM;
use livematch_core::training::{AdamConfig, TrainConfig};
use livematch_core::{CrossTopology, Modalities, ModelConfig};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(format!("unknown profile {s:?} (expected desk or paper)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Clips generated by `synth`.
    pub n_clips: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub min_lr: f64,
    pub halve_on_drop: bool,
    pub margin: f64,
    pub batch_size: usize,
    pub negatives_per_clip: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Candidate-set size for evaluation.
    pub candidates: usize,
    pub modalities: Modalities,
    pub topology: CrossTopology,
}

/// Keys in dump order.
pub const KEYS: [&str; 23] = [
    "profile",
    "seed",
    "data_dir",
    "out_dir",
    "n_clips",
    "max_epochs",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "min_lr",
    "halve_on_drop",
    "margin",
    "batch_size",
    "negatives_per_clip",
    "dim",
    "heads",
    "blocks",
    "ffn_dim",
    "dropout",
    "candidates",
    "modalities",
    "topology",
];

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let train = TrainConfig::default();
        let (dim, heads, blocks, ffn_dim) = match profile {
            Profile::Desk => (32, 2, 2, 64),
            Profile::Paper => (512, 8, 6, 2048),
        };
        RunConfig {
            profile,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            n_clips: 500,
            max_epochs: train.max_epochs,
            lr: train.adam.lr,
            beta1: train.adam.beta1,
            beta2: train.adam.beta2,
            adam_eps: train.adam.eps,
            min_lr: train.min_lr,
            halve_on_drop: train.halve_on_drop,
            margin: train.margin,
            batch_size: train.batch_size,
            negatives_per_clip: train.negatives_per_clip,
            dim,
            heads,
            blocks,
            ffn_dim,
            dropout: 0.2,
            candidates: train.dev_candidates,
            modalities: Modalities::ALL,
            topology: CrossTopology::Symmetric,
        }
    }

    /// Layers command defaults, a config file's text (if any) and flag
    /// overrides over the profile, then validates. Every problem is reported
    /// at once.
    pub fn resolve(
        defaults: &[(&str, String)],
        file: Option<(&Path, &str)>,
        flags: &[(&str, String)],
    ) -> Result<Self> {
        let mut problems = Vec::new();
        let file_pairs = match file {
            Some((path, text)) => parse_pairs(path, text)?,
            None => Vec::new(),
        };
        let profile_value = flags
            .iter()
            .rev()
            .find(|(k, _)| *k == "profile")
            .map(|(_, v)| v.clone())
            .or_else(|| {
                file_pairs
                    .iter()
                    .rev()
                    .find(|(k, _)| k == "profile")
                    .map(|(_, v)| v.clone())
            });
        let profile = match profile_value.as_deref().map(Profile::from_str) {
            None => Profile::Desk,
            Some(Ok(p)) => p,
            Some(Err(e)) => {
                problems.push(e);
                Profile::Desk
            }
        };
        let mut cfg = RunConfig::for_profile(profile);
        for (key, value) in defaults
            .iter()
            .map(|(k, v)| (*k, v.as_str()))
            .chain(file_pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .chain(flags.iter().map(|(k, v)| (*k, v.as_str())))
        {
            if let Err(e) = cfg.set(key, value) {
                problems.push(e);
            }
        }
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Usage(format!(
                "invalid configuration:\n  {}",
                problems.join("\n  ")
            )))
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("{key}: cannot parse {value:?}"))
        }
        match key {
            "profile" => self.profile = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "n_clips" => self.n_clips = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "min_lr" => self.min_lr = num(key, value)?,
            "halve_on_drop" => self.halve_on_drop = num(key, value)?,
            "margin" => self.margin = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "negatives_per_clip" => self.negatives_per_clip = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "ffn_dim" => self.ffn_dim = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "candidates" => self.candidates = num(key, value)?,
            "modalities" => self.modalities = parse_modalities(value)?,
            "topology" => {
                self.topology = match value {
                    "symmetric" => CrossTopology::Symmetric,
                    "context-independent" => CrossTopology::ContextIndependent,
                    _ => return Err(format!("topology: unknown value {value:?}")),
                }
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Err(e) = self.train_config().validate() {
            p.push(e.to_string());
        }
        // vocabulary size and vision width come from the data; stand-ins here
        if let Err(e) = self.model_config(3, 1).validate() {
            p.push(e.to_string());
        }
        if self.candidates < 2 {
            p.push(format!("candidates {} must be at least 2", self.candidates));
        }
        p
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            margin: self.margin,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            batch_size: self.batch_size,
            negatives_per_clip: self.negatives_per_clip,
            max_epochs: self.max_epochs,
            seed: self.seed,
            dev_candidates: self.candidates,
            min_lr: self.min_lr,
            halve_on_drop: self.halve_on_drop,
        }
    }

    pub fn model_config(&self, vocab_size: usize, vision_dim: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            dim: self.dim,
            heads: self.heads,
            blocks: self.blocks,
            ffn_dim: self.ffn_dim,
            vision_dim,
            audio_dim: AUDIO_DIM,
            dropout: self.dropout,
            modalities: self.modalities,
            topology: self.topology,
        }
    }

    fn value(&self, key: &str) -> String {
        match key {
            "profile" => self.profile.name().into(),
            "seed" => self.seed.to_string(),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "n_clips" => self.n_clips.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "lr" => self.lr.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "min_lr" => self.min_lr.to_string(),
            "halve_on_drop" => self.halve_on_drop.to_string(),
            "margin" => self.margin.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "negatives_per_clip" => self.negatives_per_clip.to_string(),
            "dim" => self.dim.to_string(),
            "heads" => self.heads.to_string(),
            "blocks" => self.blocks.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "dropout" => self.dropout.to_string(),
            "candidates" => self.candidates.to_string(),
            "modalities" => modalities_text(self.modalities),
            "topology" => match self.topology {
                CrossTopology::Symmetric => "symmetric".into(),
                CrossTopology::ContextIndependent => "context-independent".into(),
            },
            _ => unreachable!("key list is closed"),
        }
    }

    /// Every key, one `key = value` line each, in [`KEYS`] order. Reading the
    /// text back yields an identical config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value(key));
        }
        out
    }
}

fn parse_modalities(value: &str) -> Result<Modalities, String> {
    let mut m = Modalities {
        text: false,
        vision: false,
        audio: false,
    };
    for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match part {
            "text" => m.text = true,
            "vision" => m.vision = true,
            "audio" => m.audio = true,
            _ => return Err(format!("modalities: unknown modality {part:?}")),
        }
    }
    Ok(m)
}

fn modalities_text(m: Modalities) -> String {
    [(m.text, "text"), (m.vision, "vision"), (m.audio, "audio")]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, name)| *name)
        .collect::<Vec<_>>()
        .join(",")
}

/// `key = value` lines; `#` starts a comment, blank lines are ignored.
fn parse_pairs(path: &Path, text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::parse(path, i + 1, format!("expected key = value, got {raw:?}"))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::parse(path, i + 1, "empty key"));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}
