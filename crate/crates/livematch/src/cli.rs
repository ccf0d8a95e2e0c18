//! Argument parsing and dispatch for the `livematch` binary.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use livematch_core::autodiff::OpKind;

use crate::commands;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::report::metric_table;

#[derive(Debug, Parser)]
#[command(
    name = "livematch",
    version,
    about = "Rank live comments for video clips"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus (train/dev/test, pool, vocabulary) to --data-dir.
    Synth {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a model on --data-dir, writing checkpoints and logs to --out-dir.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rank every clip of a split against its candidate set.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Rank a list of comments for one clip.
    Rank {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// File holding one clip record.
        #[arg(long)]
        clip: PathBuf,
        /// One candidate comment per line.
        #[arg(long = "candidates-file")]
        candidates_file: PathBuf,
    },
    /// Check analytic gradients of a tiny model against finite differences.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        /// Corrupt the backward rule of one operation.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

/// Settings shared by every command; each maps onto a config key.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub n_clips: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Candidate-set size.
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Comma-separated subset of text,vision,audio.
    #[arg(long)]
    pub modalities: Option<String>,
    /// Keep the learning rate constant instead of halving it on dev drops.
    #[arg(long)]
    pub no_lr_halving: bool,
}

impl RunArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut p = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                p.push((k, v));
            }
        };
        let path = |v: &Option<PathBuf>| v.as_ref().map(|x| x.display().to_string());
        put("profile", self.profile.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        put("data_dir", path(&self.data_dir));
        put("out_dir", path(&self.out_dir));
        put("n_clips", self.n_clips.map(|v| v.to_string()));
        put("max_epochs", self.max_epochs.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("margin", self.margin.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("dim", self.dim.map(|v| v.to_string()));
        put("heads", self.heads.map(|v| v.to_string()));
        put("blocks", self.blocks.map(|v| v.to_string()));
        put("ffn_dim", self.ffn_dim.map(|v| v.to_string()));
        put("dropout", self.dropout.map(|v| v.to_string()));
        put("candidates", self.candidates.map(|v| v.to_string()));
        put("modalities", self.modalities.clone());
        put(
            "halve_on_drop",
            self.no_lr_halving.then(|| "false".to_string()),
        );
        p
    }

    /// Resolves config file and flags; `defaults` sit between the profile
    /// and the config file.
    pub fn resolve(&self, defaults: &[(&'static str, String)]) -> Result<RunConfig> {
        let text = match &self.config {
            Some(path) => Some(fs::read_to_string(path).map_err(Error::io(path))?),
            None => None,
        };
        RunConfig::resolve(
            defaults,
            self.config.as_deref().zip(text.as_deref()),
            &self.pairs(),
        )
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth { run } => {
            let cfg = run.resolve(&[])?;
            commands::synth(&cfg)?;
            println!("wrote synthetic corpus to {}", cfg.data_dir.display());
        }
        Command::Train { run, resume } => {
            let cfg = run.resolve(&[])?;
            let out = commands::train(&cfg, resume.as_deref())?;
            for r in &out.reports {
                let dev = r
                    .dev_recall_at_1
                    .map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "epoch {:>3}  loss {:.6}  dev R@1 {dev}  lr {:e}",
                    r.epoch, r.mean_loss, r.lr
                );
            }
            println!("checkpoints in {}", cfg.out_dir.display());
        }
        Command::Eval {
            run,
            checkpoint,
            split,
        } => {
            let cfg = run.resolve(&[])?;
            let out = commands::eval(&cfg, &checkpoint, &split)?;
            print!("{}", metric_table(&split, &out.report));
        }
        Command::Rank {
            run,
            checkpoint,
            clip,
            candidates_file,
        } => {
            let cfg = run.resolve(&[])?;
            for r in commands::rank(&cfg, &checkpoint, &clip, &candidates_file)? {
                let flag = if r.ground_truth { "\t*" } else { "" };
                println!("{}\t{:+.6}\t{}{flag}", r.rank, r.score, r.candidate);
            }
        }
        Command::Gradcheck { run, inject_fault } => {
            let cfg = run.resolve(&commands::gradcheck_defaults())?;
            let fault = inject_fault
                .map(|name| {
                    OpKind::parse(&name)
                        .ok_or_else(|| Error::Usage(format!("unknown operation {name:?}")))
                })
                .transpose()?;
            let report = commands::gradcheck(&cfg, fault)?;
            println!(
                "dim {} heads {} blocks {} ffn {}",
                cfg.dim, cfg.heads, cfg.blocks, cfg.ffn_dim
            );
            for g in &report.groups {
                println!(
                    "{:<18} checked {:>3}  excluded {:>2}  max rel err {:.3e}  {}",
                    g.group.name(),
                    g.checked,
                    g.excluded,
                    g.max_rel_error,
                    if g.passed { "ok" } else { "FAIL" }
                );
            }
            if !report.passed() {
                println!("gradient check failed");
                return Ok(3);
            }
            println!("gradient check passed");
        }
    }
    Ok(0)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
