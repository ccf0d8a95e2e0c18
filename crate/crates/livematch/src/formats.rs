//! Clip record files (one JSON object per line) and the plain-text vocabulary
//! and comment-list files.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use livematch_core::corpus::{detokenize, tokenize, ClipRecord, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk shape of a clip record. Comments are stored as text and tokenized
/// on load.
#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    clip_id: String,
    timestamp_s: u64,
    surrounding: Vec<String>,
    vision: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
    candidate: String,
    is_ground_truth: bool,
}

impl From<&ClipRecord> for RecordLine {
    fn from(r: &ClipRecord) -> Self {
        RecordLine {
            clip_id: r.clip_id.clone(),
            timestamp_s: r.timestamp_s,
            surrounding: r.surrounding.iter().map(|c| detokenize(c)).collect(),
            vision: r.vision.clone(),
            audio: r.audio.clone(),
            candidate: detokenize(&r.candidate),
            is_ground_truth: r.is_ground_truth,
        }
    }
}

impl From<RecordLine> for ClipRecord {
    fn from(l: RecordLine) -> Self {
        ClipRecord {
            clip_id: l.clip_id,
            timestamp_s: l.timestamp_s,
            surrounding: l.surrounding.iter().map(|c| tokenize(c)).collect(),
            vision: l.vision,
            audio: l.audio,
            candidate: tokenize(&l.candidate),
            is_ground_truth: l.is_ground_truth,
        }
    }
}

/// Parses record lines. Blank lines are skipped. The first record pins the
/// vision width unless `vision_dim` does; every record is validated and
/// errors carry the 1-based line number.
pub fn parse_clips(
    text: &str,
    path: &Path,
    audio_dim: usize,
    vision_dim: Option<usize>,
) -> Result<Vec<ClipRecord>> {
    let mut out = Vec::new();
    let mut dv = vision_dim;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine =
            serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e))?;
        let record = ClipRecord::from(parsed);
        record
            .validate(audio_dim, dv)
            .map_err(|e| Error::parse(path, i + 1, e))?;
        dv = dv.or(record.vision_dim());
        out.push(record);
    }
    Ok(out)
}

pub fn load_clips(
    path: &Path,
    audio_dim: usize,
    vision_dim: Option<usize>,
) -> Result<Vec<ClipRecord>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_clips(&text, path, audio_dim, vision_dim)
}

pub fn write_clips(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&RecordLine::from(r)).expect("records serialize");
        writeln!(w, "{line}").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// One comment per line, stored as text.
pub fn write_comments(path: &Path, comments: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    for c in comments {
        text.push_str(&detokenize(c));
        text.push('\n');
    }
    fs::write(path, text).map_err(Error::io(path))
}

/// Reads a comment-per-line file; blank lines are an error since they would
/// tokenize to an empty comment.
pub fn load_comments(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let toks = tokenize(line);
            if toks.is_empty() {
                return Err(Error::parse(path, i + 1, "empty comment"));
            }
            Ok(toks)
        })
        .collect()
}

/// Corpus tokens one per line; line `n` (1-based) holds id `n + 1`.
pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut text = String::new();
    for t in vocab.corpus_tokens() {
        text.push_str(t);
        text.push('\n');
    }
    fs::write(path, text).map_err(Error::io(path))
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.chars().any(char::is_whitespace) {
            return Err(Error::parse(path, i + 1, format!("invalid token {line:?}")));
        }
        if !seen.insert(line) {
            return Err(Error::parse(
                path,
                i + 1,
                format!("duplicate token {line:?}"),
            ));
        }
    }
    Vocabulary::from_tokens(text.lines())
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
