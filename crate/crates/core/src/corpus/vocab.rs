use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::ClipRecord;
use crate::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token ↔ id map. Ids 0 and 1 are reserved for padding and unknown tokens;
/// corpus tokens start at 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary whose corpus tokens get ids `2, 3, ...` in the
    /// given order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            ids: BTreeMap::new(),
            tokens: Vec::new(),
        };
        v.tokens.push(PAD_TOKEN.to_string());
        v.tokens.push(UNK_TOKEN.to_string());
        for tok in tokens {
            let tok = tok.into();
            if tok == PAD_TOKEN || tok == UNK_TOKEN || tok.is_empty() {
                return Err(Error::Parameter(alloc::format!(
                    "reserved or empty token {tok:?} in vocabulary"
                )));
            }
            if v.ids.contains_key(&tok) {
                return Err(Error::Parameter(alloc::format!(
                    "duplicate vocabulary token {tok:?}"
                )));
            }
            v.ids.insert(tok.clone(), v.tokens.len());
            v.tokens.push(tok);
        }
        Ok(v)
    }

    /// Size including the two reserved entries.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Corpus tokens in id order, without the reserved entries.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }

    /// FNV-1a over the corpus tokens in id order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for tok in self.corpus_tokens() {
            for b in tok.as_bytes().iter().chain(core::iter::once(&0xffu8)) {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Counts token frequencies, then orders them by descending count with
/// lexicographic tie-break.
#[derive(Clone, Debug, Default)]
pub struct VocabBuilder {
    counts: BTreeMap<String, usize>,
    seen_any: bool,
}

impl VocabBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<'a>(&mut self, tokens: impl IntoIterator<Item = &'a String>) {
        self.seen_any = true;
        for t in tokens {
            *self.counts.entry(t.clone()).or_insert(0) += 1;
        }
    }

    pub fn add_record(&mut self, record: &ClipRecord) {
        self.add(record.comment_tokens());
        self.add(&record.candidate);
    }

    pub fn finish(self, min_count: usize) -> Result<Vocabulary> {
        if min_count == 0 {
            return Err(Error::Parameter("min_count must be at least 1".into()));
        }
        if !self.seen_any {
            return Err(Error::EmptyCorpus);
        }
        let mut entries: Vec<(String, usize)> = self
            .counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        // BTreeMap iteration is already lexicographic, and the sort is stable.
        entries.sort_by_key(|e| core::cmp::Reverse(e.1));
        Vocabulary::from_tokens(entries.into_iter().map(|(t, _)| t))
    }
}

/// Vocabulary over the surrounding comments and candidates of `records`.
pub fn build_vocab<'a>(
    records: impl IntoIterator<Item = &'a ClipRecord>,
    min_count: usize,
) -> Result<Vocabulary> {
    let mut b = VocabBuilder::new();
    let mut any = false;
    for r in records {
        any = true;
        b.add_record(r);
    }
    if !any {
        return Err(Error::EmptyCorpus);
    }
    b.finish(min_count)
}
