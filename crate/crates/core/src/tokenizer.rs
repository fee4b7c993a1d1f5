//! Word-level tokenizer with T5-style reserved tokens.
//!
//! Normalization lowercases, splits on whitespace and turns every character
//! that is neither alphanumeric nor whitespace into its own token. Sentinel
//! literals `<extra_id_i>` are recognized before punctuation splitting.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;
pub const N_SENTINELS: usize = 100;
pub const FIRST_SENTINEL: TokenId = 3;
pub const N_RESERVED: usize = 3 + N_SENTINELS;

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

pub fn sentinel_id(i: usize) -> TokenId {
    assert!(i < N_SENTINELS, "sentinel index {i} out of range");
    FIRST_SENTINEL + i as TokenId
}

pub fn is_sentinel(id: TokenId) -> bool {
    (FIRST_SENTINEL..FIRST_SENTINEL + N_SENTINELS as TokenId).contains(&id)
}

fn sentinel_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<extra_id_(\d{1,2})>").unwrap())
}

/// A piece of normalized text: either a sentinel index or a plain token.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Sentinel(usize),
    Word(String),
}

fn split_words(text: &str, out: &mut Vec<Piece>) {
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(Piece::Word(std::mem::take(&mut word)));
                }
                out.push(Piece::Word(ch.to_lowercase().collect()));
            }
        }
        if !word.is_empty() {
            out.push(Piece::Word(word));
        }
    }
}

fn pieces(text: &str) -> Vec<Piece> {
    let mut out = Vec::new();
    let mut last = 0;
    for caps in sentinel_regex().captures_iter(text) {
        let m = caps.get(0).unwrap();
        let idx: usize = caps[1].parse().unwrap();
        split_words(&text[last..m.start()], &mut out);
        out.push(Piece::Sentinel(idx));
        last = m.end();
    }
    split_words(&text[last..], &mut out);
    out
}

/// Normalized plain tokens of `text` (sentinel literals excluded).
pub fn normalize(text: &str) -> Vec<String> {
    pieces(text)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Word(w) => Some(w),
            Piece::Sentinel(_) => None,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn reserved() -> Vec<String> {
        let mut tokens = vec![PAD_TOKEN.to_string(), EOS_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend((0..N_SENTINELS).map(|i| format!("<extra_id_{i}>")));
        tokens
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Builds a vocabulary: reserved tokens first, then natural tokens by
    /// descending frequency with lexicographic tie-break, capped at `max_size`.
    pub fn build<S: AsRef<str>>(texts: &[S], min_freq: usize, max_size: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        if max_size <= N_RESERVED {
            return Err(Error::Config(format!("max_size must exceed {N_RESERVED}")));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for word in normalize(text.as_ref()) {
                *counts.entry(word).or_insert(0) += 1;
            }
        }
        let reserved = Self::reserved();
        let mut natural: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq && !reserved.contains(w))
            .collect();
        natural.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = reserved;
        tokens.extend(natural.into_iter().take(max_size - N_RESERVED).map(|(w, _)| w));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Natural tokens only, in id order.
    pub fn natural_tokens(&self) -> &[String] {
        &self.tokens[N_RESERVED..]
    }

    /// Maps text to ids; unknown words become UNK. Never emits PAD or EOS.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        pieces(text)
            .into_iter()
            .map(|p| match p {
                Piece::Sentinel(i) => sentinel_id(i),
                Piece::Word(w) => self.index.get(&w).copied().unwrap_or(UNK),
            })
            .collect()
    }

    /// Joins tokens with single spaces, dropping PAD and stopping at EOS.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if id == PAD {
                continue;
            }
            let tok = self.token(id).ok_or(Error::UnassignedToken {
                id,
                size: self.len(),
            })?;
            words.push(tok);
        }
        Ok(words.join(" "))
    }

    /// One token per line in id order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        let reserved = Self::reserved();
        if tokens.len() < N_RESERVED || tokens[..N_RESERVED] != reserved[..] {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: "vocabulary does not start with the reserved tokens".into(),
            });
        }
        Self::from_tokens(tokens)
    }
}
