use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{CcrError, Result};

use super::TokenizedQuery;

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const UNK_ID: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<mask>", "<unk>"];

pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "the", "in", "on", "at", "of", "to", "and", "or", "with", "is", "are", "was",
    "his", "her", "their", "its", "into", "from", "by", "for", "up", "down", "then",
];

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
    stop: Vec<bool>,
}

impl Vocab {
    /// Vocabulary over the given words (after the reserved ids), in order.
    pub fn from_words<I, S>(words: I, stopwords: &[&str]) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, usize> =
            all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        for w in words {
            let w = w.into();
            if !ids.contains_key(&w) {
                ids.insert(w.clone(), all.len());
                all.push(w);
            }
        }
        let stopset: BTreeSet<&str> = stopwords.iter().copied().collect();
        let stop = all
            .iter()
            .enumerate()
            .map(|(i, w)| i < RESERVED.len() || stopset.contains(w.as_str()))
            .collect();
        Self {
            words: all,
            ids,
            stop,
        }
    }

    /// Every token of the training texts (min frequency 1), sorted for a
    /// deterministic id assignment.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, stopwords: &[&str]) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        Self::from_words(words, stopwords)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Reserved ids and stopwords are never masked.
    pub fn is_maskable(&self, id: usize) -> bool {
        !self.stop.get(id).copied().unwrap_or(true)
    }

    pub fn encode(&self, text: &str) -> Result<TokenizedQuery> {
        let tokens: Vec<usize> = tokenize(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK_ID))
            .collect();
        if tokens.is_empty() {
            return Err(CcrError::Data(format!("query {text:?} has no tokens")));
        }
        Ok(TokenizedQuery {
            tokens,
            text: text.to_string(),
        })
    }

    /// One word per line, reserved entries excluded.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.words[RESERVED.len()..].join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| CcrError::io(path, e))
    }

    pub fn load(path: &Path, stopwords: &[&str]) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| CcrError::io(path, e))?;
        Ok(Self::from_words(
            body.lines().map(str::trim).filter(|l| !l.is_empty()),
            stopwords,
        ))
    }
}
