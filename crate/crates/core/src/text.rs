//! Closed vocabulary and fixed-length token sequences.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u16 = 0;
pub const MASK: u16 = 1;
pub const UNK: u16 = 2;
pub const RESERVED: usize = 3;

/// Default maximum expression length in words.
pub const DEFAULT_MAX_LEN: usize = 20;

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const KINDS: [&str; 3] = ["square", "circle", "triangle"];
pub const POSITIONS: [&str; 5] = ["left", "right", "top", "bottom", "middle"];
pub const ORDINALS: [&str; 3] = ["first", "second", "third"];

/// Ordered word list. IDs 0..3 are `[PAD]`, `[MASK]` and `[UNK]`; the rest
/// follow list order, so a fixed word list yields fixed IDs.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u16>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words
    }
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved words, in order.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut all: Vec<String> = vec!["[PAD]".into(), "[MASK]".into(), "[UNK]".into()];
        all.extend(words.iter().map(|w| w.as_ref().to_lowercase()));
        Self::from_full_list(all)
    }

    /// Rebuilds a vocabulary from a complete list that already carries the
    /// reserved entries at the front (the dataset header form).
    pub fn from_full_list(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED || words.len() > u16::MAX as usize {
            return Err(Error::invalid(format!("vocabulary size {} out of range", words.len())));
        }
        if words[0] != "[PAD]" || words[1] != "[MASK]" || words[2] != "[UNK]" {
            return Err(Error::invalid("vocabulary must start with [PAD] [MASK] [UNK]"));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("bad vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), i as u16).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    /// The closed vocabulary of the synthetic expression templates.
    pub fn standard() -> Self {
        let mut words: Vec<&str> = Vec::new();
        words.extend(COLORS);
        words.extend(KINDS);
        words.extend(POSITIONS);
        words.extend(ORDINALS);
        words.push("from");
        Self::new(&words).expect("standard vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u16> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u16) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_reserved(id: u16) -> bool {
        (id as usize) < RESERVED
    }
}

/// Fixed-length ID sequence; positions at or beyond `valid_len` hold PAD.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u16>,
    valid_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u16>, valid_len: usize) -> Result<Self> {
        if valid_len > ids.len() {
            return Err(Error::invalid(format!(
                "valid_len {valid_len} exceeds sequence length {}",
                ids.len()
            )));
        }
        if ids[valid_len..].iter().any(|&id| id != PAD) {
            return Err(Error::invalid("non-PAD id beyond valid_len"));
        }
        Ok(Self { ids, valid_len })
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn valid(&self) -> &[u16] {
        &self.ids[..self.valid_len]
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub(crate) fn set(&mut self, pos: usize, id: u16) {
        debug_assert!(pos < self.valid_len);
        self.ids[pos] = id;
    }
}

/// Whitespace split, lowercase, map to IDs (UNK for unknown words),
/// truncate or pad to `max_len`.
pub fn tokenize(expression: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids: Vec<u16> = expression
        .split_whitespace()
        .take(max_len)
        .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(UNK))
        .collect();
    let valid_len = ids.len();
    ids.resize(max_len, PAD);
    TokenSequence { ids, valid_len }
}
