//! Whitespace tokenizer for the toy model.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const SEP: &str = "[SEP]";
pub const EOS: &str = "[EOS]";

/// Special tokens occupy the first ids, in this order.
pub const SPECIALS: [&str; 5] = [PAD, UNK, BOS, SEP, EOS];

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const EOS_ID: usize = 4;

/// Text to model ids and back.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<usize>;
    fn decode(&self, ids: &[usize]) -> String;
    fn vocab_size(&self) -> usize;
    fn bos_id(&self) -> usize;
    fn sep_id(&self) -> usize;
    fn eos_id(&self) -> usize;
    fn pad_id(&self) -> usize;
}

/// Splits on whitespace; unseen words map to `[UNK]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WhitespaceTokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl WhitespaceTokenizer {
    /// Vocabulary from a token list whose prefix is exactly [`SPECIALS`].
    pub fn from_vocab(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Format(format!(
                "vocabulary must start with {SPECIALS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary entry {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Specials followed by every distinct word of `texts` in sorted order.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| !SPECIALS.contains(w))
            .collect();
        let tokens = SPECIALS
            .iter()
            .copied()
            .chain(words)
            .map(str::to_owned)
            .collect();
        Self::from_vocab(tokens).expect("fitted vocabulary is well formed")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK_ID))
            .collect()
    }

    fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .map(|&i| self.tokens.get(i).map_or(UNK, String::as_str))
            .collect();
        words.join(" ")
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    fn bos_id(&self) -> usize {
        BOS_ID
    }

    fn sep_id(&self) -> usize {
        SEP_ID
    }

    fn eos_id(&self) -> usize {
        EOS_ID
    }

    fn pad_id(&self) -> usize {
        PAD_ID
    }
}
