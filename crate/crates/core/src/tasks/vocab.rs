use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Word-level vocabulary with the five reserved tokens at ids `0..5`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from the specials followed by `words` in order.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(Into::into))
            .collect();
        Self::try_from(all)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Lowercases, splits on whitespace and ASCII punctuation (each
    /// punctuation mark becomes its own token) and maps through the
    /// vocabulary. Unknown words map to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Config("vocabulary must start with [PAD] [UNK] [CLS] [SEP] [MASK]".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Vocab { words, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

pub(crate) fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}
