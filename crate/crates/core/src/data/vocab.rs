use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word/id bijection over a whitespace-tokenized corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens followed by every distinct word, sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<&str> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| !RESERVED.contains(w))
            .collect();
        Self::from_words(distinct.into_iter().map(str::to_string))
            .expect("distinct words are unique")
    }

    /// Rebuild from the non-reserved words in id order.
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let mut index = HashMap::with_capacity(all.len());
        for (i, w) in all.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self { words: all, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Non-reserved words in id order.
    pub fn words(&self) -> &[String] {
        &self.words[RESERVED.len()..]
    }

    /// `[BOS, word ids.., EOS]`; unknown words map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)));
        ids.push(EOS);
        ids
    }

    /// Text up to the first EOS, skipping BOS and PAD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != BOS && id != PAD)
            .map(|&id| self.word(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Collapse runs of whitespace to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
