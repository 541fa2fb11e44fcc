//! Word-level tokenizer over lower-cased alphanumeric runs.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{ModelError, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Tokenizer {
    pub const PAD_ID: u32 = 0;
    pub const UNK_ID: u32 = 1;

    /// Vocabulary = specials followed by the sorted set of corpus words.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = corpus.into_iter().flat_map(words).collect();
        let vocab = [PAD.to_string(), UNK.to_string()].into_iter().chain(set).collect();
        Self::from_vocab(vocab).expect("specials are unique")
    }

    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < 2 || vocab[0] != PAD || vocab[1] != UNK {
            return Err(ModelError::Param("vocabulary must start with <pad>, <unk>".into()));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, t) in vocab.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(ModelError::Param(format!("duplicate token {t}")));
            }
        }
        Ok(Self { vocab, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    /// Token ids truncated or padded to `max_len`, with a 1/0 validity mask.
    pub fn encode(&self, text: &str, max_len: usize) -> (Vec<u32>, Vec<u8>) {
        let mut ids: Vec<u32> = words(text)
            .iter()
            .take(max_len)
            .map(|w| self.index.get(w).copied().unwrap_or(Self::UNK_ID))
            .collect();
        let mut mask = vec![1u8; ids.len()];
        ids.resize(max_len, Self::PAD_ID);
        mask.resize(max_len, 0);
        (ids, mask)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != Self::PAD_ID)
            .map(|&i| self.vocab.get(i as usize).map_or(UNK, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line index is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.vocab.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
        Self::from_vocab(text.lines().map(str::to_string).collect())
    }
}
