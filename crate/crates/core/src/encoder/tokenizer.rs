use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
const RESERVED: [&str; 3] = ["[CLS]", "[PAD]", "[UNK]"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    /// Lowercased whitespace-separated words over a corpus vocabulary.
    #[default]
    Whitespace,
    /// Raw UTF-8 bytes; the vocabulary is fixed at 3 + 256 ids.
    Byte,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "Stored")]
pub struct Tokenizer {
    mode: TokenizerMode,
    /// id → token; ids 0..3 are reserved.
    vocab: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
}

#[derive(Deserialize)]
struct Stored {
    mode: TokenizerMode,
    vocab: Vec<String>,
}

impl From<Stored> for Tokenizer {
    fn from(s: Stored) -> Self {
        Self::from_vocab(s.mode, s.vocab)
    }
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode && self.vocab == other.vocab
    }
}

impl Tokenizer {
    /// Whitespace tokenizer over `words`, taken in the given order after the
    /// reserved ids. Duplicates are ignored.
    pub fn whitespace<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !vocab.contains(&w) {
                vocab.push(w);
            }
        }
        Self::from_vocab(TokenizerMode::Whitespace, vocab)
    }

    /// Whitespace vocabulary from a corpus: words sorted by descending
    /// frequency, ties broken lexicographically.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *counts.entry(w.to_lowercase()).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::whitespace(words.into_iter().map(|(w, _)| w))
    }

    pub fn bytes() -> Self {
        let mut vocab: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        vocab.extend((0u8..=255).map(|b| format!("<0x{b:02X}>")));
        Self::from_vocab(TokenizerMode::Byte, vocab)
    }

    fn from_vocab(mode: TokenizerMode, vocab: Vec<String>) -> Self {
        let mut t = Self { mode, vocab, lookup: HashMap::new() };
        t.rebuild_lookup();
        t
    }

    fn rebuild_lookup(&mut self) {
        self.lookup = self.vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// `[CLS]` followed by token ids, truncated to `max_len` ids in total.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Vec<u32>> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::EmptyInput("text to tokenize"));
        }
        let mut ids = vec![CLS_ID];
        match self.mode {
            TokenizerMode::Whitespace => {
                for w in text.split_whitespace().take(max_len.saturating_sub(1)) {
                    ids.push(self.lookup.get(&w.to_lowercase()).copied().unwrap_or(UNK_ID));
                }
            }
            TokenizerMode::Byte => {
                ids.extend(text.bytes().take(max_len.saturating_sub(1)).map(|b| 3 + b as u32));
            }
        }
        ids.truncate(max_len.max(1));
        Ok(ids)
    }

    /// Inverse of [`tokenize`](Self::tokenize) for known tokens; `[CLS]` and
    /// `[PAD]` are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let kept = ids.iter().filter(|&&i| i != CLS_ID && i != PAD_ID);
        match self.mode {
            TokenizerMode::Whitespace => kept
                .map(|&i| self.vocab.get(i as usize).map_or(RESERVED[2], String::as_str))
                .collect::<Vec<_>>()
                .join(" "),
            TokenizerMode::Byte => {
                let bytes: Vec<u8> = kept.filter(|&&i| i >= 3).map(|&i| (i - 3) as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_mapping() {
        let t = Tokenizer::whitespace(["a", "b"]);
        let (a, b) = (3, 4);
        assert_eq!(t.tokenize("a b a", 16).unwrap(), vec![CLS_ID, a, b, a]);
        assert_eq!(t.tokenize("a zebra", 16).unwrap(), vec![CLS_ID, a, UNK_ID]);
        assert_eq!(t.tokenize("a b a b a", 3).unwrap(), vec![CLS_ID, a, b]);
        assert!(t.tokenize("   ", 8).is_err());
        assert_eq!(t.decode(&t.tokenize("B a", 8).unwrap()), "b a");
    }

    #[test]
    fn fit_orders_by_frequency_then_lexically() {
        let t = Tokenizer::fit(["x y y", "z y x"]);
        assert_eq!(&t.vocab[3..], &["y", "x", "z"]);
    }

    #[test]
    fn byte_mode_round_trip() {
        let t = Tokenizer::bytes();
        let ids = t.tokenize("héllo", 64).unwrap();
        assert_eq!(ids[0], CLS_ID);
        assert_eq!(t.decode(&ids), "héllo");
        assert_eq!(t.vocab_size(), 259);
    }

    #[test]
    fn serde_round_trip_restores_lookup() {
        let t = Tokenizer::fit(["one two"]);
        let back: Tokenizer = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.tokenize("two", 4).unwrap(), t.tokenize("two", 4).unwrap());
    }
}
