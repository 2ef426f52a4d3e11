//! JSONL training corpora: sentence pairs, triplets with a hard negative, or
//! bare sentences. The record shape is inferred from the keys of each line
//! and must be uniform across the file.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::fsio;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub sent1: String,
    pub sent2: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bare {
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    Pairs,
    Triplets,
    Bare,
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusKind::Pairs => "pairs",
            CorpusKind::Triplets => "triplets",
            CorpusKind::Bare => "bare sentences",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Corpus {
    Pairs(Vec<Pair>),
    Triplets(Vec<Triplet>),
    Bare(Vec<String>),
}

impl Corpus {
    pub fn kind(&self) -> CorpusKind {
        match self {
            Corpus::Pairs(_) => CorpusKind::Pairs,
            Corpus::Triplets(_) => CorpusKind::Triplets,
            Corpus::Bare(_) => CorpusKind::Bare,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Corpus::Pairs(v) => v.len(),
            Corpus::Triplets(v) => v.len(),
            Corpus::Bare(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every sentence in record order.
    pub fn texts(&self) -> Vec<&str> {
        match self {
            Corpus::Pairs(v) => v.iter().flat_map(|p| [p.sent1.as_str(), p.sent2.as_str()]).collect(),
            Corpus::Triplets(v) => {
                v.iter().flat_map(|t| [t.anchor.as_str(), t.positive.as_str(), t.negative.as_str()]).collect()
            }
            Corpus::Bare(v) => v.iter().map(String::as_str).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fsio::read_to_string(path)?, path)
    }

    pub fn parse(src: &str, path: &Path) -> Result<Self> {
        let mut corpus: Option<Corpus> = None;
        for (i, line) in src.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record = |reason: String| Error::Record { path: path.to_path_buf(), line: i + 1, reason };
            let obj: Map<String, Value> = serde_json::from_str(line).map_err(|e| record(e.to_string()))?;
            let kind = if obj.contains_key("anchor") {
                CorpusKind::Triplets
            } else if obj.contains_key("sent1") {
                CorpusKind::Pairs
            } else if obj.contains_key("text") {
                CorpusKind::Bare
            } else {
                return Err(record("expected `sent1`/`sent2`, `anchor`/`positive`/`negative`, or `text`".into()));
            };
            let c = corpus.get_or_insert_with(|| match kind {
                CorpusKind::Pairs => Corpus::Pairs(Vec::new()),
                CorpusKind::Triplets => Corpus::Triplets(Vec::new()),
                CorpusKind::Bare => Corpus::Bare(Vec::new()),
            });
            if c.kind() != kind {
                return Err(record(format!("{kind} record in a file of {}", c.kind())));
            }
            let value = Value::Object(obj);
            let parsed = match c {
                Corpus::Pairs(v) => serde_json::from_value(value).map(|p| v.push(p)),
                Corpus::Triplets(v) => serde_json::from_value(value).map(|t| v.push(t)),
                Corpus::Bare(v) => serde_json::from_value::<Bare>(value).map(|b| v.push(b.text)),
            };
            parsed.map_err(|e| record(e.to_string()))?;
        }
        corpus.ok_or(Error::EmptyInput("corpus"))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |v: Value| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        match self {
            Corpus::Pairs(v) => v.iter().for_each(|p| push(serde_json::to_value(p).expect("pair"))),
            Corpus::Triplets(v) => v.iter().for_each(|t| push(serde_json::to_value(t).expect("triplet"))),
            Corpus::Bare(v) => v.iter().for_each(|t| push(serde_json::json!({ "text": t }))),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(src: &str) -> Result<Corpus> {
        Corpus::parse(src, Path::new("c.jsonl"))
    }

    #[test]
    fn detects_each_shape() {
        let pairs = parse("{\"sent1\":\"a b\",\"sent2\":\"c\"}\n\n{\"sent1\":\"d\",\"sent2\":\"e\",\"score\":3.0}\n").unwrap();
        assert_eq!(pairs.kind(), CorpusKind::Pairs);
        assert_eq!(pairs.texts(), vec!["a b", "c", "d", "e"]);
        let trip = parse("{\"anchor\":\"a\",\"positive\":\"b\",\"negative\":\"c\"}").unwrap();
        assert_eq!(trip.kind(), CorpusKind::Triplets);
        let bare = parse("{\"text\":\"x\"}\n{\"text\":\"y\"}").unwrap();
        assert_eq!(bare, Corpus::Bare(vec!["x".into(), "y".into()]));
        for c in [pairs, trip, bare] {
            assert_eq!(parse(&c.to_jsonl()).unwrap(), c);
        }
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(matches!(parse(""), Err(Error::EmptyInput(_))));
        assert!(matches!(parse("{\"text\":\"x\"}\n{\"sent1\":\"a\",\"sent2\":\"b\"}"), Err(Error::Record { line: 2, .. })));
        assert!(matches!(parse("{\"anchor\":\"a\",\"positive\":\"b\"}"), Err(Error::Record { line: 1, .. })));
        assert!(matches!(parse("not json"), Err(Error::Record { .. })));
        assert!(matches!(parse("{\"label\":1}"), Err(Error::Record { .. })));
    }
}
