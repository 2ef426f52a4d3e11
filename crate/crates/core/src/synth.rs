//! Synthetic topic corpora for desk-scale experiments.
//!
//! Sentences are bags of topic words and shared filler words. A sentence
//! drawn from a topic mixture picks each content word's topic from the
//! mixture, so the cosine between two mixtures is a noiseless similarity
//! signal for STS-style gold scores.

use crate::corpus::{Corpus, Pair, Triplet};
use crate::numeric::rng::domain;
use crate::numeric::{dot, norm, Rng};
use crate::sts::{StsRecord, MAX_SCORE};

/// Generator seed used by the shipped experiments.
pub const PUBLISHED_SEED: u64 = 20_240_611;

const TOPIC_STEMS: [&str; 8] = ["astro", "botan", "chem", "dance", "econ", "film", "geo", "hist"];
const FILLER: [&str; 24] = [
    "the", "a", "of", "and", "to", "in", "is", "was", "for", "on", "with", "as", "by", "at", "from", "this", "that",
    "it", "some", "very", "about", "new", "more", "many",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub topics: usize,
    pub words_per_topic: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a token is a topic word rather than filler.
    pub content_rate: f64,
    /// Share of a hard negative's content words taken from the anchor topic.
    pub negative_overlap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { topics: 8, words_per_topic: 12, min_len: 6, max_len: 12, content_rate: 0.6, negative_overlap: 0.3 }
    }
}

pub struct Generator {
    config: SynthConfig,
    rng: Rng,
}

/// Weight per topic.
pub type Mixture = Vec<f64>;

impl Generator {
    pub fn new(seed: u64) -> Self {
        Self::with_config(seed, SynthConfig::default())
    }

    pub fn with_config(seed: u64, config: SynthConfig) -> Self {
        assert!(config.topics >= 2 && config.topics <= TOPIC_STEMS.len(), "2..=8 topics");
        assert!(config.min_len >= 1 && config.min_len <= config.max_len, "sentence length range");
        Self { rng: Rng::new(seed).derive(domain::INIT, 0), config }
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn topic_word(&self, topic: usize, k: usize) -> String {
        format!("{}{k}", TOPIC_STEMS[topic])
    }

    fn pure(&self, topic: usize) -> Mixture {
        let mut m = vec![0.0; self.config.topics];
        m[topic] = 1.0;
        m
    }

    pub fn sentence(&mut self, mixture: &[f64]) -> String {
        let len = self.config.min_len + self.rng.below(self.config.max_len - self.config.min_len + 1);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            if self.rng.uniform() < self.config.content_rate {
                let topic = self.rng.weighted_index(mixture).expect("non-degenerate mixture");
                let k = self.rng.below(self.config.words_per_topic);
                words.push(self.topic_word(topic, k));
            } else {
                words.push(FILLER[self.rng.below(FILLER.len())].to_string());
            }
        }
        words.join(" ")
    }

    fn topic(&mut self) -> usize {
        self.rng.below(self.config.topics)
    }

    fn other_topic(&mut self, t: usize) -> usize {
        (t + 1 + self.rng.below(self.config.topics - 1)) % self.config.topics
    }

    /// Paraphrase pairs: both sides drawn from the same topic.
    pub fn pairs(&mut self, n: usize) -> Corpus {
        Corpus::Pairs(
            (0..n)
                .map(|_| {
                    let t = self.topic();
                    let m = self.pure(t);
                    Pair { sent1: self.sentence(&m), sent2: self.sentence(&m) }
                })
                .collect(),
        )
    }

    /// Pairs plus a hard negative mostly about another topic.
    pub fn triplets(&mut self, n: usize) -> Corpus {
        Corpus::Triplets(
            (0..n)
                .map(|_| {
                    let t = self.topic();
                    let u = self.other_topic(t);
                    let m = self.pure(t);
                    let mut neg = self.pure(u);
                    neg[t] = self.config.negative_overlap;
                    neg[u] = 1.0 - self.config.negative_overlap;
                    Triplet { anchor: self.sentence(&m), positive: self.sentence(&m), negative: self.sentence(&neg) }
                })
                .collect(),
        )
    }

    pub fn bare(&mut self, n: usize) -> Corpus {
        Corpus::Bare(
            (0..n)
                .map(|_| {
                    let t = self.topic();
                    let m = self.pure(t);
                    self.sentence(&m)
                })
                .collect(),
        )
    }

    /// Two-topic mixture; half the time it shares a topic with `near`.
    fn mixture(&mut self, near: Option<&[f64]>) -> Mixture {
        let first = match near {
            Some(m) if self.rng.uniform() < 0.5 => self.rng.weighted_index(m).expect("mixture"),
            _ => self.topic(),
        };
        let second = self.topic();
        let w = self.rng.uniform();
        let mut m = vec![0.0; self.config.topics];
        m[first] += w;
        m[second] += 1.0 - w;
        m
    }

    /// Sentence pairs scored `5 · cos(mixture₁, mixture₂)`.
    pub fn sts(&mut self, n: usize) -> Vec<StsRecord> {
        (0..n)
            .map(|_| {
                let a = self.mixture(None);
                let b = self.mixture(Some(&a));
                let score = (MAX_SCORE * dot(&a, &b) / (norm(&a) * norm(&b))).clamp(0.0, MAX_SCORE);
                StsRecord { sent1: self.sentence(&a), sent2: self.sentence(&b), score }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusKind;

    #[test]
    fn deterministic_for_a_seed() {
        let a = Generator::new(PUBLISHED_SEED).triplets(50);
        assert_eq!(a, Generator::new(PUBLISHED_SEED).triplets(50));
        assert_ne!(a, Generator::new(PUBLISHED_SEED + 1).triplets(50));
        assert_eq!(a.kind(), CorpusKind::Triplets);
        assert_eq!(a.len(), 50);
    }

    #[test]
    fn sentences_follow_their_topic() {
        let mut g = Generator::new(1);
        let Corpus::Pairs(pairs) = g.pairs(100) else { unreachable!() };
        for p in &pairs {
            let stems = |s: &str| -> Vec<&str> {
                s.split(' ')
                    .filter_map(|w| TOPIC_STEMS.iter().copied().find(|t| w.starts_with(t) && w[t.len()..].parse::<u32>().is_ok()))
                    .collect()
            };
            let (a, b) = (stems(&p.sent1), stems(&p.sent2));
            assert!(a.iter().chain(&b).all(|s| Some(s) == a.first().or(b.first())));
            let n = p.sent1.split(' ').count();
            assert!((6..=12).contains(&n));
        }
    }

    #[test]
    fn sts_scores_span_the_range() {
        let records = Generator::new(2).sts(300);
        assert!(records.iter().all(|r| (0.0..=5.0).contains(&r.score)));
        assert!(records.iter().any(|r| r.score > 4.5));
        assert!(records.iter().any(|r| r.score < 0.5));
    }
}
