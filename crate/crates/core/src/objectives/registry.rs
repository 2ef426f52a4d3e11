use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, LazyLock};

use crate::corpus::{Corpus, CorpusKind};
use crate::error::{Error, Result};
use crate::numeric::rng::domain;
use crate::numeric::{Rng, Var};

use super::info_nce;

/// One training batch of `M` examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub anchors: Vec<String>,
    pub positives: Vec<String>,
    pub hard_negatives: Option<Vec<String>>,
}

impl Batch {
    pub fn new(anchors: Vec<String>, positives: Vec<String>, hard_negatives: Option<Vec<String>>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        let m = anchors.len();
        if positives.len() != m || hard_negatives.as_ref().is_some_and(|n| n.len() != m) {
            return Err(Error::Shape(format!(
                "batch of {m} anchors with {} positives and {:?} hard negatives",
                positives.len(),
                hard_negatives.as_ref().map(Vec::len)
            )));
        }
        Ok(Self { anchors, positives, hard_negatives })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Maps sentences to pooled embeddings on a tape. `dropout` selects the
/// mask stream; `None` disables dropout.
pub trait Embedder<'t> {
    fn embed(&mut self, texts: &[&str], dropout: Option<&mut Rng>) -> Result<Var<'t>>;
}

/// A training objective: which corpora it consumes, how batches are formed,
/// and the scalar loss of a batch.
pub trait Objective: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn accepts(&self, kind: CorpusKind) -> bool;

    /// Builds the batch of corpus records at `indices`.
    fn batch(&self, corpus: &Corpus, indices: &[usize]) -> Result<Batch>;

    /// `rng` is the per-step stream; dropout masks are derived from it.
    fn loss<'t>(&self, batch: &Batch, embedder: &mut dyn Embedder<'t>, rng: &Rng, tau: f64) -> Result<Var<'t>>;

    fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if self.accepts(corpus.kind()) {
            Ok(())
        } else {
            Err(Error::CorpusMismatch {
                objective: self.name().to_string(),
                reason: format!("corpus holds {}", corpus.kind()),
            })
        }
    }
}

fn mismatch(objective: &dyn Objective, corpus: &Corpus) -> Error {
    objective.check_corpus(corpus).expect_err("mismatched corpus")
}

fn refs(texts: &[String]) -> Vec<&str> {
    texts.iter().map(String::as_str).collect()
}

/// Embeds all texts of a supervised batch in one pass and splits anchors
/// from candidates.
fn supervised<'t>(texts: Vec<&str>, m: usize, embedder: &mut dyn Embedder<'t>, rng: &Rng, tau: f64) -> Result<Var<'t>> {
    let mut view = rng.derive(domain::DROPOUT_VIEW, 0);
    let all = embedder.embed(&texts, Some(&mut view))?;
    let anchors = all.gather_rows(&(0..m).collect::<Vec<_>>());
    let candidates = all.gather_rows(&(m..texts.len()).collect::<Vec<_>>());
    info_nce(anchors, candidates, tau)
}

/// Pairs `(x, x⁺)` with in-batch negatives. Triplet corpora are accepted and
/// their negatives ignored.
#[derive(Debug, Clone, Copy)]
pub struct SupBasic;

impl Objective for SupBasic {
    fn name(&self) -> &'static str {
        "sup_basic"
    }

    fn accepts(&self, kind: CorpusKind) -> bool {
        matches!(kind, CorpusKind::Pairs | CorpusKind::Triplets)
    }

    fn batch(&self, corpus: &Corpus, indices: &[usize]) -> Result<Batch> {
        let (a, p) = match corpus {
            Corpus::Pairs(v) => indices.iter().map(|&i| (v[i].sent1.clone(), v[i].sent2.clone())).unzip(),
            Corpus::Triplets(v) => indices.iter().map(|&i| (v[i].anchor.clone(), v[i].positive.clone())).unzip(),
            Corpus::Bare(_) => return Err(mismatch(self, corpus)),
        };
        Batch::new(a, p, None)
    }

    fn loss<'t>(&self, batch: &Batch, embedder: &mut dyn Embedder<'t>, rng: &Rng, tau: f64) -> Result<Var<'t>> {
        let texts = [refs(&batch.anchors), refs(&batch.positives)].concat();
        supervised(texts, batch.len(), embedder, rng, tau)
    }
}

/// Each sentence is its own positive under an independent dropout mask.
#[derive(Debug, Clone, Copy)]
pub struct Unsup;

impl Objective for Unsup {
    fn name(&self) -> &'static str {
        "unsup"
    }

    fn accepts(&self, kind: CorpusKind) -> bool {
        kind == CorpusKind::Bare
    }

    fn batch(&self, corpus: &Corpus, indices: &[usize]) -> Result<Batch> {
        let Corpus::Bare(v) = corpus else { return Err(mismatch(self, corpus)) };
        let texts: Vec<String> = indices.iter().map(|&i| v[i].clone()).collect();
        Batch::new(texts.clone(), texts, None)
    }

    fn loss<'t>(&self, batch: &Batch, embedder: &mut dyn Embedder<'t>, rng: &Rng, tau: f64) -> Result<Var<'t>> {
        let texts = refs(&batch.anchors);
        let mut z = rng.derive(domain::DROPOUT_VIEW, 0);
        let mut z_prime = rng.derive(domain::DROPOUT_VIEW, 1);
        let first = embedder.embed(&texts, Some(&mut z))?;
        let second = embedder.embed(&texts, Some(&mut z_prime))?;
        info_nce(first, second, tau)
    }
}

/// Triplets `(x, x⁺, x⁻)`; every hard negative joins every anchor's
/// candidate set.
#[derive(Debug, Clone, Copy)]
pub struct SupHard;

impl Objective for SupHard {
    fn name(&self) -> &'static str {
        "sup_hard"
    }

    fn accepts(&self, kind: CorpusKind) -> bool {
        kind == CorpusKind::Triplets
    }

    fn batch(&self, corpus: &Corpus, indices: &[usize]) -> Result<Batch> {
        let Corpus::Triplets(v) = corpus else { return Err(mismatch(self, corpus)) };
        let pick = |f: fn(&crate::corpus::Triplet) -> &String| indices.iter().map(|&i| f(&v[i]).clone()).collect();
        Batch::new(pick(|t| &t.anchor), pick(|t| &t.positive), Some(pick(|t| &t.negative)))
    }

    fn loss<'t>(&self, batch: &Batch, embedder: &mut dyn Embedder<'t>, rng: &Rng, tau: f64) -> Result<Var<'t>> {
        let negatives = batch.hard_negatives.as_ref().ok_or_else(|| Error::CorpusMismatch {
            objective: self.name().to_string(),
            reason: "batch has no hard negatives".into(),
        })?;
        let texts = [refs(&batch.anchors), refs(&batch.positives), refs(negatives)].concat();
        supervised(texts, batch.len(), embedder, rng, tau)
    }
}

#[derive(Clone, Default)]
pub struct ObjectiveRegistry {
    entries: BTreeMap<&'static str, Arc<dyn Objective>>,
}

impl ObjectiveRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(SupBasic));
        r.register(Arc::new(Unsup));
        r.register(Arc::new(SupHard));
        r
    }

    pub fn register(&mut self, objective: Arc<dyn Objective>) -> Option<Arc<dyn Objective>> {
        self.entries.insert(objective.name(), objective)
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Objective>> {
        self.entries.get(name).cloned().ok_or_else(|| Error::UnknownObjective(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

static BUILTIN: LazyLock<ObjectiveRegistry> = LazyLock::new(ObjectiveRegistry::builtin);

pub fn objective(name: &str) -> Result<Arc<dyn Objective>> {
    BUILTIN.get(name)
}
