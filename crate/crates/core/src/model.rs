//! Where layer stacks come from (a trainable encoder or a frozen feature
//! file) and inference-time sentence embedding.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoder::{EncoderConfig, FrozenFeatures, FrozenSource, LayerStack, StackBatch, Tokenizer};
use crate::error::{Error, Result};
use crate::numeric::{AttentionNorm, Matrix, Rng, Tape, Var};
use crate::objectives::Embedder;
use crate::params::{BoundParams, ParamSet};
use crate::pooler::{strategy, ClsLast, PoolerParams, PoolerVars, PoolingStrategy};

/// Sentences per inference chunk; chunks are the unit of parallelism.
const CHUNK: usize = 64;

/// A frozen feature file with the texts naming its rows, one JSONL
/// `{"text": …}` record per row.
#[derive(Clone, Debug)]
pub struct FrozenInput {
    pub source: FrozenSource,
    pub features: PathBuf,
    pub texts: PathBuf,
}

impl FrozenInput {
    pub fn load(features: &Path, texts: &Path) -> Result<Self> {
        let file = FrozenFeatures::load(features)?;
        let Corpus::Bare(names) = Corpus::load(texts)? else {
            return Err(Error::Record {
                path: texts.to_path_buf(),
                line: 1,
                reason: "feature texts must be `{\"text\": …}` records".into(),
            });
        };
        Ok(Self { source: FrozenSource::new(file, names)?, features: features.to_path_buf(), texts: texts.to_path_buf() })
    }
}

/// Serializable description of a [`LayerSource`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    Encoder { config: EncoderConfig, tokenizer: Tokenizer },
    Frozen { features: PathBuf, texts: PathBuf },
}

#[derive(Clone, Debug)]
pub enum LayerSource {
    Encoder { config: EncoderConfig, tokenizer: Tokenizer },
    Frozen(FrozenInput),
}

impl LayerSource {
    pub fn spec(&self) -> SourceSpec {
        match self {
            LayerSource::Encoder { config, tokenizer } => {
                SourceSpec::Encoder { config: config.clone(), tokenizer: tokenizer.clone() }
            }
            LayerSource::Frozen(f) => SourceSpec::Frozen { features: f.features.clone(), texts: f.texts.clone() },
        }
    }

    /// Rebuilds a source; a frozen spec reloads its files unless `frozen`
    /// supplies them.
    pub fn from_spec(spec: &SourceSpec, frozen: Option<FrozenInput>) -> Result<Self> {
        match (spec, frozen) {
            (SourceSpec::Encoder { config, tokenizer }, _) => {
                Ok(LayerSource::Encoder { config: config.clone(), tokenizer: tokenizer.clone() })
            }
            (SourceSpec::Frozen { .. }, Some(f)) => Ok(LayerSource::Frozen(f)),
            (SourceSpec::Frozen { features, texts }, None) => Ok(LayerSource::Frozen(FrozenInput::load(features, texts)?)),
        }
    }

    pub fn layers(&self) -> usize {
        match self {
            LayerSource::Encoder { config, .. } => config.num_layers,
            LayerSource::Frozen(f) => f.source.features.layers,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            LayerSource::Encoder { config, .. } => config.hidden_dim,
            LayerSource::Frozen(f) => f.source.features.dim,
        }
    }

    /// Layer stacks for `texts` on `params`' tape. Frozen stacks enter as
    /// constants and ignore `dropout`.
    pub fn stacks<'t>(
        &self,
        params: &BoundParams<'t>,
        tape: &'t Tape,
        texts: &[&str],
        dropout: Option<&mut Rng>,
    ) -> Result<StackBatch<'t>> {
        match self {
            LayerSource::Encoder { config, tokenizer } => {
                let seqs = texts.iter().map(|t| tokenizer.tokenize(t, config.max_seq_len)).collect::<Result<Vec<_>>>()?;
                config.encode_batch(params, &seqs, dropout)
            }
            LayerSource::Frozen(f) => {
                let stacks = texts.iter().map(|t| f.source.lookup(t).cloned()).collect::<Result<Vec<_>>>()?;
                StackBatch::from_stacks(tape, &stacks)
            }
        }
    }
}

/// Pools stacks from a [`LayerSource`] with bound parameters; used by the
/// objectives during training.
pub struct TapeEmbedder<'a, 't> {
    pub source: &'a LayerSource,
    pub params: &'a BoundParams<'t>,
    pub tape: &'t Tape,
    pub strategy: &'a dyn PoolingStrategy,
    pub norm: AttentionNorm,
}

impl<'t> Embedder<'t> for TapeEmbedder<'_, 't> {
    fn embed(&mut self, texts: &[&str], dropout: Option<&mut Rng>) -> Result<Var<'t>> {
        let stacks = self.source.stacks(self.params, self.tape, texts, dropout)?;
        let pooler = PoolerVars::from_bound(self.params);
        Ok(self.strategy.pool(&stacks, &pooler, self.norm)?.embeddings)
    }
}

/// How sentences are embedded after training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferencePooling {
    /// Last-layer `[CLS]`; the pooler is discarded.
    #[default]
    Detached,
    /// The strategy the model was trained with.
    Trained,
}

/// A layer source with parameters and a pooling strategy, evaluated without
/// dropout or gradients.
#[derive(Clone, Debug)]
pub struct Model {
    pub source: LayerSource,
    pub params: ParamSet,
    pub strategy: Arc<dyn PoolingStrategy>,
    pub norm: AttentionNorm,
}

impl Model {
    pub fn new(source: LayerSource, params: ParamSet, strategy_name: &str, norm: AttentionNorm) -> Result<Self> {
        let strategy = strategy(strategy_name)?;
        if strategy.uses_params() {
            let pooler = PoolerParams::from_params(&params)?;
            if pooler.dim() != source.dim() {
                return Err(Error::Shape(format!("pooler of dim {} on {}-dim layers", pooler.dim(), source.dim())));
            }
        }
        Ok(Self { source, params, strategy, norm })
    }

    pub fn pooler(&self) -> Result<PoolerParams> {
        PoolerParams::from_params(&self.params)
    }

    fn chunked<T: Send>(
        &self,
        texts: &[&str],
        f: impl Fn(&Tape, &BoundParams<'_>, &[&str]) -> Result<Vec<T>> + Sync,
    ) -> Result<Vec<T>> {
        if texts.is_empty() {
            return Err(Error::EmptyInput("texts"));
        }
        let parts: Vec<Vec<T>> = texts
            .par_chunks(CHUNK)
            .map(|chunk| {
                let tape = Tape::inference();
                let bound = self.params.bind(&tape, |_| false);
                f(&tape, &bound, chunk)
            })
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn layer_stacks(&self, texts: &[&str]) -> Result<Vec<LayerStack>> {
        self.chunked(texts, |tape, bound, chunk| Ok(self.source.stacks(bound, tape, chunk, None)?.to_stacks()))
    }

    /// Raw (unnormalized) embeddings under `strategy`, one row per text.
    pub fn embed_with(&self, texts: &[&str], strategy: &dyn PoolingStrategy) -> Result<Matrix> {
        let dim = self.source.dim();
        // Fixed strategies never read the pooler, so it need not exist.
        let placeholder = (!strategy.uses_params())
            .then(|| PoolerParams::identity(dim, Matrix::zeros(dim, 2 * dim), Matrix::zeros(1, dim)))
            .transpose()?;
        let rows = self.chunked(texts, |tape, bound, chunk| {
            let stacks = self.source.stacks(bound, tape, chunk, None)?;
            let pooler = match &placeholder {
                Some(p) => p.bind(tape),
                None => PoolerVars::from_bound(bound),
            };
            let out = strategy.pool(&stacks, &pooler, self.norm)?.embeddings.value();
            Ok((0..out.rows()).map(|r| out.row(r).to_vec()).collect())
        })?;
        Matrix::from_rows(&rows)
    }

    pub fn embed(&self, texts: &[&str], pooling: InferencePooling) -> Result<Matrix> {
        match pooling {
            InferencePooling::Detached => self.embed_with(texts, &ClsLast),
            InferencePooling::Trained => self.embed_with(texts, &*self.strategy.clone()),
        }
    }
}
