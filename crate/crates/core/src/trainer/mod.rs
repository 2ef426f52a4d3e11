//! Contrastive training of encoder and pooler.
//!
//! A run is a pure function of `(config, corpus)`: parameters are drawn from
//! `seed`, epoch `e` visits the corpus in the order of the stream
//! `(SHUFFLE, e)`, and step `s` takes its dropout masks from `(STEP, s)`.
//! Resuming therefore needs only the completed step count.

mod adam;
mod checkpoint;

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use adam::{Adam, BETA1, BETA2, EPSILON};
pub use checkpoint::{Checkpoint, FORMAT, MANIFEST, VERSION};

use crate::corpus::Corpus;
use crate::encoder::{self, EncoderConfig, Tokenizer, TokenizerMode};
use crate::error::{Error, Result};
use crate::model::{FrozenInput, LayerSource, Model, TapeEmbedder};
use crate::numeric::rng::domain;
use crate::numeric::{AttentionNorm, Matrix, Rng, Tape};
use crate::objectives::{objective, Objective, DEFAULT_TEMPERATURE};
use crate::params::ParamSet;
use crate::pooler::{strategy, PoolerParams, PoolingStrategy, MLP_BIAS, MLP_WEIGHT};

pub const DEFAULT_STRATEGY: &str = "attn_cls_avg_concat";

fn default_strategy() -> String {
    DEFAULT_STRATEGY.to_string()
}
fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}
fn default_batch_size() -> usize {
    16
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: String,
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default)]
    pub norm_mode: AttentionNorm,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Keep encoder weights fixed; implied when layer stacks come from a
    /// feature file.
    #[serde(default)]
    pub frozen_features: bool,
    /// Keep the pooler's output layer at its initial values.
    #[serde(default)]
    pub freeze_mlp: bool,
    #[serde(default)]
    pub tokenizer: TokenizerMode,
    /// `vocab_size` is overwritten by the fitted tokenizer.
    #[serde(default)]
    pub encoder: EncoderConfig,
}

impl TrainConfig {
    pub fn new(objective: &str) -> Self {
        serde_json::from_value(serde_json::json!({ "objective": objective })).expect("defaults")
    }

    pub fn validate(&self) -> Result<()> {
        objective(&self.objective)?;
        strategy(&self.strategy)?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature", format!("{} is not a positive finite number", self.temperature)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", format!("{} is not positive", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        Ok(())
    }

    fn trainable(&self, name: &str) -> bool {
        if name.starts_with(encoder::PREFIX) {
            !self.frozen_features
        } else if name == MLP_WEIGHT || name == MLP_BIAS {
            !self.freeze_mlp
        } else {
            true
        }
    }
}

/// The layer source a fresh run trains on: `frozen` when given, otherwise an
/// encoder with a tokenizer fitted to `corpus`.
pub fn build_source(config: &TrainConfig, corpus: &Corpus, frozen: Option<FrozenInput>) -> Result<LayerSource> {
    if let Some(f) = frozen {
        return Ok(LayerSource::Frozen(f));
    }
    let tokenizer = match config.tokenizer {
        TokenizerMode::Whitespace => Tokenizer::fit(corpus.texts()),
        TokenizerMode::Byte => Tokenizer::bytes(),
    };
    let encoder = EncoderConfig { vocab_size: tokenizer.vocab_size(), ..config.encoder.clone() };
    encoder.validate()?;
    Ok(LayerSource::Encoder { config: encoder, tokenizer })
}

/// Seeded symmetric-uniform initialization of encoder (if any) and pooler.
pub fn init_params(source: &LayerSource, root: &Rng) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    if let LayerSource::Encoder { config, .. } = source {
        config.init_params(&mut root.derive(domain::INIT, 0), &mut params)?;
    }
    PoolerParams::init(source.dim(), &mut root.derive(domain::INIT, 1)).insert_into(&mut params);
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    /// 1-based count of completed updates.
    pub step: u64,
    pub loss: f64,
}

/// `step,loss` CSV; losses use the shortest round-trip representation.
pub fn loss_csv(losses: &[StepLoss]) -> String {
    let mut out = String::from("step,loss\n");
    for l in losses {
        writeln!(out, "{},{:?}", l.step, l.loss).expect("write to string");
    }
    out
}

pub struct Trainer {
    config: TrainConfig,
    objective: Arc<dyn Objective>,
    strategy: Arc<dyn PoolingStrategy>,
    source: LayerSource,
    params: ParamSet,
    adam: Adam,
    step: u64,
    root: Rng,
}

impl Trainer {
    /// Validates everything a run needs before the first step.
    pub fn new(config: TrainConfig, corpus: &Corpus, frozen: Option<FrozenInput>) -> Result<Self> {
        config.validate()?;
        let source = build_source(&config, corpus, frozen)?;
        let root = Rng::new(config.seed);
        let params = init_params(&source, &root)?;
        let adam = Adam::new(config.learning_rate, &params);
        Self::assemble(config, source, params, adam, 0, root, corpus)
    }

    /// Continues the run saved in `ckpt`. Frozen feature files are reloaded
    /// from their recorded paths unless `frozen` is given.
    pub fn resume(ckpt: Checkpoint, corpus: &Corpus, frozen: Option<FrozenInput>) -> Result<Self> {
        ckpt.config.validate()?;
        let source = LayerSource::from_spec(&ckpt.source, frozen)?;
        let root = Rng::from_state(ckpt.rng);
        Self::assemble(ckpt.config, source, ckpt.params, ckpt.adam, ckpt.step, root, corpus)
    }

    fn assemble(
        config: TrainConfig,
        source: LayerSource,
        params: ParamSet,
        adam: Adam,
        step: u64,
        root: Rng,
        corpus: &Corpus,
    ) -> Result<Self> {
        let objective = objective(&config.objective)?;
        objective.check_corpus(corpus)?;
        if corpus.len() < config.batch_size {
            return Err(Error::CorpusMismatch {
                objective: config.objective.clone(),
                reason: format!("{} records cannot fill a batch of {}", corpus.len(), config.batch_size),
            });
        }
        if let LayerSource::Frozen(f) = &source {
            for t in corpus.texts() {
                f.source.lookup(t)?;
            }
        }
        let strategy = strategy(&config.strategy)?;
        Ok(Self { config, objective, strategy, source, params, adam, step, root })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self, corpus: &Corpus) -> u64 {
        (corpus.len() / self.config.batch_size) as u64
    }

    pub fn total_steps(&self, corpus: &Corpus) -> u64 {
        self.steps_per_epoch(corpus) * self.config.epochs as u64
    }

    /// Trains until the configured epochs are done or `stop_after` steps
    /// have completed. `corpus` must be the one the run started with.
    pub fn run(&mut self, corpus: &Corpus, stop_after: Option<u64>) -> Result<Vec<StepLoss>> {
        let per_epoch = self.steps_per_epoch(corpus);
        let end = stop_after.map_or(self.total_steps(corpus), |s| s.min(self.total_steps(corpus)));
        let m = self.config.batch_size;
        let mut losses = Vec::new();
        while self.step < end {
            let epoch = self.step / per_epoch;
            let mut order: Vec<usize> = (0..corpus.len()).collect();
            self.root.derive(domain::SHUFFLE, epoch).shuffle(&mut order);
            while self.step < end && self.step / per_epoch == epoch {
                let b = (self.step % per_epoch) as usize;
                let batch = self.objective.batch(corpus, &order[b * m..(b + 1) * m])?;
                let loss = self.update(&batch)?;
                self.step += 1;
                losses.push(StepLoss { step: self.step, loss });
            }
        }
        Ok(losses)
    }

    fn update(&mut self, batch: &crate::objectives::Batch) -> Result<f64> {
        let tape = Tape::new();
        let config = &self.config;
        let bound = self.params.bind(&tape, |n| config.trainable(n));
        let mut embedder = TapeEmbedder {
            source: &self.source,
            params: &bound,
            tape: &tape,
            strategy: &*self.strategy,
            norm: config.norm_mode,
        };
        let rng = self.root.derive(domain::STEP, self.step);
        let loss = self.objective.loss(batch, &mut embedder, &rng, config.temperature)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads = tape.backward(loss);
        let updates: Vec<(String, Matrix)> = self
            .params
            .names()
            .filter(|n| config.trainable(n))
            .map(|n| (n.to_string(), grads.wrt(bound.get(n))))
            .collect();
        self.adam.step(&mut self.params, updates.iter().map(|(n, g)| (n.as_str(), g)));
        Ok(value)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            source: self.source.spec(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
            rng: self.root.state(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.source.clone(), self.params.clone(), &self.config.strategy, self.config.norm_mode)
    }
}

/// Result of a complete run.
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub losses: Vec<StepLoss>,
}

pub fn train(config: TrainConfig, corpus: &Corpus, frozen: Option<FrozenInput>) -> Result<TrainRun> {
    let mut trainer = Trainer::new(config, corpus, frozen)?;
    let losses = trainer.run(corpus, None)?;
    Ok(TrainRun { checkpoint: trainer.checkpoint(), losses })
}

impl Checkpoint {
    /// Inference model for this checkpoint.
    pub fn model(&self, frozen: Option<FrozenInput>) -> Result<Model> {
        let source = LayerSource::from_spec(&self.source, frozen)?;
        Model::new(source, self.params.clone(), &self.config.strategy, self.config.norm_mode)
    }
}
