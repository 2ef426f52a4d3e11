//! Sentence embeddings from layer stacks.
//!
//! Strategies implement [`PoolingStrategy`] and are selected by name through a
//! [`StrategyRegistry`]. The free functions here evaluate a strategy on one
//! [`LayerStack`] without gradients.

mod params;
mod registry;
mod strategy;

use std::fmt::Write as _;

pub use params::{PoolerParams, PoolerVars, MLP_BIAS, MLP_WEIGHT, PREFIX, W_K, W_Q, W_V};
pub use registry::{builtin_names, strategy, StrategyRegistry};
pub use strategy::{
    layer_attention, project as project_vars, AttentionStreams, AvgFirstLast, AvgLast, ClsLast, ConcatAvg,
    ConcatClsAvg, LayerAttention, Pooled, PoolingStrategy, Stream, ATTN_AVG, ATTN_CLS, ATTN_CLS_AVG,
    ATTN_CLS_AVG_CONCAT,
};

use crate::encoder::{LayerStack, StackBatch};
use crate::error::{Error, Result};
use crate::fsio::csv_field;
use crate::numeric::{AttentionNorm, AttentionWeights, Matrix, Tape};

/// Layer attention weights for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionReport {
    /// `N×N`, row `i` = weights of query layer `i` over key layers.
    pub weights: Matrix,
    /// Column means of `weights`: overall weight received by each layer.
    pub aggregate: Vec<f64>,
    /// Query rows where ratio normalization fell back to uniform weights.
    pub fallback_rows: Vec<usize>,
}

impl AttentionReport {
    pub fn from_weights(weights: &AttentionWeights, sentence: usize) -> Self {
        let a = weights.get(sentence, 0).clone();
        let n = a.rows() as f64;
        let aggregate = a.sum_rows().data().iter().map(|v| v / n).collect();
        let fallback_rows = weights.fallback[sentence * weights.heads]
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect();
        Self { weights: a, aggregate, fallback_rows }
    }

    pub fn layers(&self) -> usize {
        self.weights.rows()
    }
}

/// A report tagged with its sentence and strategy for CSV output.
#[derive(Clone, Debug)]
pub struct LabeledReport {
    pub text: String,
    pub strategy: String,
    pub report: AttentionReport,
}

/// One row per query layer plus an `aggregate` row per report:
/// `text,strategy,row,layer_1..layer_N,fallback`.
pub fn attention_csv(reports: &[LabeledReport]) -> String {
    let n = reports.iter().map(|r| r.report.layers()).max().unwrap_or(0);
    let mut out = String::from("text,strategy,row");
    for j in 1..=n {
        let _ = write!(out, ",layer_{j}");
    }
    out.push_str(",fallback\n");
    for r in reports {
        let prefix = format!("{},{}", csv_field(&r.text), csv_field(&r.strategy));
        let w = &r.report.weights;
        for i in 0..w.rows() {
            let _ = write!(out, "{prefix},{}", i + 1);
            for v in w.row(i) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", r.report.fallback_rows.contains(&i));
        }
        let _ = write!(out, "{prefix},aggregate");
        for v in &r.report.aggregate {
            let _ = write!(out, ",{v}");
        }
        out.push_str(",\n");
    }
    out
}

fn check_dims(stack: &LayerStack, params: &PoolerParams) -> Result<()> {
    if stack.dim() != params.dim() {
        return Err(Error::Shape(format!(
            "layer stack has dimension {} but pooler expects {}",
            stack.dim(),
            params.dim()
        )));
    }
    Ok(())
}

fn attention_streams(strategy: &dyn PoolingStrategy) -> Result<AttentionStreams> {
    strategy.attention_streams().ok_or_else(|| Error::NoAttention(strategy.name().to_string()))
}

/// Layer attention weights of `strategy` on one stack.
pub fn attention_scores(
    stack: &LayerStack,
    params: &PoolerParams,
    strategy: &dyn PoolingStrategy,
    norm: AttentionNorm,
) -> Result<AttentionReport> {
    check_dims(stack, params)?;
    let streams = attention_streams(strategy)?;
    let tape = Tape::inference();
    let batch = StackBatch::from_stacks(&tape, std::slice::from_ref(stack))?;
    let (_, weights) = layer_attention(&batch, &params.bind(&tape), streams, norm);
    Ok(AttentionReport::from_weights(&weights, 0))
}

/// The layer-averaged attention output `h^L`.
pub fn pool_layerwise(
    stack: &LayerStack,
    params: &PoolerParams,
    strategy: &dyn PoolingStrategy,
    norm: AttentionNorm,
) -> Result<Vec<f64>> {
    check_dims(stack, params)?;
    let streams = attention_streams(strategy)?;
    let tape = Tape::inference();
    let batch = StackBatch::from_stacks(&tape, std::slice::from_ref(stack))?;
    let (pooled, _) = layer_attention(&batch, &params.bind(&tape), streams, norm);
    Ok(pooled.value().row(0).to_vec())
}

/// `tanh(W · [cls_last; h_l] + b)`.
pub fn project(stack: &LayerStack, h_l: &[f64], params: &PoolerParams) -> Result<Vec<f64>> {
    check_dims(stack, params)?;
    if h_l.len() != params.dim() {
        return Err(Error::Shape(format!("pooled vector has {} entries, expected {}", h_l.len(), params.dim())));
    }
    let tape = Tape::inference();
    let cls = tape.constant(Matrix::row_vector(stack.cls_last()));
    let pooled = tape.constant(Matrix::row_vector(h_l));
    Ok(project_vars(cls, pooled, &params.bind(&tape)).value().row(0).to_vec())
}

/// Embedding of one stack under `strategy`.
pub fn pool(
    stack: &LayerStack,
    params: &PoolerParams,
    strategy: &dyn PoolingStrategy,
    norm: AttentionNorm,
) -> Result<Vec<f64>> {
    check_dims(stack, params)?;
    let tape = Tape::inference();
    let batch = StackBatch::from_stacks(&tape, std::slice::from_ref(stack))?;
    let pooled = strategy.pool(&batch, &params.bind(&tape), norm)?;
    Ok(pooled.embeddings.value().row(0).to_vec())
}
