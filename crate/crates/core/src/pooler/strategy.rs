//! Pooling strategies: fixed baselines and layer-wise attention variants.

use std::fmt;

use crate::encoder::StackBatch;
use crate::error::Result;
use crate::numeric::{AttentionNorm, AttentionWeights, Var};

use super::params::PoolerVars;

/// Which per-layer vector feeds an attention role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Cls,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionStreams {
    pub query: Stream,
    pub key: Stream,
    pub value: Stream,
}

/// Output of a strategy over a batch.
pub struct Pooled<'t> {
    /// One embedding per sentence.
    pub embeddings: Var<'t>,
    /// Layer attention weights, one `N×N` matrix per sentence.
    pub attention: Option<AttentionWeights>,
}

/// A way of turning layer stacks into sentence embeddings.
pub trait PoolingStrategy: Send + Sync + fmt::Debug {
    /// Identifier used in configs and on the command line.
    fn name(&self) -> &'static str;

    /// Human-readable description, e.g. `Attn(CLS_All+AVG_All)`.
    fn label(&self) -> &'static str;

    fn output_dim(&self, dim: usize) -> usize;

    /// Streams for layer attention; `None` for fixed strategies.
    fn attention_streams(&self) -> Option<AttentionStreams> {
        None
    }

    /// Whether the output depends on pooler parameters.
    fn uses_params(&self) -> bool {
        self.attention_streams().is_some()
    }

    fn pool<'t>(&self, stacks: &StackBatch<'t>, pooler: &PoolerVars<'t>, norm: AttentionNorm) -> Result<Pooled<'t>>;
}

fn stream<'t>(stacks: &StackBatch<'t>, s: Stream) -> Var<'t> {
    match s {
        Stream::Cls => stacks.cls,
        Stream::Avg => stacks.avg,
    }
}

fn fixed(embeddings: Var<'_>) -> Result<Pooled<'_>> {
    Ok(Pooled { embeddings, attention: None })
}

/// Layer attention: projected queries from layer `i` score projected keys of
/// every layer `j`; each row of scores is normalized and mixes the projected
/// values; the mixed rows are averaged over layers. Returns `count × d`.
pub fn layer_attention<'t>(
    stacks: &StackBatch<'t>,
    pooler: &PoolerVars<'t>,
    streams: AttentionStreams,
    norm: AttentionNorm,
) -> (Var<'t>, AttentionWeights) {
    let q = stream(stacks, streams.query).matmul_t(pooler.w_q);
    let k = stream(stacks, streams.key).matmul_t(pooler.w_k);
    let v = stream(stacks, streams.value).matmul_t(pooler.w_v);
    let segments = stacks.segments();
    let (mixed, weights) = Var::segment_attention(q, k, v, &segments, 1, 1.0, norm);
    (mixed.segment_mean(&segments), weights)
}

/// `tanh(W · [cls_last; pooled] + b)`
pub fn project<'t>(cls_last: Var<'t>, pooled: Var<'t>, pooler: &PoolerVars<'t>) -> Var<'t> {
    Var::hconcat(&[cls_last, pooled]).matmul_t(pooler.mlp_weight).add_row(pooler.mlp_bias).tanh()
}

#[derive(Debug, Default)]
pub struct ClsLast;

impl PoolingStrategy for ClsLast {
    fn name(&self) -> &'static str {
        "cls_last"
    }
    fn label(&self) -> &'static str {
        "CLS_Last"
    }
    fn output_dim(&self, dim: usize) -> usize {
        dim
    }
    fn pool<'t>(&self, stacks: &StackBatch<'t>, _: &PoolerVars<'t>, _: AttentionNorm) -> Result<Pooled<'t>> {
        fixed(stacks.cls.gather_rows(&stacks.last_rows()))
    }
}

#[derive(Debug, Default)]
pub struct AvgLast;

impl PoolingStrategy for AvgLast {
    fn name(&self) -> &'static str {
        "avg_last"
    }
    fn label(&self) -> &'static str {
        "AVG_Last"
    }
    fn output_dim(&self, dim: usize) -> usize {
        dim
    }
    fn pool<'t>(&self, stacks: &StackBatch<'t>, _: &PoolerVars<'t>, _: AttentionNorm) -> Result<Pooled<'t>> {
        fixed(stacks.avg.gather_rows(&stacks.last_rows()))
    }
}

fn avg_first_last<'t>(stacks: &StackBatch<'t>) -> Var<'t> {
    let first = stacks.avg.gather_rows(&stacks.layer_rows(0));
    let last = stacks.avg.gather_rows(&stacks.last_rows());
    first.add(last).scale(0.5)
}

/// Mean of the first and last layers' mean-token vectors.
#[derive(Debug, Default)]
pub struct AvgFirstLast;

impl PoolingStrategy for AvgFirstLast {
    fn name(&self) -> &'static str {
        "avg_fl"
    }
    fn label(&self) -> &'static str {
        "AVG_FL"
    }
    fn output_dim(&self, dim: usize) -> usize {
        dim
    }
    fn pool<'t>(&self, stacks: &StackBatch<'t>, _: &PoolerVars<'t>, _: AttentionNorm) -> Result<Pooled<'t>> {
        fixed(avg_first_last(stacks))
    }
}

/// `[AVG_Last; AVG_FL]`, `2d` wide.
#[derive(Debug, Default)]
pub struct ConcatAvg;

impl PoolingStrategy for ConcatAvg {
    fn name(&self) -> &'static str {
        "concat_avg"
    }
    fn label(&self) -> &'static str {
        "Concat(AVG_Last, AVG_FL)"
    }
    fn output_dim(&self, dim: usize) -> usize {
        2 * dim
    }
    fn pool<'t>(&self, stacks: &StackBatch<'t>, _: &PoolerVars<'t>, _: AttentionNorm) -> Result<Pooled<'t>> {
        let last = stacks.avg.gather_rows(&stacks.last_rows());
        fixed(Var::hconcat(&[last, avg_first_last(stacks)]))
    }
}

/// `[CLS_Last; AVG_Last]`, `2d` wide.
#[derive(Debug, Default)]
pub struct ConcatClsAvg;

impl PoolingStrategy for ConcatClsAvg {
    fn name(&self) -> &'static str {
        "concat_cls_avg"
    }
    fn label(&self) -> &'static str {
        "Concat(CLS_Last, AVG_Last)"
    }
    fn output_dim(&self, dim: usize) -> usize {
        2 * dim
    }
    fn pool<'t>(&self, stacks: &StackBatch<'t>, _: &PoolerVars<'t>, _: AttentionNorm) -> Result<Pooled<'t>> {
        let rows = stacks.last_rows();
        fixed(Var::hconcat(&[stacks.cls.gather_rows(&rows), stacks.avg.gather_rows(&rows)]))
    }
}

/// Layer-wise attention pooling, optionally followed by concatenation with
/// the last-layer `[CLS]` vector and the tanh projection.
#[derive(Debug)]
pub struct LayerAttention {
    name: &'static str,
    label: &'static str,
    streams: AttentionStreams,
    concat_cls: bool,
}

impl LayerAttention {
    pub const fn new(name: &'static str, label: &'static str, streams: AttentionStreams, concat_cls: bool) -> Self {
        Self { name, label, streams, concat_cls }
    }

    pub fn concat_cls(&self) -> bool {
        self.concat_cls
    }
}

impl PoolingStrategy for LayerAttention {
    fn name(&self) -> &'static str {
        self.name
    }
    fn label(&self) -> &'static str {
        self.label
    }
    fn output_dim(&self, dim: usize) -> usize {
        dim
    }
    fn attention_streams(&self) -> Option<AttentionStreams> {
        Some(self.streams)
    }
    fn pool<'t>(&self, stacks: &StackBatch<'t>, pooler: &PoolerVars<'t>, norm: AttentionNorm) -> Result<Pooled<'t>> {
        let (pooled, weights) = layer_attention(stacks, pooler, self.streams, norm);
        let embeddings = if self.concat_cls {
            project(stacks.cls.gather_rows(&stacks.last_rows()), pooled, pooler)
        } else {
            pooled
        };
        Ok(Pooled { embeddings, attention: Some(weights) })
    }
}

const CLS_ALL: AttentionStreams = AttentionStreams { query: Stream::Cls, key: Stream::Cls, value: Stream::Cls };
const AVG_ALL: AttentionStreams = AttentionStreams { query: Stream::Avg, key: Stream::Avg, value: Stream::Avg };
const CLS_AVG_ALL: AttentionStreams = AttentionStreams { query: Stream::Cls, key: Stream::Avg, value: Stream::Avg };

pub const ATTN_CLS: LayerAttention = LayerAttention::new("attn_cls", "Attn(CLS_All)", CLS_ALL, false);
pub const ATTN_AVG: LayerAttention = LayerAttention::new("attn_avg", "Attn(AVG_All)", AVG_ALL, false);
pub const ATTN_CLS_AVG: LayerAttention =
    LayerAttention::new("attn_cls_avg", "Attn(CLS_All+AVG_All)", CLS_AVG_ALL, false);
pub const ATTN_CLS_AVG_CONCAT: LayerAttention = LayerAttention::new(
    "attn_cls_avg_concat",
    "Attn(CLS_All+AVG_All)+Concat(CLS_Last)",
    CLS_AVG_ALL,
    true,
);
