//! Toy pre-norm transformer encoder producing per-layer `[CLS]` and mean
//! token vectors.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dropout_mask, AttentionNorm, Rng, Tape, Var};
use crate::params::{uniform_matrix, BoundParams, ParamSet};
use crate::numeric::Matrix;

use super::stack::{LayerStack, StackBatch};
use super::tokenizer::{CLS_ID, PAD_ID};

pub const PREFIX: &str = "encoder.";
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout_p: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { num_layers: 4, hidden_dim: 64, num_heads: 4, ffn_dim: 256, max_seq_len: 32, vocab_size: 0, dropout_p: 0.1 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::invalid("num_layers", "must be at least 1"));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::invalid(
                "hidden_dim",
                format!("{} is not a positive multiple of num_heads = {}", self.hidden_dim, self.num_heads),
            ));
        }
        if self.ffn_dim == 0 {
            return Err(Error::invalid("ffn_dim", "must be positive"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::invalid("max_seq_len", "must be at least 2 ([CLS] plus one token)"));
        }
        if self.vocab_size < 3 {
            return Err(Error::invalid("vocab_size", "must cover the 3 reserved ids"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid("dropout_p", format!("{} is outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    fn layer(&self, i: usize, part: &str) -> String {
        format!("{PREFIX}layer{i}.{part}")
    }

    /// Symmetric-uniform bound each tensor is initialized within. Gains are
    /// initialized to exactly 1 and biases to 0.
    pub fn init_bound(&self, name: &str) -> Option<f64> {
        let d = self.hidden_dim as f64;
        if name.ends_with("_emb") {
            Some(1.0 / d.sqrt())
        } else if name.ends_with(".weight") {
            let fan_in = if name.ends_with("ffn.out.weight") { self.ffn_dim as f64 } else { d };
            Some(1.0 / fan_in.sqrt())
        } else {
            None
        }
    }

    /// Adds freshly initialized encoder tensors to `params`.
    pub fn init_params(&self, rng: &mut Rng, params: &mut ParamSet) -> Result<()> {
        self.validate()?;
        let d = self.hidden_dim;
        let mut add_uniform = |params: &mut ParamSet, name: String, rows: usize, cols: usize| {
            let bound = self.init_bound(&name).expect("uniform-initialized tensor");
            params.insert(name, uniform_matrix(rows, cols, bound, rng));
        };
        add_uniform(params, format!("{PREFIX}tok_emb"), self.vocab_size, d);
        add_uniform(params, format!("{PREFIX}pos_emb"), self.max_seq_len, d);
        for i in 0..self.num_layers {
            for ln in ["ln1", "ln2"] {
                params.insert(self.layer(i, &format!("{ln}.gain")), Matrix::filled(1, d, 1.0));
                params.insert(self.layer(i, &format!("{ln}.bias")), Matrix::zeros(1, d));
            }
            for proj in ["attn.q", "attn.k", "attn.v", "attn.out"] {
                add_uniform(params, self.layer(i, &format!("{proj}.weight")), d, d);
                params.insert(self.layer(i, &format!("{proj}.bias")), Matrix::zeros(1, d));
            }
            add_uniform(params, self.layer(i, "ffn.in.weight"), self.ffn_dim, d);
            params.insert(self.layer(i, "ffn.in.bias"), Matrix::zeros(1, self.ffn_dim));
            add_uniform(params, self.layer(i, "ffn.out.weight"), d, self.ffn_dim);
            params.insert(self.layer(i, "ffn.out.bias"), Matrix::zeros(1, d));
        }
        Ok(())
    }

    /// Encodes a batch of token sequences into layer stacks on `tape`.
    ///
    /// `[PAD]` ids are dropped before encoding while the remaining tokens
    /// keep their original positions, which is equivalent to masking pad keys
    /// out of attention and out of the mean. With `dropout` set, masks are
    /// drawn from it in a fixed order; without it the pass is deterministic.
    pub fn encode_batch<'t>(
        &self,
        params: &BoundParams<'t>,
        sequences: &[Vec<u32>],
        mut dropout: Option<&mut Rng>,
    ) -> Result<StackBatch<'t>> {
        if sequences.is_empty() {
            return Err(Error::EmptyInput("token sequences"));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments: Vec<Range<usize>> = Vec::with_capacity(sequences.len());
        for seq in sequences {
            if seq.first() != Some(&CLS_ID) {
                return Err(Error::invalid("tokens", "sequence must start with [CLS]"));
            }
            if seq.len() > self.max_seq_len {
                return Err(Error::invalid(
                    "tokens",
                    format!("{} tokens exceed max_seq_len = {}", seq.len(), self.max_seq_len),
                ));
            }
            let start = ids.len();
            for (pos, &id) in seq.iter().enumerate() {
                if id as usize >= self.vocab_size {
                    return Err(Error::TokenOutOfRange { id, vocab_size: self.vocab_size });
                }
                if id == PAD_ID {
                    continue;
                }
                ids.push(id as usize);
                positions.push(pos);
            }
            segments.push(start..ids.len());
        }
        let starts: Vec<usize> = segments.iter().map(|s| s.start).collect();
        let tape = params.get(&format!("{PREFIX}tok_emb")).tape();
        let p = self.dropout_p;

        let mut drop = |x: Var<'t>| -> Result<Var<'t>> {
            match dropout.as_deref_mut() {
                Some(rng) if p > 0.0 => {
                    let (r, c) = x.shape();
                    Ok(x.mul(tape.constant(dropout_mask(r, c, p, rng)?)))
                }
                _ => Ok(x),
            }
        };
        let linear = |x: Var<'t>, name: String| {
            x.matmul_t(params.get(&format!("{name}.weight"))).add_row(params.get(&format!("{name}.bias")))
        };

        let tok = params.get(&format!("{PREFIX}tok_emb")).gather_rows(&ids);
        let pos = params.get(&format!("{PREFIX}pos_emb")).gather_rows(&positions);
        let mut x = drop(tok.add(pos))?;

        let head_scale = 1.0 / ((self.hidden_dim / self.num_heads) as f64).sqrt();
        let mut cls_layers = Vec::with_capacity(self.num_layers);
        let mut avg_layers = Vec::with_capacity(self.num_layers);
        for i in 0..self.num_layers {
            let h = x.layer_norm(params.get(&self.layer(i, "ln1.gain")), params.get(&self.layer(i, "ln1.bias")), LN_EPS);
            let q = linear(h, self.layer(i, "attn.q"));
            let k = linear(h, self.layer(i, "attn.k"));
            let v = linear(h, self.layer(i, "attn.v"));
            let (attn, _) =
                Var::segment_attention(q, k, v, &segments, self.num_heads, head_scale, AttentionNorm::Softmax);
            x = x.add(drop(linear(attn, self.layer(i, "attn.out")))?);

            let h = x.layer_norm(params.get(&self.layer(i, "ln2.gain")), params.get(&self.layer(i, "ln2.bias")), LN_EPS);
            let f = linear(linear(h, self.layer(i, "ffn.in")).gelu(), self.layer(i, "ffn.out"));
            x = x.add(drop(f)?);

            cls_layers.push(x.gather_rows(&starts));
            avg_layers.push(x.segment_mean(&segments));
        }

        // vstack puts layer i of sentence s at row i * count + s; reorder to
        // sentence-major.
        let count = sequences.len();
        let layers = self.num_layers;
        let order: Vec<usize> = (0..count).flat_map(|s| (0..layers).map(move |i| i * count + s)).collect();
        Ok(StackBatch {
            cls: Var::vstack(&cls_layers).gather_rows(&order),
            avg: Var::vstack(&avg_layers).gather_rows(&order),
            layers,
            count,
        })
    }

    /// Single-sequence convenience around [`encode_batch`](Self::encode_batch).
    /// `train_mode = false` disables dropout.
    pub fn encode(&self, params: &ParamSet, tokens: &[u32], rng: &mut Rng, train_mode: bool) -> Result<LayerStack> {
        let tape = Tape::inference();
        let bound = params.bind(&tape, |_| false);
        let batch = self.encode_batch(&bound, &[tokens.to_vec()], train_mode.then_some(rng))?;
        Ok(batch.to_stacks().remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::domain;

    fn tiny(layers: usize, dim: usize) -> (EncoderConfig, ParamSet) {
        let cfg = EncoderConfig {
            num_layers: layers,
            hidden_dim: dim,
            num_heads: 2,
            ffn_dim: 8,
            max_seq_len: 8,
            vocab_size: 10,
            dropout_p: 0.1,
        };
        let mut params = ParamSet::new();
        cfg.init_params(&mut Rng::new(5), &mut params).unwrap();
        (cfg, params)
    }

    #[test]
    fn shape_contract() {
        let (cfg, params) = tiny(2, 4);
        let stack = cfg.encode(&params, &[0, 3, 4, 5], &mut Rng::new(0), false).unwrap();
        assert_eq!(stack.cls.shape(), (2, 4));
        assert_eq!(stack.avg.shape(), (2, 4));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (cfg, params) = tiny(2, 4);
        let a = cfg.encode(&params, &[0, 3, 4], &mut Rng::new(1), false).unwrap();
        let b = cfg.encode(&params, &[0, 3, 4], &mut Rng::new(2), false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn independent_dropout_streams_differ() {
        let (cfg, params) = tiny(2, 4);
        let root = Rng::new(11);
        let mut differing = 0;
        for trial in 0..20 {
            let mut z = root.derive(domain::DROPOUT_VIEW, 2 * trial);
            let mut z2 = root.derive(domain::DROPOUT_VIEW, 2 * trial + 1);
            let a = cfg.encode(&params, &[0, 3, 4, 5, 6], &mut z, true).unwrap();
            let b = cfg.encode(&params, &[0, 3, 4, 5, 6], &mut z2, true).unwrap();
            if a != b {
                differing += 1;
            }
        }
        assert_eq!(differing, 20);
    }

    #[test]
    fn avg_is_mean_of_non_pad_tokens_and_pad_is_masked() {
        let (cfg, params) = tiny(3, 4);
        let tape = Tape::inference();
        let bound = params.bind(&tape, |_| false);
        let padded = cfg.encode_batch(&bound, &[vec![0, 3, 4, PAD_ID, PAD_ID]], None).unwrap().to_stacks();
        let plain = cfg.encode_batch(&bound, &[vec![0, 3, 4]], None).unwrap().to_stacks();
        assert_eq!(padded, plain);
    }

    #[test]
    fn errors() {
        let (cfg, params) = tiny(1, 4);
        let mut rng = Rng::new(0);
        assert!(matches!(
            cfg.encode(&params, &[0, 42], &mut rng, false),
            Err(Error::TokenOutOfRange { id: 42, .. })
        ));
        assert!(cfg.encode(&params, &[3, 4], &mut rng, false).is_err());
        let bad = EncoderConfig { hidden_dim: 5, num_heads: 2, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let (cfg, a) = tiny(2, 4);
        let (_, b) = tiny(2, 4);
        assert_eq!(a, b);
        let mut c = ParamSet::new();
        cfg.init_params(&mut Rng::new(6), &mut c).unwrap();
        assert_ne!(a, c);
        for (name, m) in a.iter() {
            match cfg.init_bound(name) {
                Some(bound) => assert!(m.data().iter().all(|v| v.abs() <= bound), "{name}"),
                None if name.ends_with("gain") => assert!(m.data().iter().all(|&v| v == 1.0)),
                None => assert!(m.data().iter().all(|&v| v == 0.0), "{name}"),
            }
        }
    }
}
