use std::sync::Arc;

use layerpool::encoder::{EncoderConfig, StackBatch};
use layerpool::model::InferencePooling;
use layerpool::numeric::{AttentionNorm, Rng};
use layerpool::pooler::{builtin_names, PoolerVars, Pooled, PoolingStrategy, StrategyRegistry};
use layerpool::search::{embed_corpus, IvfIndex};
use layerpool::sts::evaluate;
use layerpool::synth::Generator;
use layerpool::trainer::{train, TrainConfig};
use layerpool::{Error, Result};

/// [CLS] of the first layer.
#[derive(Debug)]
struct ClsFirst;

impl PoolingStrategy for ClsFirst {
    fn name(&self) -> &'static str {
        "cls_first"
    }

    fn label(&self) -> &'static str {
        "CLS_1"
    }

    fn output_dim(&self, dim: usize) -> usize {
        dim
    }

    fn pool<'t>(&self, stacks: &StackBatch<'t>, _: &PoolerVars<'t>, _: AttentionNorm) -> Result<Pooled<'t>> {
        let first: Vec<usize> = (0..stacks.count).map(|s| s * stacks.layers).collect();
        Ok(Pooled { embeddings: stacks.cls.gather_rows(&first), attention: None })
    }
}

#[test]
fn registry_accepts_new_strategies() {
    let mut r = StrategyRegistry::builtin();
    assert_eq!(r.names().count(), builtin_names().len());
    assert!(matches!(r.get("cls_first"), Err(Error::UnknownStrategy(_))));
    assert!(r.register(Arc::new(ClsFirst)).is_none());
    assert_eq!(r.get("cls_first").unwrap().label(), "CLS_1");
    assert!(!r.get("cls_first").unwrap().uses_params());
    assert!(r.get("attn_cls_avg_concat").unwrap().uses_params());
}

#[test]
fn train_evaluate_and_search() {
    let mut g = Generator::new(11);
    let corpus = g.triplets(64);
    let sts = g.sts(40);
    let config = TrainConfig {
        epochs: 2,
        batch_size: 8,
        encoder: EncoderConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_seq_len: 16,
            vocab_size: 0,
            dropout_p: 0.1,
        },
        ..TrainConfig::new("sup_hard")
    };
    let run = train(config, &corpus, None).unwrap();
    assert_eq!(run.losses.len(), 16);
    assert!(run.losses.iter().all(|l| l.loss.is_finite()));

    let model = run.checkpoint.model(None).unwrap();
    let custom = evaluate(&model, &ClsFirst, &sts).unwrap();
    let trained = evaluate(&model, &*model.strategy, &sts).unwrap();
    assert!((-1.0..=1.0).contains(&custom) && (-1.0..=1.0).contains(&trained));

    let texts = corpus.texts();
    let emb = embed_corpus(&model, &texts, InferencePooling::Detached).unwrap();
    let index = IvfIndex::build(emb.clone(), 4, &mut Rng::new(0)).unwrap();
    for i in [0, 17, 40] {
        let q: Vec<f64> = emb.row(i).iter().map(|&v| v as f64).collect();
        let hits = index.query(&q, 5, 4).unwrap();
        assert!((hits[0].similarity - 1.0).abs() < 1e-6, "{hits:?}");
    }
}
