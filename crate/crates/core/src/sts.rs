//! Semantic textual similarity evaluation: Spearman correlation between
//! embedding cosines and gold scores, per-layer sweeps, and attention
//! reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::model::Model;
use crate::numeric::{cosine_sim, Matrix};
use crate::pooler::{attention_scores, LabeledReport, PoolingStrategy};

pub const MAX_SCORE: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StsRecord {
    pub sent1: String,
    pub sent2: String,
    pub score: f64,
}

fn check_score(score: f64) -> std::result::Result<(), String> {
    if (0.0..=MAX_SCORE).contains(&score) {
        Ok(())
    } else {
        Err(format!("score {score} is outside [0, {MAX_SCORE}]"))
    }
}

/// Reads JSONL (`{"sent1","sent2","score"}`) or TSV (`sent1<TAB>sent2<TAB>score`,
/// optional header line starting with `sent1`). The format is chosen by the
/// first non-blank character.
pub fn load_sts(path: &Path) -> Result<Vec<StsRecord>> {
    parse_sts(&fsio::read_to_string(path)?, path)
}

pub fn parse_sts(src: &str, path: &Path) -> Result<Vec<StsRecord>> {
    let jsonl = src.trim_start().starts_with('{');
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = |reason: String| Error::Record { path: path.to_path_buf(), line: i + 1, reason };
        let r = if jsonl {
            serde_json::from_str::<StsRecord>(line).map_err(|e| record(e.to_string()))?
        } else {
            let fields: Vec<&str> = line.split('\t').collect();
            if out.is_empty() && fields.first() == Some(&"sent1") {
                continue;
            }
            let [s1, s2, score] = fields[..] else {
                return Err(record(format!("expected 3 tab-separated fields, found {}", fields.len())));
            };
            let score = score.trim().parse::<f64>().map_err(|e| record(format!("score: {e}")))?;
            StsRecord { sent1: s1.to_string(), sent2: s2.to_string(), score }
        };
        check_score(r.score).map_err(record)?;
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("STS records"));
    }
    Ok(out)
}

pub fn sts_jsonl(records: &[StsRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("record") + "\n").collect()
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the average ranks of `xs` and `ys`.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("{} scores against {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("scores", "correlation needs at least 2 pairs"));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("spearman input"));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mean, b - mean);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("first score list"));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("second score list"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman between row-wise cosines of `a` and `b` and the gold scores.
pub fn score_embeddings(a: &Matrix, b: &Matrix, records: &[StsRecord]) -> Result<f64> {
    if a.shape() != b.shape() || a.rows() != records.len() {
        return Err(Error::Shape(format!("{:?} and {:?} embeddings for {} records", a.shape(), b.shape(), records.len())));
    }
    let cos = (0..a.rows())
        .map(|i| cosine_sim(a.row(i), b.row(i)).map_err(|_| Error::DegenerateEmbedding { index: i }))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<f64> = records.iter().map(|r| r.score).collect();
    spearman(&cos, &gold).map_err(|e| match e {
        Error::ZeroVariance("second score list") => Error::ZeroVariance("gold scores"),
        Error::ZeroVariance(_) => Error::ZeroVariance("predicted similarities"),
        e => e,
    })
}

fn sides(records: &[StsRecord]) -> Result<(Vec<&str>, Vec<&str>)> {
    if records.is_empty() {
        return Err(Error::EmptyInput("STS records"));
    }
    Ok(records.iter().map(|r| (r.sent1.as_str(), r.sent2.as_str())).unzip())
}

/// Embeds both sides without dropout and scores them.
pub fn evaluate(model: &Model, strategy: &dyn PoolingStrategy, records: &[StsRecord]) -> Result<f64> {
    let (left, right) = sides(records)?;
    score_embeddings(&model.embed_with(&left, strategy)?, &model.embed_with(&right, strategy)?, records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerPooling {
    Cls,
    Avg,
}

impl LayerPooling {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerPooling::Cls => "cls",
            LayerPooling::Avg => "avg",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    /// 1-based.
    pub layer: usize,
    pub pooling: LayerPooling,
    pub spearman: f64,
}

/// Scores the `[CLS]` and mean vectors of every single layer.
pub fn layer_sweep(model: &Model, records: &[StsRecord]) -> Result<Vec<SweepRow>> {
    let (left, right) = sides(records)?;
    let (a, b) = (model.layer_stacks(&left)?, model.layer_stacks(&right)?);
    let mut rows = Vec::new();
    for layer in 0..model.source.layers() {
        for pooling in [LayerPooling::Cls, LayerPooling::Avg] {
            let pick = |stacks: &[crate::encoder::LayerStack]| {
                let rows: Vec<Vec<f64>> = stacks
                    .iter()
                    .map(|s| match pooling {
                        LayerPooling::Cls => s.cls.row(layer).to_vec(),
                        LayerPooling::Avg => s.avg.row(layer).to_vec(),
                    })
                    .collect();
                Matrix::from_rows(&rows)
            };
            let spearman = score_embeddings(&pick(&a)?, &pick(&b)?, records)?;
            rows.push(SweepRow { layer: layer + 1, pooling, spearman });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("layer,pooling,spearman\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.layer, r.pooling.as_str(), r.spearman);
    }
    out
}

/// Layer attention weights of the model's strategy for each text.
pub fn attention_report(model: &Model, texts: &[&str]) -> Result<Vec<LabeledReport>> {
    let strategy = &*model.strategy;
    if strategy.attention_streams().is_none() {
        return Err(Error::NoAttention(strategy.name().to_string()));
    }
    let pooler = model.pooler()?;
    let stacks = model.layer_stacks(texts)?;
    texts
        .iter()
        .zip(&stacks)
        .map(|(t, s)| {
            Ok(LabeledReport {
                text: t.to_string(),
                strategy: strategy.name().to_string(),
                report: attention_scores(s, &pooler, strategy, model.norm)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Ranks by counting, independent of sorting.
    fn oracle_ranks(xs: &[f64]) -> Vec<f64> {
        xs.iter()
            .map(|&x| {
                let below = xs.iter().filter(|&&y| y < x).count() as f64;
                let equal = xs.iter().filter(|&&y| y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }

    fn oracle_spearman(xs: &[f64], ys: &[f64]) -> f64 {
        let (rx, ry) = (oracle_ranks(xs), oracle_ranks(ys));
        let n = xs.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-15);
        assert!((oracle_spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 0.8).abs() < 1e-15);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(matches!(spearman(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::ZeroVariance(_))));
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn spearman_matches_oracle_on_all_small_permutations() {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for i in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(i, n - 1);
                    out.push(q);
                }
            }
            out
        }
        for n in 2..=6 {
            // distinct values and a tied variant
            let bases: [Vec<f64>; 2] =
                [(0..n).map(|i| i as f64).collect(), (0..n).map(|i| (i / 2) as f64).collect()];
            for base in &bases {
                for p in permutations(n) {
                    let ys: Vec<f64> = p.iter().map(|&i| base[i]).collect();
                    match spearman(base, &ys) {
                        Ok(r) => assert!((r - oracle_spearman(base, &ys)).abs() < 1e-12, "{base:?} {ys:?}"),
                        Err(_) => assert!(oracle_spearman(base, &ys).is_nan()),
                    }
                }
            }
        }
    }

    #[test]
    fn parses_jsonl_and_tsv() {
        let p = Path::new("sts");
        let j = parse_sts("{\"sent1\":\"a\",\"sent2\":\"b\",\"score\":4.5}\n", p).unwrap();
        let t = parse_sts("sent1\tsent2\tscore\na\tb\t4.5\n", p).unwrap();
        assert_eq!(j, t);
        assert_eq!(parse_sts(&sts_jsonl(&j), p).unwrap(), j);
        assert!(matches!(parse_sts("a\tb\t5.5\n", p), Err(Error::Record { line: 1, .. })));
        assert!(matches!(parse_sts("a\tb\n", p), Err(Error::Record { .. })));
        assert!(matches!(parse_sts("\n", p), Err(Error::EmptyInput(_))));
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_monotone_maps(xs in proptest::collection::vec(-10.0f64..10.0, 2..30), seed in 0u64..1000) {
            let mut rng = crate::numeric::Rng::new(seed);
            let ys: Vec<f64> = xs.iter().map(|_| rng.symmetric(5.0)).collect();
            if let Ok(r) = spearman(&xs, &ys) {
                let tx: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
                let ty: Vec<f64> = ys.iter().map(|y| y * 3.0 - 7.0).collect();
                prop_assert!((spearman(&tx, &ty).unwrap() - r).abs() < 1e-12);
                prop_assert!((oracle_spearman(&xs, &ys) - r).abs() < 1e-12);
                let dup: Vec<f64> = xs.iter().chain(&xs).copied().collect();
                let dupy: Vec<f64> = ys.iter().chain(&ys).copied().collect();
                prop_assert!((spearman(&dup, &dupy).unwrap() - r).abs() < 1e-12);
            }
        }
    }
}
