//! Contrastive InfoNCE objectives over pooled sentence embeddings.
//!
//! All three losses score each anchor against a candidate set by cosine
//! similarity divided by a temperature and take the cross-entropy of the
//! matching candidate, averaged over the batch.

mod registry;

pub use registry::{objective, Batch, Embedder, Objective, ObjectiveRegistry, SupBasic, SupHard, Unsup};

use crate::error::{Error, Result};
use crate::numeric::{cosine_sim, Matrix, Tape, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.05;

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("temperature", format!("{tau} is not a positive finite number")))
    }
}

/// Cosine similarities between every row of `a` and every row of `b`.
pub fn similarity_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!("similarity of {}- and {}-dim rows", a.cols(), b.cols())));
    }
    for m in [a, b] {
        if let Some(r) = (0..m.rows()).find(|&r| m.row(r).iter().all(|&v| v == 0.0)) {
            return Err(Error::DegenerateEmbedding { index: r });
        }
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            out.set(i, j, cosine_sim(a.row(i), b.row(j))?);
        }
    }
    Ok(out)
}

/// InfoNCE on the tape: anchor row `i` is matched to candidate row `i`; all
/// candidate rows act as negatives.
pub fn info_nce<'t>(anchors: Var<'t>, candidates: Var<'t>, tau: f64) -> Result<Var<'t>> {
    check_temperature(tau)?;
    let m = anchors.rows();
    if m == 0 {
        return Err(Error::EmptyInput("batch"));
    }
    if candidates.rows() < m || anchors.cols() != candidates.cols() {
        return Err(Error::Shape(format!(
            "{:?} anchors against {:?} candidates",
            anchors.shape(),
            candidates.shape()
        )));
    }
    let logits = anchors.normalize_rows()?.matmul_t(candidates.normalize_rows()?).scale(1.0 / tau);
    let targets: Vec<usize> = (0..m).collect();
    Ok(logits.cross_entropy(&targets))
}

/// Loss value with gradients for each input matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad_anchors: Matrix,
    pub grad_positives: Matrix,
    pub grad_negatives: Option<Matrix>,
}

fn check_batch(h: &Matrix, other: &Matrix, what: &str) -> Result<()> {
    if h.rows() == 0 {
        return Err(Error::EmptyInput("batch"));
    }
    if h.shape() != other.shape() {
        return Err(Error::Shape(format!("anchors {:?} vs {what} {:?}", h.shape(), other.shape())));
    }
    Ok(())
}

fn evaluate(h: &Matrix, h_pos: &Matrix, h_neg: Option<&Matrix>, tau: f64) -> Result<LossValue> {
    check_batch(h, h_pos, "positives")?;
    if let Some(n) = h_neg {
        check_batch(h, n, "hard negatives")?;
    }
    let tape = Tape::new();
    let a = tape.param(h.clone());
    let p = tape.param(h_pos.clone());
    let n = h_neg.map(|n| tape.param(n.clone()));
    let candidates = match n {
        Some(n) => Var::vstack(&[p, n]),
        None => p,
    };
    let loss = info_nce(a, candidates, tau)?;
    let grads = tape.backward(loss);
    Ok(LossValue {
        loss: loss.value().item(),
        grad_anchors: grads.wrt(a),
        grad_positives: grads.wrt(p),
        grad_negatives: n.map(|n| grads.wrt(n)),
    })
}

/// In-batch supervised loss: positives of other pairs are the negatives.
pub fn loss_sup_basic(h: &Matrix, h_pos: &Matrix, tau: f64) -> Result<LossValue> {
    evaluate(h, h_pos, None, tau)
}

/// Unsupervised loss over two dropout views of the same sentences; only the
/// second view supplies negatives.
pub fn loss_unsup_views(view1: &Matrix, view2: &Matrix, tau: f64) -> Result<LossValue> {
    evaluate(view1, view2, None, tau)
}

/// Supervised loss with one hard negative per anchor added to the
/// candidate set.
pub fn loss_sup_hard(h: &Matrix, h_pos: &Matrix, h_neg: &Matrix, tau: f64) -> Result<LossValue> {
    evaluate(h, h_pos, Some(h_neg), tau)
}

/// Loss from precomputed similarities: `pos[i][j] = sim(h_i, h_j^+)`,
/// `neg[i][j] = sim(h_i, h_j^-)`.
pub fn info_nce_from_similarities(pos: &Matrix, neg: Option<&Matrix>, tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    let m = pos.rows();
    if m == 0 || pos.cols() != m || neg.is_some_and(|n| n.shape() != pos.shape()) {
        return Err(Error::Shape(format!("similarities must be square, got {:?}", pos.shape())));
    }
    let mut total = 0.0;
    let mut row = Vec::with_capacity(2 * m);
    for i in 0..m {
        row.clear();
        row.extend(pos.row(i).iter().map(|s| s / tau));
        if let Some(n) = neg {
            row.extend(n.row(i).iter().map(|s| s / tau));
        }
        total += crate::numeric::log_sum_exp(&row)? - pos.get(i, i) / tau;
    }
    Ok(total / m as f64)
}

#[cfg(test)]
mod tests;
