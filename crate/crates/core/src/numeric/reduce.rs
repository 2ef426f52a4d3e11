//! Stable reductions shared by the pooler and the contrastive losses.

use crate::error::{Error, Result};

use super::matrix::{dot, norm, Matrix};
use super::rng::Rng;

/// Row-wise softmax with max-shift.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("log_sum_exp"));
    }
    Ok(log_sum_exp_unchecked(xs))
}

pub(crate) fn log_sum_exp_unchecked(xs: &[f64]) -> f64 {
    if xs.len() == 1 {
        return xs[0];
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {}- and {}-vectors", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 {
        return Err(Error::DegenerateEmbedding { index: 0 });
    }
    if nb == 0.0 {
        return Err(Error::DegenerateEmbedding { index: 1 });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Inverted-dropout mask: entries are `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Result<Matrix> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid("dropout_p", format!("{p} is outside [0, 1)")));
    }
    if p == 0.0 {
        return Ok(Matrix::filled(rows, cols, 1.0));
    }
    let keep = 1.0 / (1.0 - p);
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = if rng.uniform() < p { 0.0 } else { keep };
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![0.0, 3f64.ln(), f64::NEG_INFINITY]]).unwrap();
        let s = softmax_rows(&Matrix::from_rows(&[m.row(0).to_vec()]).unwrap());
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Matrix::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap());
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn lse_examples() {
        assert_eq!(log_sum_exp(&[5.0]).unwrap(), 5.0);
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(matches!(log_sum_exp(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[3.0, -1.0], &[3.0, -1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.707_106_78).abs() < 1e-8);
        assert!(matches!(
            cosine_sim(&[1.0, 0.0], &[0.0, 0.0]),
            Err(Error::DegenerateEmbedding { index: 1 })
        ));
    }

    #[test]
    fn dropout_examples() {
        let mut rng = Rng::new(0);
        assert!(dropout_mask(3, 3, 0.0, &mut rng).unwrap().data().iter().all(|&v| v == 1.0));
        let a = dropout_mask(4, 4, 0.5, &mut Rng::new(9)).unwrap();
        let b = dropout_mask(4, 4, 0.5, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(dropout_mask(1, 1, 1.0, &mut rng).is_err());

        // Binomial(10_000, 0.9) has sd 0.003 in keep fraction; 0.01 is > 3 sd.
        let m = dropout_mask(100, 100, 0.1, &mut Rng::new(42)).unwrap();
        let kept = m.data().iter().filter(|&&v| v != 0.0).count() as f64 / 10_000.0;
        assert!((kept - 0.9).abs() < 0.01, "keep fraction {kept}");
        assert!(m.data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            row in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let m = Matrix::row_vector(&row);
            let s = softmax_rows(&m);
            prop_assert!((s.sum() - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&v| v >= 0.0));
            let shifted = softmax_rows(&m.map(|v| v + shift));
            prop_assert!(s.max_abs_diff(&shifted) < 1e-12);
        }

        #[test]
        fn lse_bounds(xs in proptest::collection::vec(-100.0f64..100.0, 1..20), c in -10.0f64..10.0, n in 1usize..20) {
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(log_sum_exp(&xs).unwrap() >= max);
            let equal = vec![c; n];
            prop_assert!((log_sum_exp(&equal).unwrap() - (c + (n as f64).ln())).abs() < 1e-12);
        }
    }
}
