//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};

use super::matrix::Matrix;
use super::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares the backward-pass gradient of `f` at `params` with central
/// differences of step `eps`.
///
/// `f` builds a scalar on the given tape from one variable per parameter
/// matrix. It is re-evaluated on inference tapes for every perturbed
/// coordinate, so it must be deterministic in its inputs.
pub fn grad_check<F>(f: F, params: &[Matrix], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::invalid("eps", format!("{eps} is outside [1e-6, 1e-4]")));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.shape() != (1, 1) {
        return Err(Error::Shape(format!("grad_check needs a scalar, got {:?}", out.shape())));
    }
    if !out.value().item().is_finite() {
        return Err(Error::NonFinite("grad_check objective"));
    }
    let grads = tape.backward(out);
    let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |perturbed: &[Matrix]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|p| tape.constant(p.clone())).collect();
        let y = f(&tape, &vars)?.value().item();
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite("grad_check objective"))
        }
    };

    let mut work: Vec<Matrix> = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), coordinates: 0 };
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[p].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (p, i);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(|_, v| Ok(v[0].mul(v[0])), &[Matrix::scalar(3.0)], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn linear_is_machine_precision() {
        let w = Matrix::row_vector(&[0.5, -2.0, 3.0]);
        let r = grad_check(
            move |t, v| Ok(v[0].mul(t.constant(w.clone())).sum_all()),
            &[Matrix::row_vector(&[1.0, 2.0, 3.0])],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn rejects_bad_eps_and_non_finite() {
        fn f<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
            Ok(v[0].sum_all())
        }
        fn g<'t>(t: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
            Ok(v[0].mul(t.constant(Matrix::scalar(f64::INFINITY))))
        }
        assert!(grad_check(f, &[Matrix::scalar(1.0)], 1e-2).is_err());
        assert!(matches!(grad_check(g, &[Matrix::scalar(1.0)], 1e-5), Err(Error::NonFinite(_))));
    }
}
