use proptest::prelude::*;

use super::*;
use crate::corpus::{Corpus, Pair, Triplet};
use crate::numeric::{grad_check, Rng};

const LN_1P_INV_E: f64 = 0.313_261_687_518_222_9;

fn rows(v: &[&[f64]]) -> Matrix {
    Matrix::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random(m: usize, d: usize, rng: &mut Rng) -> Matrix {
    let mut x = Matrix::zeros(m, d);
    x.data_mut().iter_mut().for_each(|v| *v = rng.symmetric(1.0) + 0.01);
    x
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Double loop straight from the definition; no log-sum-exp.
fn naive_loss(h: &Matrix, pos: &Matrix, neg: Option<&Matrix>, tau: f64) -> f64 {
    let m = h.rows();
    let mut total = 0.0;
    for i in 0..m {
        let num = (naive_cos(h.row(i), pos.row(i)) / tau).exp();
        let mut den = 0.0;
        for j in 0..m {
            den += (naive_cos(h.row(i), pos.row(j)) / tau).exp();
            if let Some(n) = neg {
                den += (naive_cos(h.row(i), n.row(j)) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / m as f64
}

#[test]
fn similarity_examples() {
    let a = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let s = 0.5f64.sqrt();
    let b = rows(&[&[s, s], &[1.0, 0.0]]);
    let sim = similarity_matrix(&a, &b).unwrap();
    let expected = rows(&[&[s, 1.0], &[s, 0.0]]);
    assert!(sim.max_abs_diff(&expected) < 1e-15);
    assert_eq!(similarity_matrix(&a, &a).unwrap(), Matrix::identity(2));

    let zero = rows(&[&[1.0, 0.0], &[0.0, 0.0]]);
    assert!(matches!(similarity_matrix(&a, &zero), Err(Error::DegenerateEmbedding { index: 1 })));
    assert!(matches!(similarity_matrix(&a, &Matrix::zeros(1, 3)), Err(Error::Shape(_))));
}

#[test]
fn singleton_batch_has_zero_loss() {
    let h = rows(&[&[0.3, -2.0]]);
    let v = loss_sup_basic(&h, &rows(&[&[1.0, 1.0]]), 0.05).unwrap();
    assert_eq!(v.loss, 0.0);
    assert!(v.grad_anchors.data().iter().all(|&g| g == 0.0));
}

#[test]
fn orthogonal_pairs_closed_form() {
    let e = Matrix::identity(2);
    assert!((loss_sup_basic(&e, &e, 1.0).unwrap().loss - LN_1P_INV_E).abs() < 1e-12);
    assert!((loss_unsup_views(&e, &e, 1.0).unwrap().loss - LN_1P_INV_E).abs() < 1e-12);
    assert!((LN_1P_INV_E - (1.0 + (-1f64).exp()).ln()).abs() < 1e-16);

    let h = rows(&[&[1.0, 0.0]]);
    let hard = loss_sup_hard(&h, &h, &rows(&[&[0.0, 5.0]]), 1.0).unwrap();
    assert!((hard.loss - LN_1P_INV_E).abs() < 1e-12);
}

#[test]
fn very_negative_hard_negatives_recover_basic_loss() {
    let mut rng = Rng::new(3);
    let (h, p) = (random(6, 4, &mut rng), random(6, 4, &mut rng));
    let tau = 0.05;
    let sims = similarity_matrix(&h, &p).unwrap();
    let neg = Matrix::filled(6, 6, -50.0 * tau);
    let basic = info_nce_from_similarities(&sims, None, tau).unwrap();
    let hard = info_nce_from_similarities(&sims, Some(&neg), tau).unwrap();
    assert!((basic - hard).abs() < 1e-15, "{basic} vs {hard}");
    assert!((basic - loss_sup_basic(&h, &p, tau).unwrap().loss).abs() < 1e-12);
}

#[test]
fn input_validation() {
    let e = Matrix::identity(2);
    assert!(matches!(loss_sup_basic(&e, &e, 0.0), Err(Error::InvalidValue { name: "temperature", .. })));
    assert!(matches!(loss_sup_basic(&e, &Matrix::identity(3), 1.0), Err(Error::Shape(_))));
    assert!(matches!(loss_sup_basic(&Matrix::zeros(0, 2), &Matrix::zeros(0, 2), 1.0), Err(Error::EmptyInput(_))));
    // indexed within the stacked candidates: positives first, then negatives
    assert!(matches!(
        loss_sup_hard(&e, &e, &rows(&[&[1.0, 0.0], &[0.0, 0.0]]), 1.0),
        Err(Error::DegenerateEmbedding { index: 3 })
    ));
}

#[test]
fn loss_gradients_match_finite_differences() {
    fn basic<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
        info_nce(v[0], v[1], 0.5)
    }
    fn hard<'t>(_: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
        info_nce(v[0], Var::vstack(&[v[1], v[2]]), 0.5)
    }
    let mut rng = Rng::new(11);
    let inputs: Vec<Matrix> = (0..3).map(|_| random(4, 5, &mut rng)).collect();
    assert!(grad_check(basic, &inputs[..2], 1e-5).unwrap().max_rel_error < 1e-4);
    assert!(grad_check(hard, &inputs, 1e-5).unwrap().max_rel_error < 1e-4);

    let v = loss_sup_hard(&inputs[0], &inputs[1], &inputs[2], 0.5).unwrap();
    assert_eq!(v.grad_negatives.as_ref().map(Matrix::shape), Some((4, 5)));
}

/// Maps each text to a fixed vector; dropout adds seeded noise.
struct Table<'t> {
    tape: &'t Tape,
    vectors: Vec<(&'static str, Vec<f64>)>,
    noise: f64,
}

impl<'t> Embedder<'t> for Table<'t> {
    fn embed(&mut self, texts: &[&str], dropout: Option<&mut Rng>) -> Result<Var<'t>> {
        let mut rows = Vec::new();
        let mut rng = dropout;
        for t in texts {
            let mut v = self.vectors.iter().find(|(k, _)| k == t).expect("known text").1.clone();
            if let Some(r) = rng.as_deref_mut() {
                v.iter_mut().for_each(|x| *x += self.noise * r.symmetric(1.0));
            }
            rows.push(v);
        }
        Ok(self.tape.param(Matrix::from_rows(&rows)?))
    }
}

#[test]
fn unsup_objective_views() {
    let tape = Tape::new();
    let mut table = Table { tape: &tape, vectors: vec![("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])], noise: 0.0 };
    let batch = Unsup.batch(&Corpus::Bare(vec!["a".into(), "b".into()]), &[0, 1]).unwrap();
    let loss = Unsup.loss(&batch, &mut table, &Rng::new(0), 1.0).unwrap();
    assert!((loss.value().item() - LN_1P_INV_E).abs() < 1e-12);

    table.noise = 0.3;
    let step = Rng::new(5);
    let loss = Unsup.loss(&batch, &mut table, &step, 0.05).unwrap().value().item();
    assert!(loss.is_finite() && loss >= 0.0);
    // the two dropout views differ, so the loss is no longer the noiseless value
    let clean = loss_unsup_views(&Matrix::identity(2), &Matrix::identity(2), 0.05).unwrap().loss;
    assert_ne!(loss, clean);
}

#[test]
fn objectives_check_corpus_shape() {
    let pairs = Corpus::Pairs(vec![Pair { sent1: "a".into(), sent2: "b".into() }]);
    let trip = Corpus::Triplets(vec![Triplet { anchor: "a".into(), positive: "b".into(), negative: "c".into() }]);
    let bare = Corpus::Bare(vec!["a".into()]);
    let hard = objective("sup_hard").unwrap();
    assert!(matches!(hard.check_corpus(&pairs), Err(Error::CorpusMismatch { .. })));
    assert!(hard.check_corpus(&trip).is_ok());
    assert!(SupBasic.check_corpus(&trip).is_ok());
    assert!(SupBasic.check_corpus(&bare).is_err());
    assert!(Unsup.check_corpus(&pairs).is_err());
    assert!(matches!(objective("triplet"), Err(Error::UnknownObjective(_))));

    let b = SupHard.batch(&trip, &[0]).unwrap();
    assert_eq!(b.hard_negatives, Some(vec!["c".to_string()]));
    assert_eq!(SupBasic.batch(&trip, &[0]).unwrap().hard_negatives, None);
    assert!(Batch::new(vec!["a".into()], vec![], None).is_err());
}

proptest! {
    #[test]
    fn losses_match_naive_oracle(seed in 0u64..100_000, m in 1usize..17, d in 2usize..9, tau in 0.05f64..2.0) {
        let mut rng = Rng::new(seed);
        let (h, p, n) = (random(m, d, &mut rng), random(m, d, &mut rng), random(m, d, &mut rng));
        let basic = loss_sup_basic(&h, &p, tau).unwrap().loss;
        let hard = loss_sup_hard(&h, &p, &n, tau).unwrap().loss;
        prop_assert!((basic - naive_loss(&h, &p, None, tau)).abs() < 1e-10);
        prop_assert!((hard - naive_loss(&h, &p, Some(&n), tau)).abs() < 1e-10);
        prop_assert!(basic >= 0.0 && hard >= basic);
    }

    #[test]
    fn losses_ignore_row_scale_and_batch_order(seed in 0u64..100_000, m in 1usize..9, scale in 0.01f64..100.0) {
        let mut rng = Rng::new(seed);
        let (h, p, n) = (random(m, 4, &mut rng), random(m, 4, &mut rng), random(m, 4, &mut rng));
        let base = loss_sup_hard(&h, &p, &n, 0.1).unwrap().loss;
        let scaled = loss_sup_hard(&h.scale(scale), &p.scale(scale), &n.scale(scale), 0.1).unwrap().loss;
        prop_assert!((base - scaled).abs() < 1e-10);

        let mut perm: Vec<usize> = (0..m).collect();
        rng.shuffle(&mut perm);
        let permuted = loss_sup_hard(&h.select_rows(&perm), &p.select_rows(&perm), &n.select_rows(&perm), 0.1).unwrap().loss;
        prop_assert!((base - permuted).abs() < 1e-10);
    }

    #[test]
    fn large_temperature_limit(seed in 0u64..100_000, m in 1usize..17) {
        let mut rng = Rng::new(seed);
        let (h, p, n) = (random(m, 3, &mut rng), random(m, 3, &mut rng), random(m, 3, &mut rng));
        let mf = m as f64;
        prop_assert!((loss_sup_basic(&h, &p, 1e6).unwrap().loss - mf.ln()).abs() < 1e-6);
        prop_assert!((loss_unsup_views(&h, &p, 1e6).unwrap().loss - mf.ln()).abs() < 1e-6);
        prop_assert!((loss_sup_hard(&h, &p, &n, 1e6).unwrap().loss - (2.0 * mf).ln()).abs() < 1e-6);
    }
}
