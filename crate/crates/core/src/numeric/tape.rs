//! Reverse-mode differentiation over dense matrices.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep. Each op records the indices of
//! its inputs and a closure mapping the upstream gradient to input gradients.
//! Ops whose inputs do not require gradients record nothing.
//!
//! Shape mismatches inside the tape are programming errors and panic; public
//! entry points validate shapes before building graphs.

use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::matrix::{dot, Matrix};
use super::reduce::{log_sum_exp_unchecked, softmax_in_place};

type BackwardFn = Box<dyn Fn(&Matrix, &[bool]) -> Vec<Option<Matrix>>>;

struct Node {
    value: Rc<Matrix>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({r}x{c})", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A tape that never records backward closures.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Matrix) -> Var<'_> {
        self.leaf(value, self.grad_enabled)
    }

    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Matrix, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, parents: Vec::new(), backward: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, value: Matrix, parents: &[Var<'_>], backward: impl Fn(&Matrix, &[bool]) -> Vec<Option<Matrix>> + 'static) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && parents.iter().any(|p| nodes[p.id].requires_grad);
        let (parents, backward): (Vec<usize>, Option<BackwardFn>) = if requires_grad {
            (parents.iter().map(|p| p.id).collect(), Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        nodes.push(Node { value: Rc::new(value), requires_grad, parents, backward });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Backward sweep from a 1×1 output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(self, output.tape), "output belongs to a different tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[output.id] = Some(Matrix::scalar(1.0));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of a backward sweep, retained for leaf nodes.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to `var`; exactly zero when `var` did not
    /// participate in the output.
    pub fn wrt(&self, var: Var<'_>) -> Matrix {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

/// Row normalization used inside [`Var::segment_attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionNorm {
    #[default]
    Softmax,
    /// Scores divided by their row sum; rows whose sum is within
    /// [`RATIO_EPS`] of zero fall back to uniform weights.
    Ratio,
}

pub const RATIO_EPS: f64 = 1e-9;

/// Attention weights produced by [`Var::segment_attention`], one `L×L`
/// matrix per (segment, head), stored segment-major.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub heads: usize,
    pub weights: Vec<Matrix>,
    /// Per (segment, head), per query row: whether the ratio fallback fired.
    pub fallback: Vec<Vec<bool>>,
}

impl AttentionWeights {
    pub fn get(&self, segment: usize, head: usize) -> &Matrix {
        &self.weights[segment * self.heads + head]
    }
}

fn normalize_scores(row: &mut [f64], norm: AttentionNorm) -> bool {
    match norm {
        AttentionNorm::Softmax => {
            softmax_in_place(row);
            false
        }
        AttentionNorm::Ratio => {
            let total: f64 = row.iter().sum();
            if total.abs() < RATIO_EPS {
                let u = 1.0 / row.len() as f64;
                row.iter_mut().for_each(|v| *v = u);
                true
            } else {
                row.iter_mut().for_each(|v| *v /= total);
                false
            }
        }
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Matrix> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let out = a.matmul(&b).expect("matmul shape");
        self.tape.push(out, &[self, rhs], move |g, needs| {
            vec![
                needs[0].then(|| g.matmul_t(&b).unwrap()),
                needs[1].then(|| a.t_matmul(g).unwrap()),
            ]
        })
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        let out = a.matmul_t(&b).expect("matmul_t shape");
        self.tape.push(out, &[self, rhs], move |g, needs| {
            vec![needs[0].then(|| g.matmul(&b).unwrap()), needs[1].then(|| g.t_matmul(&a).unwrap())]
        })
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        let out = {
            let (a, b) = (self.value(), rhs.value());
            assert_eq!(a.shape(), b.shape(), "add shape");
            a.zip_map(&b, |x, y| x + y)
        };
        self.tape.push(out, &[self, rhs], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let out = {
            let (a, b) = (self.value(), rhs.value());
            assert_eq!(a.shape(), b.shape(), "sub shape");
            a.zip_map(&b, |x, y| x - y)
        };
        self.tape.push(out, &[self, rhs], |g, _| vec![Some(g.clone()), Some(g.scale(-1.0))])
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape(), b.shape(), "mul shape");
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.push(out, &[self, rhs], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&b, |x, y| x * y)),
                needs[1].then(|| g.zip_map(&a, |x, y| x * y)),
            ]
        })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        self.tape.push(out, &[self], move |g, _| vec![Some(g.scale(s))])
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let out = {
            let (a, b) = (self.value(), bias.value());
            assert_eq!(b.rows(), 1, "add_row bias must be a row");
            assert_eq!(a.cols(), b.cols(), "add_row width");
            let mut out = (*a).clone();
            for r in 0..out.rows() {
                for (o, v) in out.row_mut(r).iter_mut().zip(b.row(0)) {
                    *o += v;
                }
            }
            out
        };
        self.tape.push(out, &[self, bias], |g, needs| vec![Some(g.clone()), needs[1].then(|| g.sum_rows())])
    }

    pub fn tanh(self) -> Var<'t> {
        let y = Rc::new(self.value().map(f64::tanh));
        let saved = Rc::clone(&y);
        self.tape.push((*y).clone(), &[self], move |g, _| vec![Some(g.zip_map(&saved, |g, y| g * (1.0 - y * y)))])
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| gelu(v).0);
        let slope = x.map(|v| gelu(v).1);
        self.tape.push(out, &[self], move |g, _| vec![Some(g.zip_map(&slope, |g, s| g * s))])
    }

    /// Row-wise layer normalization with learned `1×cols` gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        let (rows, cols) = x.shape();
        assert_eq!(gv.shape(), (1, cols), "layer_norm gain");
        assert_eq!(bv.shape(), (1, cols), "layer_norm bias");
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = vec![0.0; rows];
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * gv.get(0, c) + bv.get(0, c));
            }
        }
        self.tape.push(out, &[self, gain, bias], move |g, needs| {
            let mut dx = Matrix::zeros(rows, cols);
            let mut dgain = Matrix::zeros(1, cols);
            for r in 0..rows {
                let (gr, hr) = (g.row(r), xhat.row(r));
                let mut mean_d = 0.0;
                let mut mean_dh = 0.0;
                for c in 0..cols {
                    let d = gr[c] * gv.get(0, c);
                    mean_d += d;
                    mean_dh += d * hr[c];
                    dgain.data_mut()[c] += gr[c] * hr[c];
                }
                mean_d /= cols as f64;
                mean_dh /= cols as f64;
                for c in 0..cols {
                    let d = gr[c] * gv.get(0, c);
                    dx.set(r, c, inv_std[r] * (d - mean_d - hr[c] * mean_dh));
                }
            }
            vec![needs[0].then_some(dx), needs[1].then_some(dgain), needs[2].then(|| g.sum_rows())]
        })
    }

    /// Row-wise softmax.
    pub fn softmax_rows(self) -> Var<'t> {
        let y = Rc::new(super::reduce::softmax_rows(&self.value()));
        let saved = Rc::clone(&y);
        self.tape.push((*y).clone(), &[self], move |g, _| {
            let mut dx = Matrix::zeros(saved.rows(), saved.cols());
            for r in 0..saved.rows() {
                let (yr, gr) = (saved.row(r), g.row(r));
                let inner = dot(yr, gr);
                for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                    *d = yr[c] * (gr[c] - inner);
                }
            }
            vec![Some(dx)]
        })
    }

    /// Rows divided by their L2 norm; a zero row is an error naming its index.
    pub fn normalize_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let mut norms = Vec::with_capacity(x.rows());
        let mut y = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let n = dot(x.row(r), x.row(r)).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateEmbedding { index: r });
            }
            norms.push(n);
            for (o, v) in y.row_mut(r).iter_mut().zip(x.row(r)) {
                *o = v / n;
            }
        }
        let saved = Rc::new(y);
        let y_out = (*saved).clone();
        Ok(self.tape.push(y_out, &[self], move |g, _| {
            let mut dx = Matrix::zeros(saved.rows(), saved.cols());
            for r in 0..saved.rows() {
                let (yr, gr) = (saved.row(r), g.row(r));
                let proj = dot(yr, gr);
                for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                    *d = (gr[c] - yr[c] * proj) / norms[r];
                }
            }
            vec![Some(dx)]
        }))
    }

    pub fn gather_rows(self, indices: &[usize]) -> Var<'t> {
        let x = self.value();
        let out = x.select_rows(indices);
        let (rows, cols) = x.shape();
        let indices = indices.to_vec();
        self.tape.push(out, &[self], move |g, _| {
            let mut dx = Matrix::zeros(rows, cols);
            for (k, &i) in indices.iter().enumerate() {
                for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                    *d += v;
                }
            }
            vec![Some(dx)]
        })
    }

    /// Mean of each row range; output has one row per segment.
    pub fn segment_mean(self, segments: &[Range<usize>]) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = x.shape();
        let mut out = Matrix::zeros(segments.len(), cols);
        for (s, seg) in segments.iter().enumerate() {
            assert!(!seg.is_empty() && seg.end <= rows, "segment_mean range");
            let inv = 1.0 / seg.len() as f64;
            let o = out.row_mut(s);
            for r in seg.clone() {
                for (acc, v) in o.iter_mut().zip(x.row(r)) {
                    *acc += v;
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let segments = segments.to_vec();
        self.tape.push(out, &[self], move |g, _| {
            let mut dx = Matrix::zeros(rows, cols);
            for (s, seg) in segments.iter().enumerate() {
                let inv = 1.0 / seg.len() as f64;
                for r in seg.clone() {
                    for (d, v) in dx.row_mut(r).iter_mut().zip(g.row(s)) {
                        *d += v * inv;
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    pub fn vstack(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let values: Vec<Rc<Matrix>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Matrix> = values.iter().map(|v| &**v).collect();
        let out = Matrix::vstack(&refs).expect("vstack shape");
        let sizes: Vec<usize> = values.iter().map(|v| v.rows()).collect();
        tape.push(out, parts, move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&n, &need)| {
                    let idx: Vec<usize> = (start..start + n).collect();
                    start += n;
                    need.then(|| g.select_rows(&idx))
                })
                .collect()
        })
    }

    pub fn hconcat(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let values: Vec<Rc<Matrix>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Matrix> = values.iter().map(|v| &**v).collect();
        let out = Matrix::hconcat(&refs).expect("hconcat shape");
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        tape.push(out, parts, move |g, needs| {
            let mut start = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let s = start;
                    start += w;
                    need.then(|| {
                        let mut m = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            m.row_mut(r).copy_from_slice(&g.row(r)[s..s + w]);
                        }
                        m
                    })
                })
                .collect()
        })
    }

    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = x.shape();
        self.tape.push(Matrix::scalar(x.sum()), &[self], move |g, _| vec![Some(Matrix::filled(rows, cols, g.item()))])
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn element(self, r: usize, c: usize) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = x.shape();
        self.tape.push(Matrix::scalar(x.get(r, c)), &[self], move |g, _| {
            let mut dx = Matrix::zeros(rows, cols);
            dx.set(r, c, g.item());
            vec![Some(dx)]
        })
    }

    /// Mean over rows of `logsumexp(row) - row[target]`.
    pub fn cross_entropy(self, targets: &[usize]) -> Var<'t> {
        let logits = self.value();
        let (rows, cols) = logits.shape();
        assert_eq!(targets.len(), rows, "cross_entropy targets");
        let mut probs = (*logits).clone();
        let mut total = 0.0;
        for r in 0..rows {
            total += log_sum_exp_unchecked(logits.row(r)) - logits.get(r, targets[r]);
            softmax_in_place(probs.row_mut(r));
        }
        let targets = targets.to_vec();
        self.tape.push(Matrix::scalar(total / rows as f64), &[self], move |g, _| {
            let scale = g.item() / rows as f64;
            let mut dx = Matrix::zeros(rows, cols);
            for r in 0..rows {
                for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                    let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                    *d = (probs.get(r, c) - onehot) * scale;
                }
            }
            vec![Some(dx)]
        })
    }

    /// Block-diagonal multi-head attention: rows of `q`, `k`, `v` are split
    /// into `segments`; each query row attends only to key rows of its own
    /// segment. Scores are `scale · q_t · k_u` per head, normalized per row
    /// by `norm`, and mix the value rows of the segment.
    pub fn segment_attention(
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        segments: &[Range<usize>],
        heads: usize,
        scale: f64,
        norm: AttentionNorm,
    ) -> (Var<'t>, AttentionWeights) {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let (rows, width) = qv.shape();
        assert_eq!(kv.shape(), (rows, width), "attention key shape");
        assert_eq!(vv.shape(), (rows, width), "attention value shape");
        assert!(heads >= 1 && width % heads == 0, "attention heads");
        let dh = width / heads;
        let mut out = Matrix::zeros(rows, width);
        let mut weights = Vec::with_capacity(segments.len() * heads);
        let mut fallback = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            assert!(!seg.is_empty() && seg.end <= rows, "attention segment");
            let len = seg.len();
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut a = Matrix::zeros(len, len);
                let mut flags = vec![false; len];
                for t in 0..len {
                    let qrow = &qv.row(seg.start + t)[cols.clone()];
                    let arow = a.row_mut(t);
                    for (u, s) in arow.iter_mut().enumerate() {
                        *s = scale * dot(qrow, &kv.row(seg.start + u)[cols.clone()]);
                    }
                    flags[t] = normalize_scores(arow, norm);
                }
                for t in 0..len {
                    let orow = &mut out.row_mut(seg.start + t)[cols.clone()];
                    for u in 0..len {
                        let w = a.get(t, u);
                        for (o, x) in orow.iter_mut().zip(&vv.row(seg.start + u)[cols.clone()]) {
                            *o += w * x;
                        }
                    }
                }
                weights.push(a);
                fallback.push(flags);
            }
        }
        let report = AttentionWeights { heads, weights, fallback };
        let saved = report.clone();
        let segments = segments.to_vec();
        let var = q.tape.push(out, &[q, k, v], move |g, _| {
            let mut dq = Matrix::zeros(rows, width);
            let mut dk = Matrix::zeros(rows, width);
            let mut dv = Matrix::zeros(rows, width);
            for (si, seg) in segments.iter().enumerate() {
                let len = seg.len();
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let a = saved.get(si, h);
                    let flags = &saved.fallback[si * heads + h];
                    for t in 0..len {
                        let grow = &g.row(seg.start + t)[cols.clone()];
                        // dA[t][u] = g_t · v_u ; dV_u += A[t][u] g_t
                        let mut da = vec![0.0; len];
                        for u in 0..len {
                            da[u] = dot(grow, &vv.row(seg.start + u)[cols.clone()]);
                            let w = a.get(t, u);
                            for (d, x) in dv.row_mut(seg.start + u)[cols.clone()].iter_mut().zip(grow) {
                                *d += w * x;
                            }
                        }
                        if flags[t] {
                            continue;
                        }
                        let arow = a.row(t);
                        let ds: Vec<f64> = match norm {
                            AttentionNorm::Softmax => {
                                let inner = dot(arow, &da);
                                arow.iter().zip(&da).map(|(w, d)| w * (d - inner)).collect()
                            }
                            AttentionNorm::Ratio => {
                                let qrow = &qv.row(seg.start + t)[cols.clone()];
                                let total: f64 = (0..len)
                                    .map(|u| scale * dot(qrow, &kv.row(seg.start + u)[cols.clone()]))
                                    .sum();
                                let inner = dot(arow, &da);
                                da.iter().map(|d| (d - inner) / total).collect()
                            }
                        };
                        for u in 0..len {
                            let s = ds[u] * scale;
                            if s == 0.0 {
                                continue;
                            }
                            let krow: Vec<f64> = kv.row(seg.start + u)[cols.clone()].to_vec();
                            for (d, x) in dq.row_mut(seg.start + t)[cols.clone()].iter_mut().zip(&krow) {
                                *d += s * x;
                            }
                            let qrow: Vec<f64> = qv.row(seg.start + t)[cols.clone()].to_vec();
                            for (d, x) in dk.row_mut(seg.start + u)[cols.clone()].iter_mut().zip(&qrow) {
                                *d += s * x;
                            }
                        }
                    }
                }
            }
            vec![Some(dq), Some(dk), Some(dv)]
        });
        (var, report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(&Matrix) -> f64, x: &Matrix, eps: f64) -> Matrix {
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        g
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = crate::numeric::Rng::new(seed);
        let mut m = Matrix::zeros(rows, cols);
        m.data_mut().iter_mut().for_each(|v| *v = rng.symmetric(1.0));
        m
    }

    /// Checks d(sum(w ⊙ op(x)))/dx against central differences.
    fn check_unary(op: impl for<'a> Fn(Var<'a>) -> Var<'a>, x: Matrix) {
        let eval = |m: &Matrix| {
            let tape = Tape::inference();
            let y = op(tape.constant(m.clone()));
            let w = sample(y.rows(), y.cols(), 99);
            y.value().zip_map(&w, |a, b| a * b).sum()
        };
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = op(xv);
        let w = tape.constant(sample(y.rows(), y.cols(), 99));
        let loss = y.mul(w).sum_all();
        let analytic = tape.backward(loss).wrt(xv);
        let numeric = central_diff(eval, &x, 1e-6);
        assert!(analytic.max_abs_diff(&numeric) < 1e-7, "{analytic:?} vs {numeric:?}");
    }

    #[test]
    fn unary_op_gradients() {
        check_unary(|x| x.tanh(), sample(3, 4, 1));
        check_unary(|x| x.gelu(), sample(3, 4, 2));
        check_unary(|x| x.softmax_rows(), sample(3, 4, 3));
        check_unary(|x| x.normalize_rows().unwrap(), sample(3, 4, 4));
        check_unary(|x| x.gather_rows(&[2, 0, 2]), sample(3, 4, 5));
        check_unary(|x| x.segment_mean(&[0..1, 1..3]), sample(3, 4, 6));
        check_unary(|x| x.cross_entropy(&[1, 0, 3]), sample(3, 4, 7));
        check_unary(|x| Var::hconcat(&[x, x.scale(2.0)]), sample(3, 4, 8));
        check_unary(|x| Var::vstack(&[x, x.tanh()]), sample(3, 4, 9));
        check_unary(|x| x.matmul_t(x), sample(3, 4, 10));
        check_unary(|x| x.matmul(x.tape().constant(sample(4, 2, 11))), sample(3, 4, 12));
        check_unary(
            |x| {
                let t = x.tape();
                x.layer_norm(t.constant(sample(1, 4, 13)), t.constant(sample(1, 4, 14)), 1e-5)
            },
            sample(3, 4, 15),
        );
    }

    #[test]
    fn attention_gradients_both_norms() {
        for norm in [AttentionNorm::Softmax, AttentionNorm::Ratio] {
            let shift = if norm == AttentionNorm::Ratio { 2.0 } else { 0.0 };
            check_unary(
                move |x| {
                    let t = x.tape();
                    let k = t.constant(sample(5, 4, 20).map(|v| v + shift));
                    let v = t.constant(sample(5, 4, 21));
                    Var::segment_attention(x, k, v, &[0..2, 2..5], 2, 0.7, norm).0
                },
                sample(5, 4, 22).map(|v| v + shift),
            );
            check_unary(
                move |x| {
                    let t = x.tape();
                    let q = t.constant(sample(5, 4, 23).map(|v| v + shift));
                    Var::segment_attention(q, x, x, &[0..3, 3..5], 1, 1.0, norm).0
                },
                sample(5, 4, 24).map(|v| v + shift),
            );
        }
    }

    #[test]
    fn unused_param_has_exactly_zero_gradient() {
        let tape = Tape::new();
        let a = tape.param(sample(2, 2, 1));
        let b = tape.param(sample(2, 2, 2));
        let loss = a.tanh().sum_all();
        let grads = tape.backward(loss);
        assert!(grads.wrt(b).data().iter().all(|&v| v == 0.0));
        assert!(grads.wrt(a).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // d/dx sum(x ⊙ x) = 2x
        let tape = Tape::new();
        let x = tape.param(Matrix::row_vector(&[1.0, -2.0, 3.0]));
        let g = tape.backward(x.mul(x).sum_all()).wrt(x);
        assert_eq!(g.data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn inference_tape_records_no_closures() {
        let tape = Tape::inference();
        let x = tape.param(Matrix::scalar(2.0));
        let y = x.mul(x);
        assert_eq!(y.value().item(), 4.0);
        assert!(!tape.nodes.borrow()[y.id].requires_grad);
    }

    #[test]
    fn ratio_fallback_is_uniform_and_flagged() {
        let tape = Tape::inference();
        let q = tape.constant(Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let k = tape.constant(Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap());
        let (_, w) = Var::segment_attention(q, k, k, &[0..2], 1, 1.0, AttentionNorm::Ratio);
        assert_eq!(w.get(0, 0).row(0), &[0.5, 0.5]);
        assert!(w.fallback[0][0]);
    }
}
