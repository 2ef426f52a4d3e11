use crate::error::{Error, Result};
use crate::numeric::{Matrix, Rng, Var};
use crate::params::{uniform_matrix, BoundParams, ParamSet};

pub const PREFIX: &str = "pooler.";
pub const W_Q: &str = "pooler.w_q";
pub const W_K: &str = "pooler.w_k";
pub const W_V: &str = "pooler.w_v";
pub const MLP_WEIGHT: &str = "pooler.mlp.weight";
pub const MLP_BIAS: &str = "pooler.mlp.bias";

/// Learnable layer-attention projections and the `2d → d` output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// `d × 2d`
    pub mlp_weight: Matrix,
    /// `1 × d`
    pub mlp_bias: Matrix,
}

impl PoolerParams {
    /// Symmetric uniform init with bound `1/sqrt(fan_in)`.
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        let b = 1.0 / (dim as f64).sqrt();
        let b2 = 1.0 / (2.0 * dim as f64).sqrt();
        Self {
            w_q: uniform_matrix(dim, dim, b, rng),
            w_k: uniform_matrix(dim, dim, b, rng),
            w_v: uniform_matrix(dim, dim, b, rng),
            mlp_weight: uniform_matrix(dim, 2 * dim, b2, rng),
            mlp_bias: uniform_matrix(1, dim, b2, rng),
        }
    }

    pub fn init_bound(name: &str, dim: usize) -> Option<f64> {
        match name {
            W_Q | W_K | W_V => Some(1.0 / (dim as f64).sqrt()),
            MLP_WEIGHT | MLP_BIAS => Some(1.0 / (2.0 * dim as f64).sqrt()),
            _ => None,
        }
    }

    /// Identity attention projections; handy for hand-checked examples.
    pub fn identity(dim: usize, mlp_weight: Matrix, mlp_bias: Matrix) -> Result<Self> {
        let p = Self {
            w_q: Matrix::identity(dim),
            w_k: Matrix::identity(dim),
            w_v: Matrix::identity(dim),
            mlp_weight,
            mlp_bias,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let ok = self.w_q.shape() == (d, d)
            && self.w_k.shape() == (d, d)
            && self.w_v.shape() == (d, d)
            && self.mlp_weight.shape() == (d, 2 * d)
            && self.mlp_bias.shape() == (1, d);
        if !ok {
            return Err(Error::Shape(format!("inconsistent pooler parameter shapes for d = {d}")));
        }
        let all = [&self.w_q, &self.w_k, &self.w_v, &self.mlp_weight, &self.mlp_bias];
        if !all.iter().all(|m| m.is_finite()) {
            return Err(Error::NonFinite("pooler parameters"));
        }
        Ok(())
    }

    pub fn insert_into(&self, params: &mut ParamSet) {
        params.insert(W_Q, self.w_q.clone());
        params.insert(W_K, self.w_k.clone());
        params.insert(W_V, self.w_v.clone());
        params.insert(MLP_WEIGHT, self.mlp_weight.clone());
        params.insert(MLP_BIAS, self.mlp_bias.clone());
    }

    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let get = |name: &str| {
            params
                .get(name)
                .cloned()
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor `{name}`")))
        };
        let p = Self {
            w_q: get(W_Q)?,
            w_k: get(W_K)?,
            w_v: get(W_V)?,
            mlp_weight: get(MLP_WEIGHT)?,
            mlp_bias: get(MLP_BIAS)?,
        };
        p.validate()?;
        Ok(p)
    }

    /// Records the parameters on `tape` as gradient-receiving leaves.
    pub fn bind<'t>(&self, tape: &'t crate::numeric::Tape) -> PoolerVars<'t> {
        PoolerVars {
            w_q: tape.param(self.w_q.clone()),
            w_k: tape.param(self.w_k.clone()),
            w_v: tape.param(self.w_v.clone()),
            mlp_weight: tape.param(self.mlp_weight.clone()),
            mlp_bias: tape.param(self.mlp_bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PoolerVars<'t> {
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
    pub mlp_weight: Var<'t>,
    pub mlp_bias: Var<'t>,
}

impl<'t> PoolerVars<'t> {
    pub fn from_bound(bound: &BoundParams<'t>) -> Self {
        Self {
            w_q: bound.get(W_Q),
            w_k: bound.get(W_K),
            w_v: bound.get(W_V),
            mlp_weight: bound.get(MLP_WEIGHT),
            mlp_bias: bound.get(MLP_BIAS),
        }
    }

    pub fn as_slice(&self) -> [Var<'t>; 5] {
        [self.w_q, self.w_k, self.w_v, self.mlp_weight, self.mlp_bias]
    }
}
