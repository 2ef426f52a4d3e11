use crate::numeric::Matrix;
use crate::params::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moment estimates for every tensor of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    /// Completed updates.
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &ParamSet) -> Self {
        Self { learning_rate, t: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    /// One bias-corrected update of the named tensors.
    pub fn step<'a>(&mut self, params: &mut ParamSet, grads: impl IntoIterator<Item = (&'a str, &'a Matrix)>) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, g) in grads {
            let (Some(p), Some(m), Some(v)) = (params.get_mut(name), self.m.get_mut(name), self.v.get_mut(name)) else {
                panic!("no optimizer state for `{name}`");
            };
            let it = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data());
            for (((p, m), v), &g) in it {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut params = ParamSet::new();
        params.insert("w", Matrix::row_vector(&[1.0, -2.0, 0.5]));
        let mut adam = Adam::new(0.1, &params);
        adam.step(&mut params, [("w", &Matrix::row_vector(&[4.0, -0.5, 0.0]))]);
        let w = params.get("w").unwrap();
        assert!((w.get(0, 0) - (1.0 - 0.1 * 4.0 / (4.0 + EPSILON))).abs() < 1e-15);
        assert!((w.get(0, 1) - (-2.0 + 0.1 * 0.5 / (0.5 + EPSILON))).abs() < 1e-15);
        assert_eq!(w.get(0, 2), 0.5);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut params = ParamSet::new();
        params.insert("w", Matrix::row_vector(&[0.3, 0.7]));
        let before = params.clone();
        let mut adam = Adam::new(1e-3, &params);
        for _ in 0..5 {
            adam.step(&mut params, [("w", &Matrix::zeros(1, 2))]);
        }
        assert_eq!(params, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamSet::new();
        params.insert("x", Matrix::row_vector(&[3.0, -4.0]));
        let mut adam = Adam::new(0.05, &params);
        for _ in 0..2000 {
            let g = params.get("x").unwrap().scale(2.0);
            adam.step(&mut params, [("x", &g)]);
        }
        assert!(params.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }
}
