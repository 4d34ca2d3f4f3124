//! Adam(W) and SGD steppers plus width-scaled learning rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gamma::GammaExp;
use crate::tensor::Matrix;

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) decay. Zero reduces the update to plain Adam.
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn for_param(param: &Matrix) -> Self {
        Self::new(param.rows(), param.cols())
    }
}

fn ensure_finite(op: &'static str, grad: &Matrix) -> Result<()> {
    if grad.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// One bias-corrected Adam(W) update of `param` in place.
pub fn adam_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState, lr: f64) -> Result<()> {
    for (op, m) in [("adam_step", grad), ("adam_step/m", &state.m), ("adam_step/v", &state.v)] {
        if m.shape() != param.shape() {
            return Err(Error::Shape {
                op,
                left: param.shape(),
                right: m.shape(),
            });
        }
    }
    ensure_finite("adam_step", grad)?;
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let decay = lr * state.weight_decay;
    let p = param.as_mut_slice();
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad.as_slice()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        if decay != 0.0 {
            *p -= decay * *p;
        }
        *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// `param ← param − lr·grad`
pub fn sgd_step(param: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
    ensure_finite("sgd_step", grad)?;
    param.axpy(-lr, grad)
}

/// Learning rate `η(n) = c · n^γ`, optionally decoupled between `A` and `B`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSpec {
    pub c: f64,
    pub gamma_eta: GammaExp,
    /// `η_B / η_A`. Ignored when `per_matrix` is set.
    pub lambda: f64,
    /// Separate exponents `(γ[η_A], γ[η_B])`, both with constant `c`.
    pub per_matrix: Option<(GammaExp, GammaExp)>,
}

impl LrSpec {
    pub fn uniform(c: f64, gamma_eta: GammaExp) -> Self {
        Self {
            c,
            gamma_eta,
            lambda: 1.0,
            per_matrix: None,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn decoupled(c: f64, eta_a: GammaExp, eta_b: GammaExp) -> Self {
        Self {
            c,
            gamma_eta: eta_a,
            lambda: 1.0,
            per_matrix: Some((eta_a, eta_b)),
        }
    }

    /// Exponents `(γ[η_A], γ[η_B])` as seen by the regime solver. A non-unit
    /// `lambda` is a width-independent constant and leaves them unchanged.
    pub fn exponents(&self) -> (GammaExp, GammaExp) {
        self.per_matrix.unwrap_or((self.gamma_eta, self.gamma_eta))
    }
}

fn power(c: f64, n: usize, gamma: GammaExp) -> Result<f64> {
    match gamma {
        GammaExp::NegInf => Err(Error::invalid(
            "learning-rate exponent -inf means a zero learning rate, which cannot train",
        )),
        g => Ok(c * (n as f64).powf(g.to_f64())),
    }
}

/// Realised `(η_A, η_B)` at width `n`.
pub fn realize_lr(spec: &LrSpec, n: usize) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::invalid("width must be at least 1"));
    }
    if !(spec.c > 0.0) || !spec.c.is_finite() {
        return Err(Error::invalid(format!("learning-rate constant must be positive, got {}", spec.c)));
    }
    match spec.per_matrix {
        Some((ga, gb)) => Ok((power(spec.c, n, ga)?, power(spec.c, n, gb)?)),
        None => {
            if !(spec.lambda > 0.0) || !spec.lambda.is_finite() {
                return Err(Error::invalid(format!("lambda must be positive, got {}", spec.lambda)));
            }
            let eta_a = power(spec.c, n, spec.gamma_eta)?;
            Ok((eta_a, spec.lambda * eta_a))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian, Rng};
    use proptest::prelude::*;

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut p = Matrix::column(&[0.0]);
        let mut st = AdamState::for_param(&p);
        adam_step(&mut p, &Matrix::column(&[0.5]), &mut st, 0.01).unwrap();
        assert!((p.get(0, 0) + 0.01).abs() < 1e-9);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_grad_leaves_param() {
        let mut p = Matrix::column(&[1.5, -2.0]);
        let mut st = AdamState::for_param(&p);
        adam_step(&mut p, &Matrix::zeros(2, 1), &mut st, 0.1).unwrap();
        assert_eq!(p.as_slice(), &[1.5, -2.0]);
        assert!(st.v.as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn adam_rejects_bad_inputs() {
        let mut p = Matrix::zeros(2, 2);
        let mut st = AdamState::for_param(&p);
        assert!(adam_step(&mut p, &Matrix::zeros(2, 1), &mut st, 0.1).is_err());
        let mut bad = Matrix::zeros(2, 2);
        bad.as_mut_slice()[1] = f64::NAN;
        assert!(matches!(adam_step(&mut p, &bad, &mut st, 0.1), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn adamw_decay_shrinks_weights() {
        let mut p = Matrix::column(&[2.0]);
        let mut st = AdamState::for_param(&p);
        st.weight_decay = 0.5;
        adam_step(&mut p, &Matrix::zeros(1, 1), &mut st, 0.1).unwrap();
        assert!((p.get(0, 0) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_cases() {
        let mut p = Matrix::column(&[1.0]);
        sgd_step(&mut p, &Matrix::column(&[2.0]), 0.1).unwrap();
        assert!((p.get(0, 0) - 0.8).abs() < 1e-15);
        let mut q = Matrix::column(&[3.0]);
        sgd_step(&mut q, &Matrix::column(&[7.0]), 0.0).unwrap();
        assert_eq!(q.get(0, 0), 3.0);
        assert!(sgd_step(&mut q, &Matrix::column(&[f64::INFINITY]), 0.1).is_err());
    }

    #[test]
    fn sgd_half_steps_compose() {
        let g = Matrix::column(&[0.5, -1.25]);
        let mut one = Matrix::column(&[1.0, 2.0]);
        let mut two = one.clone();
        sgd_step(&mut one, &g, 0.5).unwrap();
        sgd_step(&mut two, &g, 0.25).unwrap();
        sgd_step(&mut two, &g, 0.25).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn realized_rates() {
        let (a, b) = realize_lr(&LrSpec::uniform(1.0, GammaExp::ratio(-1, 2)), 4096).unwrap();
        assert_eq!((a, b), (0.015625, 0.015625));
        let (a, _) = realize_lr(&LrSpec::uniform(1.0, GammaExp::int(-1)), 1024).unwrap();
        assert_eq!(a, 1.0 / 1024.0);
        let (a, b) = realize_lr(&LrSpec::uniform(1.0, GammaExp::int(-1)).with_lambda(1024.0), 1024).unwrap();
        assert!(b > 100.0 * a);
        assert_eq!(b, 1.0);
        let (a, b) = realize_lr(&LrSpec::decoupled(1.0, GammaExp::int(-1), GammaExp::ZERO), 256).unwrap();
        assert_eq!((a, b), (1.0 / 256.0, 1.0));
        assert!(realize_lr(&LrSpec::uniform(1.0, GammaExp::NEG_INF), 8).is_err());
        assert!(realize_lr(&LrSpec::uniform(1.0, GammaExp::ZERO), 0).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let mut rng = Rng::seed(11);
        let grads: Vec<_> = (0..5).map(|_| gaussian(3, 3, 1.0, &mut rng).unwrap()).collect();
        let run = || {
            let mut p = Matrix::filled(3, 3, 0.3);
            let mut st = AdamState::for_param(&p);
            for g in &grads {
                adam_step(&mut p, g, &mut st, 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run().as_slice(), run().as_slice());
    }

    proptest! {
        #[test]
        fn adam_first_step_is_normalised(exp in -4.0f64..50.0, neg: bool, lr in 1e-6f64..1.0) {
            let g = if neg { -(10f64.powf(exp)) } else { 10f64.powf(exp) };
            let mut p = Matrix::column(&[0.0]);
            let mut st = AdamState::for_param(&p);
            adam_step(&mut p, &Matrix::column(&[g]), &mut st, lr).unwrap();
            let update = p.get(0, 0).abs();
            // m̂ = g and v̂ = g² after one step, so only eps separates |update| from lr.
            let expected = lr * g.abs() / (g.abs() + st.eps);
            prop_assert!((update - expected).abs() <= 1e-12 * lr);
            prop_assert!(update <= lr * (1.0 + 1e-6));
            if g.abs() >= 1e-2 {
                prop_assert!((update - lr).abs() <= 1e-6 * lr);
            }
        }
    }
}
