use crate::error::{NnError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one group of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    kind: OptimizerKind,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Restores a state captured by [`OptimizerState::moments`].
    pub fn from_parts(kind: OptimizerKind, step: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) -> Result<Self> {
        if first.len() != second.len() {
            return Err(NnError::Invalid("moment lists differ in length".into()));
        }
        Ok(OptimizerState { kind, step, first, second })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    /// Applies one update. All gradients are checked before any parameter changes.
    pub fn step(&mut self, names: &[String], params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || names.len() != params.len() {
            return Err(NnError::Invalid(format!(
                "optimizer got {} names, {} params, {} grads",
                names.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in names.iter().zip(params.iter()).zip(grads) {
            if p.shape() != g.shape() {
                return Err(NnError::ShapeMismatch {
                    context: format!("gradient for {name}"),
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
            g.check_finite(&format!("gradient of {name}"))?;
        }
        if let OptimizerKind::Adam { .. } = self.kind {
            if self.first.is_empty() {
                self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                self.second = self.first.clone();
            }
            if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
                return Err(NnError::Invalid("optimizer state does not match parameter shapes".into()));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                let lr = T::lit(lr);
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = T::lit(1.0 - beta1.powi(t));
                let c2 = T::lit(1.0 - beta2.powi(t));
                let (b1, b2, lr, eps) = (T::lit(beta1), T::lit(beta2), T::lit(lr), T::lit(eps));
                let one = T::one();
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((w, &d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                        *mi = b1 * *mi + (one - b1) * d;
                        *vi = b2 * *vi + (one - b2) * d * d;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn sgd_rule() {
        let mut st = OptimizerState::new(OptimizerKind::Sgd { lr: 0.1 });
        let mut w = one(1.0);
        st.step(&["w".into()], &mut [&mut w], &[one(1.0)]).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut st = OptimizerState::new(OptimizerKind::adam(0.001));
        let mut w = one(0.0);
        st.step(&["w".into()], &mut [&mut w], &[one(2.0)]).unwrap();
        assert!((w.data()[0] + 0.001).abs() < 1e-9, "{}", w.data()[0]);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        for kind in [OptimizerKind::Sgd { lr: 0.5 }, OptimizerKind::adam(0.01)] {
            let mut st = OptimizerState::new(kind);
            let mut w = one(3.25);
            st.step(&["w".into()], &mut [&mut w], &[one(0.0)]).unwrap();
            assert_eq!(w.data()[0], 3.25);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_leaves_params() {
        let mut st = OptimizerState::<f64>::new(OptimizerKind::adam(0.01));
        let mut a = one(1.0);
        let mut b = one(2.0);
        let mut bad = one(0.0);
        bad.data_mut()[0] = f64::INFINITY;
        let err = st.step(&["enc.w".into(), "dec.b".into()], &mut [&mut a, &mut b], &[one(1.0), bad]).unwrap_err();
        assert!(err.to_string().contains("dec.b"), "{err}");
        assert_eq!((a.data()[0], b.data()[0]), (1.0, 2.0));
        assert_eq!(st.steps(), 0);
    }
}
