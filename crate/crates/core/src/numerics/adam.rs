use super::{Matrix, Module};
use crate::error::{Error, Result};

/// First and second moment buffers for one parameter collection.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

/// Bias-corrected Adam with the usual defaults (0.9, 0.999, 1e-8).
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState { step: 0, first: Vec::new(), second: Vec::new() },
        }
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// Apply one update. `grads` follow the module's visit order.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, grads: &[Matrix]) -> Result<()> {
        let mut names = Vec::new();
        module.visit(&mut |name, m| names.push((name.to_string(), m.shape())));
        if names.len() != grads.len() {
            return Err(Error::DimensionMismatch { expected: names.len(), found: grads.len() });
        }
        for ((name, shape), g) in names.iter().zip(grads) {
            if *shape != g.shape() {
                return Err(Error::Precondition(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    shape
                )));
            }
            if !g.is_finite() {
                return Err(Error::Divergence { what: format!("gradient of {name}"), step: self.state.step + 1 });
            }
        }
        if self.state.first.is_empty() {
            self.state.first = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.state.second = self.state.first.clone();
        }

        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let state = &mut self.state;
        let mut idx = 0;
        module.visit_mut(&mut |_, param| {
            let g = &grads[idx];
            let m = state.first[idx].data_mut();
            let v = state.second[idx].data_mut();
            for (((p, &gi), mi), vi) in param.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar(Matrix);

    impl Module for Scalar {
        fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
            f("x", &self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
            f("x", &mut self.0)
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Scalar(Matrix::from_rows(&[[1.5, -2.0]]));
        let mut adam = Adam::new(0.1);
        for _ in 0..5 {
            adam.step(&mut p, &[Matrix::zeros(1, 2)]).unwrap();
        }
        assert_eq!(p.0, Matrix::from_rows(&[[1.5, -2.0]]));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Scalar(Matrix::scalar(1.0));
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &[Matrix::scalar(1.0)]).unwrap();
        let x = p.0.data()[0];
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((x - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);

        let mut p = Scalar(Matrix::scalar(1.0));
        let mut adam = Adam { eps: 0.0, ..Adam::new(0.1) };
        adam.step(&mut p, &[Matrix::scalar(1.0)]).unwrap();
        assert!((p.0.data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn deterministic_over_many_steps() {
        let run = || {
            let mut p = Scalar(Matrix::from_rows(&[[0.3, 0.7, -1.1]]));
            let mut adam = Adam::new(0.01);
            for i in 0..100 {
                let g = p.0.map(|v| 2.0 * v + (i as f64 * 0.37).sin());
                adam.step(&mut p, &[g]).unwrap();
            }
            p.0
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut p = Scalar(Matrix::scalar(1.0));
        let mut adam = Adam::new(0.1);
        let err = adam.step(&mut p, &[Matrix::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::Divergence { ref what, step: 1 } if what.contains('x')));
        assert_eq!(p.0.data()[0], 1.0);
    }
}
