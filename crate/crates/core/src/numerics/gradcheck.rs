use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Matrix, Module};
use crate::error::Result;

/// Compare analytic gradients against central differences on
/// `probe_count` randomly chosen coordinates and return the largest relative
/// error, `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `loss` must return the scalar loss and gradients in the module's visit
/// order. It is re-evaluated twice per probe on perturbed copies.
pub fn grad_check<M, F>(module: &M, mut loss: F, probe_count: usize, h: f64, seed: u64) -> Result<f64>
where
    M: Module + Clone,
    F: FnMut(&M) -> Result<(f64, Vec<Matrix>)>,
{
    let (_, analytic) = loss(module)?;
    let sizes: Vec<usize> = analytic.iter().map(Matrix::len).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..probe_count {
        let mut flat = rng.random_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor] {
            flat -= sizes[tensor];
            tensor += 1;
        }
        let nudge = |delta: f64| {
            let mut m = module.clone();
            let mut idx = 0;
            m.visit_mut(&mut |_, p| {
                if idx == tensor {
                    p.data_mut()[flat] += delta;
                }
                idx += 1;
            });
            m
        };
        let (plus, _) = loss(&nudge(h))?;
        let (minus, _) = loss(&nudge(-h))?;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[tensor].data()[flat];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[derive(Clone)]
    struct X(Matrix);

    impl Module for X {
        fn visit(&self, f: &mut dyn FnMut(&str, &Matrix)) {
            f("x", &self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
            f("x", &mut self.0)
        }
    }

    #[test]
    fn square_at_three() {
        let x = X(Matrix::scalar(3.0));
        let mut seen = None;
        let err = grad_check(
            &x,
            |m| {
                let mut t = Tape::new();
                let v = t.param(m.0.clone());
                let y = t.mul(v, v);
                let g = t.backward(y).get(&t, v);
                if seen.is_none() {
                    seen = Some(g.data()[0]);
                }
                Ok((t.scalar(y), vec![g]))
            },
            1,
            1e-5,
            0,
        )
        .unwrap();
        assert_eq!(seen, Some(6.0));
        assert!(err * 6.0 < 1e-6);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = X(Matrix::scalar(3.0));
        let err = grad_check(&x, |m| Ok((m.0.data()[0].powi(2), vec![Matrix::scalar(5.0)])), 1, 1e-5, 0).unwrap();
        assert!(err > 0.1);
    }
}
