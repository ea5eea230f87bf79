//! Dense math shared by every trainable component: matrices, the gradient
//! tape, Adam, finite-difference checking, PCA and the parameter checkpoint
//! format.

mod adam;
mod checkpoint;
mod gradcheck;
mod matrix;
mod pca;
mod tape;

pub use adam::{Adam, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::grad_check;
pub use matrix::{dot, log_sum_exp, norm, sigmoid, softmax, Matrix};
pub use pca::{jacobi_eigen, pca_project, Pca};
pub use tape::{Axis, Gradients, Tape, Var};

/// A named, ordered collection of trainable tensors.
///
/// Both visitors must yield the same names in the same order; optimizers and
/// checkpoints rely on that order.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.len());
        n
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        self.visit(&mut |name, m| ck.push(name, m.clone()));
        ck
    }

    /// Overwrite parameters from a checkpoint, matching by name and shape.
    fn load_checkpoint(&mut self, ck: &Checkpoint) -> crate::Result<()> {
        let mut err = None;
        self.visit_mut(&mut |name, m| {
            if err.is_some() {
                return;
            }
            match ck.get(name) {
                Some(src) if src.shape() == m.shape() => *m = src.clone(),
                Some(src) => {
                    err = Some(crate::Error::Config(format!(
                        "checkpoint tensor {name} has shape {:?}, expected {:?}",
                        src.shape(),
                        m.shape()
                    )))
                }
                None => err = Some(crate::Error::Config(format!("checkpoint lacks tensor {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}
