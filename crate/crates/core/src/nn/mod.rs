//! Networks, optimizers and checkpoints.

pub mod backbone;
pub mod checkpoint;
pub mod mlp;
pub mod optim;

pub use backbone::{Backbone, BackboneConfig, BackboneTape, GaussianOutput, MissingnessHead};

/// A flat view over the trainable tensors of a module, in a stable order.
pub trait Params {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    /// Names and shapes matching [`Params::tensors`].
    fn shapes(&self) -> Vec<(String, Vec<usize>)>;

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    fn sum_of_squares(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }
}
