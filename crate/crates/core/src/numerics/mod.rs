//! Minimal differentiable tensor substrate: dense arrays, a reverse-mode
//! tape, convolution kernels, Adam, and a checkpoint container.

pub mod checkpoint;
mod conv;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use checkpoint::{Checkpoint, Entry, EntryData};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Bound, ParamStore};
pub use tensor::{Real, Tensor};

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He-style normal initialisation for a conv kernel `[O, C, KH, KW]`.
pub fn he_normal<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(dist.sample(rng)))
}

/// Uniform initialisation in `[-bound, bound]`.
pub fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
}
