#![allow(dead_code)]

use ddmt_core::graph::{Graph, NodeId};
use ddmt_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so entries that are zero on both
/// routes do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between backprop gradients and central finite
/// differences over every entry of every trainable parameter.
pub fn max_fd_error(graph: &Graph, output: NodeId, inputs: &[(&str, &Tensor)]) -> f64 {
    let (_, grads) = graph.evaluate_and_backprop(output, inputs).unwrap();
    let mut probe = graph.clone();
    let mut worst = 0.0f64;
    for (name, grad) in &grads {
        for idx in 0..grad.len() {
            let original = probe.params()[name].data()[idx];
            probe.params_mut().get_mut(name).unwrap().data_mut()[idx] = original + FD_STEP;
            let up = probe.evaluate(output, inputs).unwrap().item();
            probe.params_mut().get_mut(name).unwrap().data_mut()[idx] = original - FD_STEP;
            let down = probe.evaluate(output, inputs).unwrap().item();
            probe.params_mut().get_mut(name).unwrap().data_mut()[idx] = original;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grad.data()[idx], numeric));
        }
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}
