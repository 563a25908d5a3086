//! Backprop versus central finite differences for every graph primitive.

mod common;

use common::{max_fd_error, random_tensor, rng};
use ddmt_core::graph::{Graph, NodeId};
use ddmt_core::tensor::Tensor;

const TOL: f64 = 1e-4;

/// Reduces a node to a scalar through a fixed random weighting so every
/// output entry receives a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, node: NodeId, seed: u64) -> NodeId {
    let shape = g.shape(node).to_vec();
    let w = random_tensor(&mut rng(seed), &shape);
    let w = g.param("__weights", w, false).unwrap();
    let prod = g.mul(node, w).unwrap();
    g.sum(prod).unwrap()
}

fn check(g: &Graph, out: NodeId, inputs: &[(&str, &Tensor)], what: &str) {
    let err = max_fd_error(g, out, inputs);
    assert!(err < TOL, "{what}: max relative error {err:e}");
}

#[test]
fn matmul_and_transposed_matmul() {
    let mut r = rng(1);
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(&mut r, &[3, 4]), true).unwrap();
    let b = g.param("b", random_tensor(&mut r, &[4, 5]), true).unwrap();
    let c = g.param("c", random_tensor(&mut r, &[2, 5]), true).unwrap();
    let ab = g.matmul(a, b).unwrap();
    let abct = g.matmul_nt(ab, c).unwrap();
    let out = weighted_sum(&mut g, abct, 2);
    check(&g, out, &[], "matmul");
}

#[test]
fn elementwise_ops() {
    let mut r = rng(3);
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(&mut r, &[3, 4]), true).unwrap();
    let b = g.param("b", random_tensor(&mut r, &[3, 4]), true).unwrap();
    let row = g.param("row", random_tensor(&mut r, &[4]), true).unwrap();
    let s = g.add(a, b).unwrap();
    let p = g.mul(s, a).unwrap();
    let q = g.scale(p, -1.7).unwrap();
    let h = g.add_row(q, row).unwrap();
    let out = weighted_sum(&mut g, h, 4);
    check(&g, out, &[], "add/mul/scale/add_row");
}

#[test]
fn relu_away_from_kink() {
    let mut r = rng(5);
    let mut data = random_tensor(&mut r, &[4, 4]);
    for v in data.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let mut g = Graph::new();
    let a = g.param("a", data, true).unwrap();
    let h = g.relu(a).unwrap();
    let out = weighted_sum(&mut g, h, 6);
    check(&g, out, &[], "relu");
}

#[test]
fn layer_norm_all_operands() {
    let mut r = rng(7);
    let mut g = Graph::new();
    let x = g.param("x", random_tensor(&mut r, &[3, 6]), true).unwrap();
    let gain = g.param("gain", random_tensor(&mut r, &[6]), true).unwrap();
    let bias = g.param("bias", random_tensor(&mut r, &[6]), true).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    let out = weighted_sum(&mut g, y, 8);
    check(&g, out, &[], "layer_norm");
}

#[test]
fn masked_softmax_with_blocked_entries() {
    let mut r = rng(9);
    let mut g = Graph::new();
    let x = g.param("x", random_tensor(&mut r, &[4, 4]), true).unwrap();
    let m = g.input("mask", &[4, 4]).unwrap();
    let y = g.masked_softmax(x, m).unwrap();
    let out = weighted_sum(&mut g, y, 10);
    let mask = Tensor::matrix(
        4,
        4,
        vec![0., 0., 0., 0., 1., 1., 0., 0., 0., 1., 1., 1., 0., 0., 0., 1.],
    )
    .unwrap();
    check(&g, out, &[("mask", &mask)], "masked_softmax");
}

#[test]
fn mse_both_sides() {
    let mut r = rng(11);
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(&mut r, &[3, 2]), true).unwrap();
    let b = g.param("b", random_tensor(&mut r, &[3, 2]), true).unwrap();
    let out = g.mse(a, b).unwrap();
    check(&g, out, &[], "mse");
}

#[test]
fn three_layer_mlp() {
    let mut r = rng(13);
    let mut g = Graph::new();
    let x = g.input("x", &[5, 3]).unwrap();
    let target = g.input("y", &[5, 2]).unwrap();
    let mut h = x;
    for (layer, (fan_in, fan_out)) in [(3, 8), (8, 8), (8, 2)].into_iter().enumerate() {
        let w = g.param(&format!("w{layer}"), random_tensor(&mut r, &[fan_in, fan_out]), true).unwrap();
        let b = g.param(&format!("b{layer}"), random_tensor(&mut r, &[fan_out]), true).unwrap();
        h = g.affine(h, w, b).unwrap();
        if layer < 2 {
            h = g.relu(h).unwrap();
        }
    }
    let loss = g.mse(h, target).unwrap();
    let xs = random_tensor(&mut r, &[5, 3]);
    let ys = random_tensor(&mut r, &[5, 2]);
    check(&g, loss, &[("x", &xs), ("y", &ys)], "mlp");
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let mut r = rng(17);
    let mut g = Graph::new();
    let a = g.param("a", random_tensor(&mut r, &[6, 6]), true).unwrap();
    let m = g.input("m", &[6, 6]).unwrap();
    let s = g.masked_softmax(a, m).unwrap();
    let p = g.matmul(s, a).unwrap();
    let out = g.sum(p).unwrap();
    let mask = Tensor::zeros(&[6, 6]);
    let first = g.evaluate_and_backprop(out, &[("m", &mask)]).unwrap();
    let second = g.evaluate_and_backprop(out, &[("m", &mask)]).unwrap();
    assert_eq!(first.0.data()[0].to_bits(), second.0.data()[0].to_bits());
    assert_eq!(first.1, second.1);
}
