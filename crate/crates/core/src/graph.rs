//! A small static computation graph with reverse-mode differentiation.
//!
//! Nodes are appended through the builder methods and may only refer to
//! nodes created before them, so insertion order is a topological order.
//! Inputs are named placeholders fed at evaluation time; parameters are
//! named tensors owned by the graph. Evaluation never mutates the graph, so
//! one graph can be evaluated from several threads at once.
//!
//! ```
//! use ddmt_core::graph::Graph;
//! use ddmt_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param("x", Tensor::scalar(3.0), true).unwrap();
//! let y = g.mul(x, x).unwrap();
//! let (value, grads) = g.evaluate_and_backprop(y, &[]).unwrap();
//! assert_eq!(value.item(), 9.0);
//! assert_eq!(grads["x"].item(), 6.0);
//! ```

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::{gemm, layer_norm_row, softmax_row, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(String),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `m×n` matrix plus a length-`n` row vector broadcast over rows.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    /// Mask is a 0/1 tensor of the logits' shape; 1 blocks the entry.
    MaskedSoftmax {
        logits: NodeId,
        mask: NodeId,
    },
    Mse(NodeId, NodeId),
    Sum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::Mse(..) => "mse",
            Op::Sum(_) => "sum",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::Mse(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Sum(a) => vec![a],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::MaskedSoftmax { logits, mask } => vec![logits, mask],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    params: ParamSet,
    param_nodes: BTreeMap<String, NodeId>,
    trainable: BTreeSet<String>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    if shape.len() == 1 {
        (1, shape[0])
    } else {
        (shape[0], shape[1..].iter().product())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access for optimizers. Shapes must not change.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(String::as_str)
    }

    /// Replaces parameter values; names and shapes must match exactly.
    pub fn load_params(&mut self, params: &ParamSet) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (name, value) in params {
            match self.params.get(name) {
                Some(current) if current.shape() == value.shape() => {}
                Some(current) => {
                    return Err(Error::invalid(format!(
                        "parameter `{name}` has shape {:?}, got {:?}",
                        current.shape(),
                        value.shape()
                    )))
                }
                None => return Err(Error::invalid(format!("unknown parameter `{name}`"))),
            }
        }
        self.params = params.clone();
        Ok(())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_error(&self, op: &'static str, detail: String) -> Error {
        Error::Graph {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn check_operand(&self, id: NodeId, op: &'static str) -> Result<&[usize]> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or_else(|| self.shape_error(op, format!("operand {} does not exist", id.0)))
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(self.shape_error("input", format!("bad shape {shape:?}")));
        }
        if self.inputs.contains_key(name) {
            return Err(self.shape_error("input", format!("duplicate input `{name}`")));
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<NodeId> {
        if self.param_nodes.contains_key(name) {
            return Err(self.shape_error("param", format!("duplicate parameter `{name}`")));
        }
        let id = self.push(Op::Param(name.to_string()), value.shape().to_vec());
        self.params.insert(name.to_string(), value);
        self.param_nodes.insert(name.to_string(), id);
        if trainable {
            self.trainable.insert(name.to_string());
        }
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check_operand(a, "matmul")?, self.check_operand(b, "matmul")?);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_error("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check_operand(a, "matmul_nt")?, self.check_operand(b, "matmul_nt")?);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(self.shape_error("matmul_nt", format!("cannot multiply {sa:?} by transpose of {sb:?}")));
        }
        let shape = vec![sa[0], sb[0]];
        Ok(self.push(Op::MatMulNT(a, b), shape))
    }

    fn same_shape(&mut self, a: NodeId, b: NodeId, op: &'static str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.check_operand(a, op)?, self.check_operand(b, op)?);
        if sa != sb {
            return Err(self.shape_error(op, format!("shapes differ: {sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.check_operand(a, "add_row")?, self.check_operand(row, "add_row")?);
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(self.shape_error("add_row", format!("cannot broadcast {sb:?} over {sa:?}")));
        }
        let shape = sa.to_vec();
        Ok(self.push(Op::AddRow(a, row), shape))
    }

    /// Affine layer `x · w + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let shape = self.check_operand(a, "scale")?.to_vec();
        Ok(self.push(Op::Scale(a, factor), shape))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.check_operand(a, "relu")?.to_vec();
        Ok(self.push(Op::Relu(a), shape))
    }

    /// Normalizes each row of `x` and applies `gain`/`bias` (both length = row width).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let sx = self.check_operand(x, "layer_norm")?.to_vec();
        let sg = self.check_operand(gain, "layer_norm")?.to_vec();
        let sb = self.check_operand(bias, "layer_norm")?.to_vec();
        let width = rows_cols(&sx).1;
        if sg != [width] || sb != [width] {
            return Err(self.shape_error(
                "layer_norm",
                format!("gain {sg:?} / bias {sb:?} do not match row width {width}"),
            ));
        }
        if !(eps > 0.0) {
            return Err(self.shape_error("layer_norm", format!("eps must be positive, got {eps}")));
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, sx))
    }

    pub fn masked_softmax(&mut self, logits: NodeId, mask: NodeId) -> Result<NodeId> {
        let shape = self.same_shape(logits, mask, "masked_softmax")?;
        if shape.len() != 2 {
            return Err(self.shape_error("masked_softmax", format!("expected a matrix, got {shape:?}")));
        }
        Ok(self.push(Op::MaskedSoftmax { logits, mask }, shape))
    }

    /// Mean of squared differences, a scalar.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mse")?;
        Ok(self.push(Op::Mse(a, b), vec![1]))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_operand(a, "sum")?;
        Ok(self.push(Op::Sum(a), vec![1]))
    }

    /// Forward pass up to `output`.
    pub fn evaluate(&self, output: NodeId, inputs: &[(&str, &Tensor)]) -> Result<Tensor> {
        let trace = self.forward(output, inputs)?;
        let value = trace.values[output.0].as_ref().expect("output evaluated").to_vec();
        Tensor::new(self.nodes[output.0].shape.clone(), value)
    }

    /// Forward pass plus gradients of the scalar `output` with respect to every
    /// trainable parameter. Parameters the output does not depend on get zero
    /// gradients.
    pub fn evaluate_and_backprop(&self, output: NodeId, inputs: &[(&str, &Tensor)]) -> Result<(Tensor, ParamSet)> {
        if output.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("node {} does not exist", output.0)));
        }
        if self.nodes[output.0].shape.iter().product::<usize>() != 1 {
            return Err(Error::Graph {
                node: output.0,
                op: self.nodes[output.0].op.name(),
                detail: format!(
                    "gradients need a scalar output, node has shape {:?}",
                    self.nodes[output.0].shape
                ),
            });
        }
        let trace = self.forward(output, inputs)?;
        let value = trace.values[output.0].as_ref().expect("output evaluated").to_vec();
        let grads = self.backward(output, &trace);
        Ok((Tensor::new(self.nodes[output.0].shape.clone(), value)?, grads))
    }

    fn needed(&self, output: NodeId) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        needed[output.0] = true;
        for i in (0..=output.0).rev() {
            if needed[i] {
                for operand in self.nodes[i].op.operands() {
                    needed[operand.0] = true;
                }
            }
        }
        needed
    }

    fn forward<'a>(&'a self, output: NodeId, inputs: &[(&str, &'a Tensor)]) -> Result<Trace<'a>> {
        if output.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("node {} does not exist", output.0)));
        }
        for (name, _) in inputs {
            if !self.inputs.contains_key(*name) {
                return Err(Error::invalid(format!("graph has no input named `{name}`")));
            }
        }
        let needed = self.needed(output);
        let mut values: Vec<Option<Cow<'a, [f64]>>> = vec![None; self.nodes.len()];
        let mut aux: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];

        for (i, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if !needed[i] {
                continue;
            }
            let fail = |detail: String| Error::Graph {
                node: i,
                op: node.op.name(),
                detail,
            };
            let val = |id: NodeId| -> &[f64] { values[id.0].as_deref().expect("operand evaluated") };
            let shape_of = |id: NodeId| rows_cols(&self.nodes[id.0].shape);
            let out: Cow<'a, [f64]> = match &node.op {
                Op::Input(name) => {
                    let tensor = inputs
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, t)| *t)
                        .ok_or_else(|| fail(format!("input `{name}` was not provided")))?;
                    if tensor.shape() != node.shape.as_slice() {
                        return Err(fail(format!(
                            "input `{name}` expects shape {:?}, got {:?}",
                            node.shape,
                            tensor.shape()
                        )));
                    }
                    if !tensor.is_finite() {
                        return Err(fail(format!("input `{name}` contains non-finite values")));
                    }
                    Cow::Borrowed(tensor.data())
                }
                Op::Param(name) => Cow::Borrowed(self.params[name].data()),
                Op::MatMul(a, b) => {
                    let ((m, k), (_, n)) = (shape_of(*a), shape_of(*b));
                    let mut c = vec![0.0; m * n];
                    gemm(m, k, n, val(*a), false, val(*b), false, &mut c, false);
                    Cow::Owned(c)
                }
                Op::MatMulNT(a, b) => {
                    let ((m, k), (n, _)) = (shape_of(*a), shape_of(*b));
                    let mut c = vec![0.0; m * n];
                    gemm(m, k, n, val(*a), false, val(*b), true, &mut c, false);
                    Cow::Owned(c)
                }
                Op::Add(a, b) => Cow::Owned(val(*a).iter().zip(val(*b)).map(|(x, y)| x + y).collect()),
                Op::AddRow(a, r) => {
                    let row = val(*r);
                    let n = row.len();
                    Cow::Owned(val(*a).iter().enumerate().map(|(idx, x)| x + row[idx % n]).collect())
                }
                Op::Mul(a, b) => Cow::Owned(val(*a).iter().zip(val(*b)).map(|(x, y)| x * y).collect()),
                Op::Scale(a, f) => Cow::Owned(val(*a).iter().map(|x| x * f).collect()),
                Op::Relu(a) => Cow::Owned(val(*a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()),
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (m, d) = shape_of(*x);
                    let (xs, g, b) = (val(*x), val(*gain), val(*bias));
                    let mut out = vec![0.0; m * d];
                    // aux: normalized rows (m·d) followed by 1/std per row (m)
                    let mut saved = vec![0.0; m * d + m];
                    let ones = vec![1.0; d];
                    let zeros = vec![0.0; d];
                    for r in 0..m {
                        let row = &xs[r * d..(r + 1) * d];
                        let inv = layer_norm_row(row, &ones, &zeros, *eps, &mut saved[r * d..(r + 1) * d]);
                        saved[m * d + r] = inv;
                        for j in 0..d {
                            out[r * d + j] = g[j] * saved[r * d + j] + b[j];
                        }
                    }
                    aux[i] = Some(saved);
                    Cow::Owned(out)
                }
                Op::MaskedSoftmax { logits, mask } => {
                    let (m, n) = shape_of(*logits);
                    let mask_vals = val(*mask);
                    let mut blocked = Vec::with_capacity(mask_vals.len());
                    for &v in mask_vals {
                        if v != 0.0 && v != 1.0 {
                            return Err(fail(format!("mask entries must be 0 or 1, found {v}")));
                        }
                        blocked.push(v == 1.0);
                    }
                    let xs = val(*logits);
                    let mut out = vec![0.0; m * n];
                    for r in 0..m {
                        let range = r * n..(r + 1) * n;
                        if !softmax_row(&xs[range.clone()], &blocked[range.clone()], &mut out[range]) {
                            return Err(fail(format!("row {r} of the mask blocks every column")));
                        }
                    }
                    Cow::Owned(out)
                }
                Op::Mse(a, b) => {
                    let (xa, xb) = (val(*a), val(*b));
                    let total: f64 = xa.iter().zip(xb).map(|(p, q)| (p - q) * (p - q)).sum();
                    Cow::Owned(vec![total / xa.len() as f64])
                }
                Op::Sum(a) => Cow::Owned(vec![val(*a).iter().sum()]),
            };
            if let Cow::Owned(ref data) = out {
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(fail("produced a non-finite value".into()));
                }
            }
            values[i] = Some(out);
        }
        Ok(Trace { values, aux })
    }

    fn backward(&self, output: NodeId, trace: &Trace<'_>) -> ParamSet {
        let n_nodes = output.0 + 1;
        // Only nodes that depend on a trainable parameter carry gradients.
        let mut requires = vec![false; n_nodes];
        for i in 0..n_nodes {
            requires[i] = match &self.nodes[i].op {
                Op::Param(name) => self.trainable.contains(name),
                Op::Input(_) => false,
                op => op.operands().iter().any(|o| requires[o.0]),
            };
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
        grads[output.0] = Some(vec![1.0]);

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'g mut Vec<f64> {
            grads[id.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..n_nodes).rev() {
            let Some(dout) = grads[i].take() else { continue };
            if !requires[i] {
                continue;
            }
            let node = &self.nodes[i];
            let val = |id: NodeId| -> &[f64] { trace.values[id.0].as_deref().expect("evaluated") };
            let shape_of = |id: NodeId| rows_cols(&self.nodes[id.0].shape);
            let size = |id: NodeId| self.nodes[id.0].shape.iter().product::<usize>();
            match &node.op {
                Op::Input(_) => {}
                Op::Param(_) => {
                    grads[i] = Some(dout);
                }
                Op::MatMul(a, b) => {
                    let ((m, k), (_, n)) = (shape_of(*a), shape_of(*b));
                    if requires[a.0] {
                        let ga = acc(&mut grads, *a, m * k);
                        gemm(m, n, k, &dout, false, val(*b), true, ga, true);
                    }
                    if requires[b.0] {
                        let gb = acc(&mut grads, *b, k * n);
                        gemm(k, m, n, val(*a), true, &dout, false, gb, true);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let ((m, k), (n, _)) = (shape_of(*a), shape_of(*b));
                    if requires[a.0] {
                        let ga = acc(&mut grads, *a, m * k);
                        gemm(m, n, k, &dout, false, val(*b), false, ga, true);
                    }
                    if requires[b.0] {
                        let gb = acc(&mut grads, *b, n * k);
                        gemm(n, m, k, &dout, true, val(*a), false, gb, true);
                    }
                }
                Op::Add(a, b) => {
                    for id in [*a, *b] {
                        if requires[id.0] {
                            let g = acc(&mut grads, id, dout.len());
                            g.iter_mut().zip(&dout).for_each(|(g, d)| *g += d);
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    if requires[a.0] {
                        let g = acc(&mut grads, *a, dout.len());
                        g.iter_mut().zip(&dout).for_each(|(g, d)| *g += d);
                    }
                    if requires[r.0] {
                        let n = size(*r);
                        let g = acc(&mut grads, *r, n);
                        for (idx, d) in dout.iter().enumerate() {
                            g[idx % n] += d;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if requires[a.0] {
                        let other = val(*b);
                        let g = acc(&mut grads, *a, dout.len());
                        for ((g, d), o) in g.iter_mut().zip(&dout).zip(other) {
                            *g += d * o;
                        }
                    }
                    if requires[b.0] {
                        let other = val(*a);
                        let g = acc(&mut grads, *b, dout.len());
                        for ((g, d), o) in g.iter_mut().zip(&dout).zip(other) {
                            *g += d * o;
                        }
                    }
                }
                Op::Scale(a, f) => {
                    let g = acc(&mut grads, *a, dout.len());
                    g.iter_mut().zip(&dout).for_each(|(g, d)| *g += f * d);
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let g = acc(&mut grads, *a, dout.len());
                    for ((g, d), &x) in g.iter_mut().zip(&dout).zip(x) {
                        if x > 0.0 {
                            *g += d;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, .. } => {
                    let (m, d) = shape_of(*x);
                    let saved = trace.aux[i].as_ref().expect("layer norm aux");
                    let (xhat, inv_std) = saved.split_at(m * d);
                    let g = val(*gain);
                    if requires[gain.0] {
                        let gg = acc(&mut grads, *gain, d);
                        for r in 0..m {
                            for j in 0..d {
                                gg[j] += dout[r * d + j] * xhat[r * d + j];
                            }
                        }
                    }
                    if requires[bias.0] {
                        let gb = acc(&mut grads, *bias, d);
                        for r in 0..m {
                            for j in 0..d {
                                gb[j] += dout[r * d + j];
                            }
                        }
                    }
                    if requires[x.0] {
                        let gx = acc(&mut grads, *x, m * d);
                        let mut dxhat = vec![0.0; d];
                        for r in 0..m {
                            let row = r * d..(r + 1) * d;
                            let xh = &xhat[row.clone()];
                            for j in 0..d {
                                dxhat[j] = dout[r * d + j] * g[j];
                            }
                            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                gx[r * d + j] += inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                            }
                        }
                    }
                }
                Op::MaskedSoftmax { logits, .. } => {
                    let (m, n) = shape_of(*logits);
                    let y = trace.values[i].as_deref().expect("evaluated");
                    let g = acc(&mut grads, *logits, m * n);
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dot: f64 = y[row.clone()].iter().zip(&dout[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            g[j] += y[j] * (dout[j] - dot);
                        }
                    }
                }
                Op::Mse(a, b) => {
                    let (xa, xb) = (val(*a), val(*b));
                    let scale = 2.0 * dout[0] / xa.len() as f64;
                    if requires[a.0] {
                        let g = acc(&mut grads, *a, xa.len());
                        for ((g, p), q) in g.iter_mut().zip(xa).zip(xb) {
                            *g += scale * (p - q);
                        }
                    }
                    if requires[b.0] {
                        let g = acc(&mut grads, *b, xa.len());
                        for ((g, p), q) in g.iter_mut().zip(xa).zip(xb) {
                            *g -= scale * (p - q);
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = size(*a);
                    let g = acc(&mut grads, *a, n);
                    g.iter_mut().for_each(|g| *g += dout[0]);
                }
            }
        }

        self.trainable
            .iter()
            .map(|name| {
                let id = self.param_nodes[name];
                let shape = self.nodes[id.0].shape.clone();
                let data = grads
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
                (name.clone(), Tensor::new(shape, data).expect("gradient shape"))
            })
            .collect()
    }
}

struct Trace<'a> {
    values: Vec<Option<Cow<'a, [f64]>>>,
    aux: Vec<Option<Vec<f64>>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_and_sum() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0), true).unwrap();
        let y = g.mul(x, x).unwrap();
        let (v, grads) = g.evaluate_and_backprop(y, &[]).unwrap();
        assert_eq!(v.item(), 9.0);
        assert_eq!(grads["x"].item(), 6.0);

        let mut g = Graph::new();
        let x = g
            .param("x", Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 7.0, 0.0, 1.5]).unwrap(), true)
            .unwrap();
        let s = g.sum(x).unwrap();
        let (v, grads) = g.evaluate_and_backprop(s, &[]).unwrap();
        assert_eq!(v.item(), 10.0);
        assert_eq!(grads["x"], Tensor::ones(&[2, 3]));
    }

    #[test]
    fn build_time_shape_errors_name_the_node() {
        let mut g = Graph::new();
        let a = g.input("a", &[2, 3]).unwrap();
        let b = g.input("b", &[2, 3]).unwrap();
        match g.matmul(a, b) {
            Err(Error::Graph { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn evaluation_rejects_wrong_input_shape() {
        let mut g = Graph::new();
        let a = g.input("a", &[2, 2]).unwrap();
        let s = g.sum(a).unwrap();
        let bad = Tensor::zeros(&[3, 2]);
        match g.evaluate(s, &[("a", &bad)]) {
            Err(Error::Graph { node: 0, op: "input", .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(g.evaluate(s, &[]).is_err());
    }

    #[test]
    fn gradients_need_scalar_output() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::zeros(&[2, 2]), true).unwrap();
        let r = g.relu(a).unwrap();
        assert!(matches!(g.evaluate_and_backprop(r, &[]), Err(Error::Graph { .. })));
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut g = Graph::new();
        let l = g.input("l", &[2, 2]).unwrap();
        let m = g.input("m", &[2, 2]).unwrap();
        let s = g.masked_softmax(l, m).unwrap();
        let logits = Tensor::zeros(&[2, 2]);
        let mask = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(g.evaluate(s, &[("l", &logits), ("m", &mask)]).is_err());
    }

    #[test]
    fn unused_trainable_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::scalar(2.0), true).unwrap();
        g.param("unused", Tensor::zeros(&[3]), true).unwrap();
        let s = g.sum(a).unwrap();
        let (_, grads) = g.evaluate_and_backprop(s, &[]).unwrap();
        assert_eq!(grads["unused"], Tensor::zeros(&[3]));
    }
}
