//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The engine records a Wengert list: every operation appends a node holding
//! its operands' ids and its computed value. [`Tape::backward`] walks the list
//! in reverse, propagating adjoints, and returns the gradients of all named
//! parameter leaves. The op set is exactly what the Transformer forward and
//! MSE loss need; each op's adjoint rule lives next to its forward rule.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Index of a node on the tape.
pub type NodeId = usize;

/// The constant used by [`gelu`]: sqrt(2 / pi).
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

/// Tanh-approximate GELU, used by every nonlinearity in the model.
pub fn gelu_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Derivative of [`gelu_scalar`].
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Epsilon inside the layer-normalization variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    /// Input matrix; `param` names it as a trainable parameter.
    Leaf { param: Option<String> },
    /// Elementwise sum of two same-shape matrices.
    Add(NodeId, NodeId),
    /// Matrix plus a 1 x n row broadcast over every row.
    AddRow(NodeId, NodeId),
    /// Scalar multiple.
    Scale(NodeId, f64),
    /// `A . B`.
    MatMul(NodeId, NodeId),
    /// `A . B^T`.
    MatMulNT(NodeId, NodeId),
    /// Elementwise tanh-approximate GELU.
    Gelu(NodeId),
    /// Rowwise layer normalization with learned gain and bias (both 1 x n).
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    /// Rowwise softmax of `x + mask`, where `mask` is a constant matrix of
    /// zeros and large negative sentinels.
    MaskedSoftmax { x: NodeId },
    /// Horizontal concatenation of equal-height matrices.
    ConcatCols(Vec<NodeId>),
    /// Row selection: output row i is input row `rows[i]`.
    SelectRows { x: NodeId, rows: Vec<usize> },
    /// Sum of squared differences against a constant target; 1 x 1 output.
    SseAgainst { x: NodeId, target: Array2<f64> },
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// A Wengert-list tape. Build the graph with the op methods, read values with
/// [`Tape::value`], then call [`Tape::backward`] once from a scalar root.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed at `id`.
    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Records a named trainable parameter; its gradient is returned by
    /// [`Tape::backward`] under this name.
    pub fn param(&mut self, name: &str, value: Array2<f64>) -> NodeId {
        self.push(Op::Leaf { param: Some(name.to_string()) }, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        self.push(Op::Add(a, b), value)
    }

    /// `a + row`, with `row` a 1 x n matrix broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.nodes[row].value.row(0).to_owned();
        let value = &self.nodes[a].value + &r;
        self.push(Op::AddRow(a, row), value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a].value.mapv(|v| v * c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(Op::MatMul(a, b), value)
    }

    /// `a . b^T` without materializing the transpose on the tape.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a].value.dot(&self.nodes[b].value.t());
        self.push(Op::MatMulNT(a, b), value)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.mapv(gelu_scalar);
        self.push(Op::Gelu(a), value)
    }

    /// Rowwise layer normalization followed by elementwise gain and bias
    /// (both 1 x n, broadcast over rows).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let value = layer_norm_forward(
            &self.nodes[x].value,
            &self.nodes[gain].value,
            &self.nodes[bias].value,
        );
        self.push(Op::LayerNorm { x, gain, bias }, value)
    }

    /// Rowwise softmax of `x + mask`. The mask acts as a constant; its large
    /// negative sentinels drive the masked weights to exactly zero, so the
    /// backward pass needs only the stored output.
    pub fn masked_softmax(&mut self, x: NodeId, mask: &Array2<f64>) -> NodeId {
        let value = masked_softmax_forward(&self.nodes[x].value, mask);
        self.push(Op::MaskedSoftmax { x }, value)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&id| self.nodes[id].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("equal row counts");
        self.push(Op::ConcatCols(parts.to_vec()), value)
    }

    /// Output row i is input row `rows[i]`.
    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let src = &self.nodes[x].value;
        let mut value = Array2::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&src.row(r));
        }
        self.push(Op::SelectRows { x, rows: rows.to_vec() }, value)
    }

    /// Scalar sum of squared differences against a constant target.
    pub fn sse_against(&mut self, x: NodeId, target: Array2<f64>) -> NodeId {
        let diff = &self.nodes[x].value - &target;
        let sse = diff.iter().map(|v| v * v).sum::<f64>();
        let value = Array2::from_elem((1, 1), sse);
        self.push(Op::SseAgainst { x, target }, value)
    }

    /// Propagates adjoints from the scalar node `root`, seeded with `seed`,
    /// and returns the accumulated gradients of all named parameters.
    ///
    /// Errors if any produced gradient is non-finite, naming the parameter.
    pub fn backward(&self, root: NodeId, seed: f64) -> Result<BTreeMap<String, Array2<f64>>> {
        assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Array2::from_elem(self.nodes[root].value.dim(), seed));

        for id in (0..=root).rev() {
            let Some(dy) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf { param } => {
                    if param.is_some() {
                        // Re-stash: leaves keep their adjoint for collection.
                        grads[id] = Some(dy);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &dy);
                    accumulate(&mut grads, *b, &dy);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *a, &dy);
                    let drow = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, &drow);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, &dy.mapv(|v| v * c));
                }
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&dy);
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::MatMulNT(a, b) => {
                    // C = A . B^T: dA = dC . B, dB = dC^T . A.
                    let da = dy.dot(&self.nodes[*b].value);
                    let db = dy.t().dot(&self.nodes[*a].value);
                    accumulate(&mut grads, *a, &da);
                    accumulate(&mut grads, *b, &db);
                }
                Op::Gelu(a) => {
                    let dx = &dy * &self.nodes[*a].value.mapv(gelu_grad_scalar);
                    accumulate(&mut grads, *a, &dx);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (dx, dgain, dbias) = layer_norm_backward(
                        &self.nodes[*x].value,
                        &self.nodes[*gain].value,
                        &dy,
                    );
                    accumulate(&mut grads, *x, &dx);
                    accumulate(&mut grads, *gain, &dgain);
                    accumulate(&mut grads, *bias, &dbias);
                }
                Op::MaskedSoftmax { x, .. } => {
                    // dz_j = y_j (dy_j - sum_k dy_k y_k), rowwise; masked
                    // entries have y_j = 0 and receive zero adjoint.
                    let y = &self.nodes[id].value;
                    let mut dx = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let yi = y.row(i);
                        let gi = dy.row(i);
                        let dot = yi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum::<f64>();
                        for j in 0..y.ncols() {
                            dx[[i, j]] = yi[j] * (gi[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        let slice = dy.slice(ndarray::s![.., col..col + w]).to_owned();
                        accumulate(&mut grads, p, &slice);
                        col += w;
                    }
                }
                Op::SelectRows { x, rows } => {
                    let mut dx = Array2::zeros(self.nodes[*x].value.dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut row = dx.row_mut(r);
                        row += &dy.row(i);
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::SseAgainst { x, target } => {
                    let g = dy[[0, 0]];
                    let dx = (&self.nodes[*x].value - target).mapv(|v| 2.0 * v * g);
                    accumulate(&mut grads, *x, &dx);
                }
            }
        }

        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Array2::zeros(node.value.dim()));
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { parameter: name.clone() });
                }
                match out.entry(name.clone()) {
                    std::collections::btree_map::Entry::Vacant(e) => {
                        e.insert(g);
                    }
                    std::collections::btree_map::Entry::Occupied(mut e) => {
                        *e.get_mut() = e.get() + &g;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, delta: &Array2<f64>) {
    match &mut grads[id] {
        Some(g) => *g += delta,
        slot => *slot = Some(delta.clone()),
    }
}

/// Rowwise layer normalization: each row is centered, divided by
/// sqrt(population variance + eps), then scaled and shifted elementwise.
pub fn layer_norm_forward(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> Array2<f64> {
    let n = x.ncols() as f64;
    let mut out = Array2::zeros(x.dim());
    for i in 0..x.nrows() {
        let row = x.row(i);
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..x.ncols() {
            let xhat = (row[j] - mean) * inv_std;
            out[[i, j]] = xhat * gain[[0, j]] + bias[[0, j]];
        }
    }
    out
}

fn layer_norm_backward(
    x: &Array2<f64>,
    gain: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let n = x.ncols() as f64;
    let mut dx = Array2::zeros(x.dim());
    let mut dgain = Array2::zeros((1, x.ncols()));
    let mut dbias = Array2::zeros((1, x.ncols()));
    for i in 0..x.nrows() {
        let row = x.row(i);
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
        let dxhat: Vec<f64> = (0..x.ncols()).map(|j| dy[[i, j]] * gain[[0, j]]).collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
        let mean_dxhat_xhat =
            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for j in 0..x.ncols() {
            dx[[i, j]] = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            dgain[[0, j]] += dy[[i, j]] * xhat[j];
            dbias[[0, j]] += dy[[i, j]];
        }
    }
    (dx, dgain, dbias)
}

/// Rowwise softmax of `x + mask` with max-subtraction for stability. Entries
/// whose mask is a large negative sentinel underflow to weight exactly 0.
pub fn masked_softmax_forward(x: &Array2<f64>, mask: &Array2<f64>) -> Array2<f64> {
    let logits = x + mask;
    let mut out = Array2::zeros(logits.dim());
    for i in 0..logits.nrows() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..logits.ncols() {
            let e = (row[j] - max).exp();
            out[[i, j]] = e;
            sum += e;
        }
        for j in 0..logits.ncols() {
            out[[i, j]] /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite difference of a scalar-valued tape program w.r.t. one
    /// entry of one named parameter.
    fn fd_param<F>(build: F, params: &BTreeMap<String, Array2<f64>>, name: &str, idx: (usize, usize)) -> f64
    where
        F: Fn(&BTreeMap<String, Array2<f64>>) -> f64,
    {
        let h = 1e-6;
        let mut plus = params.clone();
        plus.get_mut(name).unwrap()[[idx.0, idx.1]] += h;
        let mut minus = params.clone();
        minus.get_mut(name).unwrap()[[idx.0, idx.1]] -= h;
        (build(&plus) - build(&minus)) / (2.0 * h)
    }

    fn check_all_grads<F>(build_loss: F, params: &BTreeMap<String, Array2<f64>>)
    where
        F: Fn(&BTreeMap<String, Array2<f64>>, &mut Tape) -> NodeId,
    {
        let mut tape = Tape::new();
        let root = build_loss(params, &mut tape);
        let grads = tape.backward(root, 1.0).unwrap();
        let eval = |p: &BTreeMap<String, Array2<f64>>| {
            let mut t = Tape::new();
            let r = build_loss(p, &mut t);
            t.value(r)[[0, 0]]
        };
        for (name, g) in &grads {
            for i in 0..g.nrows() {
                for j in 0..g.ncols() {
                    let fd = fd_param(eval, params, name, (i, j));
                    let an = g[[i, j]];
                    let denom = an.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        (an - fd).abs() / denom < 1e-5,
                        "{name}[{i},{j}]: analytic {an}, fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_chain_gradients_match_finite_differences() {
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), array![[0.5, -1.0], [2.0, 0.25], [-0.75, 1.5]]);
        params.insert("b".to_string(), array![[1.0, -0.5, 0.3], [0.2, 0.9, -1.1]]);
        let target = array![[0.1, 0.2, 0.3], [-0.4, 0.5, -0.6], [0.7, -0.8, 0.9]];
        check_all_grads(
            move |p, tape| {
                let a = tape.param("a", p["a"].clone());
                let b = tape.param("b", p["b"].clone());
                let c = tape.matmul(a, b);
                let d = tape.scale(c, 0.5);
                tape.sse_against(d, target.clone())
            },
            &params,
        );
    }

    #[test]
    fn matmul_nt_and_addrow_gradients_match_finite_differences() {
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), array![[0.5, -1.0], [2.0, 0.25]]);
        params.insert("b".to_string(), array![[1.0, -0.5], [0.2, 0.9], [0.4, -0.3]]);
        params.insert("row".to_string(), array![[0.3, -0.2, 0.1]]);
        let target = array![[0.1, 0.2, -0.1], [0.0, -0.3, 0.4]];
        check_all_grads(
            move |p, tape| {
                let a = tape.param("a", p["a"].clone());
                let b = tape.param("b", p["b"].clone());
                let row = tape.param("row", p["row"].clone());
                let c = tape.matmul_nt(a, b);
                let d = tape.add_row(c, row);
                tape.sse_against(d, target.clone())
            },
            &params,
        );
    }

    #[test]
    fn gelu_and_layer_norm_gradients_match_finite_differences() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), array![[0.5, -1.0, 0.2], [2.0, 0.25, -0.7]]);
        params.insert("gain".to_string(), array![[1.1, 0.9, 1.3]]);
        params.insert("bias".to_string(), array![[0.1, -0.2, 0.05]]);
        let target = array![[0.0, 0.1, -0.1], [0.2, -0.2, 0.3]];
        check_all_grads(
            move |p, tape| {
                let x = tape.param("x", p["x"].clone());
                let gain = tape.param("gain", p["gain"].clone());
                let bias = tape.param("bias", p["bias"].clone());
                let ln = tape.layer_norm(x, gain, bias);
                let g = tape.gelu(ln);
                tape.sse_against(g, target.clone())
            },
            &params,
        );
    }

    #[test]
    fn masked_softmax_gradients_match_finite_differences() {
        let mut params = BTreeMap::new();
        params.insert("x".to_string(), array![[0.5, -1.0, 0.2], [2.0, 0.25, -0.7], [0.1, 0.2, 0.3]]);
        let mask = array![
            [0.0, -1e9, -1e9],
            [0.0, 0.0, -1e9],
            [0.0, 0.0, 0.0]
        ];
        let target = array![[0.3, 0.3, 0.4], [0.5, 0.5, 0.0], [0.2, 0.3, 0.5]];
        check_all_grads(
            move |p, tape| {
                let x = tape.param("x", p["x"].clone());
                let s = tape.masked_softmax(x, &mask);
                tape.sse_against(s, target.clone())
            },
            &params,
        );
    }

    #[test]
    fn masked_softmax_masks_to_exact_zero_and_rows_sum_to_one() {
        let x = array![[3.0, 100.0], [5.0, -2.0]];
        let mask = array![[0.0, -1e9], [0.0, 0.0]];
        let y = masked_softmax_forward(&x, &mask);
        assert_eq!(y[[0, 1]], 0.0, "sentinel-masked weight must be exactly zero");
        assert_eq!(y[[0, 0]], 1.0);
        for i in 0..2 {
            let s: f64 = y.row(i).sum();
            assert!((s - 1.0).abs() < 1e-9, "softmax row {i} sums to {s}");
        }
    }

    #[test]
    fn concat_and_select_rows_gradients_match_finite_differences() {
        let mut params = BTreeMap::new();
        params.insert("p".to_string(), array![[0.5, -1.0], [2.0, 0.25], [0.3, 0.4]]);
        params.insert("q".to_string(), array![[1.0], [-0.5], [0.7]]);
        let target = array![[0.1, 0.2, 0.3], [0.0, -0.1, 0.4]];
        check_all_grads(
            move |p, tape| {
                let a = tape.param("p", p["p"].clone());
                let b = tape.param("q", p["q"].clone());
                let cat = tape.concat_cols(&[a, b]);
                let sel = tape.select_rows(cat, &[2, 0]);
                tape.sse_against(sel, target.clone())
            },
            &params,
        );
    }

    #[test]
    fn reused_parameter_accumulates_gradient() {
        // loss = sse(A . A) over a 1x1 matrix: d/da (a^2 - t)^2 has both
        // operand paths flowing into the same leaf.
        let a_val = 1.3;
        let t = 0.7;
        let mut tape = Tape::new();
        let a = tape.param("a", array![[a_val]]);
        let sq = tape.matmul(a, a);
        let root = tape.sse_against(sq, array![[t]]);
        let grads = tape.backward(root, 1.0).unwrap();
        let expected = 2.0 * (a_val * a_val - t) * 2.0 * a_val;
        let got = grads["a"][[0, 0]];
        assert!((got - expected).abs() < 1e-12, "got {got}, want {expected}");
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param("a", array![[2.0]]);
        let _b = tape.param("unused", array![[1.0, 2.0]]);
        let root = tape.sse_against(a, array![[0.0]]);
        let grads = tape.backward(root, 1.0).unwrap();
        assert_eq!(grads["unused"], Array2::<f64>::zeros((1, 2)));
        assert!((grads["a"][[0, 0]] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn backward_seed_scales_gradients_linearly() {
        let mut tape = Tape::new();
        let a = tape.param("a", array![[1.0, 2.0]]);
        let root = tape.sse_against(a, array![[0.0, 0.0]]);
        let g1 = tape.backward(root, 1.0).unwrap();
        let g2 = tape.backward(root, 2.0).unwrap();
        for (x, y) in g1["a"].iter().zip(g2["a"].iter()) {
            assert!((2.0 * x - y).abs() < 1e-12, "doubling the seed doubles gradients");
        }
    }

    #[test]
    fn gelu_matches_reference_values() {
        // Reference values of the tanh-approximate GELU.
        assert!((gelu_scalar(0.0) - 0.0).abs() < 1e-15);
        assert!((gelu_scalar(1.0) - 0.841191990607477).abs() < 1e-12);
        assert!((gelu_scalar(-1.0) + 0.15880800939252302).abs() < 1e-12);
        // Derivative against a central finite difference.
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((gelu_grad_scalar(x) - fd).abs() < 1e-8, "gelu' at {x}");
        }
    }
}
