//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape. Every op appends a node holding its output value and
//! enough context to run its backward rule; a [`Var`] is an index into the
//! tape. Since nodes can only reference earlier nodes the tape is acyclic and
//! already topologically sorted, so [`Graph::backward`] is a single reverse
//! sweep that accumulates gradients additively across fan-out.
//!
//! ```
//! use intrabatch::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0]);
//! ```

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies an op family; used for reporting and for the backward-rule
/// fault injection that the gradient checker's own tests rely on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Mul,
    Scale,
    Relu,
    AddBias,
    Concat,
    RowSoftmax,
    LayerNorm,
    SmoothedCe,
    Sum,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::AddBias => "add_bias",
            OpKind::Concat => "concat",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::SmoothedCe => "smoothed_ce",
            OpKind::Sum => "sum",
        }
    }

    pub const ALL: [OpKind; 13] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::AddBias,
        OpKind::Concat,
        OpKind::RowSoftmax,
        OpKind::LayerNorm,
        OpKind::SmoothedCe,
        OpKind::Sum,
    ];

    pub fn parse(s: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    AddBias(Var, Var),
    Concat(Vec<Var>),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SmoothedCe {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
        temperature: f64,
    },
    Sum(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Concat(_) => OpKind::Concat,
            Op::RowSoftmax(_) => OpKind::RowSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::SmoothedCe { .. } => OpKind::SmoothedCe,
            Op::Sum(_) => OpKind::Sum,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients of one scalar output with respect to every node of the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; nodes the output does not depend on get zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// `None` when the output never reached `v` during the backward sweep.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A tape whose backward rule for `kind` is deliberately wrong (input
    /// gradients scaled by 1.5). Only useful to prove that a gradient check
    /// catches broken rules.
    pub fn with_fault(kind: OpKind) -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter or constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// `x · wᵀ`, the usual linear-layer product with `w` stored `[out × in]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        self.matmul(x, wt)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same length");
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same length");
        self.push(out, Op::Relu(a))
    }

    /// Adds the vector `bias[n]` to every row of `x[m×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = tx.as_matrix("add_bias")?;
        if tb.shape() != [n] {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % n];
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// Concatenates matrices along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Param("concat of zero tensors".into()));
        }
        let tensors: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Tensor::hstack(&tensors)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Softmax of every row, with max subtraction. Entries equal to `-inf`
    /// get probability zero; each row needs at least one finite entry.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, _) = tx.as_matrix("row_softmax")?;
        if tx.data().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite("row_softmax input".into()));
        }
        let mut out = tx.clone();
        for i in 0..m {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::NonFinite(format!(
                    "row_softmax row {i} fully masked"
                )));
            }
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(out, Op::RowSoftmax(x)))
    }

    /// Per-row standardization followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, d) = tx.as_matrix("layer_norm")?;
        if d < 2 {
            return Err(Error::Degenerate(format!(
                "layer_norm needs at least 2 features, got {d}"
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Param(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        if tg.shape() != [d] {
            return Err(shape_err("layer_norm gain", tx, tg));
        }
        if tb.shape() != [d] {
            return Err(shape_err("layer_norm bias", tx, tb));
        }
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(vec![m, d], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean over rows of the cross-entropy between label-smoothed one-hot
    /// targets and `softmax(logits / temperature)`. Produces a scalar.
    pub fn smoothed_ce(
        &mut self,
        logits: Var,
        labels: &[usize],
        temperature: f64,
        smoothing: f64,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (b, c) = tl.as_matrix("smoothed_ce")?;
        if labels.len() != b {
            return Err(Error::Shape {
                op: "smoothed_ce labels",
                lhs: tl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if !(temperature > 0.0) {
            return Err(Error::Param(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Param(format!(
                "smoothing must be in [0,1), got {smoothing}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label {
                label: bad,
                classes: c,
            });
        }
        if b == 0 {
            return Err(Error::Param("smoothed_ce on an empty batch".into()));
        }
        let off = smoothing / c as f64;
        let mut targets = vec![off; b * c];
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            targets[i * c + label] += 1.0 - smoothing;
            let row = tl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
            let shifted: Vec<f64> = row.iter().map(|z| z / temperature - max).collect();
            let s: f64 = shifted.iter().map(|z| z.exp()).sum();
            let log_s = s.ln();
            for j in 0..c {
                probs[i * c + j] = shifted[j].exp() / s;
                // -log p_j = log s - shifted_j
                total += targets[i * c + j] * (log_s - shifted[j]);
            }
        }
        let loss = total / b as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("smoothed_ce".into()));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothedCe {
                logits,
                targets,
                probs,
                temperature,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Reverse sweep from the one-element node `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::Shape {
                op: "backward (needs a scalar)",
                lhs: out.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut contribs: Vec<(Var, Vec<f64>)> = Vec::new();
            self.backward_rule(node, &dy, &mut contribs);
            if self.fault == Some(node.op.kind()) {
                for (_, g) in contribs.iter_mut() {
                    g.iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            for (v, g) in contribs {
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(dy);
        }

        let shapes: Vec<Vec<usize>> = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let grads = grads
            .into_iter()
            .zip(&shapes)
            .map(|(g, s)| g.map(|g| Tensor::new(s.clone(), g).expect("gradient length")))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_rule(&self, node: &Node, dy: &[f64], out: &mut Vec<(Var, Vec<f64>)>) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                let bt = tensor::transpose(tb.data(), k, n);
                out.push((*a, tensor::matmul(dy, &bt, m, n, k)));
                let at = tensor::transpose(ta.data(), m, k);
                out.push((*b, tensor::matmul(&at, dy, k, m, n)));
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                out.push((*a, tensor::transpose(dy, s[0], s[1])));
            }
            Op::Add(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                out.push((*a, dy.iter().zip(tb.data()).map(|(g, y)| g * y).collect()));
                out.push((*b, dy.iter().zip(ta.data()).map(|(g, x)| g * x).collect()));
            }
            Op::Scale(a, s) => out.push((*a, dy.iter().map(|g| g * s).collect())),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let g = dy
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                out.push((*a, g));
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).len();
                let mut gb = vec![0.0; n];
                for (i, g) in dy.iter().enumerate() {
                    gb[i % n] += g;
                }
                out.push((*x, dy.to_vec()));
                out.push((*b, gb));
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut g = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        g.extend_from_slice(&dy[i * total + offset..i * total + offset + w]);
                    }
                    out.push((p, g));
                    offset += w;
                }
            }
            Op::RowSoftmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut g = vec![0.0; y.len()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let dr = &dy[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        g[i * n + j] = yr[j] * (dr[j] - dot);
                    }
                }
                out.push((*x, g));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gain).data();
                let m = inv_std.len();
                let d = tg.len();
                let mut gx = vec![0.0; m * d];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for i in 0..m {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let g = dy[i * d + j];
                        let h = xhat[i * d + j];
                        gg[j] += g * h;
                        gb[j] += g;
                        let dh = g * tg[j];
                        sum_dh += dh;
                        sum_dh_h += dh * h;
                    }
                    let scale = inv_std[i] / d as f64;
                    for j in 0..d {
                        let dh = dy[i * d + j] * tg[j];
                        let h = xhat[i * d + j];
                        gx[i * d + j] = scale * (d as f64 * dh - sum_dh - h * sum_dh_h);
                    }
                }
                out.push((*x, gx));
                out.push((*gain, gg));
                out.push((*bias, gb));
            }
            Op::SmoothedCe {
                logits,
                targets,
                probs,
                temperature,
            } => {
                let b = self.value(*logits).rows() as f64;
                let k = dy[0] / (temperature * b);
                let g = probs
                    .iter()
                    .zip(targets)
                    .map(|(p, t)| k * (p - t))
                    .collect();
                out.push((*logits, g));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                out.push((*a, vec![dy[0]; n]));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[[0.0, 0.0, 0.0]]));
        let y = g.row_softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!(approx(*v, 1.0 / 3.0, 1e-15));
        }
        let x = g.leaf(Tensor::from_rows(&[[1000.0, 1000.0]]));
        let y = g.row_softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_log_ratio() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[[1f64.ln(), 3f64.ln()]]));
        let y = g.row_softmax(x).unwrap();
        let d = g.value(y).data();
        assert!(approx(d[0], 0.25, 1e-15) && approx(d[1], 0.75, 1e-15));
    }

    #[test]
    fn softmax_masked_entries_get_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[
            [f64::NEG_INFINITY, 1.0],
            [2.0, f64::NEG_INFINITY],
        ]));
        let y = g.row_softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 1.0, 0.0]);
        let x = g.leaf(Tensor::from_rows(&[[f64::NAN, 1.0]]));
        assert!(g.row_softmax(x).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.leaf(Tensor::full(&[4], 1.0));
        let bias = g.leaf(Tensor::zeros(&[4]));
        let x = g.leaf(Tensor::from_rows(&[
            [2.0, 2.0, 2.0, 2.0],
            [0.0, 2.0, 4.0, 6.0],
        ]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let v = g.value(y);
        assert_eq!(v.row(0), &[0.0; 4]);
        let expect = [-1.3416, -0.4472, 0.4472, 1.3416];
        for (a, b) in v.row(1).iter().zip(expect) {
            assert!(approx(*a, b, 1e-3), "{a} vs {b}");
        }

        let gain = g.leaf(Tensor::full(&[2], 1.0));
        let bias = g.leaf(Tensor::zeros(&[2]));
        let x = g.leaf(Tensor::from_rows(&[[-1.0, 1.0]]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let v = g.value(y).data();
        assert!(approx(v[0], -1.0, 1e-3) && approx(v[1], 1.0, 1e-3));
    }

    #[test]
    fn layer_norm_rejects_single_feature() {
        let mut g = Graph::new();
        let gain = g.leaf(Tensor::full(&[1], 1.0));
        let bias = g.leaf(Tensor::zeros(&[1]));
        let x = g.leaf(Tensor::from_rows(&[[3.0]]));
        assert!(matches!(
            g.layer_norm(x, gain, bias, 1e-5),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = g.leaf(Tensor::vector(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
        let r = g.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(r);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let l = g.leaf(Tensor::zeros(&[3, 2]));
        let r = g.leaf(Tensor::zeros(&[3, 2]));
        let c = g.concat(&[l, r]).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 4]);
        assert!(g.add(a, r).is_err());
    }

    #[test]
    fn relu_subgradient_zero_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_gradient_is_ones_times_bt() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = g.leaf(Tensor::from_rows(&[[5.0, 6.0, 7.0], [8.0, 9.0, 10.0]]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).data(), &[18.0, 27.0, 18.0, 27.0]);
        assert_eq!(grads.wrt(b).data(), &[4.0, 4.0, 4.0, 6.0, 6.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0]));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap();
        let s = g.sum(z);
        // z = 2x², dz/dx = 4x
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[12.0]);
    }

    #[test]
    fn unreached_nodes_have_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0]));
        let unused = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn smoothed_ce_label_out_of_range() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            g.smoothed_ce(z, &[3], 1.0, 0.0),
            Err(Error::Label {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn op_kind_names_round_trip() {
        for k in [
            OpKind::Relu,
            OpKind::LayerNorm,
            OpKind::SmoothedCe,
            OpKind::MatMul,
        ] {
            assert_eq!(OpKind::parse(k.name()), Some(k));
        }
    }
}
