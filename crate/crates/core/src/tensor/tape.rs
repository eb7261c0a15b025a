use std::collections::BTreeMap;
use std::sync::Arc;

use super::{kernels, shape_err, Tensor, TensorError};

/// Identifier of a trainable parameter; the position in the owning
/// parameter set's deterministic order.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(transparent)]
pub struct ParamId(pub usize);

/// Gradient per trainable parameter, ordered by [`ParamId`].
pub type Gradients = BTreeMap<ParamId, Tensor>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    SliceCols { src: Var, start: usize },
    GatherRows { src: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    LayerNorm { src: Var, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    Silu(Var),
    Rotate { src: Var, table: Arc<RowRotation> },
    Sum(Var),
    Mse { pred: Var, target: Arc<Tensor> },
}

/// Per-row planar rotations of consecutive channel pairs. Rows without an
/// entry are passed through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct RowRotation {
    /// `cos_sin[r]` holds `(cos, sin)` for each channel pair of row `r`, or
    /// `None` for rows left untouched.
    pub cos_sin: Vec<Option<Vec<(f64, f64)>>>,
}

impl RowRotation {
    pub fn apply(&self, x: &[f64], cols: usize, inverse: bool) -> Vec<f64> {
        let mut out = x.to_vec();
        for (r, entry) in self.cos_sin.iter().enumerate() {
            let Some(pairs) = entry else { continue };
            let row = &mut out[r * cols..(r + 1) * cols];
            for (j, &(c, s)) in pairs.iter().enumerate() {
                let s = if inverse { -s } else { s };
                let (a, b) = (row[2 * j], row[2 * j + 1]);
                row[2 * j] = a * c - b * s;
                row[2 * j + 1] = a * s + b * c;
            }
        }
        out
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records tensor operations for one forward computation so that
/// [`Tape::backward`] can replay them in reverse.
///
/// Nodes are appended in evaluation order, so every parent index is smaller
/// than its child's.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a parameter leaf. It is trainable iff `value.requires_grad()`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        let param = value.requires_grad().then_some(id);
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.requires_grad = false;
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).zip(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(src);
        let (rows, cols) = (t.rows(), t.cols());
        if len == 0 || start + len > cols {
            return Err(shape_err(
                "slice_cols",
                format!("[{start}, {}) of {cols} columns", start + len),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let v = Tensor::new(vec![rows, len], data)?;
        self.push(v, Op::SliceCols { src, start })
    }

    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(src).gather_rows(rows)?;
        self.push(
            v,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&refs)?;
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no parts"))?;
        let rows = self.value(*first).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", "row mismatch"));
            }
            let c = t.cols();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        let v = Tensor::new(vec![rows, total], data)?;
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Per-row normalization to zero mean and unit variance, without affine
    /// parameters.
    pub fn layer_norm(&mut self, src: Var, eps: f64) -> Result<Var, TensorError> {
        let t = self.value(src);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|x| (x - mean) * is));
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        self.push(v, Op::LayerNorm { src, inv_std })
    }

    pub fn softmax_rows(&mut self, src: Var) -> Result<Var, TensorError> {
        let t = self.value(src);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut z = 0.0;
            for &x in row {
                let e = (x - max).exp();
                z += e;
                data.push(e);
            }
            data[start..].iter_mut().for_each(|e| *e /= z);
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        self.push(v, Op::SoftmaxRows(src))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, src: Var) -> Result<Var, TensorError> {
        let t = self.value(src);
        let data = t.data().iter().map(|&x| x * sigmoid(x)).collect();
        let v = t.with_data(data)?;
        self.push(v, Op::Silu(src))
    }

    pub fn rotate(&mut self, src: Var, table: Arc<RowRotation>) -> Result<Var, TensorError> {
        let t = self.value(src);
        if t.cols() % 2 != 0 || table.cos_sin.len() != t.rows() {
            return Err(shape_err(
                "rotate",
                format!("table rows {} for {:?}", table.cos_sin.len(), t.shape()),
            ));
        }
        if table
            .cos_sin
            .iter()
            .flatten()
            .any(|pairs| pairs.len() * 2 != t.cols())
        {
            return Err(shape_err("rotate", "pair count does not match columns"));
        }
        let data = table.apply(t.data(), t.cols(), false);
        let v = t.with_data(data)?;
        self.push(v, Op::Rotate { src, table })
    }

    pub fn sum(&mut self, src: Var) -> Result<Var, TensorError> {
        let s = self.value(src).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(src))
    }

    pub fn mean(&mut self, src: Var) -> Result<Var, TensorError> {
        let n = self.value(src).len() as f64;
        let s = self.sum(src)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Arc<Tensor>) -> Result<Var, TensorError> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err(
                "mse",
                format!("{:?} vs {:?}", p.shape(), target.shape()),
            ));
        }
        let n = p.len() as f64;
        let s = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(s), Op::Mse { pred, target })
    }

    /// Reverse-mode gradients of the scalar `output` with respect to every
    /// trainable leaf. Trainable leaves that do not influence the output get
    /// a zero gradient; non-trainable leaves are absent.
    pub fn backward(&self, output: Var) -> Result<Gradients, TensorError> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(shape_err(
                "backward",
                format!("output must be scalar, got {:?}", out.shape()),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);
        let mut grads = Gradients::new();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(g) = adj[idx].take() else {
                if let Op::Leaf { param: Some(id) } = node.op {
                    grads
                        .entry(id)
                        .or_insert_with(|| Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            for parent in parents(&node.op) {
                if parent.0 >= idx {
                    return Err(TensorError::Cycle {
                        node: idx,
                        parent: parent.0,
                    });
                }
            }
            self.propagate(idx, &g, &mut adj)?;
            if let Op::Leaf { param: Some(id) } = node.op {
                let t = node.value.with_data(g)?;
                let t = Tensor {
                    requires_grad: false,
                    ..t
                };
                match grads.get_mut(&id) {
                    // A parameter registered twice accumulates.
                    Some(prev) => *prev = prev.add(&t)?,
                    None => {
                        grads.insert(id, t);
                    }
                }
            }
        }
        // Trainable leaves recorded after the output cannot influence it.
        for node in &self.nodes[output.0 + 1..] {
            if let Op::Leaf { param: Some(id) } = node.op {
                grads
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(grads)
    }

    fn propagate(
        &self,
        idx: usize,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        let accumulate =
            |adj: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                accumulate(adj, *a, g.to_vec());
                accumulate(adj, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.to_vec());
                accumulate(adj, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(adj, *a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                accumulate(adj, *b, g.iter().zip(va).map(|(x, y)| x * y).collect());
            }
            Op::Scale(a, c) => accumulate(adj, *a, g.iter().map(|x| x * c).collect()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G·Bᵀ, dB = Aᵀ·G
                accumulate(adj, *a, kernels::matmul_nt(g, tb.data(), m, n, k));
                accumulate(adj, *b, kernels::matmul_tn(ta.data(), g, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                accumulate(adj, *a, kernels::matmul(g, tb.data(), m, n, k));
                accumulate(adj, *b, kernels::matmul_tn(g, ta.data(), m, n, k));
            }
            Op::SliceCols { src, start } => {
                let t = self.value(*src);
                let (rows, cols) = (t.rows(), t.cols());
                let len = node.value.cols();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                accumulate(adj, *src, d);
            }
            Op::GatherRows { src, rows } => {
                let t = self.value(*src);
                let cols = t.cols();
                let mut d = vec![0.0; t.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        d[r * cols + c] += g[i * cols + c];
                    }
                }
                accumulate(adj, *src, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    accumulate(adj, p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    accumulate(adj, p, d);
                    offset += c;
                }
            }
            Op::LayerNorm { src, inv_std } => {
                let y = &node.value;
                let cols = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for (r, &is) in inv_std.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mean_g = gr.iter().sum::<f64>() / cols as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    d.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(gi, yi)| is * (gi - mean_g - yi * mean_gy)),
                    );
                }
                accumulate(adj, *src, d);
            }
            Op::SoftmaxRows(src) => {
                let y = &node.value;
                let cols = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    d.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                }
                accumulate(adj, *src, d);
            }
            Op::Silu(src) => {
                let x = self.value(*src).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| {
                        let s = sigmoid(xi);
                        gi * s * (1.0 + xi * (1.0 - s))
                    })
                    .collect();
                accumulate(adj, *src, d);
            }
            Op::Rotate { src, table } => {
                let d = table.apply(g, node.value.cols(), true);
                accumulate(adj, *src, d);
            }
            Op::Sum(src) => {
                let n = self.value(*src).len();
                accumulate(adj, *src, vec![g[0]; n]);
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let n = p.len() as f64;
                let d = p
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| g[0] * 2.0 * (a - b) / n)
                    .collect();
                accumulate(adj, *pred, d);
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::MatMulNt(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _) => vec![*a],
        Op::SliceCols { src, .. }
        | Op::GatherRows { src, .. }
        | Op::LayerNorm { src, .. }
        | Op::Rotate { src, .. } => vec![*src],
        Op::SoftmaxRows(a) | Op::Silu(a) | Op::Sum(a) => vec![*a],
        Op::Mse { pred, .. } => vec![*pred],
        Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MatMul(..) => "matmul",
        Op::MatMulNt(..) => "matmul_nt",
        Op::SliceCols { .. } => "slice_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::Silu(..) => "silu",
        Op::Rotate { .. } => "rotate",
        Op::Sum(..) => "sum",
        Op::Mse { .. } => "mse",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trainable(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        Tensor::new(shape, data).unwrap().with_grad()
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), trainable(vec![3.0], vec![1]));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(tape.scalar(y), 9.0);
        assert_eq!(g[&ParamId(0)].data(), &[6.0]);
    }

    #[test]
    fn constant_function_gives_zero_gradient() {
        let mut tape = Tape::new();
        let _x = tape.param(ParamId(0), trainable(vec![1.0, 2.0], vec![2]));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.scale(c, 2.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g[&ParamId(0)].data(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_leaves_are_absent() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), Tensor::new(vec![1], vec![2.0]).unwrap());
        let x = tape.param(ParamId(1), trainable(vec![3.0], vec![1]));
        let y = tape.mul(w, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(!g.contains_key(&ParamId(0)));
        assert_eq!(g[&ParamId(1)].data(), &[2.0]);
    }

    #[test]
    fn non_scalar_output_is_a_shape_error() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), trainable(vec![1.0, 2.0], vec![2]));
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::Shape { op: "backward", .. })
        ));
    }

    #[test]
    fn cycle_is_detected() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), trainable(vec![1.0], vec![1]));
        let y = tape.scale(x, 2.0).unwrap();
        // Corrupt the tape so that node 1 points forward to itself.
        tape.nodes[y.0].op = Op::Scale(Var(1), 2.0);
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::Cycle { node: 1, parent: 1 })
        ));
    }

    #[test]
    fn rotation_roundtrip() {
        let table = RowRotation {
            cos_sin: vec![Some(vec![(0.6, 0.8), (1.0, 0.0)]), None],
        };
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let y = table.apply(&x, 4, false);
        assert_eq!(&y[4..], &x[4..]);
        let back = table.apply(&y, 4, true);
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
