//! Reverse-mode automatic differentiation over a recorded op tape.
//!
//! Values are computed eagerly as ops are recorded; `backward` replays the
//! tape in reverse, accumulating gradients into every node. Leaves carry the
//! model parameters; constants (masks, dropout patterns) are also leaves and
//! simply receive gradients nobody reads.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
pub const GELU_COEFF: f64 = 0.044715;
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    AddConst(NodeId),
    MulConst(NodeId, Tensor),
    Scale(NodeId, f64),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Transpose(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropySum {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    AddN(Vec<NodeId>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by `Graph::backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, zeros if the node is disconnected from the loss.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

pub fn softmax_rows_value(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - max).exp();
            out[i * n + j] = e;
            sum += e;
        }
        for j in 0..n {
            out[i * n + j] /= sum;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

fn layer_norm_value(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..n {
            out[i * n + j] = (row[j] - mean) * inv * gain.data()[j] + bias.data()[j];
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape("add: shapes differ".into()));
        }
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
        )?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Broadcast-add a bias row over every row of a matrix.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.value(x);
        let bs = self.value(bias);
        if xs.shape().len() != 2 || bs.numel() != xs.cols() {
            return Err(Error::Shape("add_row: bias length must equal columns".into()));
        }
        let (m, n) = (xs.rows(), xs.cols());
        let mut data = xs.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bs.data()[j];
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    /// Add a constant tensor (attention masks use this with -inf entries).
    pub fn add_const(&mut self, x: NodeId, c: &Tensor) -> Result<NodeId> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::Shape("add_const: shapes differ".into()));
        }
        let value = Tensor::new(
            c.shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(c.data())
                .map(|(a, b)| a + b)
                .collect(),
        )?;
        Ok(self.push(value, Op::AddConst(x)))
    }

    /// Elementwise multiply by a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: NodeId, c: Tensor) -> Result<NodeId> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::Shape("mul_const: shapes differ".into()));
        }
        let value = Tensor::new(
            c.shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(c.data())
                .map(|(a, b)| a * b)
                .collect(),
        )?;
        Ok(self.push(value, Op::MulConst(x, c)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|v| v * c).collect(),
        )
        .unwrap();
        self.push(value, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|v| gelu_scalar(*v)).collect(),
        )
        .unwrap();
        self.push(value, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let value = softmax_rows_value(self.value(x));
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = self.value(x).cols();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Shape("layer_norm: gain/bias length mismatch".into()));
        }
        let value = layer_norm_value(self.value(x), self.value(gain), self.value(bias));
        Ok(self.push(value, Op::LayerNorm { x, gain, bias }))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).transposed();
        self.push(value, Op::Transpose(x))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xs = self.value(x);
        let (m, n) = (xs.rows(), xs.cols());
        if start + len > n {
            return Err(Error::Shape("slice_cols out of range".into()));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xs.data()[i * n + start..i * n + start + len]);
        }
        let value = Tensor::new(vec![m, len], data)?;
        Ok(self.push(value, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let t = self.value(*p);
                if t.rows() != m {
                    return Err(Error::Shape("concat_cols: row counts differ".into()));
                }
                let n = t.cols();
                data.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let (v, h) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenId { id, size: v });
            }
            data.extend_from_slice(&t.data()[id * h..(id + 1) * h]);
        }
        let value = Tensor::new(vec![ids.len(), h], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Sum of negative log-likelihoods over unmasked rows of `logits`.
    /// Returns the scalar node; divide by the unmasked count outside.
    pub fn cross_entropy_sum(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let l = self.value(logits);
        let (m, v) = (l.rows(), l.cols());
        if targets.len() != m || mask.len() != m {
            return Err(Error::Shape("cross_entropy: target/mask length mismatch".into()));
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::DegenerateBatch("no unmasked positions".into()));
        }
        for (&t, &keep) in targets.iter().zip(mask) {
            if keep && t >= v {
                return Err(Error::TokenId { id: t, size: v });
            }
        }
        let probs = softmax_rows_value(l);
        let mut total = 0.0;
        for i in 0..m {
            if mask[i] {
                total -= probs.at2(i, targets[i]).max(1e-300).ln();
            }
        }
        let value = Tensor::scalar(total);
        Ok(self.push(
            value,
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let shape = self.value(parts[0]).shape().to_vec();
        let mut data = vec![0.0; self.value(parts[0]).numel()];
        for p in parts {
            if self.value(*p).shape() != shape.as_slice() {
                return Err(Error::Shape("add_n: shapes differ".into()));
            }
            for (d, v) in data.iter_mut().zip(self.value(*p).data()) {
                *d += v;
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::AddN(parts.to_vec())))
    }

    /// Reverse-mode sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape("backward: loss must be a scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]).unwrap());

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => grads[id.0] = Some(delta),
        }
    }

    fn accumulate_parents(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.value(*b).transposed()).unwrap();
                let db = self.value(*a).transposed().matmul(g).unwrap();
                Self::acc(grads, *a, da);
                Self::acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                Self::acc(grads, *a, g.clone());
                Self::acc(grads, *b, g.clone());
            }
            Op::AddRow(x, bias) => {
                Self::acc(grads, *x, g.clone());
                let (m, n) = (g.rows(), g.cols());
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g.at2(i, j);
                    }
                }
                let shape = self.value(*bias).shape().to_vec();
                Self::acc(grads, *bias, Tensor::new(shape, db).unwrap());
            }
            Op::AddConst(x) => Self::acc(grads, *x, g.clone()),
            Op::MulConst(x, c) => {
                let data = g.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
                Self::acc(grads, *x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Scale(x, c) => {
                let data = g.data().iter().map(|v| v * c).collect();
                Self::acc(grads, *x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Gelu(x) => {
                let xs = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xs.data())
                    .map(|(gy, xv)| gy * gelu_grad_scalar(*xv))
                    .collect();
                Self::acc(grads, *x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[idx].value;
                let (m, n) = (y.rows(), y.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g.at2(i, j) * y.at2(i, j);
                    }
                    for j in 0..n {
                        dx[i * n + j] = y.at2(i, j) * (g.at2(i, j) - dot);
                    }
                }
                Self::acc(grads, *x, Tensor::new(vec![m, n], dx).unwrap());
            }
            Op::LayerNorm { x, gain, bias } => {
                let xs = self.value(*x);
                let gn = self.value(*gain);
                let (m, n) = (xs.rows(), xs.cols());
                let mut dx = vec![0.0; m * n];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for i in 0..m {
                    let row = &xs.data()[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    let mut dxhat = vec![0.0; n];
                    for j in 0..n {
                        let gy = g.at2(i, j);
                        dg[j] += gy * xhat[j];
                        db[j] += gy;
                        dxhat[j] = gy * gn.data()[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat /= n as f64;
                    mean_dxhat_xhat /= n as f64;
                    for j in 0..n {
                        dx[i * n + j] =
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                Self::acc(grads, *x, Tensor::new(vec![m, n], dx).unwrap());
                let gshape = self.value(*gain).shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                Self::acc(grads, *gain, Tensor::new(gshape, dg).unwrap());
                Self::acc(grads, *bias, Tensor::new(bshape, db).unwrap());
            }
            Op::Transpose(x) => Self::acc(grads, *x, g.transposed()),
            Op::SliceCols { x, start, len } => {
                let xs = self.value(*x);
                let (m, n) = (xs.rows(), xs.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..*len {
                        dx[i * n + start + j] = g.at2(i, j);
                    }
                }
                Self::acc(grads, *x, Tensor::new(vec![m, n], dx).unwrap());
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).cols();
                    let mut dp = Vec::with_capacity(m * n);
                    for i in 0..m {
                        for j in 0..n {
                            dp.push(g.at2(i, offset + j));
                        }
                    }
                    Self::acc(grads, *p, Tensor::new(vec![m, n], dp).unwrap());
                    offset += n;
                }
            }
            Op::GatherRows { table, ids } => {
                let t = self.value(*table);
                let (v, h) = (t.rows(), t.cols());
                let mut dt = vec![0.0; v * h];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..h {
                        dt[id * h + j] += g.at2(i, j);
                    }
                }
                Self::acc(grads, *table, Tensor::new(vec![v, h], dt).unwrap());
            }
            Op::CrossEntropySum {
                logits,
                targets,
                mask,
            } => {
                let l = self.value(*logits);
                let (m, v) = (l.rows(), l.cols());
                let probs = softmax_rows_value(l);
                let scale = g.data()[0];
                let mut dl = vec![0.0; m * v];
                for i in 0..m {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..v {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        dl[i * v + j] = scale * (probs.at2(i, j) - onehot);
                    }
                }
                Self::acc(grads, *logits, Tensor::new(vec![m, v], dl).unwrap());
            }
            Op::AddN(parts) => {
                for p in parts {
                    Self::acc(grads, *p, g.clone());
                }
            }
        }
    }
}
