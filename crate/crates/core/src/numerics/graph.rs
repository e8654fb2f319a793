//! Tensor-level reverse-mode tape used by the generator.
//!
//! All tensors on the graph are 2-D. Leaves are either trainable
//! parameters or constants; only nodes downstream of a parameter take part
//! in the backward pass.

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    SoftmaxRows(NodeId),
    NormalizeRows(NodeId, Vec<f64>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    StackRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    MeanRows(NodeId),
    RowSum(NodeId),
    RepeatRows(NodeId),
    PairwiseSqDist(NodeId),
    SumAll(NodeId),
    Mse(NodeId, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every graph node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// a · bᵀ
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds a 1×n row to every row of an m×n tensor.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = broadcast_rows(self.value(a), self.value(row), |x, y| x + y);
        let ng = self.ng(&[a, row]);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = broadcast_rows(self.value(a), self.value(row), |x, y| x * y);
        let ng = self.ng(&[a, row]);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(&[a]);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            out.extend(softmax_slice(x.row(r)));
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::matrix(m, n, out), Op::SoftmaxRows(a), ng)
    }

    /// Zero-mean, unit-variance rows (layer normalisation without affine).
    pub fn normalize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = Vec::with_capacity(m * n);
        let mut sigmas = Vec::with_capacity(m);
        for r in 0..m {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let sigma = (var + eps).sqrt();
            out.extend(row.iter().map(|v| (v - mean) / sigma));
            sigmas.push(sigma);
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::matrix(m, n, out), Op::NormalizeRows(a, sigmas), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows(), m, "concat_cols row mismatch");
                out.extend_from_slice(t.row(r));
            }
        }
        let ng = self.ng(parts);
        self.push(Tensor::matrix(m, total, out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let x = self.value(a);
        let m = x.rows();
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&x.row(r)[start..end]);
        }
        let ng = self.ng(&[a]);
        self.push(
            Tensor::matrix(m, end - start, out),
            Op::SliceCols(a, start, end),
            ng,
        )
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let n = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), n, "stack_rows col mismatch");
            out.extend_from_slice(t.data());
            m += t.rows();
        }
        let ng = self.ng(parts);
        self.push(Tensor::matrix(m, n, out), Op::StackRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let x = self.value(a);
        let n = x.cols();
        let out = x.data()[start * n..end * n].to_vec();
        let ng = self.ng(&[a]);
        self.push(
            Tensor::matrix(end - start, n, out),
            Op::SliceRows(a, start, end),
            ng,
        )
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::row_vector(out), Op::MeanRows(a), ng)
    }

    /// m×n → m×1 row sums.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let out = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        let ng = self.ng(&[a]);
        self.push(Tensor::matrix(x.rows(), 1, out), Op::RowSum(a), ng)
    }

    /// Repeats a 1×n row `m` times.
    pub fn repeat_rows(&mut self, a: NodeId, m: usize) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.rows(), 1, "repeat_rows expects a single row");
        let n = x.cols();
        let out = x.data().repeat(m);
        let ng = self.ng(&[a]);
        self.push(Tensor::matrix(m, n, out), Op::RepeatRows(a), ng)
    }

    /// N×d → N×N matrix of squared Euclidean distances between rows.
    pub fn pairwise_sq_dist(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let n = x.rows();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = x
                    .row(i)
                    .iter()
                    .zip(x.row(j))
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
            }
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::matrix(n, n, out), Op::PairwiseSqDist(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::matrix(1, 1, vec![s]), Op::SumAll(a), ng)
    }

    /// Mean squared error against a constant target, as a 1×1 tensor.
    pub fn mse(&mut self, a: NodeId, target: Tensor) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.shape(), target.shape(), "mse shape mismatch");
        let n = x.len() as f64;
        let s = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            / n;
        let ng = self.ng(&[a]);
        self.push(Tensor::matrix(1, 1, vec![s]), Op::Mse(a, target), ng)
    }

    /// Back-propagates from a 1×1 output.
    pub fn backward(&self, out: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        let seed = Tensor::full(self.value(out).shape(), 1.0);
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, t: Tensor| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(val(*b)));
                acc(*b, val(*a).t_matmul(g));
            }
            Op::MatMulT(a, b) => {
                acc(*a, g.matmul(val(*b)));
                acc(*b, g.t_matmul(val(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, col_sums(g));
            }
            Op::MulRow(a, row) => {
                acc(*a, broadcast_rows(g, val(*row), |x, y| x * y));
                acc(*row, col_sums(&g.zip_map(val(*a), |x, y| x * y)));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, s| x * s * (1.0 - s))),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut out = Vec::with_capacity(m * n);
                for r in 0..m {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    out.extend(yr.iter().zip(gr).map(|(p, q)| p * (q - dot)));
                }
                acc(*a, Tensor::matrix(m, n, out));
            }
            Op::NormalizeRows(a, sigmas) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let nf = n as f64;
                let mut out = Vec::with_capacity(m * n);
                for r in 0..m {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mg = gr.iter().sum::<f64>() / nf;
                    let mgy = yr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>() / nf;
                    let s = sigmas[r];
                    out.extend(yr.iter().zip(gr).map(|(p, q)| (q - mg - p * mgy) / s));
                }
                acc(*a, Tensor::matrix(m, n, out));
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut offset = 0;
                for p in parts {
                    let c = val(*p).cols();
                    let mut out = Vec::with_capacity(m * c);
                    for r in 0..m {
                        out.extend_from_slice(&g.row(r)[offset..offset + c]);
                    }
                    acc(*p, Tensor::matrix(m, c, out));
                    offset += c;
                }
            }
            Op::SliceCols(a, start, end) => {
                let x = val(*a);
                let (m, n) = (x.rows(), x.cols());
                let mut out = vec![0.0; m * n];
                for r in 0..m {
                    out[r * n + start..r * n + end].copy_from_slice(g.row(r));
                }
                acc(*a, Tensor::matrix(m, n, out));
            }
            Op::StackRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = val(*p).rows();
                    let out = g.data()[offset * n..(offset + rows) * n].to_vec();
                    acc(*p, Tensor::matrix(rows, n, out));
                    offset += rows;
                }
            }
            Op::SliceRows(a, start, end) => {
                let x = val(*a);
                let n = x.cols();
                let mut out = vec![0.0; x.len()];
                out[start * n..end * n].copy_from_slice(g.data());
                acc(*a, Tensor::matrix(x.rows(), n, out));
            }
            Op::MeanRows(a) => {
                let m = val(*a).rows();
                acc(*a, Tensor::matrix(m, g.cols(), g.scale(1.0 / m as f64).data().repeat(m)));
            }
            Op::RowSum(a) => {
                let x = val(*a);
                let n = x.cols();
                let out = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                acc(*a, Tensor::matrix(x.rows(), n, out));
            }
            Op::RepeatRows(a) => acc(*a, col_sums(g)),
            Op::PairwiseSqDist(a) => {
                let x = val(*a);
                let (n, d) = (x.rows(), x.cols());
                let mut out = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..n {
                        let w = 2.0 * (g.at(i, j) + g.at(j, i));
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            out[i * d + k] += w * (x.at(i, k) - x.at(j, k));
                        }
                    }
                }
                acc(*a, Tensor::matrix(n, d, out));
            }
            Op::SumAll(a) => {
                let x = val(*a);
                acc(*a, Tensor::full(x.shape(), g.data()[0]));
            }
            Op::Mse(a, target) => {
                let x = val(*a);
                let k = 2.0 * g.data()[0] / x.len() as f64;
                acc(*a, x.zip_map(target, |p, q| k * (p - q)));
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn broadcast_rows(a: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    assert_eq!(row.len(), n, "row broadcast width mismatch");
    let r = row.data();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        out.extend(a.row(i).iter().zip(r).map(|(&x, &y)| f(x, y)));
    }
    Tensor::matrix(m, n, out)
}

fn col_sums(g: &Tensor) -> Tensor {
    let n = g.cols();
    let mut out = vec![0.0; n];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::row_vector(out)
}
