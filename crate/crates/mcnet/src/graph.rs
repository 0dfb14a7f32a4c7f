//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records every primitive applied during a forward pass as a
//! node holding its value and the operation that produced it. Calling
//! [`Graph::backward`] on a scalar node replays the tape in reverse and
//! accumulates adjoints additively, so a value used in several places
//! receives the sum of its downstream contributions.
//!
//! Leaves come in three kinds: constants (no gradient), inputs (gradient
//! retained on the node, used for feature attribution), and parameter leaves
//! bound to a [`crate::params::ParameterStore`] entry. Parameter leaves can
//! be frozen, which turns them into constants for the current pass; this is
//! how the alternating adversarial update isolates the discriminator from
//! the generator.

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::{sigmoid, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    /// Constant or frozen leaf; backward never visits it.
    Const,
    /// Tracked leaf. `param` is set when bound to a store entry.
    Leaf { param: Option<ParamId> },
    /// out = x * w^T + b, applied per row of x. w is (out_dim x in_dim), b is (1 x out_dim).
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Matmul { a: NodeId, b: NodeId },
    /// out = a * b^T
    MatmulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// Broadcast multiply by a 1x1 node.
    MulScalar { s: NodeId, a: NodeId },
    Scale { a: NodeId, c: f64 },
    AddConst { a: NodeId, c: f64 },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    SoftmaxRows { a: NodeId },
    ConcatCols { xs: Vec<NodeId> },
    ConcatRows { xs: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    Reshape { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    Abs { a: NodeId },
    Log { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    Powi { a: NodeId, n: i32 },
    /// Sum of scalar nodes.
    SumNodes { xs: Vec<NodeId> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: Vec<(ParamId, NodeId)>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. an arbitrary node (input leaves included).
    /// `None` when the node did not influence the loss.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradient contributions from this tape, in binding order.
    /// A parameter bound more than once appears once per binding; callers
    /// accumulate.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor)> {
        let mut out = Vec::with_capacity(self.params.len());
        for (pid, nid) in std::mem::take(&mut self.params) {
            if let Some(g) = self.by_node[nid].take() {
                out.push((pid, g));
            }
        }
        out
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Const)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Tracked leaf whose gradient stays readable on the node after backward.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf { param: None })
    }

    /// Leaf bound to a parameter store entry. When `trainable` is false the
    /// value participates in the forward pass but receives no gradient.
    pub fn param_leaf(&mut self, pid: ParamId, value: Tensor, trainable: bool) -> NodeId {
        if trainable {
            let id = self.push(value, Op::Leaf { param: Some(pid) });
            self.param_leaves.push((pid, id));
            id
        } else {
            self.push(value, Op::Const)
        }
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xr, xc) = self.nodes[x].value.shape();
        let (wo, wi) = self.nodes[w].value.shape();
        let (br, bc) = self.nodes[b].value.shape();
        assert_eq!(xc, wi, "affine: input dim mismatch");
        assert_eq!((br, bc), (1, wo), "affine: bias shape mismatch");
        let mut out = self.nodes[x].value.matmul_nt(&self.nodes[w].value);
        for i in 0..xr {
            for j in 0..wo {
                let v = out.at(i, j) + self.nodes[b].value.at(0, j);
                out.set(i, j, v);
            }
        }
        self.push(out, Op::Affine { x, w, b })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.nodes[a].value.matmul(&self.nodes[b].value);
        self.push(out, Op::Matmul { a, b })
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.nodes[a].value.matmul_nt(&self.nodes[b].value);
        self.push(out, Op::MatmulNt { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(t, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(t, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(t, Op::Mul { a, b })
    }

    /// Broadcast product of a 1x1 node with an arbitrary node.
    pub fn mul_scalar(&mut self, s: NodeId, a: NodeId) -> NodeId {
        assert!(self.nodes[s].value.is_scalar(), "mul_scalar: s must be 1x1");
        let sv = self.nodes[s].value.scalar_value();
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|x| sv * x).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(t, Op::MulScalar { s, a })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|x| c * x).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(t, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|x| c + x).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(t, Op::AddConst { a, c })
    }

    /// 1 - a, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let s = self.scale(a, -1.0);
        self.add_const(s, 1.0)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(t, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|x| sigmoid(*x)).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(t, Op::Sigmoid { a })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let (r, c) = va.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = va.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out.set(i, j, e);
                denom += e;
            }
            for j in 0..c {
                out.set(i, j, out.at(i, j) / denom);
            }
        }
        self.push(out, Op::SoftmaxRows { a })
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let rows = self.nodes[xs[0]].value.rows();
        let total: usize = xs.iter().map(|&x| self.nodes[x].value.cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        for i in 0..rows {
            let mut off = 0;
            for &x in xs {
                let v = &self.nodes[x].value;
                assert_eq!(v.rows(), rows, "concat_cols: row mismatch");
                for j in 0..v.cols() {
                    out.set(i, off + j, v.at(i, j));
                }
                off += v.cols();
            }
        }
        self.push(out, Op::ConcatCols { xs: xs.to_vec() })
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let cols = self.nodes[xs[0]].value.cols();
        let total: usize = xs.iter().map(|&x| self.nodes[x].value.rows()).sum();
        let mut data = Vec::with_capacity(total * cols);
        for &x in xs {
            let v = &self.nodes[x].value;
            assert_eq!(v.cols(), cols, "concat_rows: col mismatch");
            data.extend_from_slice(v.data());
        }
        let t = Tensor::from_vec(total, cols, data).unwrap();
        self.push(t, Op::ConcatRows { xs: xs.to_vec() })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = &self.nodes[a].value;
        let (r, c) = va.shape();
        assert!(start + len <= c, "slice_cols out of range");
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            for j in 0..len {
                out.set(i, j, va.at(i, start + j));
            }
        }
        self.push(out, Op::SliceCols { a, start, len })
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let va = &self.nodes[a].value;
        assert_eq!(va.len(), rows * cols, "reshape: element count mismatch");
        let t = Tensor::from_vec(rows, cols, va.data().to_vec()).unwrap();
        self.push(t, Op::Reshape { a })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let s: f64 = v.data().iter().sum();
        let n = v.len() as f64;
        self.push(Tensor::scalar(s / n), Op::MeanAll { a })
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|x| x.abs()).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(t, Op::Abs { a })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|x| x.ln()).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(t, Op::Log { a })
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|x| x.clamp(lo, hi)).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(t, Op::Clamp { a, lo, hi })
    }

    pub fn powi(&mut self, a: NodeId, n: i32) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|x| x.powi(n)).collect();
        let t = Tensor::from_vec(va.rows(), va.cols(), data).unwrap();
        self.push(t, Op::Powi { a, n })
    }

    /// Sum of 1x1 nodes; the natural accumulator for loss terms.
    pub fn sum_nodes(&mut self, xs: &[NodeId]) -> NodeId {
        let mut s = 0.0;
        for &x in xs {
            assert!(self.nodes[x].value.is_scalar(), "sum_nodes: non-scalar term");
            s += self.nodes[x].value.scalar_value();
        }
        self.push(Tensor::scalar(s), Op::SumNodes { xs: xs.to_vec() })
    }

    /// Reverse pass from a scalar loss node. Returns the adjoints of every
    /// node that influenced the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients { by_node: grads, params: self.param_leaves.clone() })
    }

    fn add_grad(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate(&self, id: NodeId, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        match &self.nodes[id].op {
            Op::Const | Op::Leaf { .. } => {}
            Op::Affine { x, w, b } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                // dX = g * W ; dW = g^T * X ; dB = column sums of g
                Self::add_grad(grads, *x, g.matmul(wv));
                Self::add_grad(grads, *w, g.matmul_tn(xv));
                let mut db = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        db.set(0, j, db.at(0, j) + g.at(i, j));
                    }
                }
                Self::add_grad(grads, *b, db);
            }
            Op::Matmul { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                Self::add_grad(grads, *a, g.matmul_nt(bv));
                Self::add_grad(grads, *b, av.matmul_tn(g));
            }
            Op::MatmulNt { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                Self::add_grad(grads, *a, g.matmul(bv));
                Self::add_grad(grads, *b, g.matmul_tn(av));
            }
            Op::Add { a, b } => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                Self::add_grad(grads, *a, g.clone());
                let mut neg = g.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                Self::add_grad(grads, *b, neg);
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                )
                .unwrap();
                let db = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                )
                .unwrap();
                Self::add_grad(grads, *a, da);
                Self::add_grad(grads, *b, db);
            }
            Op::MulScalar { s, a } => {
                let sv = self.nodes[*s].value.scalar_value();
                let av = &self.nodes[*a].value;
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().map(|x| sv * x).collect(),
                )
                .unwrap();
                let ds: f64 = g.data().iter().zip(av.data()).map(|(x, y)| x * y).sum();
                Self::add_grad(grads, *a, da);
                Self::add_grad(grads, *s, Tensor::scalar(ds));
            }
            Op::Scale { a, c } => {
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().map(|x| c * x).collect(),
                )
                .unwrap();
                Self::add_grad(grads, *a, da);
            }
            Op::AddConst { a, .. } => {
                Self::add_grad(grads, *a, g.clone());
            }
            Op::Tanh { a } => {
                let yv = &self.nodes[id].value;
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(yv.data())
                        .map(|(gg, y)| gg * (1.0 - y * y))
                        .collect(),
                )
                .unwrap();
                Self::add_grad(grads, *a, da);
            }
            Op::Sigmoid { a } => {
                let yv = &self.nodes[id].value;
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(yv.data())
                        .map(|(gg, y)| gg * y * (1.0 - y))
                        .collect(),
                )
                .unwrap();
                Self::add_grad(grads, *a, da);
            }
            Op::SoftmaxRows { a } => {
                let yv = &self.nodes[id].value;
                let (r, c) = yv.shape();
                let mut da = Tensor::zeros(r, c);
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g.at(i, j) * yv.at(i, j);
                    }
                    for j in 0..c {
                        da.set(i, j, yv.at(i, j) * (g.at(i, j) - dot));
                    }
                }
                Self::add_grad(grads, *a, da);
            }
            Op::ConcatCols { xs } => {
                let mut off = 0;
                for &x in xs {
                    let v = &self.nodes[x].value;
                    let (r, c) = v.shape();
                    let mut dx = Tensor::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            dx.set(i, j, g.at(i, off + j));
                        }
                    }
                    Self::add_grad(grads, x, dx);
                    off += c;
                }
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for &x in xs {
                    let v = &self.nodes[x].value;
                    let (r, c) = v.shape();
                    let mut dx = Tensor::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            dx.set(i, j, g.at(off + i, j));
                        }
                    }
                    Self::add_grad(grads, x, dx);
                    off += r;
                }
            }
            Op::SliceCols { a, start, len } => {
                let va = &self.nodes[*a].value;
                let (r, c) = va.shape();
                let mut da = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..*len {
                        da.set(i, start + j, g.at(i, j));
                    }
                }
                Self::add_grad(grads, *a, da);
            }
            Op::Reshape { a } => {
                let va = &self.nodes[*a].value;
                let da = Tensor::from_vec(va.rows(), va.cols(), g.data().to_vec()).unwrap();
                Self::add_grad(grads, *a, da);
            }
            Op::SumAll { a } => {
                let va = &self.nodes[*a].value;
                let da = Tensor::filled(va.rows(), va.cols(), g.scalar_value());
                Self::add_grad(grads, *a, da);
            }
            Op::MeanAll { a } => {
                let va = &self.nodes[*a].value;
                let da = Tensor::filled(va.rows(), va.cols(), g.scalar_value() / va.len() as f64);
                Self::add_grad(grads, *a, da);
            }
            Op::Abs { a } => {
                let va = &self.nodes[*a].value;
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(gg, x)| {
                            if *x > 0.0 {
                                *gg
                            } else if *x < 0.0 {
                                -*gg
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )
                .unwrap();
                Self::add_grad(grads, *a, da);
            }
            Op::Log { a } => {
                let va = &self.nodes[*a].value;
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().zip(va.data()).map(|(gg, x)| gg / x).collect(),
                )
                .unwrap();
                Self::add_grad(grads, *a, da);
            }
            Op::Clamp { a, lo, hi } => {
                let va = &self.nodes[*a].value;
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(gg, x)| if *x >= *lo && *x <= *hi { *gg } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                Self::add_grad(grads, *a, da);
            }
            Op::Powi { a, n } => {
                let va = &self.nodes[*a].value;
                let nf = *n as f64;
                let da = Tensor::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(gg, x)| gg * nf * x.powi(n - 1))
                        .collect(),
                )
                .unwrap();
                Self::add_grad(grads, *a, da);
            }
            Op::SumNodes { xs } => {
                let gv = g.scalar_value();
                for &x in xs {
                    Self::add_grad(grads, x, Tensor::scalar(gv));
                }
            }
        }
    }
}
