//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A `Tape` records every op of a forward pass as a node; `backward` walks
//! the nodes in reverse and accumulates gradients. Ops are an explicit enum
//! rather than closures so the backward pass is easy to audit against the
//! finite-difference suite.

use crate::tensor::{causal_softmax, layer_norm, MatMul, Tensor};

/// Which parameter store a leaf belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StoreKind {
    Model,
    Head,
}

/// Identity of a trainable parameter: (store, index within store).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: StoreKind,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf {
        key: Option<ParamKey>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        mode: MatMul,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddRow {
        x: NodeId,
        row: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        s: f64,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    Reshape {
        x: NodeId,
    },
    GatherRows {
        x: NodeId,
        ids: Vec<usize>,
    },
    CausalSoftmax {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        means: Vec<f64>,
        inv_stds: Vec<f64>,
    },
    NormalizeRows {
        x: NodeId,
    },
    LogSoftmaxRows {
        x: NodeId,
    },
    /// Scalar: Σ over masked positions of −log softmax(logits)[i, target_i].
    CrossEntropySum {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    /// Scalar: Σ weights ⊙ x.
    WeightedSum {
        x: NodeId,
        weights: Tensor,
    },
    /// Element-wise sum of same-shape nodes.
    AddN {
        parts: Vec<NodeId>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { key: None })
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, key: ParamKey, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { key: Some(key) })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, mode: MatMul) -> NodeId {
        let v = self.value(a).matmul(self.value(b), mode);
        self.push(v, Op::MatMul { a, b, mode })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add { a, b })
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let v = self.value(x).add_row(self.value(row));
        self.push(v, Op::AddRow { x, row })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).relu();
        self.push(v, Op::Relu { x })
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale { x, s })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(x).slice_cols(start, end);
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_cols(&tensors);
        self.push(v, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_rows(&tensors);
        self.push(v, Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(x).reshape(rows, cols);
        self.push(v, Op::Reshape { x })
    }

    pub fn gather_rows(&mut self, x: NodeId, ids: &[usize]) -> NodeId {
        let v = self.value(x).gather_rows(ids);
        self.push(
            v,
            Op::GatherRows {
                x,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn causal_softmax(&mut self, x: NodeId) -> NodeId {
        let v = causal_softmax(self.value(x), 0);
        self.push(v, Op::CausalSoftmax { x })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (v, means, inv_stds) = layer_norm(self.value(x), self.value(gain), self.value(bias), eps);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                inv_stds,
            },
        )
    }

    pub fn normalize_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).normalize_rows();
        self.push(v, Op::NormalizeRows { x })
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).log_softmax_rows();
        self.push(v, Op::LogSoftmaxRows { x })
    }

    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> NodeId {
        let lt = self.value(logits);
        assert_eq!(lt.rows(), targets.len());
        assert_eq!(lt.rows(), mask.len());
        let logp = lt.log_softmax_rows();
        let mut sum = 0.0;
        for i in 0..targets.len() {
            if mask[i] {
                sum -= logp.at(i, targets[i]);
            }
        }
        self.push(
            Tensor::scalar(sum),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        )
    }

    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.shape(), weights.shape());
        let sum: f64 = xv.data().iter().zip(weights.data()).map(|(a, w)| a * w).sum();
        self.push(Tensor::scalar(sum), Op::WeightedSum { x, weights })
    }

    pub fn add_n(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut v = self.value(parts[0]).clone();
        for p in &parts[1..] {
            v.add_assign(self.value(*p));
        }
        self.push(v, Op::AddN { parts: parts.to_vec() })
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let grad = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &grad, &mut grads);
            grads[i] = Some(grad);
        }
        Gradients { grads }
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, mode } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (da, db) = match mode {
                    MatMul::NN => (
                        grad.matmul(bv, MatMul::NT),
                        av.matmul(grad, MatMul::TN),
                    ),
                    MatMul::NT => (
                        grad.matmul(bv, MatMul::NN),
                        grad.matmul(av, MatMul::TN),
                    ),
                    MatMul::TN => (
                        bv.matmul(grad, MatMul::NT),
                        av.matmul(grad, MatMul::NN),
                    ),
                };
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, grad.clone());
                Self::accumulate(grads, *b, grad.clone());
            }
            Op::AddRow { x, row } => {
                Self::accumulate(grads, *x, grad.clone());
                let mut row_grad = Tensor::zeros(1, grad.cols());
                for r in 0..grad.rows() {
                    for c in 0..grad.cols() {
                        row_grad.data_mut()[c] += grad.at(r, c);
                    }
                }
                Self::accumulate(grads, *row, row_grad);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut dx = grad.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::Scale { x, s } => {
                Self::accumulate(grads, *x, grad.scale(*s));
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..grad.rows() {
                    for c in 0..grad.cols() {
                        dx.set(r, start + c, grad.at(r, c));
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::ConcatCols { parts } => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    Self::accumulate(grads, *p, grad.slice_cols(start, start + w));
                    start += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for p in parts {
                    let h = self.value(*p).rows();
                    let ids: Vec<usize> = (start..start + h).collect();
                    Self::accumulate(grads, *p, grad.gather_rows(&ids));
                    start += h;
                }
            }
            Op::Reshape { x } => {
                let xv = self.value(*x);
                Self::accumulate(grads, *x, grad.reshape(xv.rows(), xv.cols()));
            }
            Op::GatherRows { x, ids } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (out_r, &id) in ids.iter().enumerate() {
                    for c in 0..grad.cols() {
                        let cur = dx.at(id, c);
                        dx.set(id, c, cur + grad.at(out_r, c));
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::CausalSoftmax { x } => {
                // p saved as this node's value; masked entries are exactly 0
                // there so the dot below skips them naturally.
                let p = &self.nodes[i].value;
                let mut dx = Tensor::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let dot: f64 = (0..p.cols()).map(|c| grad.at(r, c) * p.at(r, c)).sum();
                    for c in 0..p.cols() {
                        let pv = p.at(r, c);
                        if pv != 0.0 {
                            dx.set(r, c, pv * (grad.at(r, c) - dot));
                        }
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                inv_stds,
            } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), d);
                let mut dgain = Tensor::zeros(1, d);
                let mut dbias = Tensor::zeros(1, d);
                for r in 0..xv.rows() {
                    let mean = means[r];
                    let inv_std = inv_stds[r];
                    // x_hat and gy for this row
                    let mut sum_gy = 0.0;
                    let mut sum_gy_xhat = 0.0;
                    let mut xhat = vec![0.0; d];
                    let mut gy = vec![0.0; d];
                    for c in 0..d {
                        xhat[c] = (xv.at(r, c) - mean) * inv_std;
                        gy[c] = grad.at(r, c) * gv.data()[c];
                        sum_gy += gy[c];
                        sum_gy_xhat += gy[c] * xhat[c];
                        dgain.data_mut()[c] += grad.at(r, c) * xhat[c];
                        dbias.data_mut()[c] += grad.at(r, c);
                    }
                    let inv_d = 1.0 / d as f64;
                    for c in 0..d {
                        dx.set(
                            r,
                            c,
                            inv_std * (gy[c] - sum_gy * inv_d - xhat[c] * sum_gy_xhat * inv_d),
                        );
                    }
                }
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *gain, dgain);
                Self::accumulate(grads, *bias, dbias);
            }
            Op::NormalizeRows { x } => {
                let xv = self.value(*x);
                let y = &self.nodes[i].value;
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let norm: f64 = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let dot: f64 = (0..xv.cols()).map(|c| grad.at(r, c) * y.at(r, c)).sum();
                    for c in 0..xv.cols() {
                        dx.set(r, c, (grad.at(r, c) - y.at(r, c) * dot) / norm);
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::LogSoftmaxRows { x } => {
                let y = &self.nodes[i].value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let sum_dy: f64 = (0..y.cols()).map(|c| grad.at(r, c)).sum();
                    for c in 0..y.cols() {
                        dx.set(r, c, grad.at(r, c) - y.at(r, c).exp() * sum_dy);
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::CrossEntropySum {
                logits,
                targets,
                mask,
            } => {
                let lv = self.value(*logits);
                let g = grad.item();
                let logp = lv.log_softmax_rows();
                let mut dx = Tensor::zeros(lv.rows(), lv.cols());
                for r in 0..lv.rows() {
                    if !mask[r] {
                        continue;
                    }
                    for c in 0..lv.cols() {
                        let p = logp.at(r, c).exp();
                        let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                        dx.set(r, c, g * (p - onehot));
                    }
                }
                Self::accumulate(grads, *logits, dx);
            }
            Op::WeightedSum { x, weights } => {
                Self::accumulate(grads, *x, weights.scale(grad.item()));
            }
            Op::AddN { parts } => {
                for p in parts {
                    Self::accumulate(grads, *p, grad.clone());
                }
            }
        }
    }

    /// Gradients for every parameter leaf, keyed by `ParamKey`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamKey, Tensor)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { key: Some(key) } = &node.op {
                if let Some(g) = &grads.grads[i] {
                    out.push((*key, g.clone()));
                }
            }
        }
        out
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}
