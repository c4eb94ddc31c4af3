//! Reverse-mode automatic differentiation on dense float64 tensors.
//!
//! A [`Graph`] is an append-only tape: every operation records its inputs
//! (parent node ids) and whatever forward context its gradient rule needs
//! (max-pool argmax indices, batch-norm statistics, ...). Node ids are
//! indices into the tape, so the graph is acyclic by construction and a
//! single reverse sweep visits each node once.
//!
//! Gradients accumulate additively across fan-out, every reduction runs in a
//! fixed order, and [`Graph::backward`] is a pure function of the recorded
//! tape: calling it twice without re-running the forward pass returns
//! bit-identical results.
//!
//! Broadcasting is deliberately limited to the two cases the models and
//! losses need: a scalar right operand, or a right operand whose shape is a
//! trailing suffix of the left shape (bias rows).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Trailing,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Bcast),
    Sub(Bcast),
    Mul,
    Neg,
    Scale(f64),
    Relu,
    Exp,
    /// Elementwise sqrt(x + shift); the caller guarantees x + shift >= 0.
    SqrtShift,
    Matmul,
    Transpose,
    SumAll,
    /// Sum in value-sorted order: invariant under any permutation of the
    /// input elements, which makes symmetric reductions bit-symmetric.
    SumAllSorted,
    LogSoftmax,
    /// Negative mean of the per-row entries selected by `labels`.
    NllPick { labels: Vec<usize> },
    Conv2d { stride: usize, pad: usize },
    MaxPool2d { argmax: Vec<usize> },
    ChannelBias,
    BatchNormTrain { eps: f64, mean: Vec<f64>, var: Vec<f64> },
    BatchNormEval { eps: f64, mean: Vec<f64>, var: Vec<f64> },
    /// All pairwise squared Euclidean distances between two row sets.
    Pdist2,
    /// Row selection by index list (duplicates allowed); backward
    /// scatter-adds into the source rows.
    GatherRows { indices: Vec<usize> },
    Reshape,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    op: Op,
    requires: bool,
}

/// Per-channel statistics of one train-mode batch-norm forward, exposed so
/// the owner of the running statistics can decide whether to fold them in.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradient map produced by [`Graph::backward`]: one optional tensor per
/// node, `None` for nodes the loss does not depend on (or that track no
/// gradient).
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, parents: Vec<NodeId>, op: Op) -> NodeId {
        let requires = match op {
            Op::Leaf => false, // overridden by param()
            _ => parents.iter().any(|p| self.nodes[p.0].requires),
        };
        self.nodes.push(Node {
            value,
            parents,
            op,
            requires,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, vec![], Op::Leaf);
        self.nodes[id.0].requires = true;
        id
    }

    /// Leaf treated as a constant: no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, vec![], Op::Leaf)
    }

    // ── elementwise / broadcast ─────────────────────────────────────────

    fn bcast_kind(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Bcast> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(Bcast::Same)
        } else if self.value(b).len() == 1 {
            Ok(Bcast::Scalar)
        } else if sa.len() > sb.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(Bcast::Trailing)
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Bcast) -> Op,
    ) -> Result<NodeId> {
        let kind = self.bcast_kind(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let bl = tb.len();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[i % bl]))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, vec![a, b], make(kind)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, |_| Op::Mul)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let t = self.value(a);
        let data: Vec<f64> = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, vec![a], op)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| c * x, Op::Scale(c))
    }

    /// Rectified linear unit; the derivative at exactly 0 is defined as 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp)
    }

    /// Elementwise sqrt(x + shift). Caller must keep x + shift >= 0.
    pub fn sqrt_shift(&mut self, a: NodeId, shift: f64) -> NodeId {
        self.unary(a, |x| (x + shift).sqrt(), Op::SqrtShift)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_2d() || !tb.is_2d() || ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_nn(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, vec![a, b], Op::Matmul))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if !t.is_2d() {
            return Err(Error::contract(
                "transpose",
                format!("expected a 2-D tensor, got shape {:?}", t.shape()),
            ));
        }
        let (m, n) = (t.rows(), t.cols());
        let value = Tensor::new(vec![n, m], transpose_data(t.data(), m, n))?;
        Ok(self.push(value, vec![a], Op::Transpose))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(value, vec![a], Op::Reshape))
    }

    /// Selects rows of a 2-D tensor by index (duplicates allowed).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(a);
        if !t.is_2d() {
            return Err(Error::contract(
                "gather_rows",
                format!("expected 2-D input, got shape {:?}", t.shape()),
            ));
        }
        if indices.is_empty() {
            return Err(Error::contract("gather_rows", "empty row selection"));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= t.rows() {
                return Err(Error::contract(
                    "gather_rows",
                    format!("row {i} out of range for {} rows", t.rows()),
                ));
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![indices.len(), cols], data)?;
        Ok(self.push(
            value,
            vec![a],
            Op::GatherRows {
                indices: indices.to_vec(),
            },
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), vec![a], Op::SumAll)
    }

    /// Sum of all elements, accumulated in value-sorted order. The result is
    /// invariant under permutations of the elements, which is what makes
    /// symmetric set-level quantities bit-exactly symmetric.
    pub fn sum_all_sym(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).data().to_vec();
        v.sort_unstable_by(f64::total_cmp);
        let s: f64 = v.iter().sum();
        self.push(Tensor::scalar(s), vec![a], Op::SumAllSorted)
    }

    // ── classification heads ────────────────────────────────────────────

    /// Row-wise log-softmax of a [m, K] logit matrix, stabilized by
    /// max-subtraction.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if !t.is_2d() || t.cols() == 0 {
            return Err(Error::contract(
                "log_softmax",
                format!("expected a non-empty 2-D tensor, got shape {:?}", t.shape()),
            ));
        }
        let (m, k) = (t.rows(), t.cols());
        let mut data = vec![0.0; m * k];
        for i in 0..m {
            let row = t.row(i);
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            for j in 0..k {
                data[i * k + j] = row[j] - lse;
            }
        }
        let value = Tensor::new(vec![m, k], data)?;
        Ok(self.push(value, vec![a], Op::LogSoftmax))
    }

    /// Scalar -mean_i(lp[i, labels[i]]) over a [m, K] log-probability matrix.
    pub fn nll_pick(&mut self, lp: NodeId, labels: &[usize]) -> Result<NodeId> {
        let t = self.value(lp);
        if !t.is_2d() || t.rows() != labels.len() {
            return Err(Error::contract(
                "nll_pick",
                format!(
                    "log-prob shape {:?} incompatible with {} labels",
                    t.shape(),
                    labels.len()
                ),
            ));
        }
        let k = t.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(
                "nll_pick",
                format!("label {} out of range for {} classes", bad, k),
            ));
        }
        let m = labels.len();
        let s: f64 = labels.iter().enumerate().map(|(i, &y)| t.row(i)[y]).sum();
        let value = Tensor::scalar(-s / m as f64);
        Ok(self.push(
            value,
            vec![lp],
            Op::NllPick {
                labels: labels.to_vec(),
            },
        ))
    }

    // ── convolution stack ───────────────────────────────────────────────

    /// 2-D convolution: x [N,C,H,W] * w [F,C,k,k], square kernel, zero
    /// padding `pad` on every border, no dilation.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        let ok = sx.len() == 4
            && sw.len() == 4
            && sw[2] == sw[3]
            && sx[1] == sw[1]
            && stride >= 1
            && sx[2] + 2 * pad >= sw[2]
            && sx[3] + 2 * pad >= sw[2];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, k) = (sw[0], sw[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let (ckk, ohow) = (c * k * k, oh * ow);
        let mut out = vec![0.0; n * f * ohow];
        let mut col = vec![0.0; ckk * ohow];
        for s in 0..n {
            im2col(
                &tx.data()[s * c * h * wd..(s + 1) * c * h * wd],
                c,
                h,
                wd,
                k,
                stride,
                pad,
                oh,
                ow,
                &mut col,
            );
            let o = matmul_nn(tw.data(), &col, f, ckk, ohow);
            out[s * f * ohow..(s + 1) * f * ohow].copy_from_slice(&o);
        }
        let value = Tensor::new(vec![n, f, oh, ow], out)?;
        Ok(self.push(value, vec![x, w], Op::Conv2d { stride, pad }))
    }

    /// Max pooling with square window `k` and the given stride, no padding.
    /// Ties resolve to the first element in row-major window order.
    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 || s[2] < k || s[3] < k || stride < 1 || k < 1 {
            return Err(Error::contract(
                "maxpool2d",
                format!("window {}x{} stride {} on shape {:?}", k, k, stride, s),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        let x_data = t.data();
        for (plane, base) in (0..n * c).map(|p| (p, p * h * w)) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..k {
                        let iy = oy * stride + ky;
                        for kx in 0..k {
                            let idx = base + iy * w + ox * stride + kx;
                            if x_data[idx] > best {
                                best = x_data[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, vec![x], Op::MaxPool2d { argmax }))
    }

    /// Adds a per-channel bias b [C] to x [N,C,H,W].
    pub fn channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.shape().len() != 4 || tb.shape().len() != 1 || tb.len() != tx.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "channel_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let plane = tx.shape()[2] * tx.shape()[3];
        let mut data = tx.data().to_vec();
        for s in 0..n {
            for ch in 0..c {
                let bias = tb.data()[ch];
                for v in &mut data[(s * c + ch) * plane..(s * c + ch + 1) * plane] {
                    *v += bias;
                }
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, vec![x, b], Op::ChannelBias))
    }

    // ── batch normalization ─────────────────────────────────────────────

    /// Train-mode batch norm over dim 1 (channels of a 4-D tensor, features
    /// of a 2-D tensor), normalizing with the biased batch statistics. The
    /// returned [`BnBatchStats`] lets the caller update running statistics;
    /// this op itself never touches them.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BnBatchStats)> {
        let (c, _count) = self.bn_layout(x, gamma, beta)?;
        let t = self.value(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        bn_channel_stats(t.data(), t.shape(), &mut mean, &mut var);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let data = bn_normalize(t.data(), t.shape(), &mean, &var, &g, &b, eps);
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let stats = BnBatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let id = self.push(
            value,
            vec![x, gamma, beta],
            Op::BatchNormTrain { eps, mean, var },
        );
        Ok((id, stats))
    }

    /// Eval-mode batch norm: normalizes with the provided running statistics
    /// (treated as constants).
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let (c, _) = self.bn_layout(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::contract(
                "batch_norm_eval",
                format!(
                    "running stats have {}/{} channels, tensor has {}",
                    running_mean.len(),
                    running_var.len(),
                    c
                ),
            ));
        }
        let t = self.value(x);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let data = bn_normalize(t.data(), t.shape(), running_mean, running_var, &g, &b, eps);
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            vec![x, gamma, beta],
            Op::BatchNormEval {
                eps,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
            },
        ))
    }

    fn bn_layout(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<(usize, usize)> {
        let s = self.value(x).shape().to_vec();
        let c = match s.len() {
            2 => s[1],
            4 => s[1],
            _ => {
                return Err(Error::contract(
                    "batch_norm",
                    format!("expected a 2-D or 4-D tensor, got shape {:?}", s),
                ))
            }
        };
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).len() != c {
                return Err(Error::contract(
                    "batch_norm",
                    format!("{} has {} entries, need {}", name, self.value(p).len(), c),
                ));
            }
        }
        let count: usize = self.value(x).len() / c;
        if count < 1 {
            return Err(Error::degenerate("batch_norm", "empty batch".to_string()));
        }
        Ok((c, count))
    }

    // ── set distances ───────────────────────────────────────────────────

    /// D[i,j] = ||x_i - y_j||^2 for row sets x [n,d], y [m,d]. Computed by
    /// direct differencing, so entries are non-negative by construction and
    /// bit-symmetric under argument swap.
    pub fn pdist2(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let (tx, ty) = (self.value(x), self.value(y));
        if !tx.is_2d() || !ty.is_2d() || tx.cols() != ty.cols() {
            return Err(Error::ShapeMismatch {
                op: "pdist2",
                left: tx.shape().to_vec(),
                right: ty.shape().to_vec(),
            });
        }
        if tx.rows() == 0 || ty.rows() == 0 {
            return Err(Error::degenerate("pdist2", "empty row set".to_string()));
        }
        let (n, m) = (tx.rows(), ty.rows());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let xi = tx.row(i);
            for j in 0..m {
                data[i * m + j] = sq_dist(xi, ty.row(j));
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.push(value, vec![x, y], Op::Pdist2))
    }

    // ── reverse sweep ───────────────────────────────────────────────────

    /// Propagates d(root)/d(node) for every node the scalar `root` depends
    /// on. Pure: repeated calls return identical gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::contract("backward", "root id out of range"));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!(
                    "root must be scalar, got shape {:?}",
                    self.nodes[root.0].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            let (before, rest) = grads.split_at_mut(id);
            let g = match rest[0].as_ref() {
                Some(g) => g,
                None => continue,
            };
            self.apply_vjp(id, g, before)?;
        }
        Ok(Gradients { grads })
    }

    fn parent_requires(&self, id: usize, which: usize) -> bool {
        let p = self.nodes[id].parents[which];
        self.nodes[p.0].requires
    }

    fn parent_slot<'a>(
        &self,
        id: usize,
        which: usize,
        grads: &'a mut [Option<Tensor>],
    ) -> &'a mut Tensor {
        let p = self.nodes[id].parents[which].0;
        let shape = self.nodes[p].value.shape().to_vec();
        grads[p].get_or_insert_with(|| Tensor::zeros(shape))
    }

    #[allow(clippy::too_many_lines)]
    fn apply_vjp(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}

            Op::Add(bc) | Op::Sub(bc) => {
                let sign = if matches!(node.op, Op::Sub(_)) { -1.0 } else { 1.0 };
                if self.parent_requires(id, 0) {
                    let da = self.parent_slot(id, 0, grads);
                    da.axpy(1.0, g)?;
                }
                if self.parent_requires(id, 1) {
                    let db = self.parent_slot(id, 1, grads);
                    match bc {
                        Bcast::Same => db.axpy(sign, g)?,
                        _ => {
                            let bl = db.len();
                            let dbd = db.data_mut();
                            for (i, &gv) in g.data().iter().enumerate() {
                                dbd[i % bl] += sign * gv;
                            }
                        }
                    }
                }
            }

            Op::Mul => {
                let a = self.nodes[node.parents[0].0].value.data();
                let b = self.nodes[node.parents[1].0].value.data();
                let bl = b.len();
                if self.parent_requires(id, 0) {
                    let da = self.parent_slot(id, 0, grads);
                    let dad = da.data_mut();
                    for (i, &gv) in g.data().iter().enumerate() {
                        dad[i] += gv * b[i % bl];
                    }
                }
                if self.parent_requires(id, 1) {
                    let db = self.parent_slot(id, 1, grads);
                    let dbd = db.data_mut();
                    for (i, &gv) in g.data().iter().enumerate() {
                        dbd[i % bl] += gv * a[i];
                    }
                }
            }

            Op::Neg => {
                if self.parent_requires(id, 0) {
                    self.parent_slot(id, 0, grads).axpy(-1.0, g)?;
                }
            }

            Op::Scale(c) => {
                if self.parent_requires(id, 0) {
                    self.parent_slot(id, 0, grads).axpy(*c, g)?;
                }
            }

            Op::Relu => {
                if self.parent_requires(id, 0) {
                    let x = self.nodes[node.parents[0].0].value.data();
                    let da = self.parent_slot(id, 0, grads);
                    let dad = da.data_mut();
                    for (i, &gv) in g.data().iter().enumerate() {
                        if x[i] > 0.0 {
                            dad[i] += gv;
                        }
                    }
                }
            }

            Op::Exp => {
                if self.parent_requires(id, 0) {
                    let y = node.value.data();
                    let da = self.parent_slot(id, 0, grads);
                    let dad = da.data_mut();
                    for (i, &gv) in g.data().iter().enumerate() {
                        dad[i] += gv * y[i];
                    }
                }
            }

            Op::SqrtShift => {
                if self.parent_requires(id, 0) {
                    let y = node.value.data();
                    let da = self.parent_slot(id, 0, grads);
                    let dad = da.data_mut();
                    for (i, &gv) in g.data().iter().enumerate() {
                        dad[i] += gv * 0.5 / y[i];
                    }
                }
            }

            Op::Matmul => {
                let ta = &self.nodes[node.parents[0].0].value;
                let tb = &self.nodes[node.parents[1].0].value;
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.parent_requires(id, 0) {
                    let d = matmul_nt(g.data(), tb.data(), m, n, k);
                    let da = self.parent_slot(id, 0, grads);
                    for (acc, v) in da.data_mut().iter_mut().zip(&d) {
                        *acc += v;
                    }
                }
                if self.parent_requires(id, 1) {
                    let d = matmul_tn(ta.data(), g.data(), m, k, n);
                    let db = self.parent_slot(id, 1, grads);
                    for (acc, v) in db.data_mut().iter_mut().zip(&d) {
                        *acc += v;
                    }
                }
            }

            Op::Transpose => {
                if self.parent_requires(id, 0) {
                    let (m, n) = (node.value.rows(), node.value.cols());
                    let gt = transpose_data(g.data(), m, n);
                    let da = self.parent_slot(id, 0, grads);
                    for (acc, v) in da.data_mut().iter_mut().zip(&gt) {
                        *acc += v;
                    }
                }
            }

            Op::Reshape => {
                if self.parent_requires(id, 0) {
                    let da = self.parent_slot(id, 0, grads);
                    for (acc, v) in da.data_mut().iter_mut().zip(g.data()) {
                        *acc += v;
                    }
                }
            }

            Op::SumAll | Op::SumAllSorted => {
                if self.parent_requires(id, 0) {
                    let gv = g.data()[0];
                    let da = self.parent_slot(id, 0, grads);
                    for acc in da.data_mut() {
                        *acc += gv;
                    }
                }
            }

            Op::LogSoftmax => {
                if self.parent_requires(id, 0) {
                    let y = &node.value;
                    let (m, k) = (y.rows(), y.cols());
                    let da = self.parent_slot(id, 0, grads);
                    let dad = da.data_mut();
                    for i in 0..m {
                        let gr = &g.data()[i * k..(i + 1) * k];
                        let rs: f64 = gr.iter().sum();
                        let yr = y.row(i);
                        for j in 0..k {
                            dad[i * k + j] += gr[j] - yr[j].exp() * rs;
                        }
                    }
                }
            }

            Op::NllPick { labels } => {
                if self.parent_requires(id, 0) {
                    let gv = g.data()[0];
                    let m = labels.len();
                    let k = self.nodes[node.parents[0].0].value.cols();
                    let da = self.parent_slot(id, 0, grads);
                    let dad = da.data_mut();
                    for (i, &y) in labels.iter().enumerate() {
                        dad[i * k + y] -= gv / m as f64;
                    }
                }
            }

            Op::Conv2d { stride, pad } => {
                self.conv2d_vjp(id, g, grads, *stride, *pad)?;
            }

            Op::GatherRows { indices } => {
                if self.parent_requires(id, 0) {
                    let cols = self.nodes[node.parents[0].0].value.cols();
                    let dx = self.parent_slot(id, 0, grads);
                    let dxd = dx.data_mut();
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..cols {
                            dxd[i * cols + c] += g.data()[r * cols + c];
                        }
                    }
                }
            }

            Op::MaxPool2d { argmax } => {
                if self.parent_requires(id, 0) {
                    let da = self.parent_slot(id, 0, grads);
                    let dad = da.data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        dad[src] += g.data()[o];
                    }
                }
            }

            Op::ChannelBias => {
                let s = node.value.shape();
                let (n, c) = (s[0], s[1]);
                let plane = s[2] * s[3];
                if self.parent_requires(id, 0) {
                    self.parent_slot(id, 0, grads).axpy(1.0, g)?;
                }
                if self.parent_requires(id, 1) {
                    let db = self.parent_slot(id, 1, grads);
                    let dbd = db.data_mut();
                    for smp in 0..n {
                        for ch in 0..c {
                            let base = (smp * c + ch) * plane;
                            let sum: f64 = g.data()[base..base + plane].iter().sum();
                            dbd[ch] += sum;
                        }
                    }
                }
            }

            Op::BatchNormTrain { eps, mean, var } => {
                self.bn_train_vjp(id, g, grads, *eps, mean, var)?;
            }

            Op::BatchNormEval { eps, mean, var } => {
                self.bn_eval_vjp(id, g, grads, *eps, mean, var)?;
            }

            Op::Pdist2 => {
                let tx = &self.nodes[node.parents[0].0].value;
                let ty = &self.nodes[node.parents[1].0].value;
                let (n, m, d) = (tx.rows(), ty.rows(), tx.cols());
                if self.parent_requires(id, 0) {
                    let dx = self.parent_slot(id, 0, grads);
                    let dxd = dx.data_mut();
                    for i in 0..n {
                        let xi = tx.row(i);
                        for j in 0..m {
                            let gv = 2.0 * g.data()[i * m + j];
                            let yj = ty.row(j);
                            for t in 0..d {
                                dxd[i * d + t] += gv * (xi[t] - yj[t]);
                            }
                        }
                    }
                }
                if self.parent_requires(id, 1) {
                    let dy = self.parent_slot(id, 1, grads);
                    let dyd = dy.data_mut();
                    for i in 0..n {
                        let xi = tx.row(i);
                        for j in 0..m {
                            let gv = 2.0 * g.data()[i * m + j];
                            let yj = ty.row(j);
                            for t in 0..d {
                                dyd[j * d + t] += gv * (yj[t] - xi[t]);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn conv2d_vjp(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        stride: usize,
        pad: usize,
    ) -> Result<()> {
        let node = &self.nodes[id];
        let tx = &self.nodes[node.parents[0].0].value;
        let tw = &self.nodes[node.parents[1].0].value;
        let (n, c, h, w) = {
            let s = tx.shape();
            (s[0], s[1], s[2], s[3])
        };
        let (f, k) = (tw.shape()[0], tw.shape()[2]);
        let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
        let (ckk, ohow) = (c * k * k, oh * ow);
        let need_x = self.parent_requires(id, 0);
        let need_w = self.parent_requires(id, 1);
        let mut col = vec![0.0; ckk * ohow];
        let mut dw_acc = if need_w { vec![0.0; f * ckk] } else { vec![] };
        let mut dx_full = if need_x { vec![0.0; n * c * h * w] } else { vec![] };
        for s in 0..n {
            let gout = &g.data()[s * f * ohow..(s + 1) * f * ohow];
            if need_w {
                im2col(
                    &tx.data()[s * c * h * w..(s + 1) * c * h * w],
                    c,
                    h,
                    w,
                    k,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut col,
                );
                let dw = matmul_nt(gout, &col, f, ohow, ckk);
                for (acc, v) in dw_acc.iter_mut().zip(&dw) {
                    *acc += v;
                }
            }
            if need_x {
                let dcol = matmul_tn(tw.data(), gout, f, ckk, ohow);
                col2im(
                    &dcol,
                    c,
                    h,
                    w,
                    k,
                    stride,
                    pad,
                    oh,
                    ow,
                    &mut dx_full[s * c * h * w..(s + 1) * c * h * w],
                );
            }
        }
        if need_w {
            let dwt = self.parent_slot(id, 1, grads);
            for (acc, v) in dwt.data_mut().iter_mut().zip(&dw_acc) {
                *acc += v;
            }
        }
        if need_x {
            let dxt = self.parent_slot(id, 0, grads);
            for (acc, v) in dxt.data_mut().iter_mut().zip(&dx_full) {
                *acc += v;
            }
        }
        Ok(())
    }

    fn bn_train_vjp(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        eps: f64,
        mean: &[f64],
        var: &[f64],
    ) -> Result<()> {
        let node = &self.nodes[id];
        let tx = &self.nodes[node.parents[0].0].value;
        let gamma = self.nodes[node.parents[1].0].value.data();
        let c = mean.len();
        let cnt = tx.len() / c;
        let need = [
            self.parent_requires(id, 0),
            self.parent_requires(id, 1),
            self.parent_requires(id, 2),
        ];
        // Per channel: dbeta = sum(dy), dgamma = sum(dy*xhat),
        // dx = gamma*istd/B * (B*dy - sum(dy) - xhat*sum(dy*xhat)).
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for_each_bn_elem(tx.shape(), |ch, idx| {
            let istd = 1.0 / (var[ch] + eps).sqrt();
            let xhat = (tx.data()[idx] - mean[ch]) * istd;
            let dy = g.data()[idx];
            sum_dy[ch] += dy;
            sum_dy_xhat[ch] += dy * xhat;
        });
        for ch in 0..c {
            dbeta[ch] = sum_dy[ch];
            dgamma[ch] = sum_dy_xhat[ch];
        }
        if need[0] {
            let dx = self.parent_slot(id, 0, grads);
            let dxd = dx.data_mut();
            for_each_bn_elem(tx.shape(), |ch, idx| {
                let istd = 1.0 / (var[ch] + eps).sqrt();
                let xhat = (tx.data()[idx] - mean[ch]) * istd;
                let dy = g.data()[idx];
                dxd[idx] += gamma[ch] * istd / cnt as f64
                    * (cnt as f64 * dy - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
            });
        }
        if need[1] {
            let dg = self.parent_slot(id, 1, grads);
            for (acc, v) in dg.data_mut().iter_mut().zip(&dgamma) {
                *acc += v;
            }
        }
        if need[2] {
            let db = self.parent_slot(id, 2, grads);
            for (acc, v) in db.data_mut().iter_mut().zip(&dbeta) {
                *acc += v;
            }
        }
        Ok(())
    }

    fn bn_eval_vjp(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        eps: f64,
        mean: &[f64],
        var: &[f64],
    ) -> Result<()> {
        let node = &self.nodes[id];
        let tx = &self.nodes[node.parents[0].0].value;
        let gamma = self.nodes[node.parents[1].0].value.data();
        let c = mean.len();
        if self.parent_requires(id, 0) {
            let dx = self.parent_slot(id, 0, grads);
            let dxd = dx.data_mut();
            for_each_bn_elem(tx.shape(), |ch, idx| {
                let istd = 1.0 / (var[ch] + eps).sqrt();
                dxd[idx] += g.data()[idx] * gamma[ch] * istd;
            });
        }
        if self.parent_requires(id, 1) {
            let mut dgamma = vec![0.0; c];
            for_each_bn_elem(tx.shape(), |ch, idx| {
                let istd = 1.0 / (var[ch] + eps).sqrt();
                let xhat = (tx.data()[idx] - mean[ch]) * istd;
                dgamma[ch] += g.data()[idx] * xhat;
            });
            let dg = self.parent_slot(id, 1, grads);
            for (acc, v) in dg.data_mut().iter_mut().zip(&dgamma) {
                *acc += v;
            }
        }
        if self.parent_requires(id, 2) {
            let mut dbeta = vec![0.0; c];
            for_each_bn_elem(tx.shape(), |ch, idx| {
                dbeta[ch] += g.data()[idx];
            });
            let db = self.parent_slot(id, 2, grads);
            for (acc, v) in db.data_mut().iter_mut().zip(&dbeta) {
                *acc += v;
            }
        }
        Ok(())
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────

/// C[m,n] = A[m,k] * B[k,n], row-major, ikj loop order.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C[m,q] = A[m,p] * B[q,p]^T (rows of A dotted with rows of B).
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, p: usize, q: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * q];
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let crow = &mut c[i * q..(i + 1) * q];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv = dot(arow, &b[j * p..(j + 1) * p]);
        }
    }
    c
}

/// C[m,n] = A[p,m]^T * B[p,n].
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], p: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for l in 0..p {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Four-lane unrolled dot product: fixed summation tree, vectorizable.
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let cx = x.chunks_exact(4);
    let cy = y.chunks_exact(4);
    let (rx, ry) = (cx.remainder(), cy.remainder());
    for (a, b) in cx.zip(cy) {
        s0 += a[0] * b[0];
        s1 += a[1] * b[1];
        s2 += a[2] * b[2];
        s3 += a[3] * b[3];
    }
    let mut s = (s0 + s2) + (s1 + s3);
    for (a, b) in rx.iter().zip(ry) {
        s += a * b;
    }
    s
}

pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let cx = x.chunks_exact(4);
    let cy = y.chunks_exact(4);
    let (rx, ry) = (cx.remainder(), cy.remainder());
    for (a, b) in cx.zip(cy) {
        let (d0, d1, d2, d3) = (a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]);
        s0 += d0 * d0;
        s1 += d1 * d1;
        s2 += d2 * d2;
        s3 += d3 * d3;
    }
    let mut s = (s0 + s2) + (s1 + s3);
    for (a, b) in rx.iter().zip(ry) {
        let d = a - b;
        s += d * d;
    }
    s
}

fn transpose_data(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let ohow = oh * ow;
    for ci in 0..c {
        let chan = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let dst = &mut col[r * ohow..(r + 1) * ohow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // Contiguous span; padding can clip at most one
                        // element off either end.
                        let ix0 = kj as isize - pad as isize;
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ix0 + ox as isize;
                            *d = if ix >= 0 && (ix as usize) < w {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            *d = if ix >= 0 && (ix as usize) < w {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let ohow = oh * ow;
    for ci in 0..c {
        let chan = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let src = &col[r * ohow..(r + 1) * ohow];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            chan[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn bn_channel_stats(x: &[f64], shape: &[usize], mean: &mut [f64], var: &mut [f64]) {
    let c = mean.len();
    let cnt = (x.len() / c) as f64;
    mean.fill(0.0);
    var.fill(0.0);
    for_each_bn_elem_raw(shape, |ch, idx| mean[ch] += x[idx]);
    for m in mean.iter_mut() {
        *m /= cnt;
    }
    for_each_bn_elem_raw(shape, |ch, idx| {
        let d = x[idx] - mean[ch];
        var[ch] += d * d;
    });
    for v in var.iter_mut() {
        *v /= cnt;
    }
}

#[allow(clippy::too_many_arguments)]
fn bn_normalize(
    x: &[f64],
    shape: &[usize],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for_each_bn_elem_raw(shape, |ch, idx| {
        let istd = 1.0 / (var[ch] + eps).sqrt();
        out[idx] = gamma[ch] * (x[idx] - mean[ch]) * istd + beta[ch];
    });
    out
}

/// Visits every element of a 2-D [N,C] or 4-D [N,C,H,W] tensor with its
/// channel index, in flat row-major order.
fn for_each_bn_elem_raw(shape: &[usize], mut f: impl FnMut(usize, usize)) {
    match shape.len() {
        2 => {
            let (n, c) = (shape[0], shape[1]);
            for i in 0..n {
                for ch in 0..c {
                    f(ch, i * c + ch);
                }
            }
        }
        4 => {
            let (n, c) = (shape[0], shape[1]);
            let plane = shape[2] * shape[3];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * plane;
                    for p in 0..plane {
                        f(ch, base + p);
                    }
                }
            }
        }
        _ => unreachable!("batch norm layout is validated at construction"),
    }
}

fn for_each_bn_elem(shape: &[usize], f: impl FnMut(usize, usize)) {
    for_each_bn_elem_raw(shape, f);
}

/// Central-difference numeric gradient of a scalar function: the test oracle
/// for every hand-written and autodiff gradient in this crate.
pub fn finite_diff<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut g = Tensor::zeros(x.shape().to_vec());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = f(&xp)?;
        xp.data_mut()[i] = orig - h;
        let fm = f(&xp)?;
        xp.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}
