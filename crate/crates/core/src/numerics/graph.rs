use rand::Rng;

use super::{NumericsError, ParamId, ParameterStore, Tensor};

/// Handle to a node in a [`Graph`]. Node indices double as topological order:
/// inputs always precede outputs, so reverse index order is a valid backward
/// traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const LAYERNORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    Gelu { a: NodeId },
    Log { a: NodeId },
    Exp { a: NodeId },
    SoftmaxLastDim { a: NodeId },
    LogSoftmaxLastDim { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, ignore_index: usize },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { a: NodeId, lo: usize, hi: usize },
    Reshape { a: NodeId },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    TakePerRow { a: NodeId, idx: Vec<usize> },
    Dropout { a: NodeId, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    tensor: Tensor,
    param: Option<ParamId>,
}

/// Define-by-run computation graph. Built fresh for every forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].tensor.data[0]
    }

    fn push(&mut self, mut tensor: Tensor, op: Op, requires_grad: bool) -> NodeId {
        tensor.requires_grad = requires_grad;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            tensor,
            param: None,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Grad-tracked leaf bound to a store parameter; data is copied in, and
    /// [`Graph::flush_grads`] copies the gradient back out.
    pub fn param(&mut self, store: &ParameterStore, pid: ParamId) -> NodeId {
        let t = store.get(pid).value.clone();
        let id = self.push(
            Tensor {
                grad: None,
                ..t
            },
            Op::Leaf,
            true,
        );
        self.nodes[id.0].param = Some(pid);
        id
    }

    /// Grad-tracked leaf not bound to any store (used by tests and probes).
    pub fn input(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient (masks, targets, advantages).
    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf, false)
    }

    // ── Forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::BadShape {
                op: "transpose",
                expected: "a 2-D tensor",
                got: s,
            });
        }
        let (r, c) = (s[0], s[1]);
        let data = transpose_raw(self.data(a), r, c);
        let rg = self.needs(a);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose { a }, rg))
    }

    fn elementwise_pair(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise_pair("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise_pair("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise_pair("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// `a[.., n] + bias[n]`, bias broadcast over every leading row.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let n = self.tensor(a).last_dim();
        if self.shape(bias) != [n] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias).to_vec();
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % n])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(a) || self.needs(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias { a, bias }, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.needs(a);
        self.push(t, Op::Scale { a, c }, rg)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.needs(a);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, gelu_scalar, Op::Gelu { a })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Log { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn softmax_lastdim(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let n = self.tensor(a).last_dim();
        if n == 0 {
            return Err(NumericsError::BadShape {
                op: "softmax_lastdim",
                expected: "last dimension >= 1",
                got: self.shape(a).to_vec(),
            });
        }
        if self.data(a).iter().any(|x| x.is_nan()) {
            return Err(NumericsError::NonFinite {
                op: "softmax_lastdim",
            });
        }
        let mut data = self.data(a).to_vec();
        for slice in data.chunks_mut(n) {
            let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in slice.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in slice.iter_mut() {
                *x /= sum;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(a);
        Ok(self.push(t, Op::SoftmaxLastDim { a }, rg))
    }

    pub fn log_softmax_lastdim(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let n = self.tensor(a).last_dim();
        if n == 0 {
            return Err(NumericsError::BadShape {
                op: "log_softmax_lastdim",
                expected: "last dimension >= 1",
                got: self.shape(a).to_vec(),
            });
        }
        let mut data = self.data(a).to_vec();
        for slice in data.chunks_mut(n) {
            let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = slice.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for x in slice.iter_mut() {
                *x -= lse;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(a);
        Ok(self.push(t, Op::LogSoftmaxLastDim { a }, rg))
    }

    /// Layer normalization over the last dimension with learnable gain/bias.
    pub fn layernorm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let d = self.tensor(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(NumericsError::ShapeMismatch {
                op: "layernorm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let g = self.data(gain).to_vec();
        let b = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for slice in data.chunks_mut(d) {
            let mean = slice.iter().sum::<f64>() / d as f64;
            let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for (j, v) in slice.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias }, rg))
    }

    /// Row lookup: `table[vocab, d]` gathered at `ids` -> `[ids.len(), d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NumericsError> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::BadShape {
                op: "embedding",
                expected: "a 2-D table",
                got: s,
            });
        }
        let (rows, d) = (s[0], s[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    limit: rows,
                });
            }
            data.extend_from_slice(&self.data(table)[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.needs(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `logits[n, classes]` against `targets[n]`,
    /// skipping rows whose target equals `ignore_index`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<NodeId, NumericsError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let classes = s[1];
        let mut total = 0.0;
        let mut counted = 0usize;
        for (row, &t) in self.data(logits).chunks(classes).zip(targets) {
            if t == ignore_index {
                continue;
            }
            if t >= classes {
                return Err(NumericsError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    limit: classes,
                });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t];
            counted += 1;
        }
        if counted == 0 {
            return Err(NumericsError::NoTargets);
        }
        let t = Tensor::scalar(total / counted as f64);
        let rg = self.needs(logits);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
            },
            rg,
        ))
    }

    /// Concatenate two 2-D tensors along columns.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&self.data(a)[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&self.data(b)[r * cb..(r + 1) * cb]);
        }
        let t = Tensor::new(vec![rows, ca + cb], data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::ConcatCols { a, b }, rg))
    }

    /// Column slice `[lo, hi)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId, NumericsError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || lo >= hi || hi > s[1] {
            return Err(NumericsError::BadShape {
                op: "slice_cols",
                expected: "a 2-D tensor and lo < hi <= cols",
                got: s,
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let mut data = Vec::with_capacity(rows * (hi - lo));
        for r in 0..rows {
            data.extend_from_slice(&self.data(a)[r * cols + lo..r * cols + hi]);
        }
        let t = Tensor::new(vec![rows, hi - lo], data)?;
        let rg = self.needs(a);
        Ok(self.push(t, Op::SliceCols { a, lo, hi }, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != self.tensor(a).numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let t = Tensor::new(shape, self.data(a).to_vec())?;
        let rg = self.needs(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let t = Tensor::scalar(self.data(a).iter().sum());
        let rg = self.needs(a);
        self.push(t, Op::SumAll { a }, rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.tensor(a).numel() as f64;
        let t = Tensor::scalar(self.data(a).iter().sum::<f64>() / n);
        let rg = self.needs(a);
        self.push(t, Op::MeanAll { a }, rg)
    }

    /// Picks `a[r, idx[r]]` from each row of a 2-D tensor -> `[rows]`.
    pub fn take_per_row(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId, NumericsError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "take_per_row",
                lhs: s,
                rhs: vec![idx.len()],
            });
        }
        let cols = s[1];
        let mut data = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            if i >= cols {
                return Err(NumericsError::IndexOutOfRange {
                    op: "take_per_row",
                    index: i,
                    limit: cols,
                });
            }
            data.push(self.data(a)[r * cols + i]);
        }
        let t = Tensor::vector(&data);
        let rg = self.needs(a);
        Ok(self.push(
            t,
            Op::TakePerRow {
                a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout: keeps each entry with probability `1 - rate` and
    /// rescales by `1 / (1 - rate)`.
    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: &mut impl Rng) -> NodeId {
        let keep = 1.0 - rate;
        let mask: Vec<f64> = self
            .data(a)
            .iter()
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data: Vec<f64> = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.needs(a);
        self.push(t, Op::Dropout { a, mask }, rg)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// grad-requiring node reachable from the loss. Errors on a non-scalar
    /// loss and on a second call without rebuilding the graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        if self.backward_done {
            return Err(NumericsError::BackwardTwice);
        }
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.backward_done = true;
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let grad = match self.nodes[i].tensor.grad.clone() {
                Some(g) => g,
                None => continue, // not reachable from the loss
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    if self.needs(a) {
                        // dA = dC . B^T
                        let bt = transpose_raw(self.data(b), k, n);
                        let da = matmul_raw(&grad, &bt, m, n, k);
                        self.acc(a, &da);
                    }
                    if self.needs(b) {
                        // dB = A^T . dC
                        let at = transpose_raw(self.data(a), m, k);
                        let db = matmul_raw(&at, &grad, k, m, n);
                        self.acc(b, &db);
                    }
                }
                Op::Transpose { a } => {
                    let (r, c) = (self.shape(i_id(i))[0], self.shape(i_id(i))[1]);
                    let da = transpose_raw(&grad, r, c);
                    self.acc(a, &da);
                }
                Op::Add { a, b } => {
                    self.acc(a, &grad);
                    self.acc(b, &grad);
                }
                Op::Sub { a, b } => {
                    self.acc(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.acc(b, &neg);
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let da: Vec<f64> =
                            grad.iter().zip(self.data(b)).map(|(g, y)| g * y).collect();
                        self.acc(a, &da);
                    }
                    if self.needs(b) {
                        let db: Vec<f64> =
                            grad.iter().zip(self.data(a)).map(|(g, x)| g * x).collect();
                        self.acc(b, &db);
                    }
                }
                Op::AddBias { a, bias } => {
                    if self.needs(a) {
                        self.acc(a, &grad);
                    }
                    if self.needs(bias) {
                        let n = self.tensor(bias).numel();
                        let mut db = vec![0.0; n];
                        for (j, g) in grad.iter().enumerate() {
                            db[j % n] += g;
                        }
                        self.acc(bias, &db);
                    }
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    self.acc(a, &da);
                }
                Op::Relu { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(self.data(a))
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.acc(a, &da);
                }
                Op::Gelu { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(self.data(a))
                        .map(|(g, &x)| g * gelu_grad_scalar(x))
                        .collect();
                    self.acc(a, &da);
                }
                Op::Log { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(self.data(a))
                        .map(|(g, &x)| g / x)
                        .collect();
                    self.acc(a, &da);
                }
                Op::Exp { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(self.data(i_id(i)))
                        .map(|(g, &e)| g * e)
                        .collect();
                    self.acc(a, &da);
                }
                Op::SoftmaxLastDim { a } => {
                    let n = self.tensor(i_id(i)).last_dim();
                    let out = self.data(i_id(i));
                    let mut da = vec![0.0; grad.len()];
                    for (s, (g_slice, o_slice)) in
                        grad.chunks(n).zip(out.chunks(n)).enumerate()
                    {
                        let dot: f64 = g_slice.iter().zip(o_slice).map(|(g, o)| g * o).sum();
                        for j in 0..n {
                            da[s * n + j] = o_slice[j] * (g_slice[j] - dot);
                        }
                    }
                    self.acc(a, &da);
                }
                Op::LogSoftmaxLastDim { a } => {
                    let n = self.tensor(i_id(i)).last_dim();
                    let out = self.data(i_id(i));
                    let mut da = vec![0.0; grad.len()];
                    for (s, (g_slice, o_slice)) in
                        grad.chunks(n).zip(out.chunks(n)).enumerate()
                    {
                        let gsum: f64 = g_slice.iter().sum();
                        for j in 0..n {
                            da[s * n + j] = g_slice[j] - o_slice[j].exp() * gsum;
                        }
                    }
                    self.acc(a, &da);
                }
                Op::LayerNorm { x, gain, bias } => {
                    self.layernorm_backward(x, gain, bias, &grad);
                }
                Op::Embedding { table, ids } => {
                    if self.needs(table) {
                        let d = self.tensor(table).last_dim();
                        let mut dt = vec![0.0; self.tensor(table).numel()];
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] += grad[r * d + j];
                            }
                        }
                        self.acc(table, &dt);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore_index,
                } => {
                    let classes = self.tensor(logits).last_dim();
                    let counted = targets.iter().filter(|&&t| t != ignore_index).count() as f64;
                    let mut dl = vec![0.0; self.tensor(logits).numel()];
                    for (r, (&t, row)) in targets
                        .iter()
                        .zip(self.data(logits).chunks(classes))
                        .enumerate()
                    {
                        if t == ignore_index {
                            continue;
                        }
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for c in 0..classes {
                            let p = exps[c] / sum;
                            let ind = if c == t { 1.0 } else { 0.0 };
                            dl[r * classes + c] = grad[0] * (p - ind) / counted;
                        }
                    }
                    self.acc(logits, &dl);
                }
                Op::ConcatCols { a, b } => {
                    let (ca, cb) = (self.tensor(a).last_dim(), self.tensor(b).last_dim());
                    let rows = self.shape(a)[0];
                    if self.needs(a) {
                        let mut da = vec![0.0; rows * ca];
                        for r in 0..rows {
                            da[r * ca..(r + 1) * ca]
                                .copy_from_slice(&grad[r * (ca + cb)..r * (ca + cb) + ca]);
                        }
                        self.acc(a, &da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; rows * cb];
                        for r in 0..rows {
                            db[r * cb..(r + 1) * cb].copy_from_slice(
                                &grad[r * (ca + cb) + ca..(r + 1) * (ca + cb)],
                            );
                        }
                        self.acc(b, &db);
                    }
                }
                Op::SliceCols { a, lo, hi } => {
                    let (rows, cols) = (self.shape(a)[0], self.shape(a)[1]);
                    let w = hi - lo;
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        da[r * cols + lo..r * cols + hi].copy_from_slice(&grad[r * w..(r + 1) * w]);
                    }
                    self.acc(a, &da);
                }
                Op::Reshape { a } => {
                    self.acc(a, &grad);
                }
                Op::SumAll { a } => {
                    let da = vec![grad[0]; self.tensor(a).numel()];
                    self.acc(a, &da);
                }
                Op::MeanAll { a } => {
                    let n = self.tensor(a).numel();
                    let da = vec![grad[0] / n as f64; n];
                    self.acc(a, &da);
                }
                Op::TakePerRow { a, idx } => {
                    let cols = self.tensor(a).last_dim();
                    let mut da = vec![0.0; self.tensor(a).numel()];
                    for (r, &c) in idx.iter().enumerate() {
                        da[r * cols + c] += grad[r];
                    }
                    self.acc(a, &da);
                }
                Op::Dropout { a, mask } => {
                    let da: Vec<f64> = grad.iter().zip(&mask).map(|(g, m)| g * m).collect();
                    self.acc(a, &da);
                }
            }
        }
        Ok(())
    }

    fn layernorm_backward(&mut self, x: NodeId, gain: NodeId, bias: NodeId, grad: &[f64]) {
        let d = self.tensor(x).last_dim();
        let df = d as f64;
        let xs = self.data(x).to_vec();
        let g = self.data(gain).to_vec();
        let mut dx = vec![0.0; xs.len()];
        let mut dgain = vec![0.0; d];
        let mut dbias = vec![0.0; d];
        for (s, (x_slice, g_slice)) in xs.chunks(d).zip(grad.chunks(d)).enumerate() {
            let mean = x_slice.iter().sum::<f64>() / df;
            let var = x_slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
            let inv_std = 1.0 / (var + LAYERNORM_EPS).sqrt();
            let xhat: Vec<f64> = x_slice.iter().map(|&v| (v - mean) * inv_std).collect();
            let dxhat: Vec<f64> = g_slice.iter().zip(&g).map(|(go, gv)| go * gv).collect();
            let dxhat_sum: f64 = dxhat.iter().sum();
            let dxhat_dot: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
            for j in 0..d {
                dgain[j] += g_slice[j] * xhat[j];
                dbias[j] += g_slice[j];
                dx[s * d + j] =
                    inv_std / df * (df * dxhat[j] - dxhat_sum - xhat[j] * dxhat_dot);
            }
        }
        if self.needs(x) {
            self.acc(x, &dx);
        }
        if self.needs(gain) {
            self.acc(gain, &dgain);
        }
        if self.needs(bias) {
            self.acc(bias, &dbias);
        }
    }

    fn acc(&mut self, id: NodeId, delta: &[f64]) {
        let t = &mut self.nodes[id.0].tensor;
        if !t.requires_grad {
            return;
        }
        match &mut t.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => t.grad = Some(delta.to_vec()),
        }
    }

    /// Accumulates the gradients of every param-bound leaf into the store.
    pub fn flush_grads(&mut self, store: &mut ParameterStore) {
        for node in &self.nodes {
            if let (Some(pid), Some(grad)) = (node.param, node.tensor.grad.as_ref()) {
                store.accumulate_grad(pid, grad);
            }
        }
    }
}

fn i_id(i: usize) -> NodeId {
    NodeId(i)
}

/// C[m,n] = A[m,k] . B[k,n], row-major.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}
