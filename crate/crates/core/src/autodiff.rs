//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node in
//! insertion order. Because an operation can only consume nodes that already
//! exist, insertion order is a topological order and the backward sweep is a
//! single reverse scan that visits each node once.
//!
//! The op set is deliberately small: it covers what the micro transformer and
//! its losses need, nothing more.

use std::fmt;

/// Errors raised while recording or differentiating a trace.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor shape {0:?} has a zero-sized dimension")]
    EmptyDimension(Vec<usize>),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("trace already consumed by an earlier backward pass")]
    TraceConsumed,
    #[error("masked cross-entropy has no output positions (mask is all zero)")]
    EmptyMask,
    #[error("index {index} out of range (limit {limit}) in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(AutodiffError::EmptyDimension(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a matrix from nested rows. Panics on ragged input; test helper.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    SoftmaxRows(Var),
    /// Saves the per-row reciprocal RMS.
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CausalMask(Var),
    Sum(Var),
    /// Saves row softmax probabilities of the masked rows.
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    /// Log-softmax of `logits` gathered at `(row, token)` picks.
    PickLogSoftmax {
        logits: Var,
        picks: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Ordered record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn matrix(&self, op: &'static str, var: Var) -> Result<(usize, usize)> {
        self.value(var)
            .dims2()
            .ok_or_else(|| AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape(var).to_vec(),
                rhs: vec![],
            })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data: out,
            },
            Op::Transpose(a),
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a);
        let data = value.data.iter().map(|x| x * factor).collect();
        let shape = value.shape.clone();
        let rg = self.requires_grad(a);
        self.push(Tensor { shape, data }, Op::Scale(a, factor), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a);
        let data = value.data.iter().map(|&x| x * sigmoid(x)).collect();
        let shape = value.shape.clone();
        let rg = self.requires_grad(a);
        self.push(Tensor { shape, data }, Op::Silu(a), rg)
    }

    /// Softmax over the last axis of a matrix (or over a whole vector).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(a);
        let mut data = self.value(a).data.clone();
        for r in 0..rows {
            softmax_in_place(&mut data[r * cols..(r + 1) * cols]);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor { shape, data }, Op::SoftmaxRows(a), rg))
    }

    fn rows_cols(&self, a: Var) -> (usize, usize) {
        match self.shape(a) {
            [r, c] => (*r, *c),
            s => (1, s.iter().product()),
        }
    }

    /// Row-wise RMS normalisation with a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.matrix("rms_norm", x)?;
        if self.shape(gain) != [cols] {
            return Err(AutodiffError::ShapeMismatch {
                op: "rms_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let mut out = vec![0.0; rows * cols];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = row[c] * inv * g[c];
            }
            inv_rms.push(inv);
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain);
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data: out,
            },
            Op::RmsNorm { x, gain, inv_rms },
            rg,
        ))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.matrix("embedding", table)?;
        if ids.is_empty() {
            return Err(AutodiffError::EmptyDimension(vec![0, dim]));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    limit: vocab,
                });
            }
            out.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), dim],
                data: out,
            },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.matrix("slice_cols", x)?;
        if start >= end || end > cols {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                limit: cols,
            });
        }
        let width = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor {
                shape: vec![rows, width],
                data: out,
            },
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::EmptyDimension(vec![]))?;
        let (rows, _) = self.matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix("concat_cols", p)?;
            if r != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            Tensor {
                shape: vec![rows, total],
                data: out,
            },
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Sets entries above the diagonal of a square score matrix to `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix("causal_mask", x)?;
        if rows != cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "causal_mask",
                lhs: vec![rows, cols],
                rhs: vec![rows, rows],
            });
        }
        let mut data = self.value(x).data.clone();
        for i in 0..rows {
            for j in i + 1..cols {
                data[i * cols + j] = f64::NEG_INFINITY;
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            Op::CausalMask(x),
            rg,
        ))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    ///
    /// Rows with a cleared mask contribute nothing to the value and receive an
    /// exactly zero gradient.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let (rows, vocab) = self.matrix("masked_cross_entropy", logits)?;
        if targets.len() != rows || mask.len() != rows {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_cross_entropy",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "masked_cross_entropy",
                index: bad,
                limit: vocab,
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(AutodiffError::EmptyMask);
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        for r in (0..rows).filter(|&r| mask[r]) {
            let row = &src[r * vocab..(r + 1) * vocab];
            let lse = log_sum_exp(row);
            total += lse - row[targets[r]];
            for (p, &z) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Log-probabilities `log softmax(logits[row])[token]` for each pick.
    pub fn pick_log_softmax(&mut self, logits: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let (rows, vocab) = self.matrix("pick_log_softmax", logits)?;
        if picks.is_empty() {
            return Err(AutodiffError::EmptyDimension(vec![0]));
        }
        let src = self.value(logits).data();
        let mut out = Vec::with_capacity(picks.len());
        let mut probs = Vec::with_capacity(picks.len() * vocab);
        for &(r, t) in picks {
            if r >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "pick_log_softmax",
                    index: r,
                    limit: rows,
                });
            }
            if t >= vocab {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "pick_log_softmax",
                    index: t,
                    limit: vocab,
                });
            }
            let row = &src[r * vocab..(r + 1) * vocab];
            let lse = log_sum_exp(row);
            out.push(row[t] - lse);
            probs.extend(row.iter().map(|z| (z - lse).exp()));
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Tensor {
                shape: vec![picks.len()],
                data: out,
            },
            Op::PickLogSoftmax {
                logits,
                picks: picks.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates gradients from a scalar `loss` back to every node that
    /// requires them. The trace can be differentiated only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(AutodiffError::TraceConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad).map(|data| Tensor {
                    shape: node.value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                if self.requires_grad(*a) {
                    let ga = mm_nt(up, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let gb = mm_tn(self.value(*a).data(), up, m, k, n);
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().unwrap();
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = up[j * r + i];
                    }
                }
                self.accumulate(grads, *a, &g);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up);
                self.accumulate(grads, *b, up);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let g = zip_map(up, self.value(*b).data(), |u, y| u * y);
                    self.accumulate(grads, *a, &g);
                }
                if self.requires_grad(*b) {
                    let g = zip_map(up, self.value(*a).data(), |u, x| u * x);
                    self.accumulate(grads, *b, &g);
                }
            }
            Op::Scale(a, factor) => {
                let g: Vec<f64> = up.iter().map(|u| u * factor).collect();
                self.accumulate(grads, *a, &g);
            }
            Op::Silu(a) => {
                let g = zip_map(up, self.value(*a).data(), |u, x| {
                    let s = sigmoid(x);
                    u * s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(grads, *a, &g);
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = self.rows_cols(*a);
                let y = node.value.data();
                let mut g = vec![0.0; rows * cols];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = up[span.clone()]
                        .iter()
                        .zip(&y[span.clone()])
                        .map(|(u, p)| u * p)
                        .sum();
                    for i in span {
                        g[i] = y[i] * (up[i] - dot);
                    }
                }
                self.accumulate(grads, *a, &g);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (rows, cols) = self.value(*x).dims2().unwrap();
                let xs = self.value(*x).data();
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; rows * cols];
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let base = r * cols;
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += up[base + c] * gv[c] * xs[base + c] * inv;
                        }
                        let mean = dot / cols as f64;
                        for c in 0..cols {
                            let xhat = xs[base + c] * inv;
                            gx[base + c] = (up[base + c] * gv[c] - xhat * mean) * inv;
                        }
                    }
                    self.accumulate(grads, *x, &gx);
                }
                if self.requires_grad(*gain) {
                    let mut gg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += up[r * cols + c] * xs[r * cols + c] * inv_rms[r];
                        }
                    }
                    self.accumulate(grads, *gain, &gg);
                }
            }
            Op::Embedding { table, ids } => {
                let (vocab, dim) = self.value(*table).dims2().unwrap();
                let mut g = vec![0.0; vocab * dim];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..dim {
                        g[id * dim + c] += up[row * dim + c];
                    }
                }
                self.accumulate(grads, *table, &g);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.value(*x).dims2().unwrap();
                let width = node.value.dims2().unwrap().1;
                let mut g = vec![0.0; rows * cols];
                for r in 0..rows {
                    g[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&up[r * width..(r + 1) * width]);
                }
                self.accumulate(grads, *x, &g);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    if self.requires_grad(p) {
                        let mut g = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            g.extend_from_slice(&up[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, &g);
                    }
                    offset += w;
                }
            }
            Op::CausalMask(x) => {
                let (rows, cols) = self.value(*x).dims2().unwrap();
                let mut g = up.to_vec();
                for i in 0..rows {
                    for j in i + 1..cols {
                        g[i * cols + j] = 0.0;
                    }
                }
                self.accumulate(grads, *x, &g);
            }
            Op::Sum(x) => {
                let g = vec![up[0]; self.value(*x).len()];
                self.accumulate(grads, *x, &g);
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let (rows, vocab) = self.value(*logits).dims2().unwrap();
                let scale = up[0] / *count as f64;
                let mut g = vec![0.0; rows * vocab];
                for r in (0..rows).filter(|&r| mask[r]) {
                    for c in 0..vocab {
                        g[r * vocab + c] = probs[r * vocab + c] * scale;
                    }
                    g[r * vocab + targets[r]] -= scale;
                }
                self.accumulate(grads, *logits, &g);
            }
            Op::PickLogSoftmax {
                logits,
                picks,
                probs,
            } => {
                let (rows, vocab) = self.value(*logits).dims2().unwrap();
                let mut g = vec![0.0; rows * vocab];
                for (k, &(r, t)) in picks.iter().enumerate() {
                    let u = up[k];
                    for c in 0..vocab {
                        g[r * vocab + c] -= u * probs[k * vocab + c];
                    }
                    g[r * vocab + t] += u;
                }
                self.accumulate(grads, *logits, &g);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, g: &[f64]) {
        if !self.requires_grad(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `log(sum(exp(row)))`, stable for large magnitudes and `-inf` entries.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    for z in row.iter_mut() {
        *z /= total;
    }
}

/// `A[m×k] · B[k×n]`.
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `A[m×n] · B[k×n]ᵀ`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let br = &b[j * n..(j + 1) * n];
            out[i * k + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `A[m×k]ᵀ · B[m×n]`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` at `x`, one coordinate at a time.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64]) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-8);
            let rel = (a - n).abs() / denom;
            assert!(rel < 1e-4 || (a - n).abs() < 1e-9, "coord {i}: {a} vs {n}");
        }
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::new();
        let eye = tape.leaf(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]), false);
        let x = Tensor::from_rows(&[&[1.5, -2.0, 0.25], &[3.0, 4.0, -5.0]]);
        let xv = tape.leaf(x.clone(), false);
        let y = tape.matmul(eye, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![4], vec![0.0; 4]).unwrap(), false);
        let p = tape.softmax(z).unwrap();
        assert_eq!(tape.value(p).data(), &[0.25; 4]);
    }

    #[test]
    fn silu_fixes_zero() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::scalar(0.0), false);
        let s = tape.silu(z);
        assert_eq!(tape.value(s).item(), Some(0.0));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![3, 4]), true);
        let loss = tape
            .masked_cross_entropy(logits, &[0, 1, 2], &[true, false, true])
            .unwrap();
        let value = tape.value(loss).item().unwrap();
        assert!((value - 4f64.ln()).abs() < 1e-12);
        assert!((value - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn infinite_margin_gives_zero_loss() {
        let ninf = f64::NEG_INFINITY;
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_rows(&[&[0.0, ninf, ninf], &[ninf, ninf, 0.0]]), false);
        let loss = tape.masked_cross_entropy(logits, &[0, 2], &[true, true]).unwrap();
        assert_eq!(tape.value(loss).item(), Some(0.0));
    }

    #[test]
    fn masked_targets_do_not_change_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = random_tensor(&mut rng, vec![5, 6]);
        let mask = [false, true, false, true, false];
        let eval = |targets: &[usize]| {
            let mut tape = Tape::new();
            let l = tape.leaf(logits.clone(), false);
            let loss = tape.masked_cross_entropy(l, targets, &mask).unwrap();
            tape.value(loss).item().unwrap()
        };
        let a = eval(&[0, 3, 1, 2, 5]);
        let b = eval(&[5, 3, 0, 2, 1]);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn all_zero_mask_is_rejected() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let err = tape.masked_cross_entropy(logits, &[0, 1], &[false, false]);
        assert_eq!(err.unwrap_err(), AutodiffError::EmptyMask);
    }

    #[test]
    fn square_has_textbook_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.mul(x, x).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn trace_is_consumed_by_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.scale(x, 2.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y).unwrap_err(), AutodiffError::TraceConsumed);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]), true);
        assert_eq!(
            tape.backward(x).unwrap_err(),
            AutodiffError::NonScalarLoss(vec![2, 2])
        );
    }

    #[test]
    fn sum_of_product_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_tensor(&mut rng, vec![3, 4]);
        let b = random_tensor(&mut rng, vec![4, 2]);
        let f = |a: &Tensor| {
            let mut tape = Tape::new();
            let av = tape.leaf(a.clone(), true);
            let bv = tape.leaf(b.clone(), false);
            let p = tape.matmul(av, bv).unwrap();
            let s = tape.sum(p);
            (tape, av, s)
        };
        let (mut tape, av, s) = f(&a);
        let grads = tape.backward(s).unwrap();
        let numeric = numeric_grad(&a, &|x| {
            let (tape, _, s) = f(x);
            tape.value(s).item().unwrap()
        });
        assert_close(grads.get(av).unwrap().data(), &numeric);
    }

    /// A composite that touches every op, reduced by masked cross-entropy.
    fn composite(tape: &mut Tape, w: Var, gain: Var, table: Var) -> Var {
        let ids = [2, 0, 3, 1];
        let x = tape.embedding(table, &ids).unwrap();
        let h = tape.rms_norm(x, gain, 1e-6).unwrap();
        let q = tape.matmul(h, w).unwrap();
        let left = tape.slice_cols(q, 0, 2).unwrap();
        let right = tape.slice_cols(q, 2, 4).unwrap();
        let rt = tape.transpose(right).unwrap();
        let scores = tape.matmul(left, rt).unwrap();
        let scores = tape.scale(scores, 0.7);
        let masked = tape.causal_mask(scores).unwrap();
        let probs = tape.softmax(masked).unwrap();
        let mixed = tape.matmul(probs, q).unwrap();
        let act = tape.silu(mixed);
        let gated = tape.mul(act, q).unwrap();
        let both = tape.concat_cols(&[gated, h]).unwrap();
        let both = tape.add(both, both).unwrap();
        tape.masked_cross_entropy(both, &[1, 5, 0, 7], &[true, false, true, true])
            .unwrap()
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_tensor(&mut rng, vec![4, 4]);
            let gain = random_tensor(&mut rng, vec![4]);
            let table = random_tensor(&mut rng, vec![5, 4]);
            let run = |w: &Tensor, gain: &Tensor, table: &Tensor| {
                let mut tape = Tape::new();
                let wv = tape.leaf(w.clone(), true);
                let gv = tape.leaf(gain.clone(), true);
                let tv = tape.leaf(table.clone(), true);
                let loss = composite(&mut tape, wv, gv, tv);
                (tape, [wv, gv, tv], loss)
            };
            let (mut tape, vars, loss) = run(&w, &gain, &table);
            let grads = tape.backward(loss).unwrap();
            let value = |w: &Tensor, g: &Tensor, t: &Tensor| {
                let (tape, _, loss) = run(w, g, t);
                tape.value(loss).item().unwrap()
            };
            assert_close(
                grads.get(vars[0]).unwrap().data(),
                &numeric_grad(&w, &|x| value(x, &gain, &table)),
            );
            assert_close(
                grads.get(vars[1]).unwrap().data(),
                &numeric_grad(&gain, &|x| value(&w, x, &table)),
            );
            assert_close(
                grads.get(vars[2]).unwrap().data(),
                &numeric_grad(&table, &|x| value(&w, &gain, x)),
            );
        }
    }

    #[test]
    fn pick_log_softmax_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random_tensor(&mut rng, vec![3, 5]);
        let weights = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
        let picks = [(0, 4), (2, 1), (2, 3)];
        let run = |l: &Tensor| {
            let mut tape = Tape::new();
            let lv = tape.leaf(l.clone(), true);
            let lp = tape.pick_log_softmax(lv, &picks).unwrap();
            let w = tape.leaf(weights.clone(), false);
            let prod = tape.mul(lp, w).unwrap();
            let s = tape.sum(prod);
            (tape, lv, s)
        };
        let (mut tape, lv, s) = run(&logits);
        let grads = tape.backward(s).unwrap();
        let numeric = numeric_grad(&logits, &|x| {
            let (t, _, s) = run(x);
            t.value(s).item().unwrap()
        });
        assert_close(grads.get(lv).unwrap().data(), &numeric);
    }

    #[test]
    fn masked_rows_receive_exactly_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let logits = tape.leaf(random_tensor(&mut rng, vec![4, 3]), true);
        let loss = tape
            .masked_cross_entropy(logits, &[0, 1, 2, 0], &[false, true, false, true])
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits).unwrap().data();
        assert!(g[0..3].iter().all(|&v| v == 0.0));
        assert!(g[6..9].iter().all(|&v| v == 0.0));
        assert!(g[3..6].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_tensor(&mut rng, vec![4, 4]);
        let gain = random_tensor(&mut rng, vec![4]);
        let table = random_tensor(&mut rng, vec![5, 4]);
        let (a, b) = (0.3, -1.7);
        let grad_of = |combine: Option<(f64, f64)>, which: usize| {
            let mut tape = Tape::new();
            let wv = tape.leaf(w.clone(), true);
            let gv = tape.leaf(gain.clone(), true);
            let tv = tape.leaf(table.clone(), true);
            let l1 = composite(&mut tape, wv, gv, tv);
            let sq = tape.mul(wv, wv).unwrap();
            let l2 = tape.sum(sq);
            let loss = match combine {
                Some((a, b)) => {
                    let x = tape.scale(l1, a);
                    let y = tape.scale(l2, b);
                    tape.add(x, y).unwrap()
                }
                None if which == 1 => l1,
                None => l2,
            };
            let grads = tape.backward(loss).unwrap();
            grads.get(wv).unwrap().data().to_vec()
        };
        let combined = grad_of(Some((a, b)), 0);
        let g1 = grad_of(None, 1);
        let g2 = grad_of(None, 2);
        for i in 0..combined.len() {
            assert!((combined[i] - (a * g1[i] + b * g2[i])).abs() < 1e-10);
        }
    }
}
