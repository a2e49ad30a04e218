//! Define-by-run tape. Every op evaluates eagerly, appends a node and returns
//! a [`Var`] handle; [`Tape::backward`] walks the nodes in reverse.

use std::fmt;

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale,
    Transpose,
    Relu,
    Gelu,
    Softmax,
    MaskKeys,
    LayerNorm,
    RowSelect,
    Concat,
    SliceCols,
    MaskedMean,
    CrossEntropy,
    Sum,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 16] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Transpose,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::MaskKeys,
        OpKind::LayerNorm,
        OpKind::RowSelect,
        OpKind::Concat,
        OpKind::SliceCols,
        OpKind::MaskedMean,
        OpKind::CrossEntropy,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Transpose => "transpose",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::MaskKeys => "mask_keys",
            OpKind::LayerNorm => "layer_norm",
            OpKind::RowSelect => "row_select",
            OpKind::Concat => "concat",
            OpKind::SliceCols => "slice_cols",
            OpKind::MaskedMean => "masked_mean",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::DIFFERENTIABLE
            .iter()
            .copied()
            .chain([OpKind::Leaf])
            .find(|k| k.name() == s)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    MaskKeys(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    RowSelect(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    SliceCols(Var, usize),
    MaskedMean(Var, Vec<bool>),
    CrossEntropy(Var, Vec<usize>, Vec<T>),
    Sum(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::MaskKeys(..) => OpKind::MaskKeys,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::RowSelect(..) => OpKind::RowSelect,
            Op::Concat(..) => OpKind::Concat,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::MaskedMean(..) => OpKind::MaskedMean,
            Op::CrossEntropy(..) => OpKind::CrossEntropy,
            Op::Sum(..) => OpKind::Sum,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
            fault: None,
        }
    }

    /// Reject non-finite op inputs (softmax may still see the `-inf` produced
    /// by key masking).
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    /// Test hook: make the backward rule of `kind` scale its upstream
    /// gradient by 1.5, so gradient checks can prove they catch bad rules.
    #[doc(hidden)]
    pub fn with_fault(mut self, kind: Option<OpKind>) -> Self {
        self.fault = kind;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, op: &'static str, inputs: &[Var]) -> Result<(), TensorError> {
        if !self.check_finite {
            return Ok(());
        }
        let ok = inputs.iter().all(|v| {
            let t = &self.nodes[v.0].value;
            if op == "softmax" {
                t.data().iter().all(|x| !x.is_nan() && *x != T::infinity())
            } else {
                t.is_finite()
            }
        });
        if ok {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check("matmul", &[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros([m, n]);
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            k,
            n,
        );
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum; `b` may have a suffix of `a`'s shape and is then
    /// broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check("add", &[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(self.mismatch("add", a, b));
        }
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for chunk in out.data_mut().chunks_exact_mut(bd.len()) {
            for (o, &x) in chunk.iter_mut().zip(bd) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check("mul", &[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, TensorError> {
        self.check("scale", &[a])?;
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= s);
        Ok(self.push(out, Op::Scale(a, s), &[a]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check("transpose", &[a])?;
        let out = transpose_last2(self.value(a)).ok_or_else(|| TensorError::Invalid {
            op: "transpose",
            message: format!("rank {} < 2", self.value(a).rank()),
        })?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check("relu", &[a])?;
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|x| *x = x.max(T::zero()));
        Ok(self.push(out, Op::Relu(a), &[a]))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check("gelu", &[a])?;
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
        Ok(self.push(out, Op::Gelu(a), &[a]))
    }

    /// Softmax over the last axis. A row that is entirely `-inf` maps to zeros.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check("softmax", &[a])?;
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for row in out.data_mut().chunks_exact_mut(cols) {
            softmax_row(row);
        }
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    /// Set every column at index `>= n_valid` of the last axis to `-inf`:
    /// additive masking of padded keys ahead of a softmax.
    pub fn mask_keys(&mut self, a: Var, n_valid: usize) -> Result<Var, TensorError> {
        self.check("mask_keys", &[a])?;
        let mut out = self.value(a).clone();
        let cols = out.cols();
        if n_valid < cols {
            for row in out.data_mut().chunks_exact_mut(cols) {
                row[n_valid..]
                    .iter_mut()
                    .for_each(|x| *x = T::neg_infinity());
            }
        }
        Ok(self.push(out, Op::MaskKeys(a, n_valid), &[a]))
    }

    /// Normalize each row of the last axis, then apply `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        self.check("layer_norm", &[x, gamma, beta])?;
        let d = self.value(x).cols();
        if self.shape(gamma) != [d] {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.shape(beta) != [d] {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xv.clone();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(xv.rows());
        for ((row, xh), src) in out
            .data_mut()
            .chunks_exact_mut(d)
            .zip(xhat.chunks_exact_mut(d))
            .zip(xv.data().chunks_exact(d))
        {
            let mean = src.iter().map(|x| x.f64()).sum::<f64>() / d as f64;
            let var = src.iter().map(|x| (x.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                let h = (src[j].f64() - mean) * r;
                xh[j] = T::of(h);
                row[j] = T::of(h) * g[j] + b[j];
            }
            rstd.push(T::of(r));
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    /// Gather rows of a `[R, d]` table.
    pub fn row_select(&mut self, table: Var, rows: &[usize]) -> Result<Var, TensorError> {
        self.check("row_select", &[table])?;
        let t = self.value(table);
        if t.rank() != 2 || rows.is_empty() {
            return Err(TensorError::Invalid {
                op: "row_select",
                message: format!("table shape {:?}, {} rows requested", t.shape(), rows.len()),
            });
        }
        let (r, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::Invalid {
                op: "row_select",
                message: format!("row {bad} out of range for {r} rows"),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new([rows.len(), d], data)?;
        Ok(self.push(out, Op::RowSelect(table, rows.to_vec()), &[table]))
    }

    /// Concatenate rank-2 tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        self.check("concat", parts)?;
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            message: "no inputs".into(),
        })?;
        if axis > 1 {
            return Err(TensorError::Invalid {
                op: "concat",
                message: format!("axis {axis} unsupported"),
            });
        }
        for &p in parts {
            let (s0, sp) = (self.shape(first), self.shape(p));
            if sp.len() != 2 || s0.len() != 2 || s0[1 - axis] != sp[1 - axis] {
                return Err(self.mismatch("concat", first, p));
            }
        }
        let out = if axis == 0 {
            let cols = self.shape(first)[1];
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            let rows = data.len() / cols;
            Tensor::new([rows, cols], data)?
        } else {
            let rows = self.shape(first)[0];
            let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for &p in parts {
                    let c = self.shape(p)[1];
                    data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
                }
            }
            Tensor::new([rows, cols], data)?
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        self.check("slice_cols", &[a])?;
        let s = self.shape(a);
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                message: format!("columns {start}..{} of shape {s:?}", start + len),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&src[i * cols + start..i * cols + start + len]);
        }
        let out = Tensor::new([rows, len], data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    /// Mean of the rows of a `[T, d]` tensor where `mask` is true, as `[1, d]`.
    /// With no selected rows the result is all zeros.
    pub fn masked_mean(&mut self, a: Var, mask: &[bool]) -> Result<Var, TensorError> {
        self.check("masked_mean", &[a])?;
        let s = self.shape(a);
        if s.len() != 2 || s[0] != mask.len() {
            return Err(TensorError::Invalid {
                op: "masked_mean",
                message: format!("mask of length {} for shape {s:?}", mask.len()),
            });
        }
        let d = s[1];
        let n = mask.iter().filter(|&&m| m).count();
        let mut acc = vec![0.0f64; d];
        for (row, _) in self
            .value(a)
            .data()
            .chunks_exact(d)
            .zip(mask)
            .filter(|(_, &m)| m)
        {
            for (s, x) in acc.iter_mut().zip(row) {
                *s += x.f64();
            }
        }
        let inv = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        let out = Tensor::new([1, d], acc.into_iter().map(|s| T::of(s * inv)).collect())?;
        Ok(self.push(out, Op::MaskedMean(a, mask.to_vec()), &[a]))
    }

    /// Mean over rows of `-log softmax(logits)[label]` for `[N, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        self.check("cross_entropy", &[logits])?;
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[1] < 2 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                message: format!("{} labels for logits of shape {s:?}", labels.len()),
            });
        }
        let c = s[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange { label, classes: c });
        }
        let mut probs = Vec::with_capacity(labels.len() * c);
        let mut total = 0.0f64;
        for (row, &label) in self.value(logits).data().chunks_exact(c).zip(labels) {
            let max = row
                .iter()
                .map(|x| x.f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x.f64() - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[label].f64();
            probs.extend(row.iter().map(|x| T::of((x.f64() - log_z).exp())));
        }
        let out = Tensor::scalar(T::of(total / labels.len() as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy(logits, labels.to_vec(), probs),
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check("sum", &[a])?;
        let s: f64 = self.value(a).data().iter().map(|x| x.f64()).sum();
        Ok(self.push(Tensor::scalar(T::of(s)), Op::Sum(a), &[a]))
    }

    /// Reverse pass from a scalar. Every trainable leaf gets a gradient,
    /// zero when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_fn(root.value.shape(), |_| T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.data_mut().iter_mut().for_each(|x| *x *= T::of(1.5));
            }
            self.backprop(id, &g, &mut grads);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            let trainable = node.requires_grad && matches!(node.op, Op::Leaf);
            if !trainable {
                grads[id] = None;
            } else if grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    accumulate(grads, *a, av.shape(), |da| {
                        matmul_bt_acc(gd, bv.data(), da, m, k, n)
                    });
                }
                if self.needs(*b) {
                    accumulate(grads, *b, bv.shape(), |db| {
                        matmul_at_acc(av.data(), gd, db, m, k, n)
                    });
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, self.shape(*a), |da| add_into(da, gd));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, self.shape(*b), |db| {
                        for chunk in gd.chunks_exact(db.len()) {
                            add_into(db, chunk);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    accumulate(grads, *a, self.shape(*a), |da| {
                        for ((d, &g), &y) in da.iter_mut().zip(gd).zip(bv) {
                            *d += g * y;
                        }
                    });
                }
                if self.needs(*b) {
                    accumulate(grads, *b, self.shape(*b), |db| {
                        for ((d, &g), &x) in db.iter_mut().zip(gd).zip(av) {
                            *d += g * x;
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                accumulate(grads, *a, self.shape(*a), |da| {
                    for (d, &g) in da.iter_mut().zip(gd) {
                        *d += g * *s;
                    }
                });
            }
            Op::Transpose(a) => {
                let gt = transpose_last2(g).expect("rank checked in forward");
                accumulate(grads, *a, self.shape(*a), |da| add_into(da, gt.data()));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                accumulate(grads, *a, self.shape(*a), |da| {
                    for ((d, &g), &x) in da.iter_mut().zip(gd).zip(x) {
                        if x > T::zero() {
                            *d += g;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                accumulate(grads, *a, self.shape(*a), |da| {
                    for ((d, &g), &x) in da.iter_mut().zip(gd).zip(x) {
                        *d += g * gelu_grad(x);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                accumulate(grads, *a, self.shape(*a), |da| {
                    for ((d, g), y) in da
                        .chunks_exact_mut(cols)
                        .zip(gd.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let dot = g.iter().zip(y).map(|(g, y)| g.f64() * y.f64()).sum::<f64>();
                        let dot = T::of(dot);
                        for j in 0..cols {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::MaskKeys(a, n_valid) => {
                let cols = node.value.cols();
                let keep = (*n_valid).min(cols);
                accumulate(grads, *a, self.shape(*a), |da| {
                    for (d, g) in da.chunks_exact_mut(cols).zip(gd.chunks_exact(cols)) {
                        add_into(&mut d[..keep], &g[..keep]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, &[d], |dg| {
                        for (g, h) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                dg[j] += g[j] * h[j];
                            }
                        }
                    });
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, &[d], |db| {
                        for g in gd.chunks_exact(d) {
                            add_into(db, g);
                        }
                    });
                }
                if self.needs(*x) {
                    let gam = self.value(*gamma).data();
                    accumulate(grads, *x, self.shape(*x), |dx| {
                        for (((dxr, g), h), &r) in dx
                            .chunks_exact_mut(d)
                            .zip(gd.chunks_exact(d))
                            .zip(xhat.chunks_exact(d))
                            .zip(rstd)
                        {
                            let mut mean_dh = 0.0f64;
                            let mut mean_dh_h = 0.0f64;
                            for j in 0..d {
                                let dh = (g[j] * gam[j]).f64();
                                mean_dh += dh;
                                mean_dh_h += dh * h[j].f64();
                            }
                            mean_dh /= d as f64;
                            mean_dh_h /= d as f64;
                            for j in 0..d {
                                let dh = (g[j] * gam[j]).f64();
                                dxr[j] += T::of(r.f64() * (dh - mean_dh - h[j].f64() * mean_dh_h));
                            }
                        }
                    });
                }
            }
            Op::RowSelect(table, rows) => {
                let d = node.value.cols();
                accumulate(grads, *table, self.shape(*table), |dt| {
                    for (g, &r) in gd.chunks_exact(d).zip(rows) {
                        add_into(&mut dt[r * d..(r + 1) * d], g);
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let total_cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    if *axis == 0 {
                        let n = self.value(p).len();
                        if self.needs(p) {
                            accumulate(grads, p, &shape, |dp| {
                                add_into(dp, &gd[offset..offset + n])
                            });
                        }
                        offset += n;
                    } else {
                        let (rows, c) = (shape[0], shape[1]);
                        if self.needs(p) {
                            accumulate(grads, p, &shape, |dp| {
                                for i in 0..rows {
                                    let src =
                                        &gd[i * total_cols + offset..i * total_cols + offset + c];
                                    add_into(&mut dp[i * c..(i + 1) * c], src);
                                }
                            });
                        }
                        offset += c;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let len = node.value.cols();
                let cols = self.value(*a).cols();
                accumulate(grads, *a, self.shape(*a), |da| {
                    for (d, g) in da.chunks_exact_mut(cols).zip(gd.chunks_exact(len)) {
                        add_into(&mut d[*start..*start + len], g);
                    }
                });
            }
            Op::MaskedMean(a, mask) => {
                let d = node.value.cols();
                let n = mask.iter().filter(|&&m| m).count();
                if n > 0 {
                    let inv = T::of(1.0 / n as f64);
                    accumulate(grads, *a, self.shape(*a), |da| {
                        for (row, _) in da.chunks_exact_mut(d).zip(mask).filter(|(_, &m)| m) {
                            for (r, &g) in row.iter_mut().zip(gd) {
                                *r += g * inv;
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy(logits, labels, probs) => {
                let c = self.value(*logits).cols();
                let scale = gd[0] * T::of(1.0 / labels.len() as f64);
                accumulate(grads, *logits, self.shape(*logits), |dl| {
                    for ((d, p), &label) in dl
                        .chunks_exact_mut(c)
                        .zip(probs.chunks_exact(c))
                        .zip(labels)
                    {
                        for j in 0..c {
                            let target = if j == label { T::one() } else { T::zero() };
                            d[j] += scale * (p[j] - target);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                accumulate(grads, *a, self.shape(*a), |da| {
                    da.iter_mut().for_each(|d| *d += g0);
                });
            }
        }
    }
}

/// Gradients of trainable leaves, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
    f: impl FnOnce(&mut [T]),
) {
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_last2<T: Real>(t: &Tensor<T>) -> Option<Tensor<T>> {
    let rank = t.rank();
    if rank < 2 {
        return None;
    }
    let (r, c) = (t.shape()[rank - 2], t.shape()[rank - 1]);
    let mut shape = t.shape().to_vec();
    shape.swap(rank - 2, rank - 1);
    let mut data = vec![T::zero(); t.len()];
    for (src, dst) in t
        .data()
        .chunks_exact(r * c)
        .zip(data.chunks_exact_mut(r * c))
    {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    Tensor::new(shape, data).ok()
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += x.f64();
    }
    let inv = T::of(1.0 / sum);
    row.iter_mut().for_each(|x| *x *= inv);
}

/// `σ(2u)` for the tanh-GELU inner argument `u`, using `1 + tanh(u) = 2σ(2u)`:
/// one `exp` instead of `tanh`, and saturates cleanly at ±∞.
fn gelu_gate<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

fn gelu<T: Real>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_grad<T: Real>(x: T) -> T {
    let s = gelu_gate(x);
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    // d/dx [x·σ(2u)] = σ(2u) + x · 2σ(2u)(1 − σ(2u)) · u'
    s + (x + x) * s * (T::one() - s) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = tape.constant(Tensor::from_fn(
            [3, 3],
            |i| if i % 4 == 0 { 1.0 } else { 0.0 },
        ));
        let y = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([1, 5]));
        let y = tape.softmax(a).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 0.2).abs() < 1e-7);
        }
    }

    #[test]
    fn fully_masked_softmax_row_is_zero() {
        let mut tape = Tape::<f32>::new().with_finite_checks();
        let a = tape.constant(Tensor::from_fn([2, 3], |i| i as f32));
        let m = tape.mask_keys(a, 0).unwrap();
        let y = tape.softmax(m).unwrap();
        assert!(tape.value(y).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn finite_checks_reject_nan() {
        let mut tape = Tape::<f32>::new().with_finite_checks();
        let a = tape.constant(Tensor::new([2], vec![1.0, f32::NAN]).unwrap());
        assert_eq!(
            tape.relu(a).unwrap_err(),
            TensorError::NonFinite { op: "relu" }
        );
        let mut lax = Tape::<f32>::new();
        let a = lax.constant(Tensor::new([2], vec![1.0, f32::NAN]).unwrap());
        assert!(lax.relu(a).is_ok());
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn([3, 16], |i| ((i * 7919) % 23) as f32 - 4.0));
        let g = tape.constant(Tensor::from_fn([16], |_| 1.0));
        let b = tape.constant(Tensor::zeros([16]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for row in tape.value(y).data().chunks(16) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        let mut tape = Tape::<f32>::new();
        let uniform = tape.constant(Tensor::from_fn([3, 5], |_| 0.7));
        let l = tape.cross_entropy(uniform, &[0, 3, 4]).unwrap();
        assert!((tape.value(l).item() as f64 - 5f64.ln()).abs() < 1e-5);

        let sat = tape.constant(Tensor::new([1, 2], vec![20.0, -20.0]).unwrap());
        let l = tape.cross_entropy(sat, &[0]).unwrap();
        assert!(tape.value(l).item() < 1e-6);

        assert_eq!(
            tape.cross_entropy(sat, &[2]).unwrap_err(),
            TensorError::LabelOutOfRange {
                label: 2,
                classes: 2
            }
        );
    }

    #[test]
    fn square_sum_gradient_is_two_w() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(t(&[2, 2], &[1.5, -2.0, 0.25, 3.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(w).unwrap();
        for (gi, wi) in g.data().iter().zip(tape.value(w).data()) {
            assert_eq!(*gi, 2.0 * wi);
        }
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::from_fn([3], |i| i as f32));
        let unused = tape.param(Tensor::from_fn([2, 2], |_| 1.0));
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros([2, 2]));
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::zeros([2]));
        assert!(matches!(
            tape.backward(w),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn add_broadcasts_over_leading_axes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[2, 3], &[0.0; 6]));
        let b = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        let c = tape.constant(t(&[2], &[0.0, 0.0]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn([2, 3], |i| i as f64));
        let left = tape.slice_cols(a, 0, 1).unwrap();
        let right = tape.slice_cols(a, 1, 2).unwrap();
        let joined = tape.concat(&[left, right], 1).unwrap();
        assert_eq!(tape.value(joined), tape.value(a));
        let stacked = tape.concat(&[a, a], 0).unwrap();
        assert_eq!(tape.shape(stacked), &[4, 3]);
    }

    #[test]
    fn masked_mean_with_no_rows_is_zero() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param(Tensor::from_fn([3, 2], |i| i as f32 + 1.0));
        let m = tape.masked_mean(a, &[false, false, false]).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0, 0.0]);
        let m = tape.masked_mean(a, &[true, false, true]).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 4.0]);
    }

    #[test]
    fn gelu_matches_tanh_form() {
        for i in -80..=80 {
            let x = i as f64 * 0.1;
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            let reference = 0.5 * x * (1.0 + t);
            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            let reference_grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            assert!((gelu(x) - reference).abs() < 1e-14, "{x}");
            assert!((gelu_grad(x) - reference_grad).abs() < 1e-14, "{x}");
        }
        assert!((gelu(1.0f64) - 0.841_191_990_608_276_8).abs() < 1e-15);
        assert_eq!(gelu(-1e4f32), 0.0);
        assert_eq!(gelu(1e4f32), 1e4);
    }

    #[test]
    fn op_names_roundtrip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::parse(k.name()), Some(k));
        }
    }
}
