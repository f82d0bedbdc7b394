//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Operations append nodes in topological order during the forward pass;
//! [`Tape::backward`] walks the list once in reverse and accumulates
//! vector-Jacobian products into every parameter slot. Tapes are built per
//! training step and discarded; independent tapes may run on separate
//! threads.
//!
//! Broadcasting is deliberately narrow: element-wise binary ops accept
//! operands of the same shape or one scalar operand. Row replication of a
//! bias vector is its own primitive ([`Tape::broadcast_rows`]) whose
//! gradient is a column sum.

use crate::special;
use crate::tensor::{matmul_into, Tensor, TensorError};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    AddScalar(VarId),
    Scale(VarId, f64),
    Neg(VarId),
    Abs(VarId),
    Relu(VarId),
    Tanh(VarId),
    Exp(VarId),
    Log(VarId),
    Softplus(VarId),
    Sigmoid(VarId),
    LnGamma(VarId),
    BroadcastRows(VarId, usize),
    Sum(VarId),
    Mean(VarId),
    LogSumExpRows(VarId),
    GatherLabels(VarId, Vec<usize>),
    SelectColumn(VarId, usize),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients per parameter slot, in registration order.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Tensor>,
}

impl Gradients {
    pub fn slot(&self, i: usize) -> &Tensor {
        &self.slots[i]
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.slots.iter()
    }

    /// Global Euclidean norm across all slots.
    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every slot in place (gradient clipping).
    pub fn scale_all(&mut self, c: f64) {
        for g in &mut self.slots {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<VarId>,
}

enum BinCase {
    Same,
    LeftScalar,
    RightScalar,
}

fn bin_case(a: &Tensor, b: &Tensor, op: &'static str) -> Result<BinCase, TensorError> {
    if a.shape() == b.shape() {
        Ok(BinCase::Same)
    } else if a.is_scalar() {
        Ok(BinCase::LeftScalar)
    } else if b.is_scalar() {
        Ok(BinCase::RightScalar)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> VarId {
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Register a trainable leaf. Its gradient is populated by `backward`.
    pub fn param(&mut self, value: Tensor) -> VarId {
        let id = self.push(Op::Leaf, value);
        self.params.push(id);
        id
    }

    /// Register a non-trainable leaf (inputs, targets, masks).
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), value))
    }

    fn binary(
        &mut self,
        a: VarId,
        b: VarId,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(VarId, VarId) -> Op,
    ) -> Result<VarId, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = match bin_case(ta, tb, op)? {
            BinCase::Same => ta.zip(tb, op, f)?,
            BinCase::LeftScalar => {
                let s = ta.data()[0];
                tb.map(op, |v| f(s, v))?
            }
            BinCase::RightScalar => {
                let s = tb.data()[0];
                ta.map(op, |v| f(v, s))?
            }
        };
        Ok(self.push(make(a, b), value))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> Result<VarId, TensorError> {
        let value = self.value(a).map("add_scalar", |v| v + c)?;
        Ok(self.push(Op::AddScalar(a), value))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId, TensorError> {
        let value = self.value(a).map("scale", |v| c * v)?;
        Ok(self.push(Op::Scale(a, c), value))
    }

    fn unary(
        &mut self,
        a: VarId,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        make: impl Fn(VarId) -> Op,
    ) -> Result<VarId, TensorError> {
        let value = self.value(a).map(op, f)?;
        Ok(self.push(make(a), value))
    }

    pub fn neg(&mut self, a: VarId) -> Result<VarId, TensorError> {
        self.unary(a, "neg", |v| -v, Op::Neg)
    }

    pub fn abs(&mut self, a: VarId) -> Result<VarId, TensorError> {
        self.unary(a, "abs", f64::abs, Op::Abs)
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId, TensorError> {
        self.unary(a, "relu", |v| v.max(0.0), Op::Relu)
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId, TensorError> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh)
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId, TensorError> {
        self.unary(a, "exp", f64::exp, Op::Exp)
    }

    /// Natural log; any non-positive input is a domain error.
    pub fn log(&mut self, a: VarId) -> Result<VarId, TensorError> {
        if let Some(bad) = self.value(a).data().iter().find(|v| **v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                value: *bad,
            });
        }
        self.unary(a, "log", f64::ln, Op::Log)
    }

    pub fn softplus(&mut self, a: VarId) -> Result<VarId, TensorError> {
        self.unary(a, "softplus", special::softplus, Op::Softplus)
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId, TensorError> {
        self.unary(a, "sigmoid", special::sigmoid, Op::Sigmoid)
    }

    /// Log-gamma; inputs must be strictly positive.
    pub fn ln_gamma(&mut self, a: VarId) -> Result<VarId, TensorError> {
        if let Some(bad) = self.value(a).data().iter().find(|v| **v <= 0.0) {
            return Err(TensorError::Domain {
                op: "ln_gamma",
                value: *bad,
            });
        }
        self.unary(a, "ln_gamma", special::ln_gamma, Op::LnGamma)
    }

    /// Replicate a `1 x d` row vector into `n x d`.
    pub fn broadcast_rows(&mut self, a: VarId, n: usize) -> Result<VarId, TensorError> {
        let t = self.value(a);
        if t.rows()? != 1 {
            return Err(TensorError::NotAMatrix {
                op: "broadcast_rows",
                shape: t.shape().to_vec(),
            });
        }
        let d = t.cols()?;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(vec![n, d], data)?;
        Ok(self.push(Op::BroadcastRows(a, n), value))
    }

    pub fn sum(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let s: f64 = self.value(a).data().iter().sum();
        let value = Tensor::scalar(s);
        value.ensure_finite("sum")?;
        Ok(self.push(Op::Sum(a), value))
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let value = Tensor::scalar(s);
        value.ensure_finite("mean")?;
        Ok(self.push(Op::Mean(a), value))
    }

    /// Row-wise `ln sum_j exp(x_ij)`, max-subtracted for stability.
    /// Input `n x c`, output `n x 1`.
    pub fn logsumexp_rows(&mut self, a: VarId) -> Result<VarId, TensorError> {
        let t = self.value(a);
        let (n, c) = (t.rows()?, t.cols()?);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = &t.data()[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            out.push(m + s.ln());
        }
        let value = Tensor::from_vec(vec![n, 1], out)?;
        value.ensure_finite("logsumexp_rows")?;
        Ok(self.push(Op::LogSumExpRows(a), value))
    }

    /// Pick `x[i, labels[i]]` per row. Input `n x c`, output `n x 1`.
    pub fn gather_labels(&mut self, a: VarId, labels: &[usize]) -> Result<VarId, TensorError> {
        let t = self.value(a);
        let (n, c) = (t.rows()?, t.cols()?);
        if labels.len() != n {
            return Err(TensorError::DataLength {
                op: "gather_labels",
                shape: t.shape().to_vec(),
                expected: n,
                got: labels.len(),
            });
        }
        let mut out = Vec::with_capacity(n);
        for (i, &lab) in labels.iter().enumerate() {
            if lab >= c {
                return Err(TensorError::ColumnOutOfBounds { col: lab, cols: c });
            }
            out.push(t.get2(i, lab));
        }
        let value = Tensor::from_vec(vec![n, 1], out)?;
        Ok(self.push(Op::GatherLabels(a, labels.to_vec()), value))
    }

    /// Column `j` of a matrix as `n x 1`.
    pub fn select_column(&mut self, a: VarId, j: usize) -> Result<VarId, TensorError> {
        let t = self.value(a);
        let (n, c) = (t.rows()?, t.cols()?);
        if j >= c {
            return Err(TensorError::ColumnOutOfBounds { col: j, cols: c });
        }
        let out: Vec<f64> = (0..n).map(|i| t.get2(i, j)).collect();
        let value = Tensor::from_vec(vec![n, 1], out)?;
        Ok(self.push(Op::SelectColumn(a, j), value))
    }

    /// Reverse pass from a scalar loss node.
    ///
    /// Returns one gradient tensor per parameter slot, in registration
    /// order; parameters the loss does not reach get zero gradients.
    pub fn backward(&mut self, loss: VarId) -> Result<Gradients, TensorError> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            // Re-attach so params above the loss node keep their grads.
            grads[idx] = Some(g);
            let g = grads[idx].as_ref().unwrap().clone();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ta = self.value(a);
                    let tb = self.value(b);
                    let (m, k) = (ta.rows()?, ta.cols()?);
                    let n = tb.cols()?;
                    let (adata, bdata) = (ta.data().to_vec(), tb.data().to_vec());
                    {
                        // dA = g . B^T : dA[i,p] = sum_j g[i,j] B[p,j]
                        let da = ensure(&mut grads, a.0, m * k);
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let b_row = &bdata[p * n..(p + 1) * n];
                                let mut acc = 0.0;
                                for (gv, bv) in g_row.iter().zip(b_row) {
                                    acc += gv * bv;
                                }
                                da[i * k + p] += acc;
                            }
                        }
                    }
                    {
                        // dB = A^T . g : dB[p,j] += A[i,p] g[i,j]
                        let db = ensure(&mut grads, b.0, k * n);
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let a_ip = adata[i * k + p];
                                if a_ip == 0.0 {
                                    continue;
                                }
                                let db_row = &mut db[p * n..(p + 1) * n];
                                for (d, gv) in db_row.iter_mut().zip(g_row) {
                                    *d += a_ip * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.bin_backward(&mut grads, a, b, &g, |_, _| 1.0, |_, _| 1.0)?;
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.bin_backward(&mut grads, a, b, &g, |_, _| 1.0, |_, _| -1.0)?;
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    self.bin_backward(&mut grads, a, b, &g, |_, y| y, |x, _| x)?;
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    self.bin_backward(
                        &mut grads,
                        a,
                        b,
                        &g,
                        |_, y| 1.0 / y,
                        |x, y| -x / (y * y),
                    )?;
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    let da = ensure(&mut grads, a.0, g.len());
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let da = ensure(&mut grads, a.0, g.len());
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += c * gv;
                    }
                }
                Op::Neg(a) => self.unary_backward(&mut grads, *a, idx, &g, |x, _| {
                    let _ = x;
                    -1.0
                }),
                Op::Abs(a) => self.unary_backward(&mut grads, *a, idx, &g, |x, _| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }),
                Op::Relu(a) => {
                    self.unary_backward(&mut grads, *a, idx, &g, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
                }
                Op::Tanh(a) => self.unary_backward(&mut grads, *a, idx, &g, |_, y| 1.0 - y * y),
                Op::Exp(a) => self.unary_backward(&mut grads, *a, idx, &g, |_, y| y),
                Op::Log(a) => self.unary_backward(&mut grads, *a, idx, &g, |x, _| 1.0 / x),
                Op::Softplus(a) => {
                    self.unary_backward(&mut grads, *a, idx, &g, |x, _| special::sigmoid(x))
                }
                Op::Sigmoid(a) => self.unary_backward(&mut grads, *a, idx, &g, |_, y| y * (1.0 - y)),
                Op::LnGamma(a) => {
                    self.unary_backward(&mut grads, *a, idx, &g, |x, _| special::digamma(x))
                }
                Op::BroadcastRows(a, n) => {
                    let (a, n) = (*a, *n);
                    let d = g.len() / n;
                    let da = ensure(&mut grads, a.0, d);
                    for i in 0..n {
                        for j in 0..d {
                            da[j] += g[i * d + j];
                        }
                    }
                }
                Op::Sum(a) => {
                    let a = *a;
                    let len = self.value(a).len();
                    let da = ensure(&mut grads, a.0, len);
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Mean(a) => {
                    let a = *a;
                    let len = self.value(a).len();
                    let gv = g[0] / len as f64;
                    let da = ensure(&mut grads, a.0, len);
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                }
                Op::LogSumExpRows(a) => {
                    let a = *a;
                    let ta = self.value(a);
                    let (n, c) = (ta.rows()?, ta.cols()?);
                    let out = self.nodes[idx].value.data().to_vec();
                    let tdata = ta.data().to_vec();
                    let da = ensure(&mut grads, a.0, n * c);
                    for i in 0..n {
                        for j in 0..c {
                            // softmax_ij = exp(x_ij - lse_i)
                            da[i * c + j] += g[i] * (tdata[i * c + j] - out[i]).exp();
                        }
                    }
                }
                Op::GatherLabels(a, labels) => {
                    let a = *a;
                    let labels = labels.clone();
                    let c = self.value(a).cols()?;
                    let da = ensure(&mut grads, a.0, labels.len() * c);
                    for (i, lab) in labels.iter().enumerate() {
                        da[i * c + lab] += g[i];
                    }
                }
                Op::SelectColumn(a, j) => {
                    let (a, j) = (*a, *j);
                    let ta = self.value(a);
                    let (n, c) = (ta.rows()?, ta.cols()?);
                    let da = ensure(&mut grads, a.0, n * c);
                    for i in 0..n {
                        da[i * c + j] += g[i];
                    }
                }
            }
        }

        let mut slots = Vec::with_capacity(self.params.len());
        for pid in &self.params {
            let shape = self.value(*pid).shape().to_vec();
            let grad = match grads[pid.0].take() {
                Some(data) => Tensor::from_vec(shape, data)?,
                None => Tensor::zeros(shape),
            };
            grad.ensure_finite("backward")?;
            slots.push(grad);
        }
        Ok(Gradients { slots })
    }

    /// Gradient w.r.t. all nodes for probes in tests: recomputes backward
    /// and returns the gradient of a specific node.
    pub fn grad_of(&mut self, loss: VarId, node: VarId) -> Result<Tensor, TensorError> {
        // Temporarily register the node as a parameter slot.
        self.params.push(node);
        let result = self.backward(loss);
        self.params.pop();
        result.map(|g| g.slots.last().unwrap().clone())
    }

    fn unary_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: VarId,
        node_idx: usize,
        g: &[f64],
        dfdx: impl Fn(f64, f64) -> f64,
    ) {
        let x = self.value(a).data();
        let y = self.nodes[node_idx].value.data();
        let da = ensure(grads, a.0, g.len());
        for i in 0..g.len() {
            da[i] += g[i] * dfdx(x[i], y[i]);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bin_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: VarId,
        b: VarId,
        g: &[f64],
        dfda: impl Fn(f64, f64) -> f64,
        dfdb: impl Fn(f64, f64) -> f64,
    ) -> Result<(), TensorError> {
        let ta = self.value(a);
        let tb = self.value(b);
        let case = bin_case(ta, tb, "backward")?;
        let (xa, xb) = (ta.data(), tb.data());
        match case {
            BinCase::Same => {
                {
                    let da = ensure(grads, a.0, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * dfda(xa[i], xb[i]);
                    }
                }
                let db = ensure(grads, b.0, g.len());
                for i in 0..g.len() {
                    db[i] += g[i] * dfdb(xa[i], xb[i]);
                }
            }
            BinCase::LeftScalar => {
                let s = xa[0];
                {
                    let da = ensure(grads, a.0, 1);
                    for i in 0..g.len() {
                        da[0] += g[i] * dfda(s, xb[i]);
                    }
                }
                let db = ensure(grads, b.0, g.len());
                for i in 0..g.len() {
                    db[i] += g[i] * dfdb(s, xb[i]);
                }
            }
            BinCase::RightScalar => {
                let s = xb[0];
                {
                    let da = ensure(grads, a.0, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * dfda(xa[i], s);
                    }
                }
                let db = ensure(grads, b.0, 1);
                for i in 0..g.len() {
                    db[0] += g[i] * dfdb(xa[i], s);
                }
            }
        }
        Ok(())
    }
}

fn ensure(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

/// Batched matrix product into a preallocated buffer (re-exported for the
/// optimizer hot path).
pub fn matmul_raw(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_into(a, b, out, m, k, n);
}
