//! Reverse-mode automatic differentiation over dense [`Tensor`]s.
//!
//! Operations are recorded on a [`Tape`] in execution order; [`Tape::backward`]
//! walks the records once in reverse and accumulates adjoints. Trainable
//! tensors live in a [`Params`] registry and are bound into a tape per forward
//! pass, so several tapes can run over one immutable parameter snapshot.

use crate::error::{FlameError, Result};
use crate::tensor::{gelu, gelu_prime, sigmoid, softplus, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a trainable tensor inside [`Params`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Registry of trainable tensors with accumulated gradients.
///
/// Gradients accumulate across backward passes and must be zeroed explicitly.
#[derive(Default)]
pub struct Params {
    entries: Vec<ParamEntry>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for g in e.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Mutable (value, grad) views for every parameter, in registration order.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &mut Tensor)> {
        self.entries
            .iter_mut()
            .map(|e| (e.name.as_str(), &mut e.value, &mut e.grad))
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Gelu(usize),
    Softplus(usize),
    SoftmaxRows(usize),
    Sum(usize),
    Mean(usize),
    Scale(usize, f64),
    AddConst(usize, f64),
    AddBias(usize, usize),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    PadCols(usize, usize, usize),
    LayerNormRows {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    GaussianLogPdf(usize),
}

/// Recorded computation: values plus the op that produced each of them.
pub struct Tape {
    vals: Vec<Tensor>,
    ops: Vec<Op>,
    param_of: Vec<Option<ParamId>>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            param_of: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, param: Option<ParamId>) -> Var {
        self.vals.push(value);
        self.ops.push(op);
        self.param_of.push(param);
        Var(self.vals.len() - 1)
    }

    /// Record a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, None)
    }

    /// Bind a parameter as a leaf; its gradient is collected by
    /// [`Tape::accumulate_grads`].
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Leaf, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.vals[a.0].add(&self.vals[b.0])?;
        Ok(self.push(v, Op::Add(a.0, b.0), None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.vals[a.0].sub(&self.vals[b.0])?;
        Ok(self.push(v, Op::Sub(a.0, b.0), None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.vals[a.0].mul(&self.vals[b.0])?;
        Ok(self.push(v, Op::Mul(a.0, b.0), None))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.vals[a.0].matmul(&self.vals[b.0])?;
        Ok(self.push(v, Op::MatMul(a.0, b.0), None))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.vals[x.0].transpose()?;
        Ok(self.push(v, Op::Transpose(x.0), None))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].map(f64::exp);
        self.push(v, Op::Exp(x.0), None)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].map(f64::ln);
        self.push(v, Op::Log(x.0), None)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].map(f64::tanh);
        self.push(v, Op::Tanh(x.0), None)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].map(gelu);
        self.push(v, Op::Gelu(x.0), None)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.vals[x.0].map(softplus);
        self.push(v, Op::Softplus(x.0), None)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.vals[x.0].softmax_rows()?;
        Ok(self.push(v, Op::SoftmaxRows(x.0), None))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.vals[x.0].sum());
        self.push(v, Op::Sum(x.0), None)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.vals[x.0].mean());
        self.push(v, Op::Mean(x.0), None)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.vals[x.0].scale(c);
        self.push(v, Op::Scale(x.0, c), None)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.vals[x.0].add_scalar(c);
        self.push(v, Op::AddConst(x.0, c), None)
    }

    /// Broadcast a bias row over every row of a 2-D value.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let v = self.vals[x.0].add_bias(&self.vals[b.0])?;
        Ok(self.push(v, Op::AddBias(x.0, b.0), None))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.vals[x.0].slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows(x.0, start, len), None))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.vals[x.0].slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols(x.0, start, len), None))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| &self.vals[v.0]).collect();
        let v = Tensor::concat_rows(&tensors)?;
        Ok(self.push(v, Op::ConcatRows(parts.iter().map(|v| v.0).collect()), None))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| &self.vals[v.0]).collect();
        let v = Tensor::concat_cols(&tensors)?;
        Ok(self.push(v, Op::ConcatCols(parts.iter().map(|v| v.0).collect()), None))
    }

    pub fn pad_cols(&mut self, x: Var, total: usize, offset: usize) -> Result<Var> {
        let v = self.vals[x.0].pad_cols(total, offset)?;
        Ok(self.push(v, Op::PadCols(x.0, total, offset), None))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = self.vals[x.0].layer_norm_rows(&self.vals[gamma.0], &self.vals[beta.0], eps)?;
        Ok(self.push(
            v,
            Op::LayerNormRows {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            None,
        ))
    }

    /// Scalar sum of standard-normal log densities over all entries.
    pub fn gaussian_logpdf(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.vals[x.0].gaussian_logpdf_sum());
        self.push(v, Op::GaussianLogPdf(x.0), None)
    }

    /// `x · (W ⊙ M) + b` where the mask `M` is a constant.
    ///
    /// Callers that reuse one layer many times may pre-compute the masked
    /// weight with [`Tape::mul`] and share it.
    pub fn masked_linear(&mut self, x: Var, w: Var, mask: Var, b: Var) -> Result<Var> {
        let wm = self.mul(w, mask)?;
        let xw = self.matmul(x, wm)?;
        self.add_bias(xw, b)
    }

    /// Plain affine layer `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn add_grad(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
        match &mut grads[idx] {
            Some(g) => {
                let sum = g.add(&delta).expect("gradient shape mismatch");
                *g = sum;
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Run reverse-mode accumulation from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.vals[loss.0].is_scalar() {
            return Err(FlameError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(Tensor::from_vec(
            self.vals[loss.0].shape(),
            vec![1.0],
        )?);

        for i in (0..self.ops.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.ops[i] {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    Self::add_grad(&mut grads, *a, g.clone());
                    Self::add_grad(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    Self::add_grad(&mut grads, *a, g.clone());
                    Self::add_grad(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    Self::add_grad(&mut grads, *a, g.mul(&self.vals[*b])?);
                    Self::add_grad(&mut grads, *b, g.mul(&self.vals[*a])?);
                }
                Op::MatMul(a, b) => {
                    let bt = self.vals[*b].transpose()?;
                    let at = self.vals[*a].transpose()?;
                    Self::add_grad(&mut grads, *a, g.matmul(&bt)?);
                    Self::add_grad(&mut grads, *b, at.matmul(&g)?);
                }
                Op::Transpose(x) => {
                    Self::add_grad(&mut grads, *x, g.transpose()?);
                }
                Op::Exp(x) => {
                    Self::add_grad(&mut grads, *x, g.mul(&self.vals[i])?);
                }
                Op::Log(x) => {
                    let inv = self.vals[*x].map(|v| 1.0 / v);
                    Self::add_grad(&mut grads, *x, g.mul(&inv)?);
                }
                Op::Tanh(x) => {
                    let d = self.vals[i].map(|y| 1.0 - y * y);
                    Self::add_grad(&mut grads, *x, g.mul(&d)?);
                }
                Op::Gelu(x) => {
                    let d = self.vals[*x].map(gelu_prime);
                    Self::add_grad(&mut grads, *x, g.mul(&d)?);
                }
                Op::Softplus(x) => {
                    let d = self.vals[*x].map(sigmoid);
                    Self::add_grad(&mut grads, *x, g.mul(&d)?);
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.vals[i];
                    let n = y.cols();
                    let mut dx = g.mul(y)?;
                    for r in 0..y.rows() {
                        let dot: f64 = (0..n).map(|c| g.get2(r, c) * y.get2(r, c)).sum();
                        for c in 0..n {
                            let v = dx.get2(r, c) - dot * y.get2(r, c);
                            dx.set2(r, c, v);
                        }
                    }
                    Self::add_grad(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let s = g.scalar_value();
                    let d = self.vals[*x].map(|_| s);
                    Self::add_grad(&mut grads, *x, d);
                }
                Op::Mean(x) => {
                    let s = g.scalar_value() / self.vals[*x].len() as f64;
                    let d = self.vals[*x].map(|_| s);
                    Self::add_grad(&mut grads, *x, d);
                }
                Op::Scale(x, c) => {
                    Self::add_grad(&mut grads, *x, g.scale(*c));
                }
                Op::AddConst(x, _) => {
                    Self::add_grad(&mut grads, *x, g);
                }
                Op::AddBias(x, b) => {
                    let db = g.sum_rows()?;
                    let db = if self.vals[*b].shape().len() == 1 {
                        Tensor::from_vec(self.vals[*b].shape(), db.into_data())?
                    } else {
                        db
                    };
                    Self::add_grad(&mut grads, *x, g);
                    Self::add_grad(&mut grads, *b, db);
                }
                Op::SliceRows(x, start, _len) => {
                    let src = &self.vals[*x];
                    let d = g.pad_rows_like(src, *start)?;
                    Self::add_grad(&mut grads, *x, d);
                }
                Op::SliceCols(x, start, _len) => {
                    let src = &self.vals[*x];
                    let d = g.pad_cols(src.cols(), *start)?;
                    Self::add_grad(&mut grads, *x, d);
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let m = self.vals[p].rows();
                        let block = g.slice_rows(row, m)?;
                        Self::add_grad(&mut grads, p, block);
                        row += m;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let n = self.vals[p].cols();
                        let block = g.slice_cols(col, n)?;
                        Self::add_grad(&mut grads, p, block);
                        col += n;
                    }
                }
                Op::PadCols(x, _total, offset) => {
                    let n = self.vals[*x].cols();
                    let d = g.slice_cols(*offset, n)?;
                    Self::add_grad(&mut grads, *x, d);
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let xv = &self.vals[*x];
                    let gv = &self.vals[*gamma];
                    let n = xv.cols();
                    let nf = n as f64;
                    let mut dx = Tensor::zeros(xv.shape());
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for r in 0..xv.rows() {
                        let mean: f64 = (0..n).map(|c| xv.get2(r, c)).sum::<f64>() / nf;
                        let var: f64 = (0..n)
                            .map(|c| {
                                let d = xv.get2(r, c) - mean;
                                d * d
                            })
                            .sum::<f64>()
                            / nf;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> =
                            (0..n).map(|c| (xv.get2(r, c) - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            (0..n).map(|c| g.get2(r, c) * gv.data()[c]).collect();
                        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / nf;
                        let mean_dxhat_xhat: f64 = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / nf;
                        for c in 0..n {
                            dgamma[c] += g.get2(r, c) * xhat[c];
                            dbeta[c] += g.get2(r, c);
                            let v = inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                            dx.set2(r, c, dx.get2(r, c) + v);
                        }
                    }
                    Self::add_grad(&mut grads, *x, dx);
                    Self::add_grad(
                        &mut grads,
                        *gamma,
                        Tensor::from_vec(gv.shape(), dgamma)?,
                    );
                    Self::add_grad(
                        &mut grads,
                        *beta,
                        Tensor::from_vec(self.vals[*beta].shape(), dbeta)?,
                    );
                }
                Op::GaussianLogPdf(x) => {
                    let s = g.scalar_value();
                    let d = self.vals[*x].map(|v| -v * s);
                    Self::add_grad(&mut grads, *x, d);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. a recorded value.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Add leaf gradients into the parameter registry (`+=` semantics).
    /// Parameters never touched by the loss keep their current gradient.
    pub fn accumulate_grads(&self, params: &mut Params) {
        for (i, p) in self.param_of.iter().enumerate() {
            if let (Some(id), Some(g)) = (p, self.grads.get(i).and_then(|g| g.as_ref())) {
                let entry = &mut params.entries[id.0];
                let sum = entry.grad.add(g).expect("param grad shape mismatch");
                entry.grad = sum;
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tensor {
    /// Inverse of `slice_rows`: place `self` into a zero tensor shaped like
    /// `like`, starting at row `start`.
    fn pad_rows_like(&self, like: &Tensor, start: usize) -> Result<Tensor> {
        let n = like.cols();
        let mut out = Tensor::zeros(like.shape());
        let src = self.data();
        let rows = self.rows();
        for r in 0..rows {
            let dst_row = start + r;
            let dst = &mut out.data_mut()[dst_row * n..(dst_row + 1) * n];
            dst.copy_from_slice(&src[r * n..(r + 1) * n]);
        }
        Ok(out)
    }
}
