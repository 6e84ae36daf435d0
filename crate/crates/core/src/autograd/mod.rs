//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter the
//! tape through [`Tape::param`] and come back out of [`Tape::backward`] as
//! [`Gradients`] keyed by [`ParamId`]. Anything created with
//! [`Tape::constant`] is treated as data and never receives a gradient.

pub mod conv;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

pub use conv::ConvGeom;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics measured by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (divisor = element count).
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    BroadcastRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Sum(Var),
    SumSquares(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor,
        targets: Vec<usize>,
    },
    GaussianLogProb {
        mean: Var,
        sample: Tensor,
        sigma: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.by_param.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Global L2 norm over every gradient entry.
    pub fn norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.by_param.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_of: HashMap<usize, ParamId>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Bind a parameter; repeated calls for one id return the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, store.is_trainable(id));
        self.params.insert(id, v);
        self.param_of.insert(v.0, id);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return shape_err(format!("matmul {m}×{k} by {k2}×{n}"));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x (m×n) + b (n)` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(b).len() != n {
            return shape_err(format!("bias of {} entries for {m}×{n} rows", self.value(b).len()));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRowBias(x, b), rg))
    }

    /// `x · w + b` for a row batch `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{name} of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return shape_err(format!("add_const {:?} and {:?}", self.shape(x), c.shape()));
        }
        let mut out = self.value(x).clone();
        out.add_assign(c);
        Ok(self.unary(x, out, Op::AddConst(x)))
    }

    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return shape_err(format!("mul_const {:?} and {:?}", self.shape(x), c.shape()));
        }
        let data = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(c.shape().to_vec(), data)?;
        Ok(self.unary(x, out, Op::MulConst(x, c)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.unary(x, out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.unary(x, out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.unary(x, out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.unary(x, out, Op::Tanh(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, out, Op::Reshape(x)))
    }

    /// Repeat a vector of `n` entries as `rows` rows of an `rows×n` matrix.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let v = self.value(x).data().to_vec();
        let n = v.len();
        let data = v.iter().copied().cycle().take(rows * n).collect();
        let out = Tensor::new(vec![rows, n], data)?;
        Ok(self.unary(x, out, Op::BroadcastRows(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > n {
            return shape_err(format!("columns {start}..{} of {m}×{n}", start + len));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.unary(x, out, Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != m {
                return shape_err(format!("concat_cols with {r} rows, expected {m}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::new(vec![m, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start + len > m {
            return shape_err(format!("rows {start}..{} of {m}×{n}", start + len));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        Ok(self.unary(x, out, Op::SliceRows(x, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != n {
                return shape_err(format!("concat_rows with {c} columns, expected {n}"));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.unary(x, out, Op::Transpose(x)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.unary(x, out, Op::SoftmaxRows(x)))
    }

    /// Row-wise layer normalization followed by the affine `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return shape_err(format!("layer norm affine params must have {n} entries"));
        }
        let (xhat, inv_std) = layer_norm_rows(self.value(x))?;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(n) {
            for ((o, gv), bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Var, padding: [usize; 3]) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), padding)?;
        if self.value(b).len() != geom.out_ch {
            return shape_err(format!(
                "conv bias has {} entries for {} output channels",
                self.value(b).len(),
                geom.out_ch
            ));
        }
        let y = conv::conv_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let out = Tensor::new(geom.output_shape(), y)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn max_pool(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        if factor == [1, 1, 1] {
            return Ok(x);
        }
        let (y, shape, argmax) = conv::maxpool_forward(self.value(x).data(), self.shape(x), factor)?;
        let out = Tensor::new(shape, y)?;
        Ok(self.unary(x, out, Op::MaxPool { x, argmax }))
    }

    /// Batch normalization over every axis except the channel axis (axis 1).
    ///
    /// With `running = None` the batch statistics are used and returned so the
    /// caller can update its running averages; otherwise the supplied
    /// `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return shape_err(format!("batch norm needs [batch, channels, ..], got {shape:?}"));
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err(format!("batch norm affine params must have {c} entries"));
        }
        let xs = self.value(x).data();
        let count = b * inner;
        let (mean, var) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return shape_err(format!("running stats must have {c} entries"));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let s = &xs[(bi * c + ch) * inner..][..inner];
                        mean[ch] += s.iter().sum::<f64>();
                    }
                }
                for m in &mut mean {
                    *m /= count as f64;
                }
                for bi in 0..b {
                    for ch in 0..c {
                        let s = &xs[(bi * c + ch) * inner..][..inner];
                        var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                for v in &mut var {
                    *v /= count as f64;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                for i in off..off + inner {
                    let h = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = h * g[ch] + be[ch];
                }
            }
        }
        let batch_stats = running.is_none();
        let stats = batch_stats.then_some(BatchStats { mean, var, count });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(shape.clone(), out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(shape, xhat)?,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.unary(x, Tensor::scalar(s), Op::SumSquares(x))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() || z.is_empty() {
            return shape_err(format!("{} logits for {} targets", z.len(), targets.len()));
        }
        let total: f64 = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / z.len() as f64);
        Ok(self.unary(
            logits,
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy of row-wise softmax of `logits (batch×classes)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.value(logits).dims2()?;
        if m != targets.len() || targets.iter().any(|&t| t >= n) {
            return shape_err(format!("{m}×{n} logits for targets {targets:?}"));
        }
        let mut probs = self.value(logits).clone();
        let mut total = 0.0;
        for (row, &t) in probs.data_mut().chunks_mut(n).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / m as f64);
        Ok(self.unary(
            logits,
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Per-row log-density of an isotropic normal `N(mean_row, sigma² I)` at the
    /// matching row of `sample`. Output has one entry per row.
    pub fn gaussian_log_prob(&mut self, mean: Var, sample: &Tensor, sigma: f64) -> Result<Var> {
        let (m, n) = self.value(mean).dims2()?;
        if sample.shape() != [m, n] {
            return shape_err(format!("sample {:?} for mean {m}×{n}", sample.shape()));
        }
        let mu = self.value(mean).data();
        let norm = -0.5 * n as f64 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
        let data = (0..m)
            .map(|r| {
                let sq: f64 = (0..n).map(|c| (sample.data()[r * n + c] - mu[r * n + c]).powi(2)).sum();
                norm - sq / (2.0 * sigma * sigma)
            })
            .collect();
        let value = Tensor::new(vec![m], data)?;
        Ok(self.unary(
            mean,
            value,
            Op::GaussianLogProb {
                mean,
                sample: sample.clone(),
                sigma,
            },
        ))
    }

    /// Back-propagate from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, i, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn propagate(
        &self,
        node: &Node,
        g: Tensor,
        index: usize,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {
                if let Some(&id) = self.param_of.get(&index) {
                    out.by_param.insert(id, g);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).dims2()?.1;
                if self.rg(*a) {
                    let ga = matmul_nt(gd, self.value(*b).data(), m, n, k);
                    acc(*a, Tensor::new(vec![m, k], ga)?);
                }
                if self.rg(*b) {
                    let gb = matmul_tn(self.value(*a).data(), gd, m, k, n);
                    acc(*b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::AddRowBias(x, b) => {
                let n = self.value(*b).len();
                if self.rg(*b) {
                    let mut gb = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(*b, Tensor::new(self.shape(*b).to_vec(), gb)?);
                }
                acc(*x, g);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.map(|v| -v));
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    acc(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    acc(*b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::AddConst(x) => acc(*x, g),
            Op::MulConst(x, c) => {
                let d = gd.iter().zip(c.data()).map(|(g, c)| g * c).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sigmoid(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Tanh(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Reshape(x) => acc(*x, g.reshape(self.shape(*x))?),
            Op::BroadcastRows(x) => {
                let n = self.value(*x).len();
                let mut s = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (a, v) in s.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                acc(*x, Tensor::new(self.shape(*x).to_vec(), s)?);
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.value(*x).dims2()?;
                let len = g.shape()[1];
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                acc(*x, Tensor::new(vec![m, n], d)?);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims2()?;
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                        }
                        acc(p, Tensor::new(vec![m, w], d)?);
                    }
                    off += w;
                }
            }
            Op::SliceRows(x, start) => {
                let (m, n) = self.value(*x).dims2()?;
                let mut d = vec![0.0; m * n];
                d[start * n..start * n + gd.len()].copy_from_slice(gd);
                acc(*x, Tensor::new(vec![m, n], d)?);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        let d = gd[off..off + len].to_vec();
                        acc(p, Tensor::new(self.shape(p).to_vec(), d)?);
                    }
                    off += len;
                }
            }
            Op::Transpose(x) => {
                let (m, n) = g.dims2()?;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[j * m + i] = gd[i * n + j];
                    }
                }
                acc(*x, Tensor::new(vec![n, m], d)?);
            }
            Op::SoftmaxRows(x) => {
                let n = g.dims2()?.1;
                let mut d = vec![0.0; gd.len()];
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(gd.chunks(n)).zip(node.value.data().chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = yv * (gv - dot);
                    }
                }
                acc(*x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = g.dims2()?.1;
                let gam = self.value(*gamma).data();
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                let mut dx = vec![0.0; gd.len()];
                for (r, (grow, hrow)) in gd.chunks(n).zip(xhat.data().chunks(n)).enumerate() {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        dg[j] += grow[j] * hrow[j];
                        db[j] += grow[j];
                        let dh = grow[j] * gam[j];
                        s1 += dh;
                        s2 += dh * hrow[j];
                    }
                    let scale = inv_std[r] / n as f64;
                    for j in 0..n {
                        let dh = grow[j] * gam[j];
                        dx[r * n + j] = scale * (n as f64 * dh - s1 - hrow[j] * s2);
                    }
                }
                acc(*gamma, Tensor::new(self.shape(*gamma).to_vec(), dg)?);
                acc(*beta, Tensor::new(self.shape(*beta).to_vec(), db)?);
                acc(*x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::Conv { x, w, b, geom } => {
                let (gx, gw, gb) =
                    conv::conv_backward(self.value(*x).data(), self.value(*w).data(), gd, geom, self.rg(*x));
                if let Some(gx) = gx {
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), gx)?);
                }
                acc(*w, Tensor::new(self.shape(*w).to_vec(), gw)?);
                acc(*b, Tensor::new(self.shape(*b).to_vec(), gb)?);
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (gv, &i) in gd.iter().zip(argmax) {
                    d[i] += gv;
                }
                acc(*x, Tensor::new(self.shape(*x).to_vec(), d)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = g.shape();
                let (b, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let count = (b * inner) as f64;
                let gam = self.value(*gamma).data();
                let hd = xhat.data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * inner;
                        for i in off..off + inner {
                            dg[ch] += gd[i] * hd[i];
                            db[ch] += gd[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * inner;
                            let k = gam[ch] * inv_std[ch];
                            for i in off..off + inner {
                                dx[i] = if *batch_stats {
                                    k * (gd[i] - db[ch] / count - hd[i] * dg[ch] / count)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                    acc(*x, Tensor::new(shape.to_vec(), dx)?);
                }
                acc(*gamma, Tensor::new(self.shape(*gamma).to_vec(), dg)?);
                acc(*beta, Tensor::new(self.shape(*beta).to_vec(), db)?);
            }
            Op::Sum(x) => {
                let s = g.item();
                acc(*x, Tensor::full(self.shape(*x), s));
            }
            Op::SumSquares(x) => {
                let s = g.item();
                acc(*x, self.value(*x).map(|v| 2.0 * s * v));
            }
            Op::BceWithLogits { logits, targets } => {
                let s = g.item() / targets.len() as f64;
                let z = self.value(*logits);
                let d = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| s * (sigmoid(z) - t))
                    .collect();
                acc(*logits, Tensor::new(z.shape().to_vec(), d)?);
            }
            Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                let (m, n) = probs.dims2()?;
                let s = g.item() / m as f64;
                let mut d = probs.data().to_vec();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * n + t] -= 1.0;
                }
                for v in &mut d {
                    *v *= s;
                }
                acc(*logits, Tensor::new(vec![m, n], d)?);
            }
            Op::GaussianLogProb { mean, sample, sigma } => {
                let (m, n) = sample.dims2()?;
                let mu = self.value(*mean).data();
                let s2 = sigma * sigma;
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        d[r * n + c] = gd[r] * (sample.data()[r * n + c] - mu[r * n + c]) / s2;
                    }
                }
                acc(*mean, Tensor::new(vec![m, n], d)?);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Pre-affine layer-norm tap: the normalized rows and each row's `1/σ`.
pub fn layer_norm_rows(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (m, n) = x.dims2()?;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(m);
    for row in xhat.data_mut().chunks_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    Ok((xhat, inv_std))
}
