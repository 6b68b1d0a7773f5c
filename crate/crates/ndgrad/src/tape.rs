//! Operation recording and the reverse pass.
//!
//! Every operator appends a node holding its output value. Nodes are only
//! ever appended, so node order is a topological order of the forward pass
//! and the reverse pass simply walks the node list backwards.

use crate::conv;
use crate::error::{NdError, Result};
use crate::grid::{Grid4, Shape4};
use crate::norm::{self, BnMode, RunningStats};
use crate::real::Real;

/// Probabilities below this are clamped before taking the logarithm.
pub const CE_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Flatten {
        x: Var,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Softmax {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    Reverse {
        x: Var,
        lambda: T,
    },
    Sum {
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv2d_same",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "residual_add",
            Op::Flatten { .. } => "flatten",
            Op::Linear { .. } => "linear",
            Op::Softmax { .. } => "softmax_rows",
            Op::Mse { .. } => "mse_loss",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reverse { .. } => "gradient_reversal",
            Op::Sum { .. } => "sum",
            Op::Scale { .. } => "scale",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv { x, weight, bias } => {
                let mut v = vec![x, weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Relu { x }
            | Op::Flatten { x }
            | Op::Softmax { x }
            | Op::Reverse { x, .. }
            | Op::Sum { x }
            | Op::Scale { x, .. } => vec![x],
            Op::CrossEntropy { probs, .. } => vec![probs],
            Op::Add { a, b } | Op::Mse { a, b } => vec![a, b],
            Op::Linear { x, weight, bias } => vec![x, weight, bias],
        }
    }
}

struct Node<T> {
    value: Grid4<T>,
    grad: Option<Grid4<T>>,
    requires_grad: bool,
    retain_grad: bool,
    op: Op<T>,
}

/// Single-owner record of a forward computation.
///
/// Gradients accumulate: every call to [`Tape::backward`] adds into the
/// stored gradients of leaves (and of nodes marked with
/// [`Tape::retain_grad`]). Use [`Tape::zero_grads`] to reset them.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input or parameter.
    pub fn leaf(&mut self, value: Grid4<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Grid4<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Grid4<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Grid4<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Grid4<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Grid4<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Operator name that produced `v`.
    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    /// Keep the gradient of an intermediate value after backward.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain_grad = true;
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Grid4<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            retain_grad: false,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Grid4<T>, op: Op<T>) -> Var {
        let requires = self.any_requires(&op.inputs());
        self.push(value, requires, op)
    }

    pub fn conv2d_same(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = conv::forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        Ok(self.record(out, Op::Conv { x, weight, bias }))
    }

    /// Batch normalization over `(batch, row, col)` per channel.
    ///
    /// In train mode the batch statistics are folded into `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
    ) -> Result<Var> {
        let fwd = norm::forward(self.value(x), self.value(gamma), self.value(beta), stats, mode)?;
        Ok(self.record(
            fwd.out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                train: matches!(mode, BnMode::Train { .. }),
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.record(out, Op::Relu { x })
    }

    /// Elementwise sum of two identically shaped values.
    pub fn residual_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NdError::shape(
                "residual_add",
                format!("{} vs {}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.record(out, Op::Add { a, b }))
    }

    /// Reshape `(n, c, h, w)` to `(n, c*h*w, 1, 1)`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.shape();
        let out = v
            .clone()
            .reshaped(Shape4::new(s.n(), s.sample_len(), 1, 1))
            .expect("flatten preserves element count");
        self.record(out, Op::Flatten { x })
    }

    /// `x W^T + b` on flattened rows; `weight` is `(out, in, 1, 1)` and
    /// `bias` has `out` elements.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(weight), self.value(bias));
        let n = vx.shape().n();
        let d_in = vx.shape().sample_len();
        let d_out = vw.shape().n();
        if vw.shape().sample_len() != d_in || vb.numel() != d_out {
            return Err(NdError::shape(
                "linear",
                format!("input {} weight {} bias {}", vx.shape(), vw.shape(), vb.shape()),
            ));
        }
        let mut out = Grid4::zeros(Shape4::new(n, d_out, 1, 1));
        for row in out.data_mut().chunks_mut(d_out) {
            row.copy_from_slice(vb.data());
        }
        T::gemm(
            n,
            d_in,
            d_out,
            T::one(),
            vx.data(),
            (d_in, 1),
            vw.data(),
            (1, d_in),
            T::one(),
            out.data_mut(),
            (d_out, 1),
        );
        Ok(self.record(out, Op::Linear { x, weight, bias }))
    }

    /// Softmax over the flattened per-sample values of each batch row.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let k = v.shape().sample_len();
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            for e in row.iter_mut() {
                *e /= total;
            }
        }
        self.record(out, Op::Softmax { x })
    }

    /// Mean of squared differences over every element.
    pub fn mse_loss(&mut self, yhat: Var, y: Var) -> Result<Var> {
        let (a, b) = (self.value(yhat), self.value(y));
        if a.shape() != b.shape() {
            return Err(NdError::shape(
                "mse_loss",
                format!("{} vs {}", a.shape(), b.shape()),
            ));
        }
        let mut acc = T::zero();
        for (&p, &q) in a.data().iter().zip(b.data()) {
            let d = p - q;
            acc += d * d;
        }
        let loss = acc / T::count(a.numel());
        Ok(self.record(Grid4::scalar(loss), Op::Mse { a: yhat, b: y }))
    }

    /// Mean over rows of `-ln p[label]`, with `p` clamped at [`CE_CLAMP`].
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let p = self.value(probs);
        let n = p.shape().n();
        let k = p.shape().sample_len();
        if labels.len() != n {
            return Err(NdError::shape(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), n),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(NdError::Invalid(format!(
                "cross_entropy: label {bad} out of range for {k} classes"
            )));
        }
        let clamp = T::lit(CE_CLAMP);
        let mut acc = T::zero();
        for (row, &l) in p.data().chunks(k).zip(labels) {
            acc += -(row[l].max(clamp)).ln();
        }
        let loss = acc / T::count(n);
        Ok(self.record(
            Grid4::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Identity on the forward pass; scales gradients by `-lambda` on the way back.
    pub fn gradient_reversal(&mut self, x: Var, lambda: T) -> Var {
        let out = self.value(x).clone();
        self.record(out, Op::Reverse { x, lambda })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.record(Grid4::scalar(total), Op::Sum { x })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.record(out, Op::Scale { x, factor })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape.numel() != 1 {
            return Err(NdError::NotScalar { shape });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Grid4<T>>> = Vec::with_capacity(loss.0 + 1);
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(Grid4::filled(shape, T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let contributions = self.local_backward(&node.op, &node.value, &g);
            for (var, grad) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut pending[var.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
            let node = &mut self.nodes[idx];
            if matches!(node.op, Op::Leaf) || node.retain_grad {
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_backward(&self, op: &Op<T>, out: &Grid4<T>, g: &Grid4<T>) -> Vec<(Var, Grid4<T>)> {
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv { x, weight, bias } => {
                let grads = conv::backward(
                    self.value(*x),
                    self.value(*weight),
                    bias.map(|b| self.value(b).shape()),
                    g,
                    [
                        self.needs(*x),
                        self.needs(*weight),
                        bias.is_some_and(|b| self.needs(b)),
                    ],
                );
                res.extend(grads.dx.map(|d| (*x, d)));
                res.extend(grads.dweight.map(|d| (*weight, d)));
                if let (Some(b), Some(d)) = (bias, grads.dbias) {
                    res.push((*b, d));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let grads = norm::backward(
                    g,
                    self.value(*gamma),
                    xhat,
                    inv_std,
                    *train,
                    self.needs(*x),
                );
                res.extend(grads.dx.map(|d| (*x, d)));
                res.push((*gamma, grads.dgamma));
                res.push((*beta, grads.dbeta));
            }
            Op::Relu { x } => {
                let mut d = g.clone();
                for (e, &o) in d.data_mut().iter_mut().zip(out.data()) {
                    if o <= T::zero() {
                        *e = T::zero();
                    }
                }
                res.push((*x, d));
            }
            Op::Add { a, b } => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Flatten { x } => {
                let d = g
                    .clone()
                    .reshaped(self.value(*x).shape())
                    .expect("flatten gradient reshape");
                res.push((*x, d));
            }
            Op::Linear { x, weight, bias } => {
                let (vx, vw) = (self.value(*x), self.value(*weight));
                let n = vx.shape().n();
                let d_in = vx.shape().sample_len();
                let d_out = vw.shape().n();
                if self.needs(*x) {
                    let mut dx = Grid4::zeros(vx.shape());
                    T::gemm(
                        n,
                        d_out,
                        d_in,
                        T::one(),
                        g.data(),
                        (d_out, 1),
                        vw.data(),
                        (d_in, 1),
                        T::zero(),
                        dx.data_mut(),
                        (d_in, 1),
                    );
                    res.push((*x, dx));
                }
                if self.needs(*weight) {
                    let mut dw = Grid4::zeros(vw.shape());
                    T::gemm(
                        d_out,
                        n,
                        d_in,
                        T::one(),
                        g.data(),
                        (1, d_out),
                        vx.data(),
                        (d_in, 1),
                        T::zero(),
                        dw.data_mut(),
                        (d_in, 1),
                    );
                    res.push((*weight, dw));
                }
                if self.needs(*bias) {
                    let mut db = Grid4::zeros(self.value(*bias).shape());
                    for row in g.data().chunks(d_out) {
                        for (acc, &v) in db.data_mut().iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    res.push((*bias, db));
                }
            }
            Op::Softmax { x } => {
                let k = out.shape().sample_len();
                let mut dx = Grid4::zeros(out.shape());
                for ((drow, prow), grow) in dx
                    .data_mut()
                    .chunks_mut(k)
                    .zip(out.data().chunks(k))
                    .zip(g.data().chunks(k))
                {
                    let dot: T = prow.iter().zip(grow).map(|(&p, &q)| p * q).sum();
                    for i in 0..k {
                        drow[i] = prow[i] * (grow[i] - dot);
                    }
                }
                res.push((*x, dx));
            }
            Op::Mse { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let scale = T::lit(2.0) * g.data()[0] / T::count(va.numel());
                let mut da = Grid4::zeros(va.shape());
                for ((d, &p), &q) in da.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                    *d = scale * (p - q);
                }
                if self.needs(*b) {
                    res.push((*b, da.map(|v| -v)));
                }
                res.push((*a, da));
            }
            Op::CrossEntropy { probs, labels } => {
                let p = self.value(*probs);
                let k = p.shape().sample_len();
                let n = p.shape().n();
                let clamp = T::lit(CE_CLAMP);
                let scale = g.data()[0] / T::count(n);
                let mut dp = Grid4::zeros(p.shape());
                for (r, &l) in labels.iter().enumerate() {
                    let pt = p.data()[r * k + l];
                    if pt > clamp {
                        dp.data_mut()[r * k + l] = -scale / pt;
                    }
                }
                res.push((*probs, dp));
            }
            Op::Reverse { x, lambda } => {
                let factor = -*lambda;
                res.push((*x, g.map(|v| v * factor)));
            }
            Op::Sum { x } => {
                res.push((*x, Grid4::filled(self.value(*x).shape(), g.data()[0])));
            }
            Op::Scale { x, factor } => {
                res.push((*x, g.map(|v| v * *factor)));
            }
        }
        res
    }
}
