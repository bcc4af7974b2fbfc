//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] wraps a tensor in a graph node. Ops record which node an
//! output came from plus whatever context the backward rule needs
//! (pooling argmax indices, batch statistics). The graph is acyclic by
//! construction and lives for a single forward pass: [`Var::backward`]
//! walks it in reverse topological order, accumulates gradients
//! additively into every node that requires them, then severs the op
//! links so intermediate buffers free as handles drop.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{FaError, Result};
use crate::tensor::kernels::{self, BnStats};
use crate::tensor::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Saved context and input references for one recorded operation.
enum Op {
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, padding: usize },
    Linear { input: Var, weight: Var, bias: Var },
    BatchNormTrain { input: Var, gamma: Var, beta: Var, stats: BnStats },
    BatchNormEval { input: Var, gamma: Var, beta: Var, mean: Vec<f32>, inv_std: Vec<f32> },
    Relu { input: Var },
    Tanh { input: Var },
    MaxPool { input: Var, argmax: Vec<u32> },
    Lincomb { a: Var, b: Var, ca: f32, cb: f32 },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f32 },
    Reshape { input: Var },
    Sum { input: Var },
    Select { input: Var, row: usize, col: usize },
    PoolHead { input: Var, classes: usize, maps_per_class: usize },
    L1Norm { input: Var, denoms: Vec<f32> },
    NllLoss { probs: Var, targets: Vec<usize>, eps: f32 },
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Tensor },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Conv2d { input, weight, bias, .. } | Op::Linear { input, weight, bias } => {
                vec![input.clone(), weight.clone(), bias.clone()]
            }
            Op::BatchNormTrain { input, gamma, beta, .. }
            | Op::BatchNormEval { input, gamma, beta, .. } => {
                vec![input.clone(), gamma.clone(), beta.clone()]
            }
            Op::Relu { input }
            | Op::Tanh { input }
            | Op::MaxPool { input, .. }
            | Op::Scale { input, .. }
            | Op::Reshape { input }
            | Op::Sum { input }
            | Op::Select { input, .. }
            | Op::PoolHead { input, .. }
            | Op::L1Norm { input, .. } => vec![input.clone()],
            Op::Lincomb { a, b, .. } | Op::Mul { a, b } => vec![a.clone(), b.clone()],
            Op::NllLoss { probs, .. } => vec![probs.clone()],
            Op::SoftmaxCe { logits, .. } => vec![logits.clone()],
        }
    }
}

struct VarInner {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    retain_grad: bool,
    grad: Option<Tensor>,
    op: Option<Op>,
}

/// A tensor tracked in the autodiff graph. Cloning is cheap and shares
/// the node.
#[derive(Clone)]
pub struct Var {
    inner: Rc<RefCell<VarInner>>,
}

impl Var {
    /// A graph leaf. Parameters pass `requires_grad = true`; plain inputs
    /// (images, targets) pass `false`.
    pub fn leaf(value: Tensor, requires_grad: bool) -> Var {
        Var {
            inner: Rc::new(RefCell::new(VarInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value,
                requires_grad,
                retain_grad: requires_grad,
                grad: None,
                op: None,
            })),
        }
    }

    fn from_op(value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(Var::requires_grad);
        Var {
            inner: Rc::new(RefCell::new(VarInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value,
                requires_grad,
                retain_grad: false,
                grad: None,
                op: if requires_grad { Some(op) } else { None },
            })),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Keep this node's gradient after backward even though it is not a
    /// leaf (used to read d loss / d feature-map).
    pub fn retain_grad(&self) {
        self.inner.borrow_mut().retain_grad = true;
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        Ref::map(self.inner.borrow(), |i| &i.value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.inner.borrow().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().value.shape().to_vec()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    fn accumulate_grad(&self, g: Tensor) {
        let mut inner = self.inner.borrow_mut();
        match &mut inner.grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => inner.grad = Some(g),
        }
    }

    // -- ops ---------------------------------------------------------------

    pub fn conv2d(&self, weight: &Var, bias: &Var, stride: usize, padding: usize) -> Result<Var> {
        let value = kernels::conv2d_forward(&self.value(), &weight.value(), &bias.value(), stride, padding)?;
        Ok(Var::from_op(
            value,
            Op::Conv2d { input: self.clone(), weight: weight.clone(), bias: bias.clone(), stride, padding },
        ))
    }

    pub fn linear(&self, weight: &Var, bias: &Var) -> Result<Var> {
        let value = kernels::linear_forward(&self.value(), &weight.value(), &bias.value())?;
        Ok(Var::from_op(value, Op::Linear { input: self.clone(), weight: weight.clone(), bias: bias.clone() }))
    }

    /// Train-mode batch norm; updates the running statistics in place.
    pub fn batch_norm_train(
        &self,
        gamma: &Var,
        beta: &Var,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
        momentum: f32,
        eps: f32,
    ) -> Result<Var> {
        let (value, stats) = kernels::batch_norm_train(
            &self.value(),
            &gamma.value(),
            &beta.value(),
            running_mean,
            running_var,
            momentum,
            eps,
        )?;
        Ok(Var::from_op(
            value,
            Op::BatchNormTrain { input: self.clone(), gamma: gamma.clone(), beta: beta.clone(), stats },
        ))
    }

    /// Eval-mode batch norm: normalizes with the fixed running statistics,
    /// which are treated as constants by the backward pass.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var,
        beta: &Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f32,
    ) -> Result<Var> {
        let value = kernels::batch_norm_eval(
            &self.value(),
            &gamma.value(),
            &beta.value(),
            running_mean,
            running_var,
            eps,
        )?;
        let inv_std = running_var.data().iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        Ok(Var::from_op(
            value,
            Op::BatchNormEval {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: running_mean.data().to_vec(),
                inv_std,
            },
        ))
    }

    pub fn relu(&self) -> Var {
        let value = kernels::relu(&self.value());
        Var::from_op(value, Op::Relu { input: self.clone() })
    }

    pub fn tanh(&self) -> Var {
        let value = kernels::tanh(&self.value());
        Var::from_op(value, Op::Tanh { input: self.clone() })
    }

    pub fn max_pool2d(&self, kh: usize, kw: usize) -> Result<Var> {
        let (value, argmax) = kernels::max_pool2d(&self.value(), kh, kw)?;
        Ok(Var::from_op(value, Op::MaxPool { input: self.clone(), argmax }))
    }

    /// `ca * self + cb * other`, elementwise.
    pub fn lincomb(&self, ca: f32, other: &Var, cb: f32) -> Result<Var> {
        let value = kernels::lincomb(&self.value(), ca, &other.value(), cb)?;
        Ok(Var::from_op(value, Op::Lincomb { a: self.clone(), b: other.clone(), ca, cb }))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let value = kernels::mul(&self.value(), &other.value())?;
        Ok(Var::from_op(value, Op::Mul { a: self.clone(), b: other.clone() }))
    }

    pub fn scale(&self, factor: f32) -> Var {
        let value = kernels::scale(&self.value(), factor);
        Var::from_op(value, Op::Scale { input: self.clone(), factor })
    }

    /// Reinterprets the contiguous buffer under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().reshaped(shape)?;
        Ok(Var::from_op(value, Op::Reshape { input: self.clone() }))
    }

    pub fn sum(&self) -> Var {
        let value = kernels::sum_all(&self.value());
        Var::from_op(value, Op::Sum { input: self.clone() })
    }

    /// Picks the scalar `self[row, col]` from a rank-2 tensor.
    pub fn select(&self, row: usize, col: usize) -> Result<Var> {
        let (n, c) = self.value().dims2()?;
        if row >= n || col >= c {
            return Err(FaError::Bounds(format!("select({row},{col}) on [{n},{c}]")));
        }
        let v = self.value().data()[row * c + col];
        Ok(Var::from_op(Tensor::scalar(v), Op::Select { input: self.clone(), row, col }))
    }

    pub fn pool_head(&self, classes: usize, maps_per_class: usize) -> Result<Var> {
        let value = kernels::pool_head_forward(&self.value(), classes, maps_per_class)?;
        Ok(Var::from_op(value, Op::PoolHead { input: self.clone(), classes, maps_per_class }))
    }

    pub fn l1_normalize(&self, eps: f32) -> Result<Var> {
        let (value, denoms) = kernels::l1_normalize(&self.value(), eps)?;
        Ok(Var::from_op(value, Op::L1Norm { input: self.clone(), denoms }))
    }

    /// Mean negative log likelihood of already-normalized probabilities.
    pub fn nll_loss(&self, targets: &[usize], eps: f32) -> Result<Var> {
        let loss = kernels::nll_from_probs(&self.value(), targets, eps)?;
        Ok(Var::from_op(
            Tensor::scalar(loss),
            Op::NllLoss { probs: self.clone(), targets: targets.to_vec(), eps },
        ))
    }

    /// Mean softmax cross-entropy over raw logits.
    pub fn softmax_cross_entropy(&self, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(&self.value(), targets)?;
        Ok(Var::from_op(
            Tensor::scalar(loss),
            Op::SoftmaxCe { logits: self.clone(), targets: targets.to_vec(), probs },
        ))
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every leaf
    /// that requires it (gradients accumulate additively across uses) and
    /// frees the graph.
    pub fn backward(&self) -> Result<()> {
        if self.value().numel() != 1 {
            return Err(FaError::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }

        // Post-order DFS: inputs land before consumers.
        let mut order: Vec<Var> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !visited.insert(v.id()) {
                continue;
            }
            stack.push((v.clone(), true));
            let inner = v.inner.borrow();
            if let Some(op) = &inner.op {
                for input in op.inputs() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input, false));
                    }
                }
            }
        }

        self.accumulate_grad(Tensor::scalar(1.0));

        for v in order.iter().rev() {
            let (grad, op, was_leaf) = {
                let mut inner = v.inner.borrow_mut();
                let grad = match inner.grad.clone() {
                    Some(g) => g,
                    None => continue, // not reached by any gradient path
                };
                let op = inner.op.take();
                let was_leaf = op.is_none();
                (grad, op, was_leaf)
            };
            if let Some(op) = op {
                apply_backward(&op, v, &grad)?;
            }
            let mut inner = v.inner.borrow_mut();
            if !was_leaf && !inner.retain_grad {
                inner.grad = None;
            }
        }
        Ok(())
    }
}

fn upstream_scalar(grad: &Tensor) -> f32 {
    grad.data()[0]
}

fn apply_backward(op: &Op, node: &Var, grad: &Tensor) -> Result<()> {
    match op {
        Op::Conv2d { input, weight, bias, stride, padding } => {
            let grads = kernels::conv2d_backward(
                &input.value(),
                &weight.value(),
                *stride,
                *padding,
                grad,
                input.requires_grad(),
            )?;
            if let Some(dx) = grads.input {
                input.accumulate_grad(dx);
            }
            if weight.requires_grad() {
                weight.accumulate_grad(grads.weight);
            }
            if bias.requires_grad() {
                bias.accumulate_grad(grads.bias);
            }
        }
        Op::Linear { input, weight, bias } => {
            let (dx, dw, db) =
                kernels::linear_backward(&input.value(), &weight.value(), grad, input.requires_grad())?;
            if let Some(dx) = dx {
                input.accumulate_grad(dx);
            }
            if weight.requires_grad() {
                weight.accumulate_grad(dw);
            }
            if bias.requires_grad() {
                bias.accumulate_grad(db);
            }
        }
        Op::BatchNormTrain { input, gamma, beta, stats } => {
            let (dx, dgamma, dbeta) = kernels::batch_norm_backward(&input.value(), &gamma.value(), stats, grad)?;
            if input.requires_grad() {
                input.accumulate_grad(dx);
            }
            if gamma.requires_grad() {
                gamma.accumulate_grad(dgamma);
            }
            if beta.requires_grad() {
                beta.accumulate_grad(dbeta);
            }
        }
        Op::BatchNormEval { input, gamma, beta, mean, inv_std } => {
            let x = input.value();
            let (n, c, h, w) = x.dims4()?;
            let hw = h * w;
            if input.requires_grad() {
                let mut dx = Tensor::zeros(x.shape());
                for i in 0..n * c {
                    let ch = i % c;
                    let k = gamma.value().data()[ch] * inv_std[ch];
                    for j in 0..hw {
                        dx.data_mut()[i * hw + j] = grad.data()[i * hw + j] * k;
                    }
                }
                drop(x);
                input.accumulate_grad(dx);
            }
            if gamma.requires_grad() || beta.requires_grad() {
                let x = input.value();
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for i in 0..n * c {
                    let ch = i % c;
                    for j in 0..hw {
                        let g = grad.data()[i * hw + j];
                        let xh = (x.data()[i * hw + j] - mean[ch]) * inv_std[ch];
                        dgamma.data_mut()[ch] += g * xh;
                        dbeta.data_mut()[ch] += g;
                    }
                }
                drop(x);
                if gamma.requires_grad() {
                    gamma.accumulate_grad(dgamma);
                }
                if beta.requires_grad() {
                    beta.accumulate_grad(dbeta);
                }
            }
        }
        Op::Relu { input } => {
            let dx = kernels::relu_backward(&input.value(), grad);
            input.accumulate_grad(dx);
        }
        Op::Tanh { input } => {
            let dx = kernels::tanh_backward(&node.value(), grad);
            input.accumulate_grad(dx);
        }
        Op::MaxPool { input, argmax } => {
            let shape = input.shape();
            let dx = kernels::max_pool2d_backward(argmax, &shape, grad)?;
            input.accumulate_grad(dx);
        }
        Op::Lincomb { a, b, ca, cb } => {
            if a.requires_grad() {
                a.accumulate_grad(kernels::scale(grad, *ca));
            }
            if b.requires_grad() {
                b.accumulate_grad(kernels::scale(grad, *cb));
            }
        }
        Op::Mul { a, b } => {
            // bind before accumulating: a and b may be the same node
            if a.requires_grad() {
                let da = kernels::mul(grad, &b.value())?;
                a.accumulate_grad(da);
            }
            if b.requires_grad() {
                let db = kernels::mul(grad, &a.value())?;
                b.accumulate_grad(db);
            }
        }
        Op::Scale { input, factor } => {
            input.accumulate_grad(kernels::scale(grad, *factor));
        }
        Op::Reshape { input } => {
            input.accumulate_grad(grad.reshaped(&input.shape())?);
        }
        Op::Sum { input } => {
            let g = upstream_scalar(grad);
            input.accumulate_grad(Tensor::full(&input.shape(), g));
        }
        Op::Select { input, row, col } => {
            let (_, c) = input.value().dims2()?;
            let mut dx = Tensor::zeros(&input.shape());
            dx.data_mut()[row * c + col] = upstream_scalar(grad);
            input.accumulate_grad(dx);
        }
        Op::PoolHead { input, classes, maps_per_class } => {
            let dx = kernels::pool_head_backward(grad, &input.shape(), *classes, *maps_per_class)?;
            input.accumulate_grad(dx);
        }
        Op::L1Norm { input, denoms } => {
            let dx = kernels::l1_normalize_backward(&node.value(), denoms, grad)?;
            input.accumulate_grad(dx);
        }
        Op::NllLoss { probs, targets, eps } => {
            let dp = kernels::nll_from_probs_backward(&probs.value(), targets, *eps, upstream_scalar(grad))?;
            probs.accumulate_grad(dp);
        }
        Op::SoftmaxCe { logits, targets, probs } => {
            let dl = kernels::softmax_cross_entropy_backward(probs, targets, upstream_scalar(grad))?;
            logits.accumulate_grad(dl);
        }
    }
    Ok(())
}
