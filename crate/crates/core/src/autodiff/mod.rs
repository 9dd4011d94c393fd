//! Tape-based reverse-mode automatic differentiation over the tensor ops.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! the cached output tensor, the parent node ids, and whatever context the
//! backward rule needs. Creation order is a valid backward schedule, so
//! [`Tape::backward`] is a single reverse sweep with gradients accumulating
//! by addition over all paths. A tape is single-threaded; independent tapes
//! may run concurrently.

pub mod check;

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ops, ConvSpec, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Gradients keyed by parameter name, one entry per trainable parameter of
/// the forward pass (zero tensors for parameters off every path to the loss).
pub type GradientMap<S> = BTreeMap<String, Tensor<S>>;

enum Op<S: Scalar> {
    Leaf,
    Conv2d(ConvSpec),
    Conv3d(ConvSpec),
    MaxPool { argmax: Vec<u32> },
    Upsample,
    Relu,
    Sigmoid,
    Tanh,
    OneMinus,
    Scale(S),
    Add,
    Sub,
    Hadamard,
    BiasAdd,
    Linear,
    Reshape,
    SliceTime(usize),
    StackTime,
    ConcatCh { split: usize },
    RepeatCh { n: usize },
    BnTrain { mean: Vec<f64>, invstd: Vec<f64> },
    BnEval { mean: Vec<f64>, invstd: Vec<f64> },
    Sum,
    CrossEntropy { probs: Vec<f64>, target: usize },
    Softmax,
    NegLogAt { target: usize },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    parents: Vec<NodeId>,
    op: Op<S>,
}

/// The recorded computation of one forward pass.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, parents: Vec<NodeId>, op: Op<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, parents, op });
        id
    }

    /// Records an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, vec![], Op::Leaf)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        let out = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        Ok(self.push(out, parents, Op::Conv2d(*spec)))
    }

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        let out = ops::conv3d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        Ok(self.push(out, parents, Op::Conv3d(*spec)))
    }

    pub fn maxpool(&mut self, x: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        let (out, argmax) = ops::maxpool(self.value(x), spec)?;
        Ok(self.push(out, vec![x], Op::MaxPool { argmax }))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, th: usize, tw: usize) -> Result<NodeId> {
        let out = ops::upsample_nearest(self.value(x), th, tw)?;
        Ok(self.push(out, vec![x], Op::Upsample))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = ops::relu(self.value(x));
        self.push(out, vec![x], Op::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = ops::sigmoid(self.value(x));
        self.push(out, vec![x], Op::Sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = ops::tanh(self.value(x));
        self.push(out, vec![x], Op::Tanh)
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let out = ops::one_minus(self.value(x));
        self.push(out, vec![x], Op::OneMinus)
    }

    pub fn scale(&mut self, x: NodeId, a: S) -> NodeId {
        let out = ops::scale(self.value(x), a);
        self.push(out, vec![x], Op::Scale(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, vec![a, b], Op::Add))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, vec![a, b], Op::Sub))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(out, vec![a, b], Op::Hadamard))
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::bias_add(self.value(x), self.value(b))?;
        Ok(self.push(out, vec![x, b], Op::BiasAdd))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, vec![x, w, b], Op::Linear))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, vec![x], Op::Reshape))
    }

    pub fn slice_time(&mut self, x: NodeId, t: usize) -> Result<NodeId> {
        let out = ops::slice_time(self.value(x), t)?;
        Ok(self.push(out, vec![x], Op::SliceTime(t)))
    }

    pub fn stack_time(&mut self, frames: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor<S>> = frames.iter().map(|&f| self.value(f)).collect();
        let out = ops::stack_time(&vals)?;
        Ok(self.push(out, frames.to_vec(), Op::StackTime))
    }

    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let split = self.value(a).extent(0);
        let out = ops::concat_ch(self.value(a), self.value(b))?;
        Ok(self.push(out, vec![a, b], Op::ConcatCh { split }))
    }

    /// Tiles the whole tensor `n` times along the channel axis.
    pub fn repeat_ch(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        if n == 0 {
            return Err(Error::InvalidArgument("repeat_ch needs n >= 1".to_string()));
        }
        let v = self.value(x);
        let mut shape = v.shape().to_vec();
        shape[0] *= n;
        let mut data = Vec::with_capacity(v.len() * n);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, vec![x], Op::RepeatCh { n }))
    }

    /// Train-mode batch normalization over the channel axis. Returns the
    /// output node plus the batch statistics so the caller can fold them
    /// into running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let (mean, var) = ops::channel_stats(self.value(x));
        let invstd = ops::invstd_from_var(&var, eps);
        let out = ops::batchnorm_apply(self.value(x), self.value(gamma), self.value(beta), &mean, &invstd)?;
        let id = self.push(
            out,
            vec![x, gamma, beta],
            Op::BnTrain {
                mean: mean.clone(),
                invstd,
            },
        );
        Ok((id, mean, var))
    }

    /// Eval-mode batch normalization with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        run_mean: &Tensor<S>,
        run_var: &Tensor<S>,
        eps: f64,
    ) -> Result<NodeId> {
        let mean: Vec<f64> = run_mean.data().iter().map(|v| v.to_f64()).collect();
        let var: Vec<f64> = run_var.data().iter().map(|v| v.to_f64()).collect();
        let invstd = ops::invstd_from_var(&var, eps);
        let out = ops::batchnorm_apply(self.value(x), self.value(gamma), self.value(beta), &mean, &invstd)?;
        Ok(self.push(out, vec![x, gamma, beta], Op::BnEval { mean, invstd }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = ops::sum_all(self.value(x));
        self.push(Tensor::scalar(S::from_f64(s)), vec![x], Op::Sum)
    }

    /// Cross-entropy of rank-1 logits against a class index (scalar node).
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let (loss, probs) = ops::cross_entropy_logits(self.value(logits), target)?;
        Ok(self.push(
            Tensor::scalar(S::from_f64(loss)),
            vec![logits],
            Op::CrossEntropy { probs, target },
        ))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::softmax(self.value(x))?;
        Ok(self.push(out, vec![x], Op::Softmax))
    }

    /// Negative log of one probability entry (scalar node); the loss used
    /// when class scores are averaged post-softmax.
    pub fn neg_log_at(&mut self, probs: NodeId, target: usize) -> Result<NodeId> {
        let p = self.value(probs);
        let [k] = *p.shape() else {
            return Err(shape_err("rank", format!("probabilities must be rank 1, got {:?}", p.shape())));
        };
        if target >= k {
            return Err(Error::InvalidArgument(format!("target {target} out of range 0..{k}")));
        }
        let v = -(p.data()[target].to_f64().max(f64::MIN_POSITIVE)).ln();
        Ok(self.push(
            Tensor::scalar(S::from_f64(v)),
            vec![probs],
            Op::NegLogAt { target },
        ))
    }

    /// Reverse sweep from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::ONE));

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.apply_backward(node, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Grads { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor<S>>], id: NodeId, g: Tensor<S>) {
        match &mut grads[id.0] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), g.shape());
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn apply_backward(
        &self,
        node: &Node<S>,
        dy: &Tensor<S>,
        grads: &mut Vec<Option<Tensor<S>>>,
    ) -> Result<()> {
        let p = &node.parents;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d(spec) => {
                let (dx, dw, db) = ops::conv2d_backward(self.value(p[0]), self.value(p[1]), spec, dy)?;
                Self::accumulate(grads, p[0], dx);
                Self::accumulate(grads, p[1], dw);
                if p.len() > 2 {
                    Self::accumulate(grads, p[2], db);
                }
            }
            Op::Conv3d(spec) => {
                let (dx, dw, db) = ops::conv3d_backward(self.value(p[0]), self.value(p[1]), spec, dy)?;
                Self::accumulate(grads, p[0], dx);
                Self::accumulate(grads, p[1], dw);
                if p.len() > 2 {
                    Self::accumulate(grads, p[2], db);
                }
            }
            Op::MaxPool { argmax } => {
                let dx = ops::maxpool_backward(self.value(p[0]).shape(), argmax, dy)?;
                Self::accumulate(grads, p[0], dx);
            }
            Op::Upsample => {
                let dx = ops::upsample_nearest_backward(self.value(p[0]).shape(), dy)?;
                Self::accumulate(grads, p[0], dx);
            }
            Op::Relu => {
                let y = &node.value;
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &v)| if v > S::ZERO { g } else { S::ZERO })
                    .collect();
                Self::accumulate(grads, p[0], Tensor::from_vec(dy.shape(), data)?);
            }
            Op::Sigmoid => {
                let y = &node.value;
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &v)| g * v * (S::ONE - v))
                    .collect();
                Self::accumulate(grads, p[0], Tensor::from_vec(dy.shape(), data)?);
            }
            Op::Tanh => {
                let y = &node.value;
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&g, &v)| g * (S::ONE - v * v))
                    .collect();
                Self::accumulate(grads, p[0], Tensor::from_vec(dy.shape(), data)?);
            }
            Op::OneMinus => {
                Self::accumulate(grads, p[0], dy.map(|v| -v));
            }
            Op::Scale(a) => {
                let a = *a;
                Self::accumulate(grads, p[0], dy.map(|v| v * a));
            }
            Op::Add => {
                Self::accumulate(grads, p[0], dy.clone());
                Self::accumulate(grads, p[1], dy.clone());
            }
            Op::Sub => {
                Self::accumulate(grads, p[0], dy.clone());
                Self::accumulate(grads, p[1], dy.map(|v| -v));
            }
            Op::Hadamard => {
                let a = self.value(p[0]);
                let b = self.value(p[1]);
                Self::accumulate(grads, p[0], ops::hadamard(dy, b)?);
                Self::accumulate(grads, p[1], ops::hadamard(dy, a)?);
            }
            Op::BiasAdd => {
                Self::accumulate(grads, p[0], dy.clone());
                let c = dy.extent(0);
                let per = dy.len() / c;
                let mut db = Tensor::zeros(&[c]);
                for ch in 0..c {
                    let mut s = 0f64;
                    for g in &dy.data()[ch * per..][..per] {
                        s += g.to_f64();
                    }
                    db.data_mut()[ch] = S::from_f64(s);
                }
                Self::accumulate(grads, p[1], db);
            }
            Op::Linear => {
                let (dx, dw, db) = ops::linear_backward(self.value(p[0]), self.value(p[1]), dy)?;
                Self::accumulate(grads, p[0], dx);
                Self::accumulate(grads, p[1], dw);
                Self::accumulate(grads, p[2], db);
            }
            Op::Reshape => {
                let dx = dy.reshaped(self.value(p[0]).shape())?;
                Self::accumulate(grads, p[0], dx);
            }
            Op::SliceTime(t) => {
                let mut dx = Tensor::zeros(self.value(p[0]).shape());
                ops::scatter_time(&mut dx, *t, dy);
                Self::accumulate(grads, p[0], dx);
            }
            Op::StackTime => {
                for (t, &parent) in p.iter().enumerate() {
                    let df = ops::slice_time(dy, t)?;
                    Self::accumulate(grads, parent, df);
                }
            }
            Op::ConcatCh { split } => {
                let a_shape = self.value(p[0]).shape();
                let b_shape = self.value(p[1]).shape();
                let a_len = self.value(p[0]).len();
                let da = Tensor::from_vec(a_shape, dy.data()[..a_len].to_vec())?;
                let db = Tensor::from_vec(b_shape, dy.data()[a_len..].to_vec())?;
                debug_assert_eq!(*split, a_shape[0]);
                Self::accumulate(grads, p[0], da);
                Self::accumulate(grads, p[1], db);
            }
            Op::RepeatCh { n } => {
                let src_shape = self.value(p[0]).shape();
                let len = self.value(p[0]).len();
                let mut dx = Tensor::zeros(src_shape);
                for rep in 0..*n {
                    let chunk = &dy.data()[rep * len..][..len];
                    for (d, g) in dx.data_mut().iter_mut().zip(chunk) {
                        *d += *g;
                    }
                }
                Self::accumulate(grads, p[0], dx);
            }
            Op::BnTrain { mean, invstd } => {
                let (dx, dgamma, dbeta) =
                    ops::batchnorm_train_backward(self.value(p[0]), self.value(p[1]), mean, invstd, dy)?;
                Self::accumulate(grads, p[0], dx);
                Self::accumulate(grads, p[1], dgamma);
                Self::accumulate(grads, p[2], dbeta);
            }
            Op::BnEval { mean, invstd } => {
                let (dx, dgamma, dbeta) =
                    ops::batchnorm_eval_backward(self.value(p[0]), self.value(p[1]), mean, invstd, dy)?;
                Self::accumulate(grads, p[0], dx);
                Self::accumulate(grads, p[1], dgamma);
                Self::accumulate(grads, p[2], dbeta);
            }
            Op::Sum => {
                let g = dy.data()[0];
                Self::accumulate(grads, p[0], Tensor::filled(self.value(p[0]).shape(), g));
            }
            Op::CrossEntropy { probs, target } => {
                let g = dy.data()[0].to_f64();
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &pv)| S::from_f64(g * (pv - if i == *target { 1.0 } else { 0.0 })))
                    .collect();
                Self::accumulate(grads, p[0], Tensor::from_vec(self.value(p[0]).shape(), data)?);
            }
            Op::Softmax => {
                let y = &node.value;
                let dot: f64 = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, v)| g.to_f64() * v.to_f64())
                    .sum();
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, v)| S::from_f64(v.to_f64() * (g.to_f64() - dot)))
                    .collect();
                Self::accumulate(grads, p[0], Tensor::from_vec(y.shape(), data)?);
            }
            Op::NegLogAt { target } => {
                let g = dy.data()[0].to_f64();
                let pv = self.value(p[0]).data()[*target].to_f64().max(f64::MIN_POSITIVE);
                let mut dx = Tensor::zeros(self.value(p[0]).shape());
                dx.data_mut()[*target] = S::from_f64(-g / pv);
                Self::accumulate(grads, p[0], dx);
            }
        }
        Ok(())
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the loss w.r.t. a node, if the node is on a path to it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }
}
