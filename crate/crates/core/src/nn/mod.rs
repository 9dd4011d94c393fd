//! Network building blocks and their parameter plumbing.

pub mod blocks;
pub mod convlstm;
pub mod fusion;
pub mod init;
pub mod model;

use std::collections::BTreeMap;

use crate::autodiff::{GradientMap, NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named parameter and buffer store. Trainable parameters receive gradients;
/// buffers are non-trainable state (batch-norm running statistics).
#[derive(Clone)]
pub struct Params<S: Scalar> {
    trainable: BTreeMap<String, Tensor<S>>,
    buffers: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for Params<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Params {
            trainable: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.trainable.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.trainable
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.trainable
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<S>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown buffer `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.trainable.iter()
    }

    pub fn iter_buffers(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.buffers.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.trainable.keys()
    }

    pub fn param_count(&self) -> usize {
        self.trainable.len()
    }

    /// Total number of trainable scalar values.
    pub fn total_scalars(&self) -> usize {
        self.trainable.values().map(|t| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            trainable: self.trainable.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Whether batch-norm layers use batch statistics (and report updates) or the
/// stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A running-statistics update observed during one train-mode forward pass.
/// Applied by the trainer in a fixed order after the (possibly parallel)
/// batch forward, keeping training bitwise deterministic.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Forward-pass context: a tape plus lazy parameter binding.
///
/// Binding a parameter name twice returns the same node, so weight sharing
/// (e.g. recurrent kernels applied at every timestep) accumulates gradients
/// across all uses.
pub struct Graph<'a, S: Scalar> {
    pub tape: Tape<S>,
    pub mode: Mode,
    params: &'a Params<S>,
    bound: BTreeMap<String, NodeId>,
    pub bn_updates: Vec<BnUpdate>,
    /// Diagnostic override: forward input attention multiplies by an all-ones
    /// map instead of the learned gate.
    pub force_attention_one: bool,
    /// Optional shape trace of named intermediates.
    pub trace: Option<Vec<(String, Vec<usize>)>>,
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new(params: &'a Params<S>, mode: Mode) -> Self {
        Graph {
            tape: Tape::new(),
            mode,
            params,
            bound: BTreeMap::new(),
            bn_updates: Vec::new(),
            force_attention_one: false,
            trace: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Binds a trainable parameter as a tape leaf (cached per name).
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let t = self.params.get(name)?.clone();
        let id = self.tape.leaf(t);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Records a non-parameter input tensor.
    pub fn input(&mut self, t: Tensor<S>) -> NodeId {
        self.tape.leaf(t)
    }

    /// Batch normalization using the parameter/buffer naming convention
    /// `{prefix}.gamma`, `{prefix}.beta`, `{prefix}.mean`, `{prefix}.var`.
    pub fn batchnorm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = self.tape.batchnorm_train(x, gamma, beta, BN_EPS)?;
                self.bn_updates.push(BnUpdate {
                    prefix: prefix.to_string(),
                    mean,
                    var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.params.buffer(&format!("{prefix}.mean"))?.clone();
                let var = self.params.buffer(&format!("{prefix}.var"))?.clone();
                self.tape.batchnorm_eval(x, gamma, beta, &mean, &var, BN_EPS)
            }
        }
    }

    /// Records the shape of a named intermediate when tracing is enabled.
    pub fn mark(&mut self, name: &str, node: NodeId) {
        if let Some(trace) = &mut self.trace {
            trace.push((name.to_string(), self.tape.value(node).shape().to_vec()));
        }
    }

    /// Runs backward from `loss` and assembles the gradient map: every
    /// trainable parameter gets an entry, zero-valued when the parameter is
    /// not on any path to the loss.
    pub fn gradient_map(&self, loss: NodeId) -> Result<GradientMap<S>> {
        let grads = self.tape.backward(loss)?;
        let mut map = GradientMap::new();
        for (name, tensor) in self.params.iter() {
            let g = self
                .bound
                .get(name)
                .and_then(|&id| grads.get(id))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
            map.insert(name.clone(), g);
        }
        Ok(map)
    }
}

/// Epsilon used by every batch-norm layer.
pub const BN_EPS: f64 = 1e-5;

/// Momentum for running-statistics updates: `run = (1-m)*run + m*batch`.
pub const BN_MOMENTUM: f64 = 0.1;

/// Applies one recorded batch-norm statistics update to the buffers.
pub fn apply_bn_update<S: Scalar>(params: &mut Params<S>, update: &BnUpdate) -> Result<()> {
    let mean = params.buffer_mut(&format!("{}.mean", update.prefix))?;
    for (m, &b) in mean.data_mut().iter_mut().zip(&update.mean) {
        *m = S::from_f64((1.0 - BN_MOMENTUM) * m.to_f64() + BN_MOMENTUM * b);
    }
    let var = params.buffer_mut(&format!("{}.var", update.prefix))?;
    for (v, &b) in var.data_mut().iter_mut().zip(&update.var) {
        *v = S::from_f64((1.0 - BN_MOMENTUM) * v.to_f64() + BN_MOMENTUM * b);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_binding_is_cached() {
        let mut params = Params::<f32>::new();
        params.insert("w", Tensor::scalar(2.0));
        let mut g = Graph::new(&params, Mode::Eval);
        let a = g.param("w").unwrap();
        let b = g.param("w").unwrap();
        assert_eq!(a, b);
        assert!(g.param("missing").is_err());
    }

    #[test]
    fn gradient_map_covers_untouched_params() {
        let mut params = Params::<f32>::new();
        params.insert("used", Tensor::scalar(1.5));
        params.insert("unused", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new(&params, Mode::Eval);
        let w = g.param("used").unwrap();
        let s = g.tape.sigmoid(w);
        let loss = g.tape.sum(s);
        let map = g.gradient_map(loss).unwrap();
        assert_eq!(map.len(), 2);
        assert!(map["unused"].data().iter().all(|&v| v == 0.0));
        assert!(map["used"].data()[0] != 0.0);
    }

    #[test]
    fn shared_parameter_accumulates_across_uses() {
        // loss = sum(w) + sum(w) -> grad 2 everywhere
        let mut params = Params::<f32>::new();
        params.insert("w", Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap());
        let mut g = Graph::new(&params, Mode::Eval);
        let w1 = g.param("w").unwrap();
        let w2 = g.param("w").unwrap();
        let s = g.tape.add(w1, w2).unwrap();
        let loss = g.tape.sum(s);
        let map = g.gradient_map(loss).unwrap();
        assert_eq!(map["w"].data(), &[2.0, 2.0]);
    }
}
