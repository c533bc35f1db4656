use std::collections::BTreeMap;

use super::params::{Gradients, ParamStore};
use super::tape::{BatchStats, BnMode, Tape, Var};
use crate::error::{Error, Result};

/// Running-statistics momentum for normalization layers.
pub const BN_MOMENTUM: f64 = 0.9;

/// A tape bound to a parameter store. Parameters are copied onto the tape
/// lazily on first use and tracked by name so gradients can be read back.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: BTreeMap<String, Var>,
    train: bool,
    bn_stats: Vec<(String, BatchStats)>,
}

impl<'p> Graph<'p> {
    /// `train` selects batch statistics for normalization and marks
    /// parameters as requiring gradients.
    pub fn new(params: &'p ParamStore, train: bool) -> Self {
        Graph { tape: Tape::new(), params, bound: BTreeMap::new(), train, bn_stats: Vec::new() }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.tape.leaf(value, self.train);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv(&mut self, x: Var, layer: &str, stride: usize, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{layer}.w"))?;
        let b = self.param(&format!("{layer}.b"))?;
        self.tape.conv2d(x, w, b, stride, padding)
    }

    pub fn tconv(&mut self, x: Var, layer: &str, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{layer}.w"))?;
        let b = self.param(&format!("{layer}.b"))?;
        self.tape.tconv2d(x, w, b, padding)
    }

    pub fn linear(&mut self, x: Var, layer: &str) -> Result<Var> {
        let w = self.param(&format!("{layer}.w"))?;
        let b = self.param(&format!("{layer}.b"))?;
        self.tape.linear(x, w, b)
    }

    /// Normalization layer `layer`; identity when the store has no such layer
    /// (normalization disabled at model construction).
    pub fn bn(&mut self, x: Var, layer: &str) -> Result<Var> {
        let scale_name = format!("{layer}.scale");
        if !self.params.contains(&scale_name) {
            return Ok(x);
        }
        let scale = self.param(&scale_name)?;
        let shift = self.param(&format!("{layer}.shift"))?;
        if self.train {
            let (y, stats) = self.tape.batchnorm(x, scale, shift, BnMode::Train)?;
            self.bn_stats.push((layer.to_string(), stats.unwrap()));
            Ok(y)
        } else {
            let params = self.params;
            let mean = params.get(&format!("{layer}.running_mean")).unwrap().data();
            let var = params.get(&format!("{layer}.running_var")).unwrap().data();
            let (y, _) = self.tape.batchnorm(x, scale, shift, BnMode::Eval { mean, var })?;
            Ok(y)
        }
    }

    /// Gradients of every parameter bound during the forward pass.
    pub fn param_grads(&self) -> Gradients {
        Gradients(self.bound.iter().map(|(n, &v)| (n.clone(), self.tape.grad(v))).collect())
    }

    /// Batch statistics gathered by train-mode normalization layers.
    pub fn take_bn_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_stats)
    }
}

/// Blend batch statistics into the running buffers of `store`.
pub fn apply_bn_stats(store: &mut ParamStore, stats: &[(String, BatchStats)]) {
    for (layer, s) in stats {
        for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
            if let Some(t) = store.get_mut(&format!("{layer}.{suffix}")) {
                for (r, b) in t.data_mut().iter_mut().zip(batch.iter()) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
        }
    }
}
