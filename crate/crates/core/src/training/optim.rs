use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate ({}) must be finite and non-negative", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} ({b}) must lie in [0, 1)")));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::config(format!("eps ({}) must be positive", self.eps)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config(format!("weight_decay ({}) must be non-negative", self.weight_decay)));
        }
        Ok(())
    }
}

/// Per-parameter first and second moment estimates.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub updates: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros = |v: &Var| -> Result<Tensor> { Ok(v.as_tensor().zeros_like()?) };
        Ok(Self {
            config,
            updates: 0,
            first: params.iter().map(|(_, v)| zeros(v)).collect::<Result<_>>()?,
            second: params.iter().map(|(_, v)| zeros(v)).collect::<Result<_>>()?,
        })
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        let c = self.config;
        self.updates += 1;
        let k = self.updates as i32;
        let bias1 = 1.0 - c.beta1.powi(k);
        let bias2 = 1.0 - c.beta2.powi(k);
        for (i, (_, var)) in params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry op history; keeping it in the moments would
            // retain every step's graph.
            let g = &g.detach();
            let m = ((&self.first[i] * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = ((&self.second[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let update = ((&m / bias1)? / (((&v / bias2)?.sqrt()? + c.eps)?))?;
            let theta = var.as_tensor().detach();
            let decayed = (&theta * (1.0 - c.learning_rate * c.weight_decay))?;
            var.set(&(decayed - (update * c.learning_rate)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    /// Moment tensors named `optim.m.<param>` / `optim.v.<param>`.
    pub fn named_state(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        params
            .iter()
            .enumerate()
            .flat_map(|(i, (name, _))| {
                [
                    (format!("optim.m.{name}"), self.first[i].clone()),
                    (format!("optim.v.{name}"), self.second[i].clone()),
                ]
            })
            .collect()
    }

    pub fn load_state(&mut self, params: &ParamStore, tensors: &std::collections::HashMap<String, Tensor>, updates: u64) -> Result<()> {
        for (i, (name, var)) in params.iter().enumerate() {
            let get = |kind: &str| -> Result<Tensor> {
                let t = tensors
                    .get(&format!("optim.{kind}.{name}"))
                    .ok_or_else(|| Error::arg(format!("checkpoint lacks optimizer state for {name}")))?;
                Ok(t.to_dtype(var.dtype())?)
            };
            self.first[i] = get("m")?;
            self.second[i] = get("v")?;
        }
        self.updates = updates;
        Ok(())
    }
}
