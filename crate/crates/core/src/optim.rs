//! Adam with bias correction, keyed by parameter name.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::Param;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.0, beta2: 0.9, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(alloc::format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(alloc::format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(alloc::format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update of every parameter from its gradient, in order.
    pub fn step(&mut self, params: &[&Param<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidInput(alloc::format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, lr, eps) = (T::one(), T::lit(c.lr), T::lit(c.eps));
        let bc1 = one - T::lit(libm::pow(c.beta1, self.t as f64));
        let bc2 = one - T::lit(libm::pow(c.beta2, self.t as f64));
        for (p, g) in params.iter().zip(grads) {
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch { op: "adam", lhs: p.shape(), rhs: g.shape() });
            }
            let name = p.name();
            let m = match self.m.get(name) {
                Some(m) => m.zip_with(g, "adam", |m, g| b1 * m + (one - b1) * g)?,
                None => g.map(|g| (one - b1) * g),
            };
            let v = match self.v.get(name) {
                Some(v) => v.zip_with(g, "adam", |v, g| b2 * v + (one - b2) * g * g)?,
                None => g.map(|g| (one - b2) * g * g),
            };
            let step = m.zip_with(&v, "adam", |m, v| lr * (m / bc1) / ((v / bc2).sqrt() + eps))?;
            p.set(p.value().zip_with(&step, "adam", |w, s| w - s)?);
            self.m.insert(name.into(), m);
            self.v.insert(name.into(), v);
        }
        Ok(())
    }

    /// Stores moments as `<prefix>.m.<param>` / `<prefix>.v.<param>` and the step count in the metadata.
    pub fn export(&self, prefix: &str, ckpt: &mut Checkpoint) {
        ckpt.meta.insert(alloc::format!("{prefix}.t"), alloc::format!("{}", self.t));
        for (name, m) in &self.m {
            ckpt.arrays.insert(alloc::format!("{prefix}.m.{name}"), m.cast());
        }
        for (name, v) in &self.v {
            ckpt.arrays.insert(alloc::format!("{prefix}.v.{name}"), v.cast());
        }
    }

    pub fn import(config: AdamConfig, prefix: &str, ckpt: &Checkpoint) -> Result<Self> {
        let mut adam = Adam::new(config);
        adam.t = ckpt.meta_parse(&alloc::format!("{prefix}.t"))?;
        let (pm, pv) = (alloc::format!("{prefix}.m."), alloc::format!("{prefix}.v."));
        for (key, arr) in &ckpt.arrays {
            if let Some(name) = key.strip_prefix(&pm) {
                adam.m.insert(name.into(), arr.cast());
            } else if let Some(name) = key.strip_prefix(&pv) {
                adam.v.insert(name.into(), arr.cast());
            }
        }
        let names: Vec<&String> = adam.m.keys().collect();
        if names != adam.v.keys().collect::<Vec<_>>() {
            return Err(Error::Checkpoint(alloc::format!("{prefix}: first and second moments cover different parameters")));
        }
        Ok(adam)
    }

    pub fn moment(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.m.get(name)?, self.v.get(name)?))
    }
}
