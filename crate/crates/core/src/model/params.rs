//! Named trainable parameters with seeded, order-independent initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Normal with mean 0 and the given standard deviation.
    Normal(f64),
}

/// Which learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Rest,
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates a parameter. Values depend only on the run seed and `name`.
    pub fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        let mut rng = seed::rng(self.seed, &format!("init/{name}"), 0);
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("backbone.") {
            ParamGroup::Backbone
        } else {
            ParamGroup::Rest
        }
    }

    /// Overwrites a parameter in place, keeping its shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                var.shape().dims(),
                value.shape().dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?.contiguous()?)?;
        Ok(())
    }
}

/// Prefix helper so layer constructors can name their parameters.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a mut ParamStore, prefix: impl Into<String>) -> Self {
        Self {
            store,
            prefix: prefix.into(),
        }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(&full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new(5, DType::F64, Device::Cpu);
        let mut b = ParamStore::new(5, DType::F64, Device::Cpu);
        let a1 = a.create("x", &[3, 2], Init::Normal(1.0)).unwrap();
        a.create("y", &[4], Init::Uniform(0.5)).unwrap();
        b.create("y", &[4], Init::Uniform(0.5)).unwrap();
        let b1 = b.create("x", &[3, 2], Init::Normal(1.0)).unwrap();
        assert_eq!(a1.to_vec2::<f64>().unwrap(), b1.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new(0, DType::F32, Device::Cpu);
        s.create("w", &[1], Init::Zeros).unwrap();
        assert!(s.create("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn groups_follow_prefix() {
        assert_eq!(ParamStore::group_of("backbone.block0.weight"), ParamGroup::Backbone);
        assert_eq!(ParamStore::group_of("input_proj.weight"), ParamGroup::Rest);
    }
}
