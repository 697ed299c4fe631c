//! Named trainable parameters with seeded initialisation.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Ordered map of parameter name to variable. Names are dotted paths such
/// as `backbone.tcn.3.dw.weight`.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.vars.len())
            .field("scalars", &self.count())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::config(format!("parameter {name} defined twice")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.insert(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    /// Weight `[out, in]` and bias `[out]` with the usual `1/sqrt(fan_in)`
    /// uniform bound.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<(Tensor, Tensor)> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(&format!("{prefix}.weight"), &[fan_out, fan_in], bound)?;
        let b = self.uniform(&format!("{prefix}.bias"), &[fan_out], bound)?;
        Ok((w, b))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.vars.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites a parameter's value, checking the shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::config(format!(
                "parameter {name} has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_four_to_three_has_fifteen_scalars() {
        let mut p = ParamStore::new(0, DType::F32);
        p.linear("fc", 4, 3).unwrap();
        assert_eq!(p.count(), 15);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let mut a = ParamStore::new(7, DType::F32);
        let mut b = ParamStore::new(7, DType::F32);
        let ta = a.uniform("w", &[5, 5], 0.3).unwrap();
        let tb = b.uniform("w", &[5, 5], 0.3).unwrap();
        assert_eq!(ta.to_vec2::<f32>().unwrap(), tb.to_vec2::<f32>().unwrap());
        assert!(a.uniform("w", &[1], 1.0).is_err());
    }

    #[test]
    fn assign_checks_shape() {
        let mut p = ParamStore::new(0, DType::F64);
        p.constant("g", &[3], 1.0).unwrap();
        let bad = Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap();
        assert!(p.assign("g", &bad).is_err());
        let ok = Tensor::new(&[1.0f64, 2.0, 3.0], &Device::Cpu).unwrap();
        p.assign("g", &ok).unwrap();
        let v = p.get("g").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        assert_eq!(v, vec![1.0, 2.0, 3.0]);
    }
}
