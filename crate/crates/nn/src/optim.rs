//! Adam with global gradient-norm clipping and plateau halving.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 gradient norm limit; 0 disables clipping.
    pub grad_clip: f64,
    /// Validation rounds without improvement before the rate is halved.
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub min_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 5.0,
            plateau_patience: 3,
            lr_factor: 0.5,
            min_lr: 1e-6,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer needs lr > 0 and betas in [0, 1)"));
        }
        if self.grad_clip < 0.0 || !(0.0..=1.0).contains(&self.lr_factor) {
            return Err(Error::config("grad_clip must be >= 0 and lr_factor in [0, 1]"));
        }
        Ok(())
    }
}

/// Scalar state that travels with the moment tensors in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub t: u64,
    pub best: Option<f64>,
    pub bad_rounds: usize,
    /// Updates applied to each parameter, for per-parameter bias correction.
    /// Parameters carried over from another run keep their own count.
    #[serde(default)]
    pub param_steps: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: OptimConfig,
    state: AdamState,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl Adam {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            state: AdamState {
                lr: config.lr,
                t: 0,
                best: None,
                bad_rounds: 0,
                param_steps: BTreeMap::new(),
            },
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.state.lr
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// Gradients of the named parameters, skipping ones outside the graph.
    fn collect<'a>(ps: &'a ParamStore, grads: &GradStore, names: &'a [String]) -> Result<Vec<(&'a String, Tensor)>> {
        let mut out = Vec::new();
        for name in names {
            let var = ps
                .get(name)
                .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
            if let Some(g) = grads.get(var.as_tensor()) {
                out.push((name, g.clone()));
            }
        }
        Ok(out)
    }

    /// Global gradient norm over the named parameters.
    pub fn grad_norm(ps: &ParamStore, grads: &GradStore, names: &[String]) -> Result<f64> {
        let mut total = 0.0;
        for (_, g) in Self::collect(ps, grads, names)? {
            total += scalar(&g.sqr()?.sum_all()?)?;
        }
        Ok(total.sqrt())
    }

    /// One update of the named parameters.
    pub fn step(&mut self, ps: &ParamStore, grads: &GradStore, names: &[String]) -> Result<StepStats> {
        let collected = Self::collect(ps, grads, names)?;
        let mut sq = 0.0;
        for (_, g) in &collected {
            sq += scalar(&g.sqr()?.sum_all()?)?;
        }
        let grad_norm = sq.sqrt();
        let c = &self.config;
        let clipped = c.grad_clip > 0.0 && grad_norm > c.grad_clip;
        let g_scale = if clipped { c.grad_clip / grad_norm } else { 1.0 };
        self.state.t += 1;
        for (name, g) in collected {
            let t = self.state.param_steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let t = (*t).min(i32::MAX as u64) as i32;
            let step = self.state.lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
            let var = ps.get(name).expect("collected names exist");
            let g = g.affine(g_scale, 0.0)?;
            let m = match self.m.get(name) {
                Some(m) => (m.affine(c.beta1, 0.0)? + g.affine(1.0 - c.beta1, 0.0)?)?,
                None => g.affine(1.0 - c.beta1, 0.0)?,
            };
            let v = match self.v.get(name) {
                Some(v) => (v.affine(c.beta2, 0.0)? + g.sqr()?.affine(1.0 - c.beta2, 0.0)?)?,
                None => g.sqr()?.affine(1.0 - c.beta2, 0.0)?,
            };
            let update = (&m / v.sqrt()?.affine(1.0, c.eps)?)?.affine(step, 0.0)?;
            var.set(&(var.as_tensor() - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(StepStats { grad_norm, clipped })
    }

    /// Feeds a validation loss (lower is better). Returns true when the
    /// learning rate was just halved.
    pub fn observe(&mut self, loss: f64) -> bool {
        let improved = self.state.best.is_none_or(|b| loss < b);
        if improved {
            self.state.best = Some(loss);
            self.state.bad_rounds = 0;
            return false;
        }
        self.state.bad_rounds += 1;
        if self.state.bad_rounds >= self.config.plateau_patience {
            self.state.bad_rounds = 0;
            let next = (self.state.lr * self.config.lr_factor).max(self.config.min_lr);
            let changed = next < self.state.lr;
            self.state.lr = next;
            return changed;
        }
        false
    }

    /// Moment tensors keyed `adam.m.<param>` / `adam.v.<param>`.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("adam.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("adam.v.{k}"), t.clone());
        }
        out
    }

    /// Carries moments and update counts of parameters under `prefix` over
    /// from another run's optimizer. Entries whose shape differs from the
    /// current parameter are ignored.
    pub fn import_moments(&mut self, ps: &ParamStore, state: &AdamState, tensors: &BTreeMap<String, Tensor>, prefix: &str) {
        for (name, var) in ps.vars() {
            if !name.starts_with(prefix) {
                continue;
            }
            let (Some(m), Some(v)) = (tensors.get(&format!("adam.m.{name}")), tensors.get(&format!("adam.v.{name}"))) else {
                continue;
            };
            if m.dims() != var.dims() || v.dims() != var.dims() {
                continue;
            }
            let t = state.param_steps.get(name).copied().unwrap_or(state.t);
            if t == 0 {
                continue;
            }
            self.m.insert(name.clone(), m.clone());
            self.v.insert(name.clone(), v.clone());
            self.state.param_steps.insert(name.clone(), t);
        }
    }

    pub fn restore(&mut self, state: AdamState, tensors: &BTreeMap<String, Tensor>) {
        self.state = state;
        self.m.clear();
        self.v.clear();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("adam.m.") {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("adam.v.") {
                self.v.insert(name.to_string(), t.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(ps: &ParamStore) -> Tensor {
        let x = ps.get("x").unwrap().as_tensor();
        (x - 3.0).unwrap().sqr().unwrap().sum_all().unwrap()
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut ps = ParamStore::new(0, DType::F64);
        ps.constant("x", &[4], 0.0).unwrap();
        let names = vec!["x".to_string()];
        let mut opt = Adam::new(OptimConfig {
            lr: 0.1,
            ..OptimConfig::default()
        })
        .unwrap();
        for _ in 0..500 {
            let g = quadratic(&ps).backward().unwrap();
            opt.step(&ps, &g, &names).unwrap();
        }
        assert!(scalar(&quadratic(&ps)).unwrap() < 1e-4);
    }

    #[test]
    fn clipping_reports_the_raw_norm() {
        let mut ps = ParamStore::new(0, DType::F64);
        ps.constant("x", &[4], -100.0).unwrap();
        let names = vec!["x".to_string()];
        let mut opt = Adam::new(OptimConfig::default()).unwrap();
        let g = quadratic(&ps).backward().unwrap();
        let s = opt.step(&ps, &g, &names).unwrap();
        assert!(s.clipped);
        assert!((s.grad_norm - 2.0 * 103.0 * 2.0).abs() < 1e-9);
    }

    #[test]
    fn imported_moments_continue_where_they_left_off() {
        let mut ps = ParamStore::new(0, DType::F64);
        ps.constant("a.x", &[4], 0.0).unwrap();
        ps.constant("b.x", &[4], 0.0).unwrap();
        let names = vec!["a.x".to_string(), "b.x".to_string()];
        let loss = |ps: &ParamStore| {
            let a = (ps.get("a.x").unwrap().as_tensor() - 3.0).unwrap().sqr().unwrap().sum_all().unwrap();
            let b = (ps.get("b.x").unwrap().as_tensor() - 3.0).unwrap().sqr().unwrap().sum_all().unwrap();
            (a + b).unwrap()
        };
        let mut first = Adam::new(OptimConfig { grad_clip: 0.0, ..OptimConfig::default() }).unwrap();
        for _ in 0..5 {
            first.step(&ps, &loss(&ps).backward().unwrap(), &names[..1]).unwrap();
        }
        let mut second = Adam::new(OptimConfig { grad_clip: 0.0, ..OptimConfig::default() }).unwrap();
        second.import_moments(&ps, first.state(), &first.tensors(), "a.");
        assert_eq!(second.state().param_steps.get("a.x"), Some(&5));
        assert!(!second.state().param_steps.contains_key("b.x"));

        let mut twin = first.clone();
        let before = ps.get("a.x").unwrap().as_tensor().copy().unwrap();
        let g = loss(&ps).backward().unwrap();
        second.step(&ps, &g, &names).unwrap();
        let via_import = ps.get("a.x").unwrap().as_tensor().copy().unwrap();
        ps.get("a.x").unwrap().set(&before).unwrap();
        twin.step(&ps, &g, &names[..1]).unwrap();
        let diff = (via_import - ps.get("a.x").unwrap().as_tensor()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar(&diff).unwrap() < 1e-12);
        assert_eq!(second.state().param_steps.get("b.x"), Some(&1));
    }

    #[test]
    fn plateau_halves_after_patience() {
        let mut opt = Adam::new(OptimConfig::default()).unwrap();
        assert!(!opt.observe(1.0));
        assert!(!opt.observe(1.0));
        assert!(!opt.observe(2.0));
        assert!(opt.observe(1.5));
        assert!((opt.lr() - 2.5e-4).abs() < 1e-15);
        assert!(!opt.observe(0.5));
    }
}
