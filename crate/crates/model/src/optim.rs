//! AdamW with per-group learning rates.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip the global gradient norm of each step to this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: Some(1.0) }
    }
}

/// Parameters whose name starts with one of `prefixes`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub name: String,
    pub prefixes: Vec<String>,
    pub lr: f64,
    pub weight_decay: f64,
}

impl GroupSpec {
    pub fn new(name: &str, prefixes: &[&str], lr: f64, weight_decay: f64) -> Self {
        Self {
            name: name.to_string(),
            prefixes: prefixes.iter().map(|p| p.to_string()).collect(),
            lr,
            weight_decay,
        }
    }
}

struct Group {
    spec: GroupSpec,
    params: Vec<(String, Var)>,
}

pub struct AdamW {
    cfg: AdamConfig,
    groups: Vec<Group>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamW {
    /// Every parameter must fall in exactly one group (first matching prefix wins).
    pub fn new(store: &ParamStore, specs: Vec<GroupSpec>, cfg: AdamConfig) -> Result<Self> {
        let mut groups: Vec<Group> = specs.into_iter().map(|spec| Group { spec, params: Vec::new() }).collect();
        for g in &groups {
            if !(g.spec.lr >= 0.0 && g.spec.lr.is_finite()) || g.spec.weight_decay < 0.0 {
                return Err(ModelError::Param(format!("group {}: lr {} / weight decay {}", g.spec.name, g.spec.lr, g.spec.weight_decay)));
            }
        }
        for (name, var) in store.iter() {
            let g = groups
                .iter_mut()
                .find(|g| g.spec.prefixes.iter().any(|p| name.starts_with(p.as_str())))
                .ok_or_else(|| ModelError::Param(format!("parameter {name} matches no optimizer group")))?;
            g.params.push((name.clone(), var.clone()));
        }
        Ok(Self { cfg, groups, m: BTreeMap::new(), v: BTreeMap::new(), step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, group: &str, lr: f64) -> Result<()> {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.spec.name == group)
            .ok_or_else(|| ModelError::Param(format!("no optimizer group {group}")))?;
        g.spec.lr = lr;
        Ok(())
    }

    pub fn lr(&self, group: &str) -> Option<f64> {
        self.groups.iter().find(|g| g.spec.name == group).map(|g| g.spec.lr)
    }

    /// Global L2 norm of the gradients of trainable groups.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for g in self.groups.iter().filter(|g| g.spec.lr > 0.0) {
            for (_, var) in &g.params {
                if let Some(gr) = grads.get(var.as_tensor()) {
                    sq += gr.detach().sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                }
            }
        }
        Ok(sq.sqrt())
    }

    /// One update. Groups with lr 0 are left untouched, state included.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let clip = match self.cfg.max_grad_norm {
            Some(max) => {
                let norm = self.grad_norm(grads)?;
                if !norm.is_finite() {
                    return Err(ModelError::Param(format!("non-finite gradient norm {norm}")));
                }
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for g in &self.groups {
            let (lr, wd) = (g.spec.lr, g.spec.weight_decay);
            if lr == 0.0 {
                continue;
            }
            for (name, var) in &g.params {
                let Some(grad) = grads.get(var.as_tensor()) else { continue };
                let grad = (grad.detach() * clip)?;
                let m = match self.m.get(name) {
                    Some(m) => ((m * b1)? + (&grad * (1.0 - b1))?)?,
                    None => (&grad * (1.0 - b1))?,
                };
                let v = match self.v.get(name) {
                    Some(v) => ((v * b2)? + (grad.sqr()? * (1.0 - b2))?)?,
                    None => (grad.sqr()? * (1.0 - b2))?,
                };
                let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.cfg.eps)?)?;
                let (m, v) = (m.detach(), v.detach());
                let p = &var.as_detached_tensor();
                let mut next = (p - (update * lr)?)?;
                if wd > 0.0 {
                    next = (next - (p * (lr * wd))?)?;
                }
                var.set(&next)?;
                self.m.insert(name.clone(), m);
                self.v.insert(name.clone(), v);
            }
        }
        Ok(())
    }

    /// Moment tensors named `opt.m.<param>` / `opt.v.<param>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("opt.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("opt.v.{k}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, step: u64) {
        self.m.clear();
        self.v.clear();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("opt.m.") {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("opt.v.") {
                self.v.insert(name.to_string(), t.clone());
            }
        }
        self.step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, VarBuilder};
    use candle_core::DType;

    #[test]
    fn minimises_quadratic_and_respects_frozen_group() {
        let vb = VarBuilder::new(0, DType::F64);
        let a = vb.pp("a").get(&[3], "w", Init::Const(2.0)).unwrap();
        let b = vb.pp("b").get(&[2], "w", Init::Const(-1.0)).unwrap();
        let store = vb.finish().unwrap();
        let mut opt = AdamW::new(
            &store,
            vec![GroupSpec::new("frozen", &["a."], 0.0, 0.0), GroupSpec::new("rest", &[""], 0.05, 0.0)],
            AdamConfig { max_grad_norm: None, ..Default::default() },
        )
        .unwrap();
        for _ in 0..400 {
            let loss = (a.sqr().unwrap().sum_all().unwrap() + (b.clone() - 3.0).unwrap().sqr().unwrap().sum_all().unwrap()).unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        assert_eq!(a.to_vec1::<f64>().unwrap(), [2.0; 3]);
        for x in b.to_vec1::<f64>().unwrap() {
            assert!((x - 3.0).abs() < 1e-2, "{x}");
        }
        assert_eq!(opt.step_count(), 400);
        assert!(opt.state_tensors().keys().all(|k| k.ends_with("b.w")));
    }

    #[test]
    fn unmatched_parameter_is_an_error() {
        let vb = VarBuilder::new(0, DType::F32);
        vb.pp("x").get(&[1], "w", Init::Zeros).unwrap();
        let store = vb.finish().unwrap();
        assert!(AdamW::new(&store, vec![GroupSpec::new("g", &["y."], 1.0, 0.0)], AdamConfig::default()).is_err());
    }
}
