use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Result, Tensor, Var};

/// Cosine decay from `start` to `end` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CosineDecay {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
}

impl CosineDecay {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.start;
        }
        let progress = (step.min(self.total_steps - 1) as f64) / (self.total_steps - 1) as f64;
        self.end + 0.5 * (self.start - self.end) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Parameters are visited in name order.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    steps: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, vars: &[(String, Var)], grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (name, var) in vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = match self.first.get(name) {
                Some(m) => ((m * beta1)? + (&g * (1.0 - beta1))?)?,
                None => (&g * (1.0 - beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let update = ((&m / bias1)? / ((&v / bias2)?.sqrt()? + eps)?)?;
            let theta = var.as_detached_tensor();
            let next = ((&theta * (1.0 - lr * weight_decay))? - (update * lr)?)?;
            var.set(&next)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment buffers as `m.<name>` / `v.<name>` plus the step counter.
    pub fn state(&self) -> (u64, BTreeMap<String, Tensor>) {
        let mut out = BTreeMap::new();
        for (k, t) in &self.first {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.second {
            out.insert(format!("v.{k}"), t.clone());
        }
        (self.steps, out)
    }

    pub fn restore(cfg: AdamWConfig, steps: u64, state: &BTreeMap<String, Tensor>) -> Self {
        let mut opt = Self::new(cfg);
        opt.steps = steps;
        for (k, t) in state {
            if let Some(name) = k.strip_prefix("m.") {
                opt.first.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                opt.second.insert(name.to_string(), t.clone());
            }
        }
        opt
    }
}
