use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

/// AdamW hyperparameters. Weight decay is decoupled from the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("eps must be positive"));
        }
        Ok(())
    }
}

/// AdamW moments for a fixed list of parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. `decay[i]` selects whether
    /// `params[i]` is weight-decayed.
    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>], decay: &[bool], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != decay.len() {
            return Err(shape_err(
                "adamw_step",
                format!("{} gradients and decay flags", params.len()),
                format!("{} / {}", grads.len(), decay.len()),
            ));
        }
        if self.t == 0 {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.m.get(i).map(Vec::len) != Some(p.len()) {
                return Err(shape_err("adamw_step", format!("parameter {i} of length {}", p.len()), g.len().to_string()));
            }
        }
        self.t += 1;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(self.t as i32);
        let bias2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                if decay[i] {
                    p[j] -= lr * c.weight_decay * p[j];
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint Euclidean norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SchedulerKind {
    None,
    /// Cosine decay from the base rate to zero over the run.
    Cosine,
    /// Multiply by `factor` after `patience` epochs without a new best
    /// validation loss.
    Plateau { patience: usize, factor: f64 },
}

impl SchedulerKind {
    pub fn plateau_default() -> Self {
        SchedulerKind::Plateau { patience: 5, factor: 0.1 }
    }
}

/// Per-epoch learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Scheduler {
    kind: SchedulerKind,
    base_lr: f64,
    epochs: usize,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl Scheduler {
    pub fn new(kind: SchedulerKind, base_lr: f64, epochs: usize) -> Self {
        Self {
            kind,
            base_lr,
            epochs,
            lr: base_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Rate for 1-based `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        match self.kind {
            SchedulerKind::Cosine => {
                let progress = (epoch.saturating_sub(1)) as f64 / self.epochs.max(1) as f64;
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            _ => self.lr,
        }
    }

    /// Records the validation loss at the end of an epoch.
    pub fn observe(&mut self, val_loss: f64) {
        if let SchedulerKind::Plateau { patience, factor } = self.kind {
            if val_loss < self.best {
                self.best = val_loss;
                self.bad_epochs = 0;
            } else {
                self.bad_epochs += 1;
                if self.bad_epochs > patience {
                    self.lr *= factor;
                    self.bad_epochs = 0;
                }
            }
        }
    }
}
