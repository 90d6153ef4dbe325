use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moment estimation.
    Adam,
    /// Stochastic gradient descent with heavy-ball momentum.
    Sgd,
}

/// Optimizer and schedule settings for one training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub method: OptimizerKind,
    pub learning_rate: f64,
    /// Epoch indices (0-based) at which the learning rate is multiplied by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs for every increment after the first; `None` reuses `epochs`.
    pub epochs_next: Option<usize>,
}

impl OptimizerConfig {
    /// Autoencoder defaults: 100 epochs of Adam at 1e-3, decayed 10x at epoch 50.
    pub fn autoencoder_default() -> Self {
        Self {
            method: OptimizerKind::Adam,
            learning_rate: 0.001,
            milestones: vec![50],
            decay_factor: 0.1,
            weight_decay: 0.0005,
            momentum: 0.0,
            batch_size: 128,
            epochs: 100,
            epochs_next: None,
        }
    }

    /// Classifier defaults: SGD(0.9) at 0.1, decayed 5x at 60/120/160, 200 then 45 epochs.
    pub fn classifier_default() -> Self {
        Self {
            method: OptimizerKind::Sgd,
            learning_rate: 0.1,
            milestones: vec![60, 120, 160],
            decay_factor: 0.2,
            weight_decay: 0.0005,
            momentum: 0.9,
            batch_size: 128,
            epochs: 200,
            epochs_next: Some(45),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Range(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Range(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Range("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Range("momentum must be in [0,1], weight decay >= 0".into()));
        }
        if !(self.decay_factor > 0.0) {
            return Err(Error::Range("decay factor must be > 0".into()));
        }
        Ok(())
    }

    /// Epoch budget for the given 1-based increment.
    pub fn epochs_for(&self, increment: usize) -> usize {
        match (increment, self.epochs_next) {
            (0 | 1, _) | (_, None) => self.epochs,
            (_, Some(next)) => next,
        }
    }

    /// Step-decayed learning rate at a 0-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.learning_rate * self.decay_factor.powi(passed as i32)
    }

    pub fn build<T: Scalar>(&self) -> Optimizer<T> {
        match self.method {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(self.learning_rate, self.weight_decay)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(
                self.learning_rate,
                self.momentum,
                self.weight_decay,
            )),
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::autoencoder_default()
    }
}

/// Adam with coupled (L2) weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    fn step(&mut self, params: &mut [&mut Param<T>]) {
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let wd = T::from_f64_lossy(self.weight_decay);
        let eps = T::from_f64_lossy(self.eps);
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(self.step));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(self.step));
        let lr = T::from_f64_lossy(self.lr);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            for i in 0..p.value.len() {
                let g = p.grad[i] + wd * p.value[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// SGD with momentum and coupled weight decay.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    fn step(&mut self, params: &mut [&mut Param<T>]) {
        let fresh = self.velocity.len() != params.len();
        if fresh {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        }
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let lr = T::from_f64_lossy(self.lr);
        for (p, buf) in params.iter_mut().zip(&mut self.velocity) {
            if buf.len() != p.value.len() {
                // parameter grew (classifier head expansion)
                buf.resize(p.value.len(), T::zero());
            }
            for i in 0..p.value.len() {
                let g = p.grad[i] + wd * p.value[i];
                buf[i] = if fresh { g } else { mu * buf[i] + g };
                p.value[i] -= lr * buf[i];
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Adam(Adam<T>),
    Sgd(Sgd<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn set_learning_rate(&mut self, lr: f64) {
        match self {
            Optimizer::Adam(o) => o.lr = lr,
            Optimizer::Sgd(o) => o.lr = lr,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>]) {
        match self {
            Optimizer::Adam(o) => o.step(params),
            Optimizer::Sgd(o) => o.step(params),
        }
    }
}
