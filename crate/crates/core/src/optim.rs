//! Adam, reduce-on-plateau learning-rate schedule and early stopping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<E> {
    pub m: Tensor<E>,
    pub v: Tensor<E>,
}

/// Adam with bias-corrected moment estimates:
/// `w -= lr * m̂ / (sqrt(v̂) + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<E> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, Moments<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<ParamId, Moments<E>> {
        &self.moments
    }

    /// Rebuilds an optimizer from saved state.
    pub fn from_state(config: AdamConfig, step: u64, moments: BTreeMap<ParamId, Moments<E>>) -> Self {
        Adam { config, step, moments }
    }

    /// Applies one update to every `(id, param)` that has a gradient.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (ParamId, &'a mut Tensor<E>)>,
        grads: &GradMap<E>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let b1 = E::from_f64_lossy(c.beta1);
        let b2 = E::from_f64_lossy(c.beta2);
        let one = E::one();
        let lr = E::from_f64_lossy(c.lr);
        let eps = E::from_f64_lossy(c.eps);
        let inv_bc1 = E::from_f64_lossy(1.0 / bc1);
        let inv_bc2 = E::from_f64_lossy(1.0 / bc2);

        for (id, param) in params {
            let Some(grad) = grads.get(id) else {
                continue;
            };
            if grad.shape() != param.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("parameter {id}: gradient {} vs value {}", grad.shape(), param.shape()),
                ));
            }
            let st = self.moments.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(param.shape()),
                v: Tensor::zeros(param.shape()),
            });
            if st.m.shape() != param.shape() {
                return Err(Error::shape("adam", format!("parameter {id}: stale moment shape")));
            }
            let w = param.data_mut();
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m).zip(v).zip(grad.data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m * inv_bc1;
                let v_hat = *v * inv_bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Tracks the best value of a monitored quantity and how many
/// observations have passed without a strict improvement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTracker {
    pub best: Option<f64>,
    pub wait: usize,
    pub min_delta: f64,
}

impl ImprovementTracker {
    pub fn new(min_delta: f64) -> Self {
        ImprovementTracker {
            best: None,
            wait: 0,
            min_delta,
        }
    }

    /// `true` when `value` is strictly below `best - min_delta`.
    pub fn is_improvement(&self, value: f64) -> bool {
        match self.best {
            None => true,
            Some(b) => value < b - self.min_delta,
        }
    }

    pub fn observe(&mut self, value: f64) -> bool {
        let improved = self.is_improvement(value);
        if improved {
            self.best = Some(value);
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        improved
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: Option<f64>,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.2,
            patience: 5,
            min_delta: 0.0,
            min_lr: None,
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored value has
/// failed to improve for more than `patience` consecutive observations.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    config: PlateauConfig,
    tracker: ImprovementTracker,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, config: PlateauConfig) -> Result<Self> {
        if initial_lr.is_nan() || initial_lr <= 0.0 || !(config.factor > 0.0 && config.factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau schedule needs lr > 0 and 0 < factor < 1 (lr {initial_lr}, factor {})",
                config.factor
            )));
        }
        Ok(PlateauScheduler {
            lr: initial_lr,
            tracker: ImprovementTracker::new(config.min_delta),
            config,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn tracker(&self) -> &ImprovementTracker {
        &self.tracker
    }

    /// Observes one epoch's monitored value and returns the learning rate
    /// for the next epoch.
    pub fn update(&mut self, value: f64) -> f64 {
        self.tracker.observe(value);
        if self.tracker.wait > self.config.patience {
            let mut next = self.lr * self.config.factor;
            if let Some(floor) = self.config.min_lr {
                next = next.max(floor);
            }
            self.lr = next;
            self.tracker.wait = 0;
        }
        self.lr
    }
}

/// Stops once the monitored value has not improved for more than
/// `patience` consecutive observations. Stopping is permanent.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    tracker: ImprovementTracker,
    stopped: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopper {
            patience,
            tracker: ImprovementTracker::new(min_delta),
            stopped: false,
        }
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    pub fn tracker(&self) -> &ImprovementTracker {
        &self.tracker
    }

    pub fn update(&mut self, value: f64) -> bool {
        if self.stopped {
            return true;
        }
        self.tracker.observe(value);
        if self.tracker.wait > self.patience {
            self.stopped = true;
        }
        self.stopped
    }
}
