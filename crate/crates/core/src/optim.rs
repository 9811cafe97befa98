//! AdamW with decoupled weight decay, and patience-based early stopping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            patience: 5,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Parameter(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Parameter(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter("eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct OptimState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

/// One parameter tensor and its gradient.
pub struct ParamSlot<'a> {
    pub name: &'a str,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: OptimConfig,
    state: OptimState,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: OptimState::default(),
        })
    }

    pub fn with_state(config: OptimConfig, state: OptimState) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn state(&self) -> &OptimState {
        &self.state
    }

    pub fn into_state(self) -> OptimState {
        self.state
    }

    /// Fails with the offending parameter name if any gradient is NaN or
    /// infinite; nothing is updated in that case.
    pub fn check_grads<'a>(names_and_grads: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> Result<()> {
        for (name, grad) in names_and_grads {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric {
                    name: name.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Advances the shared step counter. Call once per optimizer step, then
    /// [`update`](Self::update) each parameter.
    pub fn begin_step(&mut self) -> u64 {
        self.state.step += 1;
        self.state.step
    }

    pub fn update(&mut self, name: &str, value: &mut [f64], grad: &[f64]) -> Result<()> {
        if value.len() != grad.len() {
            return Err(Error::dim("adamw", (1, value.len()), (1, grad.len())));
        }
        let t = self.state.step.max(1) as i32;
        let OptimConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let moments = self
            .state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: vec![0.0; value.len()],
                v: vec![0.0; value.len()],
            });
        if moments.m.len() != value.len() {
            return Err(Error::dim("adamw state", (1, moments.m.len()), (1, value.len())));
        }
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for i in 0..value.len() {
            let g = grad[i];
            let m = &mut moments.m[i];
            let v = &mut moments.v[i];
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            value[i] = value[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [ParamSlot<'_>]) -> Result<()> {
        Self::check_grads(params.iter().map(|p| (p.name, p.grad)))?;
        self.begin_step();
        for p in params.iter_mut() {
            self.update(p.name, p.value, p.grad)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EarlyStop {
    Continue,
    Stop,
}

/// Stops once the best dev score is `patience` or more epochs old.
pub fn early_stop(history: &[f64], patience: usize) -> EarlyStop {
    let Some(best) = best_epoch(history) else {
        return EarlyStop::Continue;
    };
    if history.len() - 1 - best >= patience {
        EarlyStop::Stop
    } else {
        EarlyStop::Continue
    }
}

/// Index of the first strict maximum.
pub fn best_epoch(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in history.iter().enumerate() {
        if best.is_none_or(|b| v > history[b]) {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_no_decay_is_fixed_point() {
        let mut opt = AdamW::new(OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        })
        .unwrap();
        let mut x = vec![1.0, -2.0, 3.0];
        for _ in 0..5 {
            opt.step(&mut [ParamSlot {
                name: "x",
                value: &mut x,
                grad: &[0.0; 3],
            }])
            .unwrap();
        }
        assert_eq!(x, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = OptimConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg.clone()).unwrap();
        let mut x = [0.5];
        opt.step(&mut [ParamSlot {
            name: "x",
            value: &mut x,
            grad: &[1.0],
        }])
        .unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((x[0] - (0.5 - 0.01 / (1.0 + cfg.eps))).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_closed_form() {
        let cfg = OptimConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut x = [2.0];
        for _ in 0..3 {
            opt.step(&mut [ParamSlot {
                name: "x",
                value: &mut x,
                grad: &[0.0],
            }])
            .unwrap();
        }
        assert!((x[0] - 2.0 * 0.95f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_named_and_nothing_moves() {
        let mut opt = AdamW::new(OptimConfig::default()).unwrap();
        let mut a = [1.0];
        let mut b = [1.0];
        let err = opt
            .step(&mut [
                ParamSlot {
                    name: "a",
                    value: &mut a,
                    grad: &[1.0],
                },
                ParamSlot {
                    name: "b",
                    value: &mut b,
                    grad: &[f64::NAN],
                },
            ])
            .unwrap_err();
        assert!(matches!(err, Error::Numeric { ref name } if name == "b"));
        assert_eq!(a, [1.0]);
        assert_eq!(opt.state().step, 0);
    }

    #[test]
    fn config_validation() {
        assert!(AdamW::new(OptimConfig {
            lr: 0.0,
            ..OptimConfig::default()
        })
        .is_err());
        assert!(AdamW::new(OptimConfig {
            beta1: 1.0,
            ..OptimConfig::default()
        })
        .is_err());
    }

    #[test]
    fn early_stopping_rules() {
        assert_eq!(early_stop(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 5), EarlyStop::Continue);
        assert_eq!(early_stop(&[0.7, 0.69, 0.69, 0.69, 0.69, 0.69], 5), EarlyStop::Stop);
        assert_eq!(early_stop(&[0.7, 0.69, 0.69, 0.69, 0.69], 5), EarlyStop::Continue);
        assert_eq!(early_stop(&[0.5], 5), EarlyStop::Continue);
        assert_eq!(early_stop(&[], 5), EarlyStop::Continue);
        // ties do not count as improvement
        assert_eq!(early_stop(&[0.5, 0.5, 0.5], 2), EarlyStop::Stop);
    }
}
