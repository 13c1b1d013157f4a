use serde::{Deserialize, Serialize};

use super::graph::ParamSet;
use super::tensor::Real;
use crate::error::{Error, Result};

/// SGD with momentum and polynomial learning-rate decay
/// `lr(t) = lr0 (1 - t / total_steps)^power`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdSchedule {
    pub lr0: f64,
    pub total_steps: usize,
    pub power: f64,
    pub momentum: f64,
}

impl Default for SgdSchedule {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            total_steps: 1000,
            power: 0.9,
            momentum: 0.9,
        }
    }
}

impl SgdSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidParameter("total_steps must be positive".into()));
        }
        if !(self.power > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "power must be positive, got {}",
                self.power
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::StepOverflow {
                step,
                total: self.total_steps,
            });
        }
        Ok(self.lr0 * (1.0 - step as f64 / self.total_steps as f64).powf(self.power))
    }
}

/// One momentum-SGD update from the accumulated gradients, which are then
/// cleared. Returns the learning rate used.
pub fn sgd_step<T: Real>(params: &mut ParamSet<T>, schedule: &SgdSchedule, step: usize) -> Result<f64> {
    let lr = schedule.lr(step)?;
    let (lr_t, mom) = (T::lit(lr), T::lit(schedule.momentum));
    for p in params.iter_mut() {
        let grad = p.grad.data();
        for ((v, m), &g) in p.value.data_mut().iter_mut().zip(p.momentum_buf.data_mut()).zip(grad) {
            *m = mom * *m + g;
            *v -= lr_t * *m;
        }
        p.grad.fill(T::zero());
    }
    Ok(lr)
}
