//! Adam with bias correction, plus the warmup + cosine learning-rate
//! schedule used for fine-tuning.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment accumulators, one pair per parameter tensor, in the
/// same order as `ParamNet::param_names`.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub hyper: AdamParams,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(param_shapes: &[&[usize]], hyper: AdamParams) -> Self {
        let first_moment = param_shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        let second_moment = param_shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        AdamState { hyper, first_moment, second_moment, step_count: 0 }
    }

    pub fn for_params(params: &[&Tensor], hyper: AdamParams) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(&shapes, hyper)
    }
}

/// One Adam update over a parameter set. `grads[i] = None` means the
/// parameter is held fixed this step (frozen backbone): its value and
/// moments are left untouched. `lr` overrides `hyper.learning_rate` when
/// set (schedule-driven fine-tuning).
pub fn adam_step(
    params: &mut [&mut Tensor],
    names: &[String],
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: Option<f64>,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != names.len()
    {
        return Err(Error::Contract(format!(
            "adam_step: {} params, {} names, {} grads, {} moment slots",
            params.len(),
            names.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient for parameter '{}'", names[i])));
            }
            if g.shape() != params[i].shape() {
                return Err(Error::Dim(format!(
                    "gradient shape {:?} vs parameter '{}' shape {:?}",
                    g.shape(),
                    names[i],
                    params[i].shape()
                )));
            }
        }
    }

    state.step_count += 1;
    let t = state.step_count as f64;
    let h = state.hyper;
    let lr = lr.unwrap_or(h.learning_rate);
    let bc1 = 1.0 - libm::pow(h.beta1, t);
    let bc2 = 1.0 - libm::pow(h.beta2, t);

    for (i, grad) in grads.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = params[i].data_mut();
        for ((pj, mj), (vj, gj)) in p
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut().zip(grad.data()))
        {
            *mj = h.beta1 * *mj + (1.0 - h.beta1) * gj;
            *vj = h.beta2 * *vj + (1.0 - h.beta2) * gj * gj;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *pj -= lr * m_hat / (libm::sqrt(v_hat) + h.epsilon);
        }
        params[i].check_finite("parameter after adam step")?;
    }
    Ok(())
}

/// Linear warmup to `base_lr`, then cosine decay to `min_lr` by the final
/// epoch. Epochs are 0-based.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.total_epochs == 0 {
            return self.base_lr;
        }
        if epoch < self.warmup_epochs {
            let f = (epoch + 1) as f64 / self.warmup_epochs as f64;
            return self.warmup_lr + (self.base_lr - self.warmup_lr) * f;
        }
        let span = (self.total_epochs - self.warmup_epochs).max(1);
        let f = (epoch - self.warmup_epochs) as f64 / span as f64;
        let cos = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * f.min(1.0)));
        self.min_lr + (self.base_lr - self.min_lr) * cos
    }
}

/// Batch-size learning-rate scaling for config portability:
/// lr = base * (processes * batch) / 512, with a single process here.
pub fn scaled_lr(base: f64, batch_size: usize) -> f64 {
    base * batch_size as f64 / 512.0
}
