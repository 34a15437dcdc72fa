//! AdamW and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            clip_norm: 5.0,
        }
    }
}

/// Moment estimates, stored in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn matches(&self, params: &ParamStore) -> bool {
        self.m.len() == params.len()
            && self
                .m
                .iter()
                .zip(params.values())
                .all(|(m, p)| m.shape() == p.shape())
    }
}

/// Decoupled weight decay applies to matrices named `*.weight` only.
fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Mat::sq_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}

/// One AdamW update of the parameters accepted by `trainable`.
pub fn adamw_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    grads: &[Mat],
    lr: f64,
    cfg: &AdamConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    if !state.matches(params) || grads.len() != params.len() {
        return Err(Error::Contract("optimizer state does not match parameters".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let names: Vec<String> = params.names().to_vec();
    for (i, (name, p)) in names.iter().zip(params.values_mut()).enumerate() {
        if !trainable(name) {
            continue;
        }
        let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            let g = grads[i].data[j];
            m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * g;
            v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = m.data[j] / bc1;
            let vhat = v.data[j] / bc2;
            p.data[j] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + wd * p.data[j]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    /// Linear ramp from 0 to `peak` over `warmup` steps, then linear decay
    /// to 0 at `total`.
    WarmupDecay { peak: f64, warmup: usize, total: usize },
    /// Linear ramp over `warmup` steps, then constant.
    WarmupConstant { lr: f64, warmup: usize },
    Constant(f64),
}

impl LrSchedule {
    /// Learning rate for the 0-based optimizer step `step`.
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::WarmupDecay { peak, warmup, total } => {
                if step < warmup {
                    peak * (step + 1) as f64 / warmup as f64
                } else if total > warmup {
                    peak * (total.saturating_sub(step)) as f64 / (total - warmup) as f64
                } else {
                    peak
                }
            }
            LrSchedule::WarmupConstant { lr, warmup } => {
                if step < warmup {
                    lr * (step + 1) as f64 / warmup as f64
                } else {
                    lr
                }
            }
            LrSchedule::Constant(lr) => lr,
        }
    }
}
