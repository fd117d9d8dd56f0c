//! Adam with a cosine learning-rate schedule.

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Mat;

/// Learning rate after `step` of `total` updates, decaying from `base` to
/// `base * min_ratio` along half a cosine.
pub fn cosine_lr(base: f64, min_ratio: f64, step: u64, total: u64) -> f64 {
    if total <= 1 {
        return base;
    }
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    let floor = base * min_ratio;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: &OptimConfig) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, _, m)| Mat::zeros(m.rows(), m.cols())).collect();
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Mat], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "expected {} gradients, got {}",
                self.m.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for k in 0..g.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
