//! AdamW, global-norm clipping and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;

/// Linear warmup from 0 to `peak` over `warmup_steps`, then cosine decay to 0
/// at `total_steps`. Steps past `total_steps` stay at 0.
pub fn lr_at(step: u64, peak: f64, warmup_steps: u64, total_steps: u64) -> f64 {
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments for an ordered list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn zeros<'a>(params: impl IntoIterator<Item = &'a Mat>) -> Self {
        let m: Vec<Mat> = params.into_iter().map(|p| Mat::zeros(p.dim())).collect();
        Self { step: 0, v: m.clone(), m }
    }

    /// One AdamW update. `decay[i]` enables decoupled weight decay for tensor `i`.
    pub fn update(&mut self, params: &mut [&mut Mat], grads: &[Mat], decay: &[bool], lr: f64, cfg: &AdamWConfig) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.begin_step();
        for (i, p) in params.iter_mut().enumerate() {
            self.apply(i, p, &grads[i], decay[i], lr, cfg);
        }
    }

    /// Advances the bias-correction counter; call once before [`apply`](Self::apply)ing a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates tensor `i` of the current step.
    pub fn apply(&mut self, i: usize, p: &mut Mat, g: &Mat, decay: bool, lr: f64, cfg: &AdamWConfig) {
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let wd = if decay { cfg.weight_decay } else { 0.0 };
        ndarray::Zip::from(p).and(&mut self.m[i]).and(&mut self.v[i]).and(g).for_each(|p, m, v, &g| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
            *p -= lr * (update + wd * *p);
        });
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// Element-wise mean of equally shaped gradient lists.
pub(crate) fn mean_grads(per_example: Vec<Vec<Mat>>) -> Vec<Mat> {
    let n = per_example.len() as f64;
    let mut iter = per_example.into_iter();
    let mut acc = iter.next().expect("at least one gradient set");
    for gs in iter {
        for (a, g) in acc.iter_mut().zip(gs) {
            *a += &g;
        }
    }
    for a in &mut acc {
        a.mapv_inplace(|x| x / n);
    }
    acc
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 5e-3, 100, 2000), 0.0);
        assert_eq!(lr_at(100, 5e-3, 100, 2000), 5e-3);
        assert!((lr_at(50, 5e-3, 100, 2000) - 2.5e-3).abs() < 1e-18);
        let mid = lr_at(1050, 5e-3, 100, 2000);
        assert!((mid - 2.5e-3).abs() < 1e-15, "{mid}");
        assert!(lr_at(2000, 5e-3, 100, 2000).abs() < 1e-18);
        for s in 100..2000 {
            assert!(lr_at(s + 1, 5e-3, 100, 2000) <= lr_at(s, 5e-3, 100, 2000));
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut p = array![[1.0, -2.0]];
        let mut st = AdamState::zeros([&p]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        st.update(&mut [&mut p], &[array![[0.5, -3.0]]], &[false], 0.1, &cfg);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = array![[2.0]];
        let mut st = AdamState::zeros([&p]);
        st.update(&mut [&mut p], &[array![[0.0]]], &[true], 0.1, &AdamWConfig::default());
        assert!((p[[0, 0]] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![array![[3.0]], array![[4.0]]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][[0, 0]] - 0.6).abs() < 1e-15);
        let mut small = vec![array![[0.1]]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][[0, 0]], 0.1);
    }
}
