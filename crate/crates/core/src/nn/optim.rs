//! AdamW, gradient clipping, parameter averaging and a plateau scheduler.

use serde::{Deserialize, Serialize};

use super::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Decoupled-weight-decay Adam over one parameter group.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<P: Params>(params: &P, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let grads = grads.tensors();
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                if c.weight_decay != 0.0 {
                    p[i] -= lr * c.weight_decay * p[i];
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<P: Params>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.sum_of_squares().sqrt();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        grads.scale(max_norm / (norm + 1e-12));
    }
    norm
}

/// Exponential moving average of parameters. The effective decay ramps up as
/// `min(decay, (1 + n) / (10 + n))` so short runs are not dominated by the
/// initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema<P> {
    pub decay: f64,
    pub shadow: P,
    pub updates: u64,
}

impl<P: Params + Clone> Ema<P> {
    pub fn new(params: &P, decay: f64) -> Self {
        Self {
            decay,
            shadow: params.clone(),
            updates: 0,
        }
    }

    pub fn effective_decay(&self) -> f64 {
        let n = self.updates as f64;
        self.decay.min((1.0 + n) / (10.0 + n))
    }

    pub fn update(&mut self, params: &P) {
        let d = self.effective_decay();
        self.updates += 1;
        let src = params.tensors();
        for (k, s) in self.shadow.tensors_mut().into_iter().enumerate() {
            for (a, b) in s.iter_mut().zip(src[k]) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// relative improvement of the monitored loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            threshold: 1e-4,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records an epoch loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        let improved = if self.best.is_infinite() {
            loss.is_finite()
        } else {
            loss < self.best - self.threshold * self.best.abs()
        };
        if improved {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Vec2(Vec<f64>);

    impl Params for Vec2 {
        fn tensors(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
        fn shapes(&self) -> Vec<(String, Vec<usize>)> {
            vec![("v".into(), vec![self.0.len()])]
        }
    }

    #[test]
    fn first_adam_step_is_lr_times_sign() {
        let mut p = Vec2(vec![1.0, -2.0, 0.5]);
        let g = Vec2(vec![0.3, -4.0, 1e-3]);
        let mut opt = AdamW::new(&p, AdamWConfig::default());
        opt.step(&mut p, &g, 0.1);
        // m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
        let expect = [1.0 - 0.1 * 0.3 / (0.3 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8), 0.5 - 0.1 * 1e-3 / (1e-3 + 1e-8)];
        for (a, b) in p.0.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut p = Vec2(vec![2.0]);
        let g = Vec2(vec![0.0]);
        let cfg = AdamWConfig { weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamW::new(&p, cfg);
        opt.step(&mut p, &g, 0.1);
        assert!((p.0[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = Vec2(vec![3.0, 4.0]);
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g.sum_of_squares().sqrt() - 1.0).abs() < 1e-9);
        let mut small = Vec2(vec![0.3, 0.4]);
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small.0, vec![0.3, 0.4]);
    }

    #[test]
    fn ema_tracks_parameters() {
        let mut ema = Ema::new(&Vec2(vec![0.0]), 0.9);
        ema.update(&Vec2(vec![1.0]));
        assert!((ema.shadow.0[0] - 0.9).abs() < 1e-12);
        ema.update(&Vec2(vec![1.0]));
        let d = 2.0 / 11.0;
        assert!((ema.shadow.0[0] - (d * 0.9 + (1.0 - d))).abs() < 1e-12);
        ema.updates = 1000;
        assert_eq!(ema.effective_decay(), 0.9);
    }

    #[test]
    fn plateau_decays_after_patience() {
        let mut s = PlateauScheduler::new(1.0, 0.5, 2);
        assert_eq!(s.observe(10.0), 1.0);
        assert_eq!(s.observe(10.0), 1.0);
        assert_eq!(s.observe(10.0), 1.0);
        assert_eq!(s.observe(10.0), 0.5);
        assert_eq!(s.observe(5.0), 0.5);
    }
}
