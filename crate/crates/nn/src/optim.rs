//! ADAM with bias correction and a step-decay learning-rate schedule.

use crate::params::{Gradients, ParamStore};
use crate::tensor::{lit, Real, Tensor};

/// Step decay: `base_lr * factor^floor(epoch / interval)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub base_lr: f64,
    pub factor: f64,
    pub interval: usize,
}

impl Default for StepDecay {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            factor: 0.1,
            interval: 15,
        }
    }
}

impl StepDecay {
    pub fn at(&self, epoch: usize) -> f64 {
        lr_schedule_with(self.base_lr, epoch, self.factor, self.interval)
    }
}

/// Learning rate for `epoch` with decay 0.1 every 15 epochs.
pub fn lr_schedule(base_lr: f64, epoch: usize) -> f64 {
    lr_schedule_with(base_lr, epoch, 0.1, 15)
}

pub fn lr_schedule_with(base_lr: f64, epoch: usize, factor: f64, interval: usize) -> f64 {
    let drops = epoch / interval.max(1);
    base_lr * factor.powi(drops as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.95,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub schedule: StepDecay,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig, schedule: StepDecay) -> Self {
        Self {
            config,
            schedule,
            step: 0,
            first: params.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect(),
            second: params.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &Tensor<T> {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor<T> {
        &self.second[index]
    }

    /// One update at learning rate `lr`. Parameters without a gradient slot
    /// are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = lit::<T>(1.0 / (1.0 - b1.powi(t)));
        let c2 = lit::<T>(1.0 / (1.0 - b2.powi(t)));
        let (b1t, b2t) = (lit::<T>(b1), lit::<T>(b2));
        let (r1, r2) = (lit::<T>(1.0 - b1), lit::<T>(1.0 - b2));
        let eps = lit::<T>(self.config.epsilon);
        let lr = lit::<T>(lr);
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let grad = grads.get(id);
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                let g = grad.map_or(T::zero(), |g| g.data()[k]);
                m[k] = b1t * m[k] + r1 * g;
                v[k] = b2t * v[k] + r2 * g * g;
                let update = lr * (m[k] * c1) / ((v[k] * c2).sqrt() + eps);
                if update != T::zero() {
                    p[k] = p[k] - update;
                }
            }
        }
    }
}
