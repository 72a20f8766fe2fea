//! Adam and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Float, ParamId, ParamStore};

/// Bias-corrected Adam over every learnable entry of a store.
#[derive(Clone, Debug)]
pub struct Adam<F: Float = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(store: &ParamStore<F>, lr: f64) -> Self {
        let ids: Vec<ParamId> = store.learnable_ids().collect();
        let zeros = |id: &ParamId| vec![F::ZERO; store.get(*id).numel()];
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
        }
    }

    /// Updates taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored on the parameters.
    /// Every learnable parameter must have a gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if let Some(&id) = self.ids.iter().find(|&&id| store.get(id).grad().is_none()) {
            return Err(Error::State(format!("parameter `{}` has no gradient", store.entry(id).name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (F::from_f64(self.beta1), F::from_f64(self.beta2));
        let c1 = F::from_f64(1.0 - self.beta1.powi(t));
        let c2 = F::from_f64(1.0 - self.beta2.powi(t));
        let (lr, eps) = (F::from_f64(self.lr), F::from_f64(self.eps));
        for (k, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id);
            let g = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (F::ONE - b1) * g;
                *v = b2 * *v + (F::ONE - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `eta_max` at epoch 0 to `eta_min` at `t_max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub t_max: usize,
}

impl LrSchedule {
    pub const DEFAULT_MAX: f64 = 1e-4;
    pub const DEFAULT_MIN: f64 = 1e-5;

    pub fn new(eta_max: f64, eta_min: f64, t_max: usize) -> Result<Self> {
        if !(eta_min < eta_max) || eta_min < 0.0 {
            return Err(Error::arg(format!("need 0 <= eta_min < eta_max, got {eta_min} and {eta_max}")));
        }
        if t_max == 0 {
            return Err(Error::arg("schedule needs at least one epoch"));
        }
        Ok(Self { eta_max, eta_min, t_max })
    }

    pub fn with_defaults(t_max: usize) -> Result<Self> {
        Self::new(Self::DEFAULT_MAX, Self::DEFAULT_MIN, t_max)
    }

    /// `eta_min + (eta_max - eta_min) * (1 + cos(pi * epoch / t_max)) / 2`.
    pub fn lr(&self, epoch: usize) -> Result<f64> {
        match epoch {
            e if e > self.t_max => Err(Error::arg(format!("epoch {e} beyond schedule length {}", self.t_max))),
            // the formula's endpoints, returned without rounding error
            0 => Ok(self.eta_max),
            e if e == self.t_max => Ok(self.eta_min),
            e => {
                let c = (PI * e as f64 / self.t_max as f64).cos();
                Ok(self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + c))
            }
        }
    }
}
