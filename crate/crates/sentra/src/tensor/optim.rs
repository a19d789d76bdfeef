//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use super::param::ParamStore;
use super::{sc, Scalar};
use crate::error::{Result, SentraError};

/// Linear warmup to `peak_lr` over the first `warmup_frac` of steps, then
/// linear decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, total_steps: usize) -> Self {
        LrSchedule {
            peak_lr,
            total_steps: total_steps.max(1),
            warmup_frac: 0.1,
        }
    }

    /// Constant learning rate (no warmup, no decay).
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            peak_lr: lr,
            total_steps: usize::MAX,
            warmup_frac: 0.0,
        }
    }

    /// Learning rate for 1-based step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == usize::MAX {
            return self.peak_lr;
        }
        let total = self.total_steps as f64;
        let warmup = (total * self.warmup_frac).ceil().max(1.0);
        let s = step as f64;
        if s <= warmup {
            self.peak_lr * s / warmup
        } else if s >= total {
            0.0
        } else {
            self.peak_lr * (total - s) / (total - warmup)
        }
    }
}

/// AdamW state: per-parameter moment estimates, a step counter, the
/// schedule descriptor and the decay coefficient.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub schedule: LrSchedule,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64, schedule: LrSchedule) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            schedule,
            m: store.iter().map(|e| vec![T::zero(); e.values.len()]).collect(),
            v: store.iter().map(|e| vec![T::zero(); e.values.len()]).collect(),
        }
    }

    /// Learning rate the schedule prescribes for the *next* step.
    pub fn next_lr(&self) -> f64 {
        self.schedule.lr_at(self.step + 1)
    }

    /// One decoupled-weight-decay update over every parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if lr < 0.0 {
            return Err(SentraError::contract(format!("negative learning rate {lr}")));
        }
        if grads.len() != store.len() {
            return Err(SentraError::shape(format!(
                "adamw: {} gradient slots for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = sc::<T>(self.beta1);
        let b2 = sc::<T>(self.beta2);
        let one = T::one();
        let bc1 = sc::<T>(1.0 - self.beta1.powi(t));
        let bc2 = sc::<T>(1.0 - self.beta2.powi(t));
        let lr_t = sc::<T>(lr);
        let eps = sc::<T>(self.eps);
        let decay = sc::<T>(lr * self.weight_decay);

        for pid in 0..store.len() {
            let grad = &grads[pid];
            let entry = store.entry_mut(pid);
            if grad.len() != entry.values.len() {
                return Err(SentraError::shape(format!(
                    "adamw: gradient shape mismatch for {}",
                    entry.name
                )));
            }
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let theta = entry.values[i];
                let updated = theta - decay * theta - lr_t * m_hat / (v_hat.sqrt() + eps);
                if !updated.is_finite() {
                    return Err(SentraError::Numeric(format!(
                        "adamw produced a non-finite value in {}",
                        entry.name
                    )));
                }
                entry.values[i] = updated;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("theta", &[1], vec![v]).unwrap();
        s
    }

    #[test]
    fn first_step_matches_closed_form() {
        let mut store = one_param(1.0);
        let mut opt = AdamW::new(&store, 0.01, LrSchedule::constant(0.1));
        opt.step(&mut store, &[vec![0.5]], 0.1).unwrap();
        // m_hat = g, v_hat = g^2 on the first step, so the Adam term is
        // g / (|g| + eps) = ~1 and theta' = 1 - 0.1*1 - 0.1*0.01*1.
        let expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8)) - 0.1 * 0.01 * 1.0;
        assert!((store.entry(0).values[0] - expected).abs() < 1e-12);
        assert!((store.entry(0).values[0] - 0.899).abs() < 1e-4);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut store = one_param(1.23);
        let mut opt = AdamW::new(&store, 0.0, LrSchedule::constant(0.1));
        for _ in 0..3 {
            opt.step(&mut store, &[vec![0.0]], 0.1).unwrap();
        }
        assert_eq!(store.entry(0).values[0], 1.23);
    }

    #[test]
    fn zero_grad_with_decay_shrinks_exactly() {
        let mut store = one_param(2.0);
        let mut opt = AdamW::new(&store, 0.01, LrSchedule::constant(0.1));
        opt.step(&mut store, &[vec![0.0]], 0.1).unwrap();
        assert!((store.entry(0).values[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn step_counter_increments() {
        let mut store = one_param(0.0);
        let mut opt = AdamW::new(&store, 0.0, LrSchedule::constant(0.1));
        assert_eq!(opt.step, 0);
        opt.step(&mut store, &[vec![0.0]], 0.1).unwrap();
        opt.step(&mut store, &[vec![0.0]], 0.1).unwrap();
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let s = LrSchedule::new(1e-4, 100);
        assert!((s.lr_at(5) - 0.5e-4).abs() < 1e-12);
        assert!((s.lr_at(10) - 1e-4).abs() < 1e-12);
        assert!((s.lr_at(55) - 0.5e-4).abs() < 1e-12);
        assert_eq!(s.lr_at(100), 0.0);
        assert!(s.lr_at(1) > 0.0);
    }
}
