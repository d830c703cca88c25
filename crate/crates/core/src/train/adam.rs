//! Adam with bias-corrected first and second moments.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, SlotKind};
use crate::tensor::{cast, Scalar};

pub struct Adam<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step_count: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<S: Scalar> Adam<S> {
    pub fn new<T: Scalar>(ps: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        Adam {
            m: vec![Vec::new(); ps.len()],
            v: vec![Vec::new(); ps.len()],
            step_count: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from the gradients of this step. Parameters
    /// without a gradient keep their moments untouched.
    pub fn step(
        &mut self,
        ps: &mut ParamStore<S>,
        grads: &[(ParamId, &[S])],
        lr: f64,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = cast::<S>(self.beta1);
        let b2 = cast::<S>(self.beta2);
        let one = S::one();
        let corr1 = cast::<S>(1.0 - self.beta1.powi(t));
        let corr2 = cast::<S>(1.0 - self.beta2.powi(t));
        let lr_s = cast::<S>(lr);
        let eps = cast::<S>(self.eps);
        for &(pid, grad) in grads {
            let slot = ps.slot_mut(pid);
            if slot.kind != SlotKind::Trainable {
                return Err(Error::Config(format!(
                    "optimizer received gradient for buffer {}",
                    slot.name
                )));
            }
            if grad.len() != slot.data.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "{}: gradient has {} values, parameter has {}",
                        slot.name,
                        grad.len(),
                        slot.data.len()
                    ),
                ));
            }
            let idx = pid.index();
            if self.m[idx].is_empty() {
                self.m[idx] = vec![S::zero(); grad.len()];
                self.v[idx] = vec![S::zero(); grad.len()];
            } else if self.m[idx].len() != grad.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{}: optimizer state shape drifted", slot.name),
                ));
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                slot.data[i] = slot.data[i] - lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning rate after `completed` schedule units: the base rate divided by
/// `factor` once per milestone at or below `completed`.
pub fn lr_at(lr0: f64, factor: f64, milestones: &[usize], completed: usize) -> f64 {
    let hits = milestones.iter().filter(|&&m| m <= completed).count();
    lr0 / factor.powi(hits as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(ps: &mut ParamStore<f64>, value: Vec<f64>) -> ParamId {
        ps.add("p", vec![value.len()], value, SlotKind::Trainable)
            .unwrap()
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // bias correction cancels the betas at t = 1, so the update is
        // lr * g / (|g| + eps') for any nonzero g
        for &g in &[0.001, 0.5, 12.0, -3.0] {
            let mut ps = ParamStore::<f64>::new();
            let p = one_param(&mut ps, vec![1.0]);
            let cfg = TrainConfig::desk();
            let mut adam = Adam::new(&ps, &cfg);
            let grads = vec![g];
            adam.step(&mut ps, &[(p, &grads)], 0.001).unwrap();
            let delta = ps.slot(p).data[0] - 1.0;
            assert!(
                (delta.abs() - 0.001).abs() < 1e-6,
                "g={g}: step {delta}"
            );
            assert!(delta.signum() == -g.signum());
        }
    }

    #[test]
    fn descent_direction_under_constant_gradient() {
        let mut ps = ParamStore::<f64>::new();
        let p = one_param(&mut ps, vec![0.0]);
        let cfg = TrainConfig::desk();
        let mut adam = Adam::new(&ps, &cfg);
        for _ in 0..50 {
            let grads = vec![2.0];
            adam.step(&mut ps, &[(p, &grads)], 0.01).unwrap();
        }
        assert!(ps.slot(p).data[0] < -0.3, "moves opposite the gradient");
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_parameters_unchanged() {
        let mut ps = ParamStore::<f64>::new();
        let p = one_param(&mut ps, vec![3.5, -1.0]);
        let cfg = TrainConfig::desk();
        let mut adam = Adam::new(&ps, &cfg);
        let zero = vec![0.0, 0.0];
        adam.step(&mut ps, &[(p, &zero)], 0.1).unwrap();
        assert_eq!(ps.slot(p).data, vec![3.5, -1.0]);

        let grads = vec![1.0, -2.0];
        adam.step(&mut ps, &[(p, &grads)], 0.0).unwrap();
        assert_eq!(ps.slot(p).data, vec![3.5, -1.0], "lr = 0 is a no-op");
    }

    #[test]
    fn state_shape_drift_is_an_error() {
        let mut ps = ParamStore::<f64>::new();
        let p = one_param(&mut ps, vec![0.0, 0.0]);
        let cfg = TrainConfig::desk();
        let mut adam = Adam::new(&ps, &cfg);
        let grads = vec![1.0];
        assert!(adam.step(&mut ps, &[(p, &grads)], 0.1).is_err());
    }

    #[test]
    fn schedule_matches_stated_protocol() {
        // initial 0.001 halved after units 10, 12, 14 ends at 0.000125
        let ms = [10, 12, 14];
        assert_eq!(lr_at(0.001, 2.0, &ms, 9), 0.001);
        assert_eq!(lr_at(0.001, 2.0, &ms, 10), 0.0005);
        assert_eq!(lr_at(0.001, 2.0, &ms, 13), 0.00025);
        assert_eq!(lr_at(0.001, 2.0, &ms, 14), 0.000125);
        assert_eq!(lr_at(0.001, 2.0, &ms, 1000), 0.000125);
    }
}
