//! Adam with decoupled weight decay, cosine learning-rate annealing and
//! Xavier initialization.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    /// Zeroed moments shaped like `params`, with the usual Adam constants.
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| vec![0.0; t.numel()])
                .collect::<Vec<_>>()
        };
        OptimizerState {
            first_moment: zeros(),
            second_moment: zeros(),
            step: 0,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update with decoupled weight decay:
/// `p <- p - lr*wd*p`, then the bias-corrected moment step.
pub fn adam_step(params: &mut ParamSet, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if state.first_moment.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} tensors, parameter set has {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (id, t) in params.tensors_mut().iter().enumerate() {
        if t.requires_grad() && t.grad().is_none() {
            return Err(Error::Contract(format!("parameter {id} has no gradient")));
        }
    }
    state.step += 1;
    let step = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(step);
    let bc2 = 1.0 - state.beta2.powi(step);
    let decay = lr * state.weight_decay;
    for (id, t) in params.tensors_mut().iter_mut().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let g = t.grad().expect("checked above").to_vec();
        let m = &mut state.first_moment[id];
        let v = &mut state.second_moment[id];
        if m.len() != g.len() {
            return Err(Error::shape("adam_step", &[m.len()], &[g.len()]));
        }
        for (j, p) in t.data_mut().iter_mut().enumerate() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= decay * *p;
            *p -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Cosine annealing from `max_lr` at step 0 to `min_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Learning rate at `step`, clamped to the schedule's endpoints.
    pub fn lr(&self, step: u64) -> f64 {
        cosine_lr(self, step)
    }
}

pub fn cosine_lr(sched: &LrSchedule, step: u64) -> f64 {
    if sched.total_steps == 0 {
        return sched.min_lr;
    }
    let s = step.min(sched.total_steps) as f64 / sched.total_steps as f64;
    sched.min_lr + 0.5 * (sched.max_lr - sched.min_lr) * (1.0 + (PI * s).cos())
}

/// `fan_in x fan_out` weights drawn from U(-a, a), `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init(fan_in: usize, fan_out: usize, rng_seed: u64) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut r = rng::stream(rng_seed, rng::streams::PARAM_INIT);
    let data = (0..fan_in * fan_out)
        .map(|_| r.gen_range(-bound..=bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamSet {
        let mut p = ParamSet::new();
        let id = p.add("w", Tensor::new(vec![1], vec![value]).unwrap());
        p.get_mut(id).set_grad(vec![grad]).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(1.0, 0.37);
        let mut st = OptimizerState::new(&p, 0.0);
        adam_step(&mut p, &mut st, 1e-3).unwrap();
        let moved = 1.0 - p.get(0).data()[0];
        assert!((moved - 1e-3).abs() < 1e-9, "moved {moved}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = single(0.25, 0.0);
        let mut st = OptimizerState::new(&p, 0.0);
        adam_step(&mut p, &mut st, 5e-3).unwrap();
        assert_eq!(p.get(0).data()[0], 0.25);
    }

    #[test]
    fn decay_only_shrinks_by_closed_form() {
        let mut p = single(2.0, 0.0);
        let mut st = OptimizerState::new(&p, 1e-4);
        adam_step(&mut p, &mut st, 5e-3).unwrap();
        let expected = 2.0 * (1.0 - 5e-7);
        assert!((p.get(0).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut p = single(-0.123_456_789, 3.0);
        let before = p.get(0).data()[0].to_bits();
        let mut st = OptimizerState::new(&p, 1e-4);
        adam_step(&mut p, &mut st, 0.0).unwrap();
        assert_eq!(p.get(0).data()[0].to_bits(), before);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = ParamSet::new();
        p.add("w", Tensor::zeros(&[2]));
        let mut st = OptimizerState::new(&p, 0.0);
        assert!(matches!(
            adam_step(&mut p, &mut st, 1e-3),
            Err(Error::Contract(_))
        ));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = LrSchedule {
            max_lr: 5e-3,
            min_lr: 1e-5,
            total_steps: 1000,
        };
        assert_eq!(cosine_lr(&s, 0), 5e-3);
        assert!((cosine_lr(&s, 1000) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(&s, 500) - (5e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert_eq!(cosine_lr(&s, 5000), cosine_lr(&s, 1000));
        let mut prev = f64::INFINITY;
        for k in 0..=1000 {
            let lr = cosine_lr(&s, k);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn xavier_bound_and_determinism() {
        let w = xavier_init(3, 3, 11);
        assert!(w.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(w, xavier_init(3, 3, 11));
        assert_ne!(w, xavier_init(3, 3, 12));
    }

    #[test]
    fn xavier_variance() {
        // U(-a, a) has variance a^2/3 = 2 / (fan_in + fan_out).
        let (fi, fo) = (200, 500);
        let w = xavier_init(fi, fo, 3);
        let n = w.numel() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / (fi + fo) as f64;
        assert!((var / expected - 1.0).abs() < 0.05, "var {var} vs {expected}");
    }
}
