use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoupled-weight-decay Adam hyperparameters (the learning rate comes from
/// the schedule).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn with_decay(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One optimizer record per step. The short/long terms exist only for the
/// contrastive phases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_short: Option<f64>,
    pub loss_long: Option<f64>,
}

/// Optimizer moments and progress of one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: usize,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub lr: f64,
    pub history: Vec<LossRecord>,
}

/// One AdamW update of `params` in place. `decay[i]` says whether
/// `params[i]` receives weight decay.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut TrainState,
    lr: f64,
    hp: &AdamW,
    decay: &[bool],
) -> Result<()> {
    if grads.len() != params.len() || decay.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} decay flags",
            params.len(),
            grads.len(),
            decay.len()
        )));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = state.m.clone();
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() {
            return Err(Error::dims("adamw_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
    }
    state.step += 1;
    state.lr = lr;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let wd = if decay[i] { hp.weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *pj -= lr * wd * *pj;
            *mj = hp.beta1 * *mj + (1.0 - hp.beta1) * gj;
            *vj = hp.beta2 * *vj + (1.0 - hp.beta2) * gj * gj;
            *pj -= lr * (*mj / c1) / ((*vj / c2).sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// reaching 0 at `total_steps`.
pub fn lr_schedule(step: usize, warmup_steps: usize, base_lr: f64, total_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Tensor> {
        vec![Tensor::vector(vec![v])]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Tensor::vector(vec![0.3, -1.2]), Tensor::ones(&[2, 2])];
        let before = p.clone();
        let g: Vec<Tensor> = p.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut state = TrainState::default();
        for _ in 0..3 {
            adamw_step(&mut p, &g, &mut state, 0.1, &AdamW::with_decay(0.0), &[true, true]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut p = scalar(1.0);
        let mut state = TrainState::default();
        adamw_step(&mut p, &scalar(1.0), &mut state, 0.1, &AdamW::with_decay(0.0), &[true]).unwrap();
        // Bias-corrected moments are m̂ = 1 and v̂ = 1.
        assert!((p[0].data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn decay_alone_shrinks_proportionally() {
        let mut p = scalar(2.0);
        let mut state = TrainState::default();
        adamw_step(&mut p, &scalar(0.0), &mut state, 0.1, &AdamW::with_decay(0.01), &[true]).unwrap();
        assert!((p[0].data()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
        let mut q = scalar(2.0);
        adamw_step(&mut q, &scalar(0.0), &mut TrainState::default(), 0.1, &AdamW::with_decay(0.01), &[false]).unwrap();
        assert_eq!(q[0].data()[0], 2.0);
    }

    #[test]
    fn non_finite_gradients_are_refused() {
        let mut p = scalar(1.0);
        let r = adamw_step(&mut p, &scalar(f64::NAN), &mut TrainState::default(), 0.1, &AdamW::with_decay(0.0), &[true]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 10, 5e-4, 100), 0.0);
        assert_eq!(lr_schedule(10, 10, 5e-4, 100), 5e-4);
        assert!((lr_schedule(5, 10, 5e-4, 100) - 2.5e-4).abs() < 1e-18);
        assert!(lr_schedule(100, 10, 5e-4, 100).abs() < 1e-12);
        assert!((lr_schedule(55, 10, 5e-4, 100) - 2.5e-4).abs() < 1e-12);
        assert_eq!(lr_schedule(0, 0, 1.0, 10), 1.0);
        let mut prev = f64::INFINITY;
        for s in 10..=100 {
            let lr = lr_schedule(s, 10, 1.0, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
