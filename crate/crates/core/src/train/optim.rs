use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Real, Tensor};

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let progress = if total_steps == 0 {
        0.0
    } else {
        step.min(total_steps) as f64 / total_steps as f64
    };
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * progress).cos())
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T: Real> {
    pub step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One AdamW update with decoupled weight decay. Parameters without a
/// gradient and frozen parameters are left untouched.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Divergence(format!("non-finite gradient for `{name}`")));
        }
        let p = params.entry(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
        if p.value.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient {:?} for `{name}` {:?}", g.shape(), p.value.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let f = T::from_f64_lossy;
    let (b1t, b2t, eps, decay) = (f(b1), f(b2), f(cfg.eps), f(lr * cfg.weight_decay));
    let (one_b1, one_b2) = (f(1.0 - b1), f(1.0 - b2));
    let (lr_t, c1t, c2t) = (f(lr), f(c1), f(c2));
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let Some(g) = grads.get(name) else { continue };
        let (m, v) = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
        for (((theta, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1t * *mi + one_b1 * gi;
            *vi = b2t * *vi + one_b2 * gi * gi;
            let m_hat = *mi / c1t;
            let v_hat = *vi / c2t;
            *theta = *theta - lr_t * (m_hat / (v_hat.sqrt() + eps)) - decay * *theta;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> TrainConfig {
        TrainConfig {
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    fn single(value: f64, trainable: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[1], value), trainable).unwrap();
        s
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::full(&[1], v))])
    }

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::default();
        assert!((cosine_lr(0, 100, &c) - 1e-3).abs() < 1e-12);
        assert!((cosine_lr(100, 100, &c) - 1e-6).abs() < 1e-12);
        assert!((cosine_lr(50, 100, &c) - (1e-3 + 1e-6) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = single(1.0, true);
        adamw_step(&mut s, &grad(1.0), &mut AdamState::new(), 0.1, &cfg(0.0)).unwrap();
        let w = s.get("w").unwrap().data()[0];
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12, "{w}");
    }

    #[test]
    fn decay_alone() {
        let mut s = single(1.0, true);
        adamw_step(&mut s, &grad(0.0), &mut AdamState::new(), 0.1, &cfg(0.05)).unwrap();
        assert!((s.get("w").unwrap().data()[0] - 0.995).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut s = single(0.375, true);
        let mut st = AdamState::new();
        for _ in 0..5 {
            adamw_step(&mut s, &grad(0.0), &mut st, 0.1, &cfg(0.0)).unwrap();
        }
        assert_eq!(s.get("w").unwrap().data()[0], 0.375);
    }

    #[test]
    fn frozen_and_divergent() {
        let mut s = single(1.0, false);
        adamw_step(&mut s, &grad(3.0), &mut AdamState::new(), 0.1, &cfg(0.05)).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 1.0);
        let err = adamw_step(&mut s, &grad(f64::NAN), &mut AdamState::new(), 0.1, &cfg(0.0)).unwrap_err();
        assert!(err.to_string().starts_with("divergence"));
    }
}
