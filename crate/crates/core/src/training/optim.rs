use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, kept in f64.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// One Adam update with bias correction. `grads` holds one flat gradient per
/// parameter tensor, in store order.
pub fn optimizer_step<R: Real>(
    params: &mut ParamStore<R>,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let values = params.values();
    if grads.len() != values.len() || values.iter().zip(grads).any(|(v, g)| v.len() != g.len()) {
        return Err(Error::Dimension("gradients do not match the parameters".into()));
    }
    if state.step == 0 && state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut updated = Vec::with_capacity(values.len());
    for (i, value) in values.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data: Vec<R> = value
            .data()
            .iter()
            .zip(&grads[i])
            .enumerate()
            .map(|(j, (&w, &g))| {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let step = cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
                R::of(w.f64() - step)
            })
            .collect();
        updated.push(Tensor::new(value.shape().to_vec(), data)?);
    }
    params.replace_values(updated)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(vec![values.len()], values).unwrap());
        s
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = store(&[1.0, -2.0]);
        let mut st = AdamState::default();
        for _ in 0..10 {
            optimizer_step(&mut p, &[vec![0.0, 0.0]], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.values()[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_steps_by_lr() {
        let cfg = AdamConfig::default();
        let mut p = store(&[0.0, 0.0]);
        let mut st = AdamState::default();
        let mut last = p.flatten();
        for _ in 0..200 {
            optimizer_step(&mut p, &[vec![3.0, -0.01]], &mut st, &cfg).unwrap();
            let now = p.flatten();
            assert!((last[0] - now[0] - cfg.learning_rate).abs() < 1e-9);
            assert!((now[1] - last[1] - cfg.learning_rate).abs() < 1e-6);
            last = now;
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [3.0, -1.5, 0.25];
        let scale = [1.0, 10.0, 0.1];
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut p = store(&[0.0, 0.0, 0.0]);
        let mut st = AdamState::default();
        let loss = |w: &[f64]| -> f64 {
            w.iter().zip(&target).zip(&scale).map(|((w, t), s)| s * (w - t).powi(2)).sum()
        };
        let mut steps = 0;
        while loss(&p.flatten()) >= 1e-6 {
            let w = p.flatten();
            let g: Vec<f64> = w.iter().zip(&target).zip(&scale).map(|((w, t), s)| 2.0 * s * (w - t)).collect();
            optimizer_step(&mut p, &[g], &mut st, &cfg).unwrap();
            steps += 1;
            assert!(steps <= 5000, "loss {} after 5000 steps", loss(&p.flatten()));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = store(&[0.0]);
        let r = optimizer_step(&mut p, &[vec![0.0, 1.0]], &mut AdamState::default(), &AdamConfig::default());
        assert!(r.is_err());
    }
}
