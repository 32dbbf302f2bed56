use serde::{Deserialize, Serialize};

use super::{invalid, ParamId, ParamStore, Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay applied as `p -= lr·wd·p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }
}

/// One bias-corrected Adam update of `params` in place; `step` counts from 1.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    step: u64,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TensorError::ShapeMismatch { op: "adam_step", lhs: vec![params.len()], rhs: vec![grads.len()] });
    }
    if step == 0 {
        return Err(invalid("adam_step", "step counter starts at 1"));
    }
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(step as i32));
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);
    let decay = T::from_f64_lossy(cfg.lr * cfg.weight_decay);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps) + decay * *p;
    }
    Ok(())
}

/// Adam over every tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: u64,
    states: Vec<AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let states = store.iter().map(|(_, _, t)| AdamState::zeros(t.numel())).collect();
        Self { cfg, step: 0, states }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn state(&self, id: ParamId) -> &AdamState<T> {
        &self.states[id.0]
    }

    /// Applies one update. Parameters without a gradient entry are treated
    /// as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<(), TensorError> {
        self.step += 1;
        let mut by_id: Vec<Option<&Tensor<T>>> = vec![None; store.len()];
        for (id, g) in grads {
            by_id[id.0] = Some(g);
        }
        for (i, state) in self.states.iter_mut().enumerate() {
            let p = store.get_mut(ParamId(i));
            let zeros;
            let g = match by_id[i] {
                Some(g) => g.data(),
                None => {
                    zeros = vec![T::zero(); p.numel()];
                    &zeros
                }
            };
            adam_step(p.data_mut(), g, state, self.step, &self.cfg)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0f64, -2.0, 3.0];
        let mut st = AdamState::zeros(3);
        adam_step(&mut p, &[0.0; 3], &mut st, 1, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.m, vec![0.0; 3]);
        assert_eq!(st.v, vec![0.0; 3]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let cfg = AdamConfig::default();
        for g in [1e-3, 0.5, -7.0, 250.0] {
            let mut p = vec![0.0f64];
            let mut st = AdamState::zeros(1);
            adam_step(&mut p, &[g], &mut st, 1, &cfg).unwrap();
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p[0] - expected).abs() < 1e-15, "g={g}: {} vs {expected}", p[0]);
        }
    }

    #[test]
    fn decay_shrinks_without_gradient() {
        let cfg = AdamConfig { weight_decay: 0.1, ..AdamConfig::default() };
        let mut p = vec![2.0f64, -4.0];
        let mut st = AdamState::zeros(2);
        adam_step(&mut p, &[0.0; 2], &mut st, 1, &cfg).unwrap();
        assert_eq!(p, vec![2.0 * (1.0 - 1e-4), -4.0 * (1.0 - 1e-4)]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![0.0f64; 2];
        let mut st = AdamState::zeros(2);
        assert!(adam_step(&mut p, &[1.0], &mut st, 1, &AdamConfig::default()).is_err());
    }
}
