use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub warmup: u64,
}

impl OptimizerState {
    pub fn new<F: Real>(params: &ParamStore<F>, base_lr: f64, warmup: u64) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            base_lr,
            warmup,
        }
    }

    /// Learning rate the next call to [`adam_step`] should use.
    pub fn scheduled_lr(&self) -> f64 {
        inverse_sqrt_lr(self.step + 1, self.base_lr, self.warmup).unwrap_or(self.base_lr)
    }
}

/// One Adam update with bias correction over every trainable parameter.
/// Gradients are cleared afterwards.
pub fn adam_step<F: Real>(
    params: &mut ParamStore<F>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if state.first_moment.len() != params.len() {
        return Err(Error::invalid(format!(
            "optimizer tracks {} tensors, store has {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    let names: Vec<(bool, bool, String)> = params
        .iter()
        .map(|(_, name, t)| (t.requires_grad, t.grad.is_some(), name.to_string()))
        .collect();
    if let Some((_, _, name)) = names.iter().find(|(req, has, _)| *req && !*has) {
        return Err(Error::MissingGrad(name.clone()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (i, tensor) in params.tensors_mut().enumerate() {
        if !tensor.requires_grad {
            tensor.grad = None;
            continue;
        }
        let grad = tensor.grad.take().expect("checked above");
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (j, p) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[j].as_f64();
            let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
            *p = F::of(p.as_f64() - update);
        }
    }
    Ok(())
}

/// Linear warm-up then inverse-square-root decay:
/// `base · min(step/warmup, sqrt(warmup/step))`.
pub fn inverse_sqrt_lr(step: u64, base: f64, warmup: u64) -> Result<f64> {
    if step == 0 || warmup == 0 {
        return Err(Error::invalid("learning-rate schedule needs step >= 1 and warmup >= 1"));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(base * (s / w).min((w / s).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store(vals: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[1.0, -2.0]);
        let mut st = OptimizerState::new(&s, 0.1, 10);
        s.get_mut(crate::numerics::ParamId(0)).accumulate_grad(&[0.0, 0.0]);
        adam_step(&mut s, &mut st, 0.1).unwrap();
        assert_eq!(s.get(crate::numerics::ParamId(0)).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut s = store(&[0.0, 0.0]);
        let mut st = OptimizerState::new(&s, 0.01, 10);
        s.get_mut(crate::numerics::ParamId(0)).accumulate_grad(&[3.0, -0.5]);
        adam_step(&mut s, &mut st, 0.01).unwrap();
        let d = s.get(crate::numerics::ParamId(0)).data();
        assert!((d[0] + 0.01).abs() < 1e-6, "{d:?}");
        assert!((d[1] - 0.01).abs() < 1e-6, "{d:?}");
        assert!(s.get(crate::numerics::ParamId(0)).grad.is_none());
    }

    #[test]
    fn step_counter_and_missing_grad() {
        let mut s = store(&[1.0]);
        let mut st = OptimizerState::new(&s, 0.01, 10);
        assert!(matches!(adam_step(&mut s, &mut st, 0.01), Err(Error::MissingGrad(_))));
        for _ in 0..2 {
            s.get_mut(crate::numerics::ParamId(0)).accumulate_grad(&[1.0]);
            adam_step(&mut s, &mut st, 0.01).unwrap();
        }
        assert_eq!(st.step, 2);
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(inverse_sqrt_lr(100, 0.002, 100).unwrap(), 0.002);
        assert!((inverse_sqrt_lr(50, 0.002, 100).unwrap() - 0.001).abs() < 1e-15);
        assert!((inverse_sqrt_lr(400, 0.002, 100).unwrap() - 0.001).abs() < 1e-15);
        assert!(inverse_sqrt_lr(0, 0.002, 100).is_err());
    }
}
