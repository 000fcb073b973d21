use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {index} at step {step}")]
    NonFiniteGrad { index: usize, step: u64 },
    #[error("optimizer was built for {expected} parameters, got {actual}")]
    ParamCountMismatch { expected: usize, actual: usize },
    #[error("parameter {index}: moment buffer has {expected} elements, gradient has {actual}")]
    ShapeMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state: per-parameter first/second moment buffers plus a step counter
/// that increases once per update.
pub struct OptimState {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(cfg: AdamConfig, param_sizes: &[usize]) -> Self {
        OptimState {
            cfg,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// One bias-corrected Adam update. `params` and `grads` must align with
    /// the sizes this state was built for. A gradient may be `None` when no
    /// gradient flowed to that parameter this step (treated as zero).
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<Tensor>],
    ) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::ParamCountMismatch {
                expected: self.m.len(),
                actual: params.len().max(grads.len()),
            });
        }
        self.step += 1;
        let t = self.step;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        for (idx, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            if m.len() != param.numel() {
                return Err(OptimError::ShapeMismatch {
                    index: idx,
                    expected: m.len(),
                    actual: param.numel(),
                });
            }
            let zero;
            let g: &[f64] = match grad {
                Some(g) => {
                    if g.numel() != m.len() {
                        return Err(OptimError::ShapeMismatch {
                            index: idx,
                            expected: m.len(),
                            actual: g.numel(),
                        });
                    }
                    g.data()
                }
                None => {
                    zero = vec![0.0; m.len()];
                    &zero
                }
            };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(OptimError::NonFiniteGrad {
                    index: idx,
                    step: t,
                });
            }
            let pd = param.data_mut();
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pd[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::scalar(3.25);
        let before = p.clone();
        let mut state = OptimState::new(AdamConfig::with_lr(0.1), &[1]);
        state
            .step(&mut [&mut p], &[Some(Tensor::scalar(0.0))])
            .unwrap();
        assert!(p.bit_eq(&before));
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_about_lr() {
        // m_hat = v_hat = 1 after one step with g = 1, so the update is
        // lr / (1 + eps) ≈ lr.
        let mut p = Tensor::scalar(1.0);
        let mut state = OptimState::new(AdamConfig::with_lr(0.1), &[1]);
        state
            .step(&mut [&mut p], &[Some(Tensor::scalar(1.0))])
            .unwrap();
        assert!((p.item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn two_steps_descend_a_parabola() {
        // f(x) = x², grad = 2x, starting at x = 1.
        let mut x = Tensor::scalar(1.0);
        let mut state = OptimState::new(AdamConfig::with_lr(0.1), &[1]);
        let mut f_prev = x.item() * x.item();
        for _ in 0..2 {
            let g = Tensor::scalar(2.0 * x.item());
            state.step(&mut [&mut x], &[Some(g)]).unwrap();
            let f = x.item() * x.item();
            assert!(f < f_prev, "f did not decrease: {f} >= {f_prev}");
            f_prev = f;
        }
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let mut p = Tensor::scalar(1.0);
        let mut state = OptimState::new(AdamConfig::default(), &[1]);
        let err = state
            .step(&mut [&mut p], &[Some(Tensor::scalar(f64::NAN))])
            .unwrap_err();
        assert!(matches!(err, OptimError::NonFiniteGrad { index: 0, .. }));
    }
}
