use serde::{Deserialize, Serialize};

use crate::compute::{Real, Tensor};

use super::ModelError;

/// Adam hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_ratio: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            warmup_ratio: 0.1,
        }
    }
}

impl AdamConfig {
    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        ((self.warmup_ratio * total_steps as f64).ceil() as usize).max(1)
    }

    /// Linear warmup to `lr` over the first `warmup_ratio` of training, then constant.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let w = self.warmup_steps(total_steps);
        self.lr * ((step + 1) as f64 / w as f64).min(1.0)
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update. `None` gradients count as zero.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Option<&Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr_t: f64,
) -> Result<(), ModelError> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(ModelError::InvalidConfig("parameter, gradient and state counts differ".into()));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params[i].shape() {
                return Err(ModelError::InvalidConfig(format!("gradient {i} has the wrong shape")));
            }
            if !g.is_finite() {
                return Err(ModelError::NonFiniteGradient { param: i });
            }
        }
    }
    state.t += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(state.t as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(state.t as i32));
    let (lr, eps) = (T::lit(lr_t), T::lit(cfg.eps));
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let g = grads[i].map(|g| g.data());
        for j in 0..p.len() {
            let gj = g.map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            let x = &mut p.data_mut()[j];
            *x = *x - lr * mhat / (vhat.sqrt() + eps);
        }
        if !p.is_finite() {
            return Err(ModelError::NonFiniteParameter { param: i });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params() {
        let mut p = vec![Tensor::<f64>::full(2, 2, 0.7)];
        let mut s = AdamState::new(&p);
        let z = Tensor::zeros(2, 2);
        adam_step(&mut p, &[Some(&z)], &mut s, &AdamConfig::default(), 0.1).unwrap();
        adam_step(&mut p, &[None], &mut s, &AdamConfig::default(), 0.1).unwrap();
        assert!(p[0].data().iter().all(|&x| x == 0.7));
    }

    #[test]
    fn first_step_scalar() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut s = AdamState::new(&p);
        let g = Tensor::scalar(1.0);
        adam_step(&mut p, &[Some(&g)], &mut s, &AdamConfig::default(), 0.1).unwrap();
        let expect = 1.0 - 0.1 / (1.0 + 1e-6);
        assert!((p[0].item() - expect).abs() < 1e-12);
        assert!((p[0].item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn warmup_endpoints() {
        let cfg = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
        let total = 1000;
        let w = cfg.warmup_steps(total);
        assert_eq!(w, 100);
        assert!((cfg.lr_at(0, total) - 1e-3 / 100.0).abs() < 1e-18);
        assert_eq!(cfg.lr_at(w, total), 1e-3);
        assert_eq!(cfg.lr_at(w - 1, total), 1e-3);
        assert_eq!(cfg.lr_at(5000, total), 1e-3);
        assert!(cfg.lr_at(10, total) < cfg.lr_at(11, total));
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut s = AdamState::new(&p);
        let g = Tensor::scalar(f64::NAN);
        let r = adam_step(&mut p, &[Some(&g)], &mut s, &AdamConfig::default(), 0.1);
        assert!(matches!(r, Err(ModelError::NonFiniteGradient { param: 0 })));
        assert_eq!(p[0].item(), 1.0);
    }
}
