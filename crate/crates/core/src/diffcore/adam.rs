//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for every entry of a [`ParamSet`]; non-trainable
/// entries keep zero moments and are never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ParamSet<F>, config: AdamConfig) -> Self {
        let zeros = || params.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update with learning rate `lr` using the gradients held in `params`.
    pub fn update(&mut self, params: &mut ParamSet<F>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (F::from_f64(beta1), F::from_f64(beta2));
        let (ob1, ob2) = (F::from_f64(1.0 - beta1), F::from_f64(1.0 - beta2));
        let step = F::from_f64(lr / bc1);
        let inv_bc2 = F::from_f64(1.0 / bc2);
        let eps = F::from_f64(eps);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let g = params.grad(id).clone();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = params.value_mut(id).data_mut();
            for (((w, m), v), g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + ob1 * *g;
                *v = b2 * *v + ob2 * *g * *g;
                *w -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamSet::<f64>::new();
        let id = p.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap(), true).unwrap();
        p.accumulate_grad(id, &Tensor::from_vec(&[2], vec![0.3, -7.0]).unwrap());
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.update(&mut p, 0.01);
        let w = p.value(id).data();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamSet::<f64>::new();
        let id = p.add("w", Tensor::full(&[1], 3.0), true).unwrap();
        let frozen = p.add("s", Tensor::full(&[1], 5.0), false).unwrap();
        let mut opt = Adam::new(&p, AdamConfig::default());
        for _ in 0..2000 {
            p.zero_grads();
            let w = p.value(id).item();
            p.accumulate_grad(id, &Tensor::full(&[1], 2.0 * (w - 1.0)));
            opt.update(&mut p, 0.05);
        }
        assert!((p.value(id).item() - 1.0).abs() < 1e-3);
        assert_eq!(p.value(frozen).item(), 5.0);
    }
}
