use crate::error::{mismatch, Result};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Tensor], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter with `trainable` set; frozen
    /// parameters and their moments are left untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], trainable: &[bool], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || trainable.len() != params.len() {
            return Err(mismatch("adamw", &[self.m.len()], &[params.len(), grads.len(), trainable.len()]));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let g = &grads[i];
            if g.len() != p.numel() {
                return Err(mismatch("adamw grad", p.shape(), &[g.len()]));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let mut x = *w as f64;
                x -= lr * self.weight_decay * x;
                x -= lr * mhat / (vhat.sqrt() + self.eps);
                *w = x as f32;
            }
        }
        Ok(())
    }
}

/// `base * (1 - iter / max_iter)^power`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return base;
    }
    base * (1.0 - iter.min(max_iter) as f64 / max_iter as f64).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()];
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &[vec![0.5, -2.0]], &[true], 0.1).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut p = vec![Tensor::full(&[3], 2.0)];
        let before = p.clone();
        let mut opt = AdamW::new(&p, 0.01);
        opt.step(&mut p, &[vec![1.0; 3]], &[false], 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(1e-3, 0, 100, 0.9), 1e-3);
        assert_eq!(poly_lr(1e-3, 100, 100, 0.9), 0.0);
        assert!((poly_lr(1.0, 50, 100, 0.9) - 0.5f64.powf(0.9)).abs() < 1e-12);
    }
}
