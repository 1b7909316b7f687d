//! Optimizers. Parameters without a gradient in the current step are left
//! untouched, weight decay included.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

/// `base · (1 − step/total)^power`.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = 1.0 - (step as f64 / total as f64).min(1.0);
    base * frac.powf(power)
}

/// Stochastic gradient descent with momentum and L2 weight decay.
#[derive(Debug)]
pub struct Sgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    pub lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = vec![None; vars.len()];
        Self {
            vars,
            velocity,
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(&mut self.velocity) {
            let Some(g) = grads.get(var) else { continue };
            let g = if self.weight_decay > 0.0 {
                (g + var.as_tensor().affine(self.weight_decay, 0.0)?)?
            } else {
                g.clone()
            };
            let v = match vel.take() {
                Some(prev) => (prev.affine(self.momentum, 0.0)? + g)?,
                None => g,
            };
            var.set(&(var.as_tensor() - v.affine(self.lr, 0.0)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug)]
pub struct Adam {
    vars: Vec<Var>,
    moments: Vec<Option<(Tensor, Tensor, u32)>>,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Self {
        let moments = vec![None; vars.len()];
        Self {
            vars,
            moments,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, state) in self.vars.iter().zip(&mut self.moments) {
            let Some(g) = grads.get(var) else { continue };
            let (m, v, t) = match state.take() {
                Some((m, v, t)) => (
                    (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?,
                    (v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?,
                    t + 1,
                ),
                None => (
                    g.affine(1.0 - self.beta1, 0.0)?,
                    g.sqr()?.affine(1.0 - self.beta2, 0.0)?,
                    1,
                ),
            };
            let m_hat = m.affine(1.0 / (1.0 - self.beta1.powi(t as i32)), 0.0)?;
            let v_hat = v.affine(1.0 / (1.0 - self.beta2.powi(t as i32)), 0.0)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - update.affine(self.lr, 0.0)?)?)?;
            *state = Some((m, v, t));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(1.0, 0, 10, 0.9), 1.0);
        assert_eq!(poly_lr(1.0, 10, 10, 0.9), 0.0);
        assert!((poly_lr(2.0, 5, 10, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sgd_matches_hand_update() {
        let w = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let idle = Var::zeros(2, DType::F64, &Device::Cpu).unwrap();
        let mut opt = Sgd::new(vec![w.clone(), idle.clone()], 0.1, 0.9, 0.01);
        for _ in 0..2 {
            let g = w.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
            opt.step(&g).unwrap();
        }
        // step 1: g = 2w + 0.01w = 2.01w; v = 2.01; w = 1 - 0.201 = 0.799
        // step 2: g = 2.01*0.799; v = 0.9*2.01 + g; w = 0.799 - 0.1 v
        let w1 = 1.0 - 0.1 * 2.01;
        let v2 = 0.9 * 2.01 + 2.01 * w1;
        let expected = w1 - 0.1 * v2;
        assert!((w.as_tensor().to_vec1::<f64>().unwrap()[0] - expected).abs() < 1e-12);
        assert_eq!(idle.as_tensor().to_vec1::<f64>().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let w = Var::from_tensor(&Tensor::new(&[3.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![w.clone()], 0.01);
        let g = w.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&g).unwrap();
        assert!((w.as_tensor().to_vec1::<f64>().unwrap()[0] - (3.0 - 0.01)).abs() < 1e-8);
        let frozen = Var::from_tensor(&Tensor::new(&[3.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![frozen.clone()], 0.0);
        let g = frozen.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&g).unwrap();
        assert_eq!(frozen.as_tensor().to_vec1::<f64>().unwrap(), vec![3.0]);
    }
}
