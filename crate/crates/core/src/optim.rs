//! First-order optimizers over named parameters.

use std::collections::HashMap;

use crate::diffusion::params::Params;
use crate::tensor::{Real, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step<S: Real>(&mut self, params: &mut Params<S>, grads: &[(String, Tensor<S>)]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for unknown parameter");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv.as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *pv = S::from_f64c(pv.as_f64() - update);
            }
        }
    }
}

/// Plain gradient descent, `p <- p - lr * g`.
pub fn sgd_step<S: Real>(params: &mut Params<S>, grads: &[(String, Tensor<S>)], lr: f64) {
    let lr = S::from_f64c(lr);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("gradient for unknown parameter");
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Params::<f64>::new();
        p.insert("w", Tensor::full(&[2], 1.0)).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &[("w".into(), Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())]);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn sgd_matches_rule() {
        let mut p = Params::<f32>::new();
        p.insert("w", Tensor::full(&[1], 2.0)).unwrap();
        sgd_step(&mut p, &[("w".into(), Tensor::full(&[1], 4.0))], 0.25);
        assert_eq!(p.get("w").unwrap().item(), 1.0);
    }
}
