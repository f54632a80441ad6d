use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Linear beta schedule and its cumulative products.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    /// `alpha_bar[t] = prod_{i <= t} (1 - betas[i])`
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha_bar = betas
            .iter()
            .scan(1.0, |acc, &b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Index {
                index: t,
                len: self.len(),
            });
        }
        Ok(())
    }

    /// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps` for
    /// model-space `x0`.
    pub fn q_sample<S: Real>(&self, x0: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_step(t)?;
        let a = S::from_f64c(self.alpha_bar[t].sqrt());
        let s = S::from_f64c((1.0 - self.alpha_bar[t]).sqrt());
        Ok(x0.zip_map(eps, |x, e| a * x + s * e)?)
    }
}

impl NoiseSchedule {
    /// The 1000-step `1e-4..0.02` ramp with its endpoints scaled by
    /// `1000 / steps`, so `alpha_bar` at the last step stays near zero.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let k = 1000.0 / steps.max(1) as f64;
        Self::linear(steps, 1e-4 * k, (0.02 * k).min(0.999))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(100, 5e-4, 0.1).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn single_step() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn thousand_steps_strictly_decreasing() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar[0] - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn cumulative_product_matches_direct_loop() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        for t in [0, 49, 99] {
            let mut direct = 1.0;
            for i in 0..=t {
                let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 99.0;
                direct *= 1.0 - beta;
            }
            assert!((s.alpha_bar[t] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn zero_noise_scales_input() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2);
        let out = s.q_sample(&x0, 40, &Tensor::zeros(&[2, 3])).unwrap();
        for (o, x) in out.data().iter().zip(x0.data()) {
            assert_eq!(*o, s.alpha_bar[40].sqrt() * x);
        }
        assert!(matches!(s.q_sample(&x0, 100, &x0), Err(Error::Index { .. })));
    }

    #[test]
    fn near_identity_at_first_step() {
        let s = NoiseSchedule::linear(10, 1e-8, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::<f64>::from_fn(&[16], |i| (i as f64 / 8.0) - 1.0);
        let eps = Tensor::from_fn(&[16], |_| StandardNormal.sample(&mut rng));
        let out = s.q_sample(&x0, 0, &eps).unwrap();
        assert!(out.zip_map(&x0, |a, b| a - b).unwrap().max_abs() < 1e-3);
    }
}
