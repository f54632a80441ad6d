//! Reverse-process samplers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampler {
    /// Full-length DDPM chain with posterior variance.
    Ancestral,
    /// DDIM (eta = 0) over evenly strided timesteps with clipped `x0`.
    Deterministic { steps: usize },
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::Deterministic { steps: 25 }
    }
}

fn normal<S: Real>(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::from_fn(dims, |_| {
        let z: f64 = StandardNormal.sample(rng);
        S::from_f64c(z)
    })
}

/// Draws `dims[0]` images starting from pure noise. `predict` maps a
/// model-space `x_t` and its timesteps to predicted noise. Output values are
/// in `[0, 1]`.
pub fn sample<S: Real>(
    mut predict: impl FnMut(&Tensor<S>, &[usize]) -> Result<Tensor<S>>,
    sched: &NoiseSchedule,
    dims: &[usize],
    seed: u64,
    sampler: Sampler,
) -> Result<Tensor<S>> {
    if dims.first().copied().unwrap_or(0) == 0 {
        return Err(Error::Config("number of images must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims[0];
    let mut x: Tensor<S> = normal(dims, &mut rng);
    let big_t = sched.len();
    let f = S::from_f64c;

    let timesteps: Vec<usize> = match sampler {
        Sampler::Ancestral => (0..big_t).rev().collect(),
        Sampler::Deterministic { steps } => {
            if steps == 0 || steps > big_t {
                return Err(Error::Config(format!(
                    "deterministic sampler needs 1..={big_t} steps, got {steps}"
                )));
            }
            let ratio = big_t / steps;
            (0..steps).rev().map(|i| i * ratio).collect()
        }
    };

    for (k, &t) in timesteps.iter().enumerate() {
        let eps = predict(&x, &vec![t; n])?;
        if eps.dims() != x.dims() {
            return Err(Error::Config(format!(
                "predictor returned {:?} for input {:?}",
                eps.dims(),
                x.dims()
            )));
        }
        let ab_t = sched.alpha_bar[t];
        let (ra, rs) = (f(ab_t.sqrt()), f((1.0 - ab_t).sqrt()));
        let x0 = x.zip_map(&eps, |xv, e| ((xv - rs * e) / ra).max(-S::one()).min(S::one()))?;
        x = match sampler {
            Sampler::Ancestral => {
                let ab_prev = if t > 0 { sched.alpha_bar[t - 1] } else { 1.0 };
                let beta = sched.betas[t];
                let c0 = f(ab_prev.sqrt() * beta / (1.0 - ab_t));
                let ct = f((1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t));
                let mean = x0.zip_map(&x, |a, b| c0 * a + ct * b)?;
                if t > 0 {
                    let sd = f(((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt());
                    let z: Tensor<S> = normal(dims, &mut rng);
                    mean.zip_map(&z, |m, zv| m + sd * zv)?
                } else {
                    mean
                }
            }
            Sampler::Deterministic { .. } => {
                // Noise direction consistent with the clipped x0 estimate.
                let eps = x.zip_map(&x0, |xv, x0v| (xv - ra * x0v) / rs)?;
                let ab_prev = timesteps.get(k + 1).map_or(1.0, |&p| sched.alpha_bar[p]);
                let (a, s) = (f(ab_prev.sqrt()), f((1.0 - ab_prev).sqrt()));
                x0.zip_map(&eps, |xv, e| a * xv + s * e)?
            }
        };
    }
    let half = f(0.5);
    Ok(x.map(|v| ((v + S::one()) * half).max(S::zero()).min(S::one())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target() -> Tensor<f64> {
        Tensor::from_fn(&[2, 3, 4, 4], |i| ((i * 37) % 17) as f64 / 16.0)
    }

    /// eps-hat = (x_t - sqrt(ab_t) x*) / sqrt(1 - ab_t)
    fn oracle<'a>(sched: &'a NoiseSchedule, x_star: &'a Tensor<f64>) -> impl FnMut(&Tensor<f64>, &[usize]) -> Result<Tensor<f64>> + 'a {
        move |x, t| {
            let ab = sched.alpha_bar[t[0]];
            Ok(x.zip_map(x_star, |xv, s| (xv - ab.sqrt() * (2.0 * s - 1.0)) / (1.0 - ab).sqrt())?)
        }
    }

    #[test]
    fn ancestral_converges_to_oracle_target() {
        let sched = NoiseSchedule::default();
        let x_star = target();
        let out = sample(oracle(&sched, &x_star), &sched, x_star.dims(), 3, Sampler::Ancestral).unwrap();
        let mae = out.zip_map(&x_star, |a, b| (a - b).abs()).unwrap().mean();
        assert!(mae < 0.05, "{mae}");
    }

    #[test]
    fn deterministic_converges_to_oracle_target() {
        let sched = NoiseSchedule::default();
        let x_star = target();
        let out = sample(oracle(&sched, &x_star), &sched, x_star.dims(), 3, Sampler::default()).unwrap();
        let mae = out.zip_map(&x_star, |a, b| (a - b).abs()).unwrap().mean();
        assert!(mae < 0.05, "{mae}");
    }

    #[test]
    fn same_seed_same_batch_and_clamped() {
        let sched = NoiseSchedule::default();
        let wild = |x: &Tensor<f64>, _: &[usize]| Ok(x.map(|v| -3.0 * v));
        let a = sample(wild, &sched, &[3, 3, 4, 4], 7, Sampler::Ancestral).unwrap();
        let b = sample(wild, &sched, &[3, 3, 4, 4], 7, Sampler::Ancestral).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_images_rejected() {
        let sched = NoiseSchedule::default();
        let r = sample(|x: &Tensor<f64>, _: &[usize]| Ok(x.clone()), &sched, &[0, 3, 4, 4], 1, Sampler::Ancestral);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
