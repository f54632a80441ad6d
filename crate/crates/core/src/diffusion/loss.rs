//! Denoising objective.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::diffusion::params::Bound;
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::unet::UNet;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Anything that predicts noise from a model-space `x_t` inside a graph.
pub trait Denoiser<S: Real> {
    fn predict(&self, g: &mut Graph<S>, x_t: Var, t: &[usize]) -> Result<Var>;
}

/// A U-Net whose parameters and prompt context are already bound in the
/// graph it will be evaluated in.
pub struct Conditioned<'a> {
    pub net: &'a UNet,
    pub bound: &'a Bound,
    pub context: Var,
    pub sched: &'a NoiseSchedule,
}

impl<S: Real> Denoiser<S> for Conditioned<'_> {
    fn predict(&self, g: &mut Graph<S>, x_t: Var, t: &[usize]) -> Result<Var> {
        self.net.forward(g, self.bound, x_t, t, self.context, self.sched)
    }
}

/// Per-sample timesteps and standard-normal noise for one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<S> {
    pub t: Vec<usize>,
    pub eps: Tensor<S>,
}

impl<S: Real> NoiseDraw<S> {
    /// `t` uniform over `[0, steps)`, `eps ~ N(0, I)` with `dims`.
    pub fn sample<R: Rng>(dims: &[usize], steps: usize, rng: &mut R) -> Self {
        let t = (0..dims[0]).map(|_| rng.gen_range(0..steps)).collect();
        let eps = Tensor::from_fn(dims, |_| {
            let z: f64 = StandardNormal.sample(rng);
            S::from_f64c(z)
        });
        Self { t, eps }
    }
}

/// Mean squared error between the drawn noise and the prediction at
/// `x_t = sqrt(ab_t) (2 x0 - 1) + sqrt(1 - ab_t) eps`, where `x0` is in
/// `[0, 1]`.
pub fn ldm_loss<S: Real, D: Denoiser<S>>(
    g: &mut Graph<S>,
    model: &D,
    x0: Var,
    sched: &NoiseSchedule,
    draw: &NoiseDraw<S>,
) -> Result<Var> {
    let dims = g.dims(x0).to_vec();
    if dims.len() != 4 {
        return Err(Error::Config(format!("image batch must be NCHW, got {dims:?}")));
    }
    if draw.t.len() != dims[0] || draw.eps.dims() != dims.as_slice() {
        return Err(Error::Config(format!(
            "noise draw ({} steps, eps {:?}) does not match batch {dims:?}",
            draw.t.len(),
            draw.eps.dims()
        )));
    }
    for &t in &draw.t {
        sched.check_step(t)?;
    }
    let b = dims[0];
    let signal = Tensor::new(
        vec![b, 1, 1, 1],
        draw.t.iter().map(|&t| S::from_f64c(sched.alpha_bar[t].sqrt())).collect(),
    )?;
    let noise = Tensor::new(
        vec![b, 1, 1, 1],
        draw.t.iter().map(|&t| S::from_f64c((1.0 - sched.alpha_bar[t]).sqrt())).collect(),
    )?;
    let xm = g.affine(x0, S::from_f64c(2.0), -S::one());
    let a = g.constant(signal);
    let s = g.constant(noise);
    let eps = g.constant(draw.eps.clone());
    let xs = g.mul(xm, a)?;
    let ns = g.mul(eps, s)?;
    let x_t = g.add(xs, ns)?;
    let pred = model.predict(g, x_t, &draw.t)?;
    let diff = g.sub(pred, eps)?;
    let sq = g.square(diff)?;
    Ok(g.mean(sq))
}
