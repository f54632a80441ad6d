//! Adam training loop on the denoising objective.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::diffusion::loss::{ldm_loss, Conditioned, NoiseDraw};
use crate::diffusion::params::Params;
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::text;
use crate::diffusion::unet::UNet;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Prompt used in place of a group's caption with probability
    /// `caption_dropout`.
    pub prompt: String,
    pub caption_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 1e-3,
            batch: 8,
            seed: 0,
            prompt: "a photo of a person".into(),
            caption_dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f32>,
}

impl TrainReport {
    /// Mean of the first and of the last `window` recorded losses.
    pub fn head_tail_means(&self, window: usize) -> (f64, f64) {
        let n = self.losses.len();
        let w = window.clamp(1, n.max(1));
        let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..w.min(n)]), mean(&self.losses[n.saturating_sub(w)..]))
    }
}

/// How a divergence is reported.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Pretrain,
    FineTune,
}

/// Images that share a set of prompts; every batch is drawn from a single
/// group with one of its prompts because the context is shared across a
/// batch.
#[derive(Debug, Clone)]
pub struct PromptGroup {
    pub images: Tensor<f32>,
    pub prompts: Vec<Vec<usize>>,
}

/// Loop settings shared by pretraining and fine-tuning.
#[derive(Debug, Clone, Copy)]
pub struct LoopSpec<'a> {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Replacement prompt and the probability of using it.
    pub dropout: Option<(&'a [usize], f64)>,
    pub stage: Stage,
}

/// Minimizes the denoising loss with Adam, updating only parameters
/// accepted by `trainable`. Images are in `[0, 1]`.
pub fn train_groups(
    net: &UNet,
    params: &mut Params<f32>,
    groups: &[PromptGroup],
    sched: &NoiseSchedule,
    spec: LoopSpec<'_>,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<TrainReport> {
    if groups.is_empty() || groups.iter().any(|g| g.images.dims()[0] == 0 || g.prompts.is_empty()) {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut opt = Adam::new(spec.lr);
    let mut report = TrainReport::default();
    for step in 0..spec.steps {
        let group = if groups.len() > 1 { &groups[rng.gen_range(0..groups.len())] } else { &groups[0] };
        let prompt = match spec.dropout {
            Some((alt, p)) if rng.gen_bool(p) => alt,
            _ if group.prompts.len() == 1 => &group.prompts[0][..],
            _ => &group.prompts[rng.gen_range(0..group.prompts.len())][..],
        };
        let n = group.images.dims()[0];
        let idx = index::sample(&mut rng, n, spec.batch.clamp(1, n)).into_vec();
        let x = group.images.select_outer(&idx)?;
        let draw = NoiseDraw::<f32>::sample(x.dims(), sched.len(), &mut rng);

        let mut g = Graph::new();
        let bound = params.bind(&mut g, trainable);
        let context = text::context_var(&mut g, &bound, prompt)?;
        let x0 = g.constant(x);
        let model = Conditioned { net, bound: &bound, context, sched };
        let loss = ldm_loss(&mut g, &model, x0, sched, &draw)?;
        let tracked = bound.filter(trainable);
        let vars: Vec<_> = tracked.iter().map(|(_, v)| *v).collect();
        let rec = g.evaluate_with_grads(loss, &vars)?;
        if !rec.value.is_finite() {
            let msg = format!("loss is {}", rec.value);
            return Err(match spec.stage {
                Stage::Pretrain => Error::Training { step, msg },
                Stage::FineTune => Error::FineTune { step, msg },
            });
        }
        report.losses.push(rec.value);
        let grads: Vec<_> = tracked
            .into_iter()
            .map(|(name, v)| (name, rec.grads[&v].clone()))
            .collect();
        opt.step(params, &grads);
        if step % 500 == 0 {
            log::debug!("step {step}: loss {:.4}", rec.value);
        }
    }
    Ok(report)
}

/// Trains every parameter on image groups, each with its own prompts.
pub fn pretrain(
    net: &UNet,
    vocab: &text::Vocabulary,
    groups: &[(Tensor<f32>, Vec<String>)],
    init: Params<f32>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(Params<f32>, TrainReport)> {
    let plain = vocab.encode(&cfg.prompt)?;
    let groups = groups
        .iter()
        .map(|(images, prompts)| {
            let prompts = prompts.iter().map(|p| vocab.encode(p)).collect::<Result<Vec<_>>>()?;
            Ok(PromptGroup { images: images.clone(), prompts })
        })
        .collect::<Result<Vec<_>>>()?;
    if !(0.0..=1.0).contains(&cfg.caption_dropout) {
        return Err(Error::Config(format!("caption_dropout must be in [0, 1], got {}", cfg.caption_dropout)));
    }
    let mut params = init;
    let spec = LoopSpec {
        steps: cfg.steps,
        lr: cfg.lr,
        batch: cfg.batch,
        seed: cfg.seed,
        dropout: Some((&plain, cfg.caption_dropout)),
        stage: Stage::Pretrain,
    };
    let report = train_groups(net, &mut params, &groups, sched, spec, &|_| true)?;
    Ok((params, report))
}
