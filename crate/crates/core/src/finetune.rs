//! Subject personalization of a pretrained denoiser and sampling from it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::params::{ParamSubset, Params};
use crate::diffusion::sampler::{sample, Sampler};
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::text::{self, Vocabulary};
use crate::diffusion::train::{train_groups, LoopSpec, PromptGroup, Stage, TrainReport};
use crate::diffusion::unet::UNet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rare existing token bound to the subject by full and key/value tuning.
pub const SUBJECT_PROMPT: &str = "a photo of sks person";
/// New token learned by embedding-only tuning.
pub const PLACEHOLDER: &str = "S*";
pub const PLACEHOLDER_PROMPT: &str = "a photo of S* person";
pub const DEFAULT_GENERATED: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineTuneMethod {
    FullFinetune,
    KvOnly,
    EmbeddingOnly,
}

impl FineTuneMethod {
    pub const ALL: [FineTuneMethod; 3] = [FineTuneMethod::FullFinetune, FineTuneMethod::KvOnly, FineTuneMethod::EmbeddingOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            FineTuneMethod::FullFinetune => "full_finetune",
            FineTuneMethod::KvOnly => "kv_only",
            FineTuneMethod::EmbeddingOnly => "embedding_only",
        }
    }

    /// Whether `name` is updated by this method.
    pub fn trains(self, name: &str) -> bool {
        match self {
            FineTuneMethod::FullFinetune => true,
            FineTuneMethod::KvOnly => ParamSubset::KvCrossAttention.contains(name),
            FineTuneMethod::EmbeddingOnly => name == text::EXTRA_EMBEDDING,
        }
    }
}

impl fmt::Display for FineTuneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FineTuneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FineTuneMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fine-tune method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneConfig {
    pub method: FineTuneMethod,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub prompt: String,
    pub seed: u64,
}

impl FineTuneConfig {
    /// Published defaults of the method each variant stands in for.
    pub fn for_method(method: FineTuneMethod) -> Self {
        let (steps, lr, batch, prompt) = match method {
            FineTuneMethod::FullFinetune => (1000, 5e-7, 1, SUBJECT_PROMPT),
            FineTuneMethod::KvOnly => (250, 1e-5, 2, SUBJECT_PROMPT),
            FineTuneMethod::EmbeddingOnly => (1500, 5e-4, 1, PLACEHOLDER_PROMPT),
        };
        Self { method, steps, lr, batch, prompt: prompt.into(), seed: 0 }
    }
}

/// A fine-tuned parameter set with the vocabulary it was trained against.
#[derive(Debug, Clone)]
pub struct Personalized {
    pub params: Params<f32>,
    pub vocab: Vocabulary,
    pub report: TrainReport,
}

/// Minimizes the denoising loss on the subject images under `cfg.prompt`,
/// updating only the parameters the method owns.
pub fn finetune(
    net: &UNet,
    vocab: &Vocabulary,
    images: &Tensor<f32>,
    theta0: &Params<f32>,
    cfg: &FineTuneConfig,
    sched: &NoiseSchedule,
) -> Result<Personalized> {
    if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config("subject images must lie in [0, 1]".into()));
    }
    let mut vocab = vocab.clone();
    let mut params = theta0.clone();
    if cfg.method == FineTuneMethod::EmbeddingOnly && vocab.id(PLACEHOLDER).is_none() {
        text::extend_with_placeholder(&mut vocab, &mut params, PLACEHOLDER)?;
    }
    let group = PromptGroup { images: images.clone(), prompts: vec![vocab.encode(&cfg.prompt)?] };
    let method = cfg.method;
    let spec = LoopSpec {
        steps: cfg.steps,
        lr: cfg.lr,
        batch: cfg.batch,
        seed: cfg.seed,
        dropout: None,
        stage: Stage::FineTune,
    };
    let report = train_groups(net, &mut params, &[group], sched, spec, &|n| method.trains(n))?;
    if let Some(bad) = theta0.changed_names(&params).into_iter().find(|n| !method.trains(n)) {
        return Err(Error::FineTune { step: cfg.steps, msg: format!("frozen parameter `{bad}` changed") });
    }
    Ok(Personalized { params, vocab, report })
}

/// Samples `n` images for `prompt`; identical seeds give identical batches.
pub fn generate_subject(
    net: &UNet,
    model: &Personalized,
    prompt: &str,
    n: usize,
    seed: u64,
    sched: &NoiseSchedule,
    sampler: Sampler,
) -> Result<Tensor<f32>> {
    generate(net, &model.params, &model.vocab, prompt, n, seed, sched, sampler)
}

#[allow(clippy::too_many_arguments)]
pub fn generate(
    net: &UNet,
    params: &Params<f32>,
    vocab: &Vocabulary,
    prompt: &str,
    n: usize,
    seed: u64,
    sched: &NoiseSchedule,
    sampler: Sampler,
) -> Result<Tensor<f32>> {
    let ids = vocab.encode(prompt)?;
    let c = &net.config;
    let dims = [n, c.image_channels, c.image_size, c.image_size];
    sample(|x, t| net.predict(params, &ids, x, t, sched), sched, &dims, seed, sampler)
}
