//! Expensive shared state built once per configuration: the pretrained
//! denoiser and the feature extractor.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::dataset::{build_corpus_range, render_identity, IdentitySpec, RenderOptions};
use crate::diffusion::params::Params;
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::text::Vocabulary;
use crate::diffusion::train::{pretrain, TrainReport};
use crate::diffusion::unet::UNet;
use crate::error::{Error, Result};
use crate::experiment::config::LabConfig;
use crate::metrics::FeatureExtractor;
use crate::tensor::Tensor;

/// Published images of one subject and the held-out renders used as the
/// FID reference.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: usize,
    pub clean: Tensor<f32>,
    pub references: Tensor<f32>,
}

pub struct Lab {
    pub config: LabConfig,
    pub net: UNet,
    pub vocab: Vocabulary,
    pub sched: NoiseSchedule,
    pub theta: Params<f32>,
    pub extractor: FeatureExtractor,
    /// Present when pretraining ran in this process rather than loading.
    pub pretrain_report: Option<TrainReport>,
    pub checkpoint: Option<PathBuf>,
}

/// Short hex digest of any serializable value.
pub fn digest(value: &impl serde::Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

impl Lab {
    /// Builds the lab. With `cache`, the pretrained parameters are stored as
    /// `pretrain-<digest>.ckpt` there and reused when the digest matches.
    pub fn prepare(config: LabConfig, cache: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let net = UNet::new(config.model.clone())?;
        let vocab = Vocabulary::default();
        let sched = config.schedule.build()?;

        let start = Instant::now();
        let e = &config.extractor;
        let corpus = build_corpus_range(e.root_seed, 0..e.identities, e.per_identity, config.model.image_size);
        let extractor = FeatureExtractor::train(&corpus.images, &corpus.labels, &e.train)?;
        info!("extractor held-out accuracy {:.3} in {:.1}s", extractor.heldout_accuracy, start.elapsed().as_secs_f64());

        let path = cache.map(|dir| dir.join(format!("pretrain-{}.ckpt", Self::pretrain_digest(&config))));
        let (theta, pretrain_report) = match &path {
            Some(p) if p.exists() => {
                info!("loading pretrained parameters from {}", p.display());
                (checkpoint::load(p)?, None)
            }
            _ => {
                let (theta, report) = Self::pretrain(&config, &net, &vocab, &sched)?;
                if let Some(p) = &path {
                    if let Some(dir) = p.parent() {
                        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    }
                    checkpoint::save(&theta, p)?;
                }
                (theta, Some(report))
            }
        };
        Ok(Self { config, net, vocab, sched, theta, extractor, pretrain_report, checkpoint: path })
    }

    fn pretrain(config: &LabConfig, net: &UNet, vocab: &Vocabulary, sched: &NoiseSchedule) -> Result<(Params<f32>, TrainReport)> {
        let p = &config.pretrain;
        let start = Instant::now();
        let ids = p.first_identity..p.first_identity + p.identities;
        let corpus = build_corpus_range(p.root_seed, ids, p.per_identity, config.model.image_size);
        let groups = corpus.prompt_groups()?;
        let init = net.init_params(vocab.len(), &mut ChaCha8Rng::seed_from_u64(p.seed))?;
        let out = pretrain(net, vocab, &groups, init, sched, &p.train_config())?;
        info!("pretrained {} steps in {:.1}s", p.steps, start.elapsed().as_secs_f64());
        Ok(out)
    }

    /// Digest of everything the pretrained parameters depend on.
    pub fn pretrain_digest(config: &LabConfig) -> String {
        digest(&(&config.model, &config.schedule, &config.pretrain))
    }

    /// Digest of the whole configuration; part of every run id.
    pub fn fingerprint(&self) -> String {
        digest(&self.config)
    }

    pub fn subject(&self, id: usize) -> Result<Subject> {
        let s = &self.config.subjects;
        if !s.ids.contains(&id) {
            return Err(Error::Config(format!("identity {id} is not a configured subject")));
        }
        let spec = IdentitySpec::new(id, s.root_seed);
        let opts = RenderOptions { size: self.config.model.image_size, jitter: true };
        Ok(Subject {
            id,
            clean: render_identity(&spec, s.clean_variation, s.clean_images, opts),
            references: render_identity(&spec, s.reference_variation, s.reference_images, opts),
        })
    }
}
