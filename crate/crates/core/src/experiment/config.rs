//! TOML configuration of the shared pipeline: model, schedule, pretraining,
//! feature extractor, subjects, attack and per-method fine-tuning.

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::diffusion::sampler::Sampler;
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::train::TrainConfig;
use crate::diffusion::unet::UNetConfig;
use crate::error::{Error, Result};
use crate::experiment::plan::MatrixSpec;
use crate::finetune::{FineTuneConfig, FineTuneMethod};
use crate::metrics::ExtractorConfig;

/// Keys every config file must set; everything else has a default.
pub const REQUIRED_KEYS: [&str; 9] = [
    "model.image_size",
    "model.channels",
    "schedule.steps",
    "schedule.beta_start",
    "schedule.beta_end",
    "pretrain.identities",
    "pretrain.per_identity",
    "pretrain.steps",
    "subjects.ids",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Captioned pretraining on identities disjoint from the subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub root_seed: u64,
    pub first_identity: usize,
    pub identities: usize,
    pub per_identity: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub caption_dropout: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            root_seed: 0,
            first_identity: 1000,
            identities: 64,
            per_identity: 16,
            steps: 12_000,
            lr: t.lr,
            batch: t.batch,
            caption_dropout: t.caption_dropout,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch: self.batch,
            seed: self.seed,
            caption_dropout: self.caption_dropout,
            ..TrainConfig::default()
        }
    }
}

/// Labelled identities `0..identities` the feature extractor is trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSection {
    pub root_seed: u64,
    pub identities: usize,
    pub per_identity: usize,
    pub train: ExtractorConfig,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        Self { root_seed: 0, identities: 10, per_identity: 64, train: ExtractorConfig::default() }
    }
}

/// Which identities are protected and how their images are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubjectsConfig {
    pub ids: Vec<usize>,
    pub root_seed: u64,
    /// Images the subject publishes, i.e. the attack input.
    pub clean_images: usize,
    /// Held-out renders FID is measured against.
    pub reference_images: usize,
    pub clean_variation: u64,
    pub reference_variation: u64,
}

impl Default for SubjectsConfig {
    fn default() -> Self {
        Self { ids: vec![0], root_seed: 0, clean_images: 4, reference_images: 64, clean_variation: 1000, reference_variation: 2000 }
    }
}

/// Steps, learning rate and batch for one fine-tuning method; the prompt
/// comes from the method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodHyper {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneSection {
    pub full_finetune: MethodHyper,
    pub kv_only: MethodHyper,
    pub embedding_only: MethodHyper,
}

impl Default for FineTuneSection {
    /// Step counts of the reference methods with learning rates and batches
    /// re-tuned for 16x16 images.
    fn default() -> Self {
        Self {
            full_finetune: MethodHyper { steps: 1000, lr: 1e-3, batch: 4 },
            kv_only: MethodHyper { steps: 250, lr: 2e-2, batch: 4 },
            embedding_only: MethodHyper { steps: 1500, lr: 3e-2, batch: 1 },
        }
    }
}

impl FineTuneSection {
    pub fn get(&self, method: FineTuneMethod) -> MethodHyper {
        match method {
            FineTuneMethod::FullFinetune => self.full_finetune,
            FineTuneMethod::KvOnly => self.kv_only,
            FineTuneMethod::EmbeddingOnly => self.embedding_only,
        }
    }

    pub fn config(&self, method: FineTuneMethod, seed: u64) -> FineTuneConfig {
        let h = self.get(method);
        FineTuneConfig { steps: h.steps, lr: h.lr, batch: h.batch, seed, ..FineTuneConfig::for_method(method) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabConfig {
    pub model: UNetConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub sampler: Sampler,
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub extractor: ExtractorSection,
    pub subjects: SubjectsConfig,
    #[serde(default = "desk_attack")]
    pub attack: AttackConfig,
    #[serde(default)]
    pub finetune: FineTuneSection,
    #[serde(default = "default_generated")]
    pub generated: usize,
}

fn default_generated() -> usize {
    crate::finetune::DEFAULT_GENERATED
}

/// Attack defaults with the co-training rate raised to match the desk
/// fine-tuning rates.
pub fn desk_attack() -> AttackConfig {
    AttackConfig { model_lr: 5e-3, ..AttackConfig::default() }
}

impl LabConfig {
    /// 16x16 single-CPU profile.
    pub fn desk() -> Self {
        Self {
            model: UNetConfig { image_size: 16, channels: vec![16, 32], ..UNetConfig::default() },
            schedule: ScheduleConfig { steps: 100, beta_start: 5e-4, beta_end: 0.1 },
            sampler: Sampler::default(),
            pretrain: PretrainConfig::default(),
            extractor: ExtractorSection::default(),
            subjects: SubjectsConfig::default(),
            attack: desk_attack(),
            finetune: FineTuneSection::default(),
            generated: default_generated(),
        }
    }

    /// Parses a config, reporting every missing required key at once.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let missing = missing_keys(&table, &REQUIRED_KEYS);
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing config keys: {}", missing.join(", "))));
        }
        let cfg: LabConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.build()?;
        self.attack.validate()?;
        let positive = [
            ("pretrain.identities", self.pretrain.identities),
            ("pretrain.per_identity", self.pretrain.per_identity),
            ("pretrain.batch", self.pretrain.batch),
            ("extractor.identities", self.extractor.identities),
            ("subjects.clean_images", self.subjects.clean_images),
            ("subjects.reference_images", self.subjects.reference_images),
            ("generated", self.generated),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.subjects.ids.is_empty() {
            return Err(Error::Config("subjects.ids must not be empty".into()));
        }
        let pre = self.pretrain.first_identity..self.pretrain.first_identity + self.pretrain.identities;
        if let Some(id) = self.subjects.ids.iter().find(|id| pre.contains(id)) {
            return Err(Error::Config(format!("subject {id} is also a pretraining identity")));
        }
        if let Some(id) = self.subjects.ids.iter().find(|&&id| id >= self.extractor.identities) {
            return Err(Error::Config(format!("subject {id} is not an extractor class")));
        }
        Ok(())
    }
}

/// A lab config plus the optional `[matrix]` grid section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub lab: LabConfig,
    pub matrix: MatrixSpec,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let matrix = match table.remove("matrix") {
            Some(v) => v.try_into().map_err(|e: toml::de::Error| Error::Config(format!("matrix: {}", e.message())))?,
            None => MatrixSpec::default(),
        };
        let lab = LabConfig::from_toml(&toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?)?;
        Ok(Self { lab, matrix })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Dotted `keys` absent from `table`.
pub fn missing_keys(table: &toml::Table, keys: &[&str]) -> Vec<String> {
    keys.iter()
        .filter(|key| {
            let mut node = Some(table);
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let Some(t) = node else { return true };
                match t.get(*part) {
                    Some(toml::Value::Table(inner)) if i + 1 < parts.len() => node = Some(inner),
                    Some(_) if i + 1 == parts.len() => return false,
                    _ => return true,
                }
            }
            true
        })
        .map(|k| k.to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [model]
        image_size = 16
        channels = [16, 32]
        [schedule]
        steps = 100
        beta_start = 5e-4
        beta_end = 0.1
        [pretrain]
        identities = 64
        per_identity = 16
        steps = 12000
        [subjects]
        ids = [0]
    "#;

    #[test]
    fn minimal_file_resolves_to_the_desk_profile() {
        assert_eq!(LabConfig::from_toml(MINIMAL).unwrap(), LabConfig::desk());
    }

    #[test]
    fn desk_profile_round_trips_through_toml() {
        let d = LabConfig::desk();
        assert_eq!(LabConfig::from_toml(&d.to_toml().unwrap()).unwrap(), d);
    }

    #[test]
    fn every_missing_key_is_listed() {
        let text = MINIMAL.replace("beta_end = 0.1", "").replace("ids = [0]", "");
        let msg = LabConfig::from_toml(&text).unwrap_err().to_string();
        assert!(msg.contains("schedule.beta_end") && msg.contains("subjects.ids"), "{msg}");
        let msg = LabConfig::from_toml("").unwrap_err().to_string();
        for k in REQUIRED_KEYS {
            assert!(msg.contains(k), "{msg}");
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let e = LabConfig::from_toml(&format!("{MINIMAL}\nextra = 1")).unwrap_err();
        assert_eq!(e.kind(), "config");
        let e = LabConfig::from_toml(&MINIMAL.replace("ids = [0]", "ids = [1000]")).unwrap_err();
        assert!(e.to_string().contains("pretraining identity"), "{e}");
        let e = LabConfig::from_toml(&MINIMAL.replace("ids = [0]", "ids = [12]")).unwrap_err();
        assert!(e.to_string().contains("extractor class"), "{e}");
        assert!(LabConfig::from_toml("[model").is_err());
    }

    #[test]
    fn matrix_section_is_optional_and_checked() {
        let e = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!((e.lab, e.matrix), (LabConfig::desk(), MatrixSpec::default()));
        let e = ExperimentConfig::from_toml(&format!("{MINIMAL}\n[matrix]\netas = [0.05]\nseeds = [4]")).unwrap();
        assert_eq!((e.matrix.etas, e.matrix.seeds), (vec![0.05], vec![4]));
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\n[matrix]\nbogus = 1")).is_err());
    }

    #[test]
    fn method_table_feeds_fine_tune_configs() {
        let f = FineTuneSection::default();
        let c = f.config(FineTuneMethod::KvOnly, 7);
        assert_eq!((c.steps, c.lr, c.batch, c.seed), (250, 2e-2, 4, 7));
        assert_eq!(f.config(FineTuneMethod::EmbeddingOnly, 0).prompt, crate::finetune::PLACEHOLDER_PROMPT);
    }

    #[test]
    fn shipped_config_is_the_desk_profile() {
        let e = ExperimentConfig::from_toml(include_str!("../../../../configs/desk.toml")).unwrap();
        assert_eq!(e.lab, LabConfig::desk());
        assert_eq!(e.matrix, MatrixSpec::default());
    }
}
