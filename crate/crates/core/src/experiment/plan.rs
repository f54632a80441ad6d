//! Grid cells of an attack x fine-tune experiment and their run ids.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, AttackMode};
use crate::diffusion::params::ParamSubset;
use crate::error::{Error, Result};
use crate::experiment::config::LabConfig;
use crate::experiment::lab::digest;
use crate::finetune::FineTuneMethod;
use crate::metrics::Countermeasure;

/// What the subject publishes: clean images, or the first `n_perturbed`
/// of them replaced by attacked versions, optionally passed through a
/// countermeasure afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackCell {
    /// `None` publishes the clean images.
    pub mode: Option<AttackMode>,
    pub subset: ParamSubset,
    pub eta: f64,
    pub n_perturbed: usize,
    pub countermeasure: Option<Countermeasure>,
}

impl AttackCell {
    pub fn clean() -> Self {
        Self { mode: None, subset: ParamSubset::None, eta: 0.0, n_perturbed: 0, countermeasure: None }
    }

    /// `mode` with its own co-trained subset at budget `eta`, all images
    /// perturbed.
    pub fn attacked(mode: AttackMode, eta: f64, n_perturbed: usize) -> Self {
        let subset = AttackConfig::for_mode(mode).co_train_subset;
        Self { mode: Some(mode), subset, eta, n_perturbed, countermeasure: None }
    }

    pub fn with_subset(self, subset: ParamSubset) -> Self {
        Self { subset, ..self }
    }

    pub fn with_countermeasure(self, cm: Countermeasure) -> Self {
        Self { countermeasure: Some(cm), ..self }
    }

    /// CSV `attack_mode` value, e.g. `clean`, `caat` or `caat+jpeg`.
    pub fn label(&self) -> String {
        let base = self.mode.map_or("clean", |m| m.as_str());
        match self.countermeasure {
            Some(cm) => format!("{base}+{}", cm.name()),
            None => base.to_string(),
        }
    }

    /// Attack settings for this cell on top of `base`, or `None` if clean.
    pub fn attack_config(&self, base: &AttackConfig, seed: u64) -> Option<AttackConfig> {
        self.mode.map(|mode| AttackConfig { mode, co_train_subset: self.subset, eta: self.eta, seed, ..base.clone() })
    }
}

/// One row of the metric table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub subject: usize,
    pub attack: AttackCell,
    pub method: FineTuneMethod,
    pub seed: u64,
}

impl Cell {
    /// Digest of the cell, its seed and the lab fingerprint.
    pub fn run_id(&self, fingerprint: &str) -> String {
        digest(&(fingerprint, self))
    }

    /// Cells sharing this key reuse one attack run.
    pub fn attack_key(&self) -> Option<(usize, AttackMode, ParamSubset, u64, u64)> {
        let a = &self.attack;
        a.mode.map(|m| (self.subject, m, a.subset, a.eta.to_bits(), self.seed))
    }
}

/// Grid axes as written in the `[matrix]` section of a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSpec {
    pub modes: Vec<AttackMode>,
    /// Empty means the configured attack budget.
    pub etas: Vec<f64>,
    /// Empty means every published image.
    pub perturbed: Vec<usize>,
    /// Empty means each mode's own subset.
    pub subsets: Vec<ParamSubset>,
    /// Countermeasure names at their default parameters; each adds a
    /// variant of every attacked cell.
    pub countermeasures: Vec<String>,
    /// Adds the unattacked baseline for every method and seed.
    pub clean: bool,
    pub methods: Vec<FineTuneMethod>,
    pub seeds: Vec<u64>,
}

impl Default for MatrixSpec {
    fn default() -> Self {
        Self {
            modes: vec![AttackMode::Caat],
            etas: Vec::new(),
            perturbed: Vec::new(),
            subsets: Vec::new(),
            countermeasures: Vec::new(),
            clean: true,
            methods: FineTuneMethod::ALL.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub subjects: Vec<usize>,
    pub attacks: Vec<AttackCell>,
    pub methods: Vec<FineTuneMethod>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl ExperimentPlan {
    /// Expands `spec` against the lab's subjects and attack defaults.
    pub fn from_spec(name: &str, spec: &MatrixSpec, lab: &LabConfig, out: PathBuf) -> Result<Self> {
        let n = lab.subjects.clean_images;
        let etas = if spec.etas.is_empty() { vec![lab.attack.eta] } else { spec.etas.clone() };
        let counts = if spec.perturbed.is_empty() { vec![n] } else { spec.perturbed.clone() };
        let cms = spec.countermeasures.iter().map(|k| Countermeasure::by_name(k)).collect::<Result<Vec<_>>>()?;

        let mut attacks = Vec::new();
        if spec.clean {
            attacks.push(AttackCell::clean());
        }
        for &mode in &spec.modes {
            let subsets = if spec.subsets.is_empty() { vec![AttackConfig::for_mode(mode).co_train_subset] } else { spec.subsets.clone() };
            for &eta in &etas {
                for &k in &counts {
                    for &subset in &subsets {
                        let cell = AttackCell::attacked(mode, eta, k).with_subset(subset);
                        attacks.push(cell);
                        attacks.extend(cms.iter().map(|&cm| cell.with_countermeasure(cm)));
                    }
                }
            }
        }
        let plan = Self {
            name: name.to_string(),
            subjects: lab.subjects.ids.clone(),
            attacks,
            methods: spec.methods.clone(),
            seeds: spec.seeds.clone(),
            out,
        };
        plan.validate(lab)?;
        Ok(plan)
    }

    pub fn validate(&self, lab: &LabConfig) -> Result<()> {
        if self.attacks.is_empty() || self.methods.is_empty() || self.seeds.is_empty() || self.subjects.is_empty() {
            return Err(Error::Config(format!("plan `{}` has an empty axis", self.name)));
        }
        for a in &self.attacks {
            if a.n_perturbed > lab.subjects.clean_images {
                return Err(Error::Config(format!(
                    "{} perturbed images requested but only {} are published",
                    a.n_perturbed, lab.subjects.clean_images
                )));
            }
            if let Some(cfg) = a.attack_config(&lab.attack, 0) {
                cfg.validate()?;
            }
        }
        Ok(())
    }

    /// Every cell in subject, attack, method, seed order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &subject in &self.subjects {
            for &attack in &self.attacks {
                for &method in &self.methods {
                    for &seed in &self.seeds {
                        out.push(Cell { subject, attack, method, seed });
                    }
                }
            }
        }
        out
    }
}
