//! Bounded input perturbations that raise the denoising loss of a model,
//! optionally while co-training a subset of its parameters.
//!
//! Every mode shares one step: draw `(t, eps)`, evaluate the loss at
//! `x + delta`, descend on the co-trained parameters with plain SGD, then
//! take a signed ascent step on `delta`, clip it to `[-eta, eta]` and
//! re-clamp `x + delta` into `[0, 1]`. The image enters the graph in
//! `[0, 1]` units, so its gradient already includes the factor of the
//! `2x - 1` model-space map.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset;
use crate::diffusion::loss::{ldm_loss, Conditioned, NoiseDraw};
use crate::diffusion::params::{ParamSubset, Params};
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::text::{self, Vocabulary};
use crate::diffusion::unet::UNet;
use crate::error::{Error, Result};
use crate::optim::sgd_step;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Caat,
    StaticPgd,
    Separated,
    SubsetVariant,
}

impl AttackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackMode::Caat => "caat",
            AttackMode::StaticPgd => "static_pgd",
            AttackMode::Separated => "separated",
            AttackMode::SubsetVariant => "subset_variant",
        }
    }
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "caat" => AttackMode::Caat,
            "static_pgd" => AttackMode::StaticPgd,
            "separated" => AttackMode::Separated,
            "subset_variant" => AttackMode::SubsetVariant,
            _ => return Err(Error::Config(format!("unknown attack mode `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub co_train_subset: ParamSubset,
    pub model_lr: f64,
    pub steps: usize,
    pub alpha: f64,
    pub eta: f64,
    pub prompt: String,
    pub seed: u64,
    /// Steps per phase in separated mode.
    pub block: usize,
    /// Start from `U(-eta, eta)` instead of zero.
    pub random_init: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::Caat,
            co_train_subset: ParamSubset::KvCrossAttention,
            model_lr: 1e-5,
            steps: 250,
            alpha: 5e-3,
            eta: 0.1,
            prompt: "a photo of a person".into(),
            seed: 0,
            block: 10,
            random_init: false,
        }
    }
}

impl AttackConfig {
    /// Config for `mode` with the subset that mode implies.
    pub fn for_mode(mode: AttackMode) -> Self {
        let co_train_subset = match mode {
            AttackMode::StaticPgd => ParamSubset::None,
            _ => ParamSubset::KvCrossAttention,
        };
        Self { mode, co_train_subset, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !(self.model_lr >= 0.0 && self.model_lr.is_finite()) {
            return Err(Error::Config(format!("model_lr must be non-negative, got {}", self.model_lr)));
        }
        match (self.mode, self.co_train_subset) {
            (AttackMode::Caat, s) if s != ParamSubset::KvCrossAttention => {
                Err(Error::Config(format!("caat co-trains kv_cross_attention, not {s}")))
            }
            (AttackMode::StaticPgd, s) if s != ParamSubset::None => {
                Err(Error::Config(format!("static_pgd co-trains nothing, not {s}")))
            }
            (AttackMode::Separated, _) if self.block == 0 => {
                Err(Error::Config("separated block size must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `delta` clamped elementwise to `[-eta, eta]`.
pub fn clip_delta(delta: &Tensor<f32>, eta: f32) -> Tensor<f32> {
    delta.map(|d| d.clamp(-eta, eta))
}

/// A budgeted perturbation of a fixed clean batch. The perturbed image is
/// stored directly so it stays inside `[0, 1]` without rounding drift.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub clean: Tensor<f32>,
    pub perturbed: Tensor<f32>,
    pub eta: f32,
    pub alpha: f32,
}

impl Perturbation {
    pub fn new(clean: Tensor<f32>, eta: f32, alpha: f32, random_init: Option<&mut ChaCha8Rng>) -> Self {
        let delta = match random_init {
            Some(rng) => Tensor::from_fn(clean.dims(), |_| rng.gen_range(-eta..=eta)),
            None => Tensor::zeros(clean.dims()),
        };
        let perturbed = clean.clone();
        let mut p = Self { clean, perturbed, eta, alpha };
        p.apply(&delta);
        p
    }

    pub fn delta(&self) -> Tensor<f32> {
        self.perturbed.zip_map(&self.clean, |a, x| a - x).expect("same dims")
    }

    /// `delta <- clip(delta + alpha sign(grad), -eta, eta)`, then re-clamps
    /// `x + delta` into `[0, 1]`.
    pub fn ascend(&mut self, grad: &Tensor<f32>) {
        let a = self.alpha;
        let stepped = self
            .delta()
            .zip_map(grad, |d, g| {
                let s = if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 };
                d + a * s
            })
            .expect("same dims");
        self.apply(&stepped);
    }

    fn apply(&mut self, delta: &Tensor<f32>) {
        let clipped = clip_delta(delta, self.eta);
        self.perturbed = self
            .clean
            .zip_map(&clipped, |x, d| (x + d).clamp(0.0, 1.0))
            .expect("same dims");
    }

    pub fn linf(&self) -> f32 {
        self.delta().max_abs()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub losses: Vec<f32>,
    pub backward_passes: usize,
    pub final_linf: f32,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub perturbed: Tensor<f32>,
    pub params: Params<f32>,
    pub trace: AttackTrace,
}

/// What a single backward pass updates.
#[derive(Clone, Copy)]
struct StepTargets {
    params: bool,
    image: bool,
}

struct Run<'a> {
    net: &'a UNet,
    sched: &'a NoiseSchedule,
    prompt: Vec<usize>,
    subset: ParamSubset,
    lr: f64,
    rng: ChaCha8Rng,
    pert: Perturbation,
    params: Params<f32>,
    trace: AttackTrace,
}

impl Run<'_> {
    fn step(&mut self, index: usize, targets: StepTargets) -> Result<()> {
        let x = self.pert.perturbed.clone();
        let draw = NoiseDraw::<f32>::sample(x.dims(), self.sched.len(), &mut self.rng);
        let subset = self.subset;
        let co_train = |name: &str| targets.params && subset.contains(name);

        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, co_train);
        let context = text::context_var(&mut g, &bound, &self.prompt)?;
        let x0 = if targets.image { g.var(x) } else { g.constant(x) };
        let model = Conditioned { net: self.net, bound: &bound, context, sched: self.sched };
        let loss = ldm_loss(&mut g, &model, x0, self.sched, &draw)?;

        let tracked = bound.filter(co_train);
        let mut vars: Vec<_> = tracked.iter().map(|(_, v)| *v).collect();
        if targets.image {
            vars.push(x0);
        }
        let rec = g.evaluate_with_grads(loss, &vars)?;
        self.trace.backward_passes += 1;
        if !rec.value.is_finite() {
            return Err(Error::Attack { step: index, msg: format!("loss is {}", rec.value) });
        }
        self.trace.losses.push(rec.value);

        let grads: Vec<_> = tracked.into_iter().map(|(n, v)| (n, rec.grads[&v].clone())).collect();
        sgd_step(&mut self.params, &grads, self.lr);
        if targets.image {
            self.pert.ascend(&rec.grads[&x0]);
        }
        Ok(())
    }
}

/// Runs the configured attack mode.
pub fn attack(
    net: &UNet,
    vocab: &Vocabulary,
    x: &Tensor<f32>,
    theta0: &Params<f32>,
    cfg: &AttackConfig,
    sched: &NoiseSchedule,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config("clean images must lie in [0, 1]".into()));
    }
    let start = Instant::now();
    let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_de17a);
    let pert = Perturbation::new(
        x.clone(),
        cfg.eta as f32,
        cfg.alpha as f32,
        cfg.random_init.then_some(&mut init_rng),
    );
    let mut run = Run {
        net,
        sched,
        prompt: vocab.encode(&cfg.prompt)?,
        subset: cfg.co_train_subset,
        lr: cfg.model_lr,
        rng,
        pert,
        params: theta0.clone(),
        trace: AttackTrace::default(),
    };

    match cfg.mode {
        AttackMode::Caat | AttackMode::StaticPgd | AttackMode::SubsetVariant => {
            let targets = StepTargets { params: cfg.co_train_subset != ParamSubset::None, image: true };
            for i in 0..cfg.steps {
                run.step(i, targets)?;
            }
        }
        AttackMode::Separated => {
            let mut done = 0;
            while done < cfg.steps {
                let len = cfg.block.min(cfg.steps - done);
                for i in done..done + len {
                    run.step(i, StepTargets { params: true, image: false })?;
                }
                for i in done..done + len {
                    run.step(i, StepTargets { params: false, image: true })?;
                }
                done += len;
            }
        }
    }

    let changed = theta0.changed_names(&run.params);
    if let Some(bad) = changed.iter().find(|n| !cfg.co_train_subset.contains(n)) {
        return Err(Error::Attack { step: cfg.steps, msg: format!("frozen parameter `{bad}` changed") });
    }
    run.trace.final_linf = run.pert.linf();
    run.trace.seconds = start.elapsed().as_secs_f64();
    Ok(AttackOutcome { perturbed: run.pert.perturbed, params: run.params, trace: run.trace })
}

/// Co-trains the cross-attention keys and values while perturbing the input.
pub fn caat_attack(
    net: &UNet,
    vocab: &Vocabulary,
    x: &Tensor<f32>,
    theta0: &Params<f32>,
    cfg: &AttackConfig,
    sched: &NoiseSchedule,
) -> Result<AttackOutcome> {
    expect_mode(cfg, AttackMode::Caat)?;
    attack(net, vocab, x, theta0, cfg, sched)
}

/// Signed-gradient ascent against a frozen model.
pub fn static_pgd_attack(
    net: &UNet,
    vocab: &Vocabulary,
    x: &Tensor<f32>,
    theta0: &Params<f32>,
    cfg: &AttackConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    expect_mode(cfg, AttackMode::StaticPgd)?;
    Ok(attack(net, vocab, x, theta0, cfg, sched)?.perturbed)
}

/// Alternates `block` parameter-only and `block` perturbation-only steps.
pub fn separated_attack(
    net: &UNet,
    vocab: &Vocabulary,
    x: &Tensor<f32>,
    theta0: &Params<f32>,
    cfg: &AttackConfig,
    sched: &NoiseSchedule,
) -> Result<AttackOutcome> {
    expect_mode(cfg, AttackMode::Separated)?;
    attack(net, vocab, x, theta0, cfg, sched)
}

/// The joint loop with an arbitrary co-trained subset.
pub fn subset_variant_attack(
    net: &UNet,
    vocab: &Vocabulary,
    x: &Tensor<f32>,
    theta0: &Params<f32>,
    cfg: &AttackConfig,
    sched: &NoiseSchedule,
) -> Result<AttackOutcome> {
    expect_mode(cfg, AttackMode::SubsetVariant)?;
    attack(net, vocab, x, theta0, cfg, sched)
}

fn expect_mode(cfg: &AttackConfig, mode: AttackMode) -> Result<()> {
    if cfg.mode != mode {
        return Err(Error::Config(format!("expected mode {mode}, got {}", cfg.mode)));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSidecar {
    pub config: AttackConfig,
    pub seed: u64,
    pub final_linf: f32,
    pub backward_passes: usize,
    pub seconds: f64,
    pub files: Vec<PathBuf>,
}

/// Writes the perturbed PNGs and `attack.json` into `dir`.
pub fn write_outputs(outcome: &AttackOutcome, cfg: &AttackConfig, dir: &Path) -> Result<AttackSidecar> {
    let files = dataset::save_png(&outcome.perturbed, dir)?;
    let sidecar = AttackSidecar {
        config: cfg.clone(),
        seed: cfg.seed,
        final_linf: outcome.trace.final_linf,
        backward_passes: outcome.trace.backward_passes,
        seconds: outcome.trace.seconds,
        files,
    };
    let path = dir.join("attack.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::unet::UNetConfig;
    use proptest::prelude::*;

    struct Rig {
        net: UNet,
        vocab: Vocabulary,
        theta: Params<f32>,
        sched: NoiseSchedule,
        x: Tensor<f32>,
    }

    fn rig() -> Rig {
        let net = UNet::new(UNetConfig::tiny()).unwrap();
        let vocab = Vocabulary::default();
        let theta = net.init_params(vocab.len(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| 0.2 + 0.6 * ((i * 31 % 17) as f32 / 16.0));
        Rig { net, vocab, theta, sched, x }
    }

    fn run(r: &Rig, cfg: &AttackConfig) -> AttackOutcome {
        attack(&r.net, &r.vocab, &r.x, &r.theta, cfg, &r.sched).unwrap()
    }

    fn cfg(mode: AttackMode, steps: usize) -> AttackConfig {
        AttackConfig { steps, model_lr: 1e-2, alpha: 0.02, eta: 0.05, ..AttackConfig::for_mode(mode) }
    }

    proptest! {
        #[test]
        fn clipping_is_idempotent_and_bounded(vals in prop::collection::vec(-2.0f32..2.0, 1..64), eta in 0.001f32..1.0) {
            let d = Tensor::new(vec![vals.len()], vals).unwrap();
            let once = clip_delta(&d, eta);
            prop_assert_eq!(clip_delta(&once, eta), once.clone());
            prop_assert!(once.max_abs() <= eta);
        }
    }

    #[test]
    fn ascend_matches_elementwise_rule() {
        let clean = Tensor::new(vec![6], vec![0.5f32, 0.5, 0.5, 0.02, 0.99, 0.5]).unwrap();
        let grad = Tensor::new(vec![6], vec![1.0f32, -3.0, 0.0, -1.0, 2.0, 1.0]).unwrap();
        let (eta, alpha) = (0.05f32, 0.03f32);
        let mut p = Perturbation::new(clean.clone(), eta, alpha, None);
        p.ascend(&grad);
        p.ascend(&grad);
        let mut delta = [0.0f32; 6];
        for _ in 0..2 {
            for i in 0..6 {
                let g = grad.data()[i];
                let s = if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 };
                let c = clean.data()[i];
                let d = (delta[i] + alpha * s).max(-eta).min(eta);
                delta[i] = (c + d).max(0.0).min(1.0) - c;
            }
        }
        for i in 0..6 {
            assert_eq!(p.perturbed.data()[i], clean.data()[i] + delta[i], "element {i}");
        }
    }

    #[test]
    fn zero_step_size_leaves_images_untouched() {
        let r = rig();
        let out = run(&r, &AttackConfig { alpha: 0.0, ..cfg(AttackMode::Caat, 3) });
        assert_eq!(out.perturbed, r.x);
    }

    #[test]
    fn one_large_step_lands_on_the_budget_corners() {
        let r = rig();
        let out = run(&r, &AttackConfig { alpha: 1.0, ..cfg(AttackMode::StaticPgd, 1) });
        for (a, x) in out.perturbed.data().iter().zip(r.x.data()) {
            let d = a - x;
            assert!((d.abs() - 0.05).abs() < 1e-6 || d == 0.0, "delta {d}");
        }
    }

    #[test]
    fn budget_and_range_hold_with_random_start() {
        let r = rig();
        for mode in [AttackMode::Caat, AttackMode::StaticPgd, AttackMode::Separated] {
            let out = run(&r, &AttackConfig { random_init: true, ..cfg(mode, 4) });
            assert!(out.trace.final_linf <= 0.05 + 1e-7);
            assert!(out.perturbed.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn caat_only_changes_keys_and_values() {
        let r = rig();
        let out = run(&r, &cfg(AttackMode::Caat, 3));
        let changed = r.theta.changed_names(&out.params);
        assert!(!changed.is_empty());
        assert!(changed.iter().all(|n| n.ends_with(".attn.to_k") || n.ends_with(".attn.to_v")), "{changed:?}");
    }

    #[test]
    fn static_pgd_changes_no_parameters() {
        let r = rig();
        let out = run(&r, &cfg(AttackMode::StaticPgd, 3));
        assert!(r.theta.changed_names(&out.params).is_empty());
    }

    #[test]
    fn empty_subset_variant_equals_static_pgd() {
        let r = rig();
        let a = run(&r, &cfg(AttackMode::StaticPgd, 3));
        let b = run(&r, &AttackConfig { co_train_subset: ParamSubset::None, ..cfg(AttackMode::SubsetVariant, 3) });
        assert_eq!(a.perturbed, b.perturbed);
        assert_eq!(a.trace.losses, b.trace.losses);
    }

    #[test]
    fn kv_subset_variant_equals_caat() {
        let r = rig();
        let a = run(&r, &cfg(AttackMode::Caat, 3));
        let b = run(&r, &cfg(AttackMode::SubsetVariant, 3));
        assert_eq!(a.perturbed, b.perturbed);
        assert!(a.params.changed_names(&b.params).is_empty());
    }

    #[test]
    fn backward_passes_are_n_joint_and_2n_separated() {
        let r = rig();
        assert_eq!(run(&r, &cfg(AttackMode::Caat, 5)).trace.backward_passes, 5);
        let sep = AttackConfig { block: 2, ..cfg(AttackMode::Separated, 5) };
        assert_eq!(run(&r, &sep).trace.backward_passes, 10);
    }

    #[test]
    fn equal_seeds_reproduce_bitwise() {
        let r = rig();
        let c = cfg(AttackMode::Caat, 3);
        let (a, b) = (run(&r, &c), run(&r, &c));
        assert_eq!(a.perturbed, b.perturbed);
        assert_eq!(a.trace.losses, b.trace.losses);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            AttackConfig { eta: 0.0, ..AttackConfig::default() },
            AttackConfig { co_train_subset: ParamSubset::All, ..AttackConfig::for_mode(AttackMode::Caat) },
            AttackConfig { co_train_subset: ParamSubset::KvCrossAttention, ..AttackConfig::for_mode(AttackMode::StaticPgd) },
            AttackConfig { block: 0, ..AttackConfig::for_mode(AttackMode::Separated) },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        let r = rig();
        let wrong = caat_attack(&r.net, &r.vocab, &r.x, &r.theta, &cfg(AttackMode::StaticPgd, 1), &r.sched);
        assert!(wrong.is_err());
    }

    #[test]
    fn out_of_range_images_are_rejected() {
        let r = rig();
        let x = r.x.map(|v| v + 1.0);
        assert!(attack(&r.net, &r.vocab, &x, &r.theta, &cfg(AttackMode::Caat, 1), &r.sched).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [AttackMode::Caat, AttackMode::StaticPgd, AttackMode::Separated, AttackMode::SubsetVariant] {
            assert_eq!(m.as_str().parse::<AttackMode>().unwrap(), m);
        }
        assert!("pgd".parse::<AttackMode>().is_err());
    }
}
