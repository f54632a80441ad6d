//! `caat`: pretrain, attack, fine-tune, generate, evaluate, ablate,
//! gradcheck and report from a TOML config.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config error.
//! Failures print one JSON error record on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use caat_core::attack::{attack, write_outputs, AttackConfig, AttackMode};
use caat_core::checkpoint;
use caat_core::dataset::{load_folder, save_png};
use caat_core::diffusion::params::ParamSubset;
use caat_core::diffusion::text::Vocabulary;
use caat_core::error::Error;
use caat_core::experiment::manifest::{output_root, RunManifest};
use caat_core::experiment::matrix::{read_rows, METRICS_FILE};
use caat_core::experiment::timing::{load_sidecars, timing_report};
use caat_core::experiment::{run_matrix, summarize, ExperimentConfig, ExperimentPlan, Lab, MatrixOptions, MatrixSpec};
use caat_core::finetune::{finetune, generate, FineTuneMethod};
use caat_core::metrics::{evaluate, Countermeasure};
use caat_core::verify::run_gradient_suite;

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "caat", version, about = "Cross-attention anti-personalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config (see configs/desk.toml).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed the command uses.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `$CAAT_OUT/<command>` or `runs/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pretrained-checkpoint cache; defaults to `<output root>/cache`.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrains the denoiser (or loads it from the cache).
    Pretrain(Common),
    /// Perturbs a subject's images and writes PNGs with an `attack.json` sidecar.
    Attack {
        #[command(flatten)]
        common: Common,
        /// caat, static_pgd, separated or subset_variant; defaults to `attack.mode`.
        #[arg(long)]
        mode: Option<AttackMode>,
        /// Co-trained parameters: kv_cross_attention, all, non_attention, embedding_only or none.
        #[arg(long)]
        subset: Option<ParamSubset>,
        /// L-infinity budget in [0, 1] pixel units; defaults to `attack.eta`.
        #[arg(long)]
        eta: Option<f64>,
        /// Attack iterations; defaults to `attack.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Configured subject to attack.
        #[arg(long, conflicts_with = "images")]
        subject: Option<usize>,
        /// Folder of PNGs to attack instead of a synthetic subject.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Fine-tunes on a folder of images and saves the personalized model.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// full_finetune, kv_only or embedding_only.
        #[arg(long)]
        method: FineTuneMethod,
        /// Folder of PNGs to fine-tune on.
        #[arg(long)]
        images: PathBuf,
    },
    /// Samples images from a saved model.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output directory of `caat finetune`, or omit for the pretrained model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Defaults to the subject prompt of the fine-tuned method.
        #[arg(long)]
        prompt: Option<String>,
        /// Number of images; defaults to `generated`.
        #[arg(long, short)]
        n: Option<usize>,
    },
    /// FR, FS and FID of generated images against a configured subject.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Folder of generated PNGs.
        #[arg(long)]
        generated: PathBuf,
        /// Configured subject to compare against; defaults to the first.
        #[arg(long)]
        subject: Option<usize>,
    },
    /// Runs the attack x fine-tune matrix, resuming from an existing CSV.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `axis=v1,v2,...` with axis in eta, perturbed, subset, mode, method,
        /// seed, countermeasure; repeatable.
        #[arg(long)]
        grid: Vec<String>,
        /// Cells run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Drops the clean baseline rows.
        #[arg(long)]
        no_clean: bool,
    },
    /// Finite-difference checks of every registered gradient.
    Gradcheck(Common),
    /// Timing and metric summaries of a previous output directory.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory holding attack sidecars and optionally `metrics.csv`.
        #[arg(long)]
        dir: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain(_) => "pretrain",
            Command::Attack { .. } => "attack",
            Command::Finetune { .. } => "finetune",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::Gradcheck(_) => "gradcheck",
            Command::Report { .. } => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Pretrain(c) | Command::Gradcheck(c) => c,
            Command::Attack { common, .. }
            | Command::Finetune { common, .. }
            | Command::Generate { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Ablate { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

/// Failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    kind: String,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.kind() == "config" { EXIT_CONFIG } else { EXIT_RUNTIME };
        Self { code, kind: e.kind().into(), message: e.to_string() }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, kind: "usage".into(), message: message.into() }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return report_failure("cli", usage(e.to_string().trim().to_string())),
    };
    let name = cli.command.name();
    match run(cli.command) {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(f) => report_failure(name, f),
    }
}

fn report_failure(command: &str, f: Failure) -> ExitCode {
    let record = json!({"error": {"command": command, "kind": f.kind, "message": f.message, "exit_code": f.code}});
    eprintln!("{record}");
    ExitCode::from(f.code)
}

/// Everything a command needs besides its own flags.
struct Context {
    command: &'static str,
    seed: Option<u64>,
    out: PathBuf,
    cache: PathBuf,
    config: Option<ExperimentConfig>,
    started: Instant,
}

impl Context {
    fn new(command: &'static str, common: &Common, needs_config: bool) -> Outcome<Self> {
        let root = output_root(None, Path::new("runs"));
        let out = common.out.clone().unwrap_or_else(|| root.join(command));
        let cache = common.cache.clone().unwrap_or_else(|| root.join("cache"));
        let config = match (&common.config, needs_config) {
            (Some(p), _) => Some(ExperimentConfig::load(p)?),
            (None, true) => return Err(usage(format!("`{command}` requires --config"))),
            (None, false) => None,
        };
        Ok(Self { command, seed: common.seed, out, cache, config, started: Instant::now() })
    }

    fn experiment(&self) -> &ExperimentConfig {
        self.config.as_ref().expect("config required by this command")
    }

    fn lab(&self) -> Outcome<Lab> {
        let mut cfg = self.experiment().lab.clone();
        if let Some(s) = self.seed {
            cfg.pretrain.seed = s;
        }
        Ok(Lab::prepare(cfg, Some(&self.cache))?)
    }

    fn finish(&self, snapshot: &impl serde::Serialize, artifacts: Vec<PathBuf>, results: serde_json::Value) -> Outcome<PathBuf> {
        let mut m = RunManifest::new(self.command, self.seed.unwrap_or(0), snapshot)?;
        m.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        m.artifacts = artifacts;
        m.results = results;
        Ok(m.write(&self.out)?)
    }
}

fn run(command: Command) -> Outcome<PathBuf> {
    let name = command.name();
    let needs_config = !matches!(command, Command::Gradcheck(_) | Command::Report { .. });
    let ctx = Context::new(name, command.common(), needs_config)?;
    match command {
        Command::Pretrain(_) => pretrain_cmd(&ctx),
        Command::Attack { mode, subset, eta, steps, subject, images, .. } => attack_cmd(&ctx, mode, subset, eta, steps, subject, images),
        Command::Finetune { method, images, .. } => finetune_cmd(&ctx, method, &images),
        Command::Generate { model, prompt, n, .. } => generate_cmd(&ctx, model.as_deref(), prompt, n),
        Command::Evaluate { generated, subject, .. } => evaluate_cmd(&ctx, &generated, subject),
        Command::Ablate { grid, jobs, no_clean, .. } => ablate_cmd(&ctx, &grid, jobs, no_clean),
        Command::Gradcheck(_) => gradcheck_cmd(&ctx),
        Command::Report { dir, .. } => report_cmd(&ctx, &dir),
    }
}

fn pretrain_cmd(ctx: &Context) -> Outcome<PathBuf> {
    let lab = ctx.lab()?;
    let results = json!({
        "checkpoint": lab.checkpoint,
        "extractor_accuracy": lab.extractor.heldout_accuracy,
        "loss_head_tail": lab.pretrain_report.as_ref().map(|r| r.head_tail_means(100)),
        "loaded_from_cache": lab.pretrain_report.is_none(),
    });
    ctx.finish(&lab.config, lab.checkpoint.iter().cloned().collect(), results)
}

fn attack_cmd(
    ctx: &Context,
    mode: Option<AttackMode>,
    subset: Option<ParamSubset>,
    eta: Option<f64>,
    steps: Option<usize>,
    subject: Option<usize>,
    images: Option<PathBuf>,
) -> Outcome<PathBuf> {
    let lab = ctx.lab()?;
    let base = &lab.config.attack;
    let mode = mode.unwrap_or(base.mode);
    let mut cfg = AttackConfig { mode, co_train_subset: AttackConfig::for_mode(mode).co_train_subset, ..base.clone() };
    if mode == base.mode {
        cfg.co_train_subset = base.co_train_subset;
    }
    if let Some(s) = subset {
        cfg.co_train_subset = s;
    }
    cfg.eta = eta.unwrap_or(cfg.eta);
    cfg.steps = steps.unwrap_or(cfg.steps);
    cfg.seed = ctx.seed.unwrap_or(cfg.seed);
    let x = match images {
        Some(dir) => load_folder(&dir, lab.config.model.image_size)?.0,
        None => lab.subject(subject.unwrap_or(lab.config.subjects.ids[0]))?.clean,
    };
    let out = attack(&lab.net, &lab.vocab, &x, &lab.theta, &cfg, &lab.sched)?;
    let sidecar = write_outputs(&out, &cfg, &ctx.out)?;
    let mut artifacts = sidecar.files.clone();
    artifacts.push(ctx.out.join("attack.json"));
    let results = json!({"final_linf": sidecar.final_linf, "backward_passes": sidecar.backward_passes, "seconds": sidecar.seconds});
    ctx.finish(&(&lab.config, &cfg), artifacts, results)
}

const MODEL_FILE: &str = "model.ckpt";
const VOCAB_FILE: &str = "vocab.json";

fn finetune_cmd(ctx: &Context, method: FineTuneMethod, images: &Path) -> Outcome<PathBuf> {
    let lab = ctx.lab()?;
    let (x, ingest) = load_folder(images, lab.config.model.image_size)?;
    let cfg = lab.config.finetune.config(method, ctx.seed.unwrap_or(0));
    let model = finetune(&lab.net, &lab.vocab, &x, &lab.theta, &cfg, &lab.sched)?;
    std::fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let ckpt = ctx.out.join(MODEL_FILE);
    checkpoint::save(&model.params, &ckpt)?;
    let vocab = ctx.out.join(VOCAB_FILE);
    let extras = json!({"extra_tokens": model.vocab.extra_tokens(), "prompt": cfg.prompt});
    std::fs::write(&vocab, serde_json::to_vec_pretty(&extras)?).map_err(|e| Error::io(&vocab, e))?;
    let results = json!({"loss_head_tail": model.report.head_tail_means(50), "inputs": ingest});
    ctx.finish(&(&lab.config, &cfg), vec![ckpt, vocab], results)
}

fn generate_cmd(ctx: &Context, model: Option<&Path>, prompt: Option<String>, n: Option<usize>) -> Outcome<PathBuf> {
    let lab = ctx.lab()?;
    let (params, vocab, default_prompt) = match model {
        Some(dir) => {
            let params = checkpoint::load(&dir.join(MODEL_FILE))?;
            let path = dir.join(VOCAB_FILE);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let meta: serde_json::Value = serde_json::from_str(&text)?;
            let mut vocab = Vocabulary::default();
            for tok in meta["extra_tokens"].as_array().into_iter().flatten() {
                vocab.extend(tok.as_str().unwrap_or_default())?;
            }
            let p = meta["prompt"].as_str().unwrap_or("a photo of a person").to_string();
            (params, vocab, p)
        }
        None => (lab.theta.clone(), lab.vocab.clone(), "a photo of a person".to_string()),
    };
    let prompt = prompt.unwrap_or(default_prompt);
    let n = n.unwrap_or(lab.config.generated);
    let seed = ctx.seed.unwrap_or(0);
    let imgs = generate(&lab.net, &params, &vocab, &prompt, n, seed, &lab.sched, lab.config.sampler)?;
    let files = save_png(&imgs, &ctx.out)?;
    ctx.finish(&(&lab.config, &prompt, n), files, json!({"prompt": prompt, "n": n}))
}

fn evaluate_cmd(ctx: &Context, generated: &Path, subject: Option<usize>) -> Outcome<PathBuf> {
    let lab = ctx.lab()?;
    let (g, ingest) = load_folder(generated, lab.config.model.image_size)?;
    let s = lab.subject(subject.unwrap_or(lab.config.subjects.ids[0]))?;
    let (fr, fs, fid) = evaluate(&g, &s.clean, &s.references, &lab.extractor)?;
    let results = json!({"FR": fr, "FS": fs, "FID": fid, "subject": s.id, "inputs": ingest});
    ctx.finish(&lab.config, Vec::new(), results)
}

/// Applies one `axis=v1,v2,...` override to `spec`.
fn apply_grid(spec: &mut MatrixSpec, entry: &str) -> Outcome<()> {
    let (axis, values) = entry.split_once('=').ok_or_else(|| usage(format!("grid entry `{entry}` is not axis=values")))?;
    let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(usage(format!("grid axis `{axis}` has no values")));
    }
    fn parse<T: std::str::FromStr>(axis: &str, items: &[&str]) -> Outcome<Vec<T>> {
        items
            .iter()
            .map(|s| s.parse().map_err(|_| Failure::from(Error::Config(format!("bad {axis} value `{s}`")))))
            .collect()
    }
    match axis {
        "eta" => spec.etas = parse(axis, &items)?,
        "perturbed" => spec.perturbed = parse(axis, &items)?,
        "seed" => spec.seeds = parse(axis, &items)?,
        "subset" => spec.subsets = items.iter().map(|s| s.parse()).collect::<Result<_, Error>>()?,
        "mode" => spec.modes = items.iter().map(|s| s.parse()).collect::<Result<_, Error>>()?,
        "method" => spec.methods = items.iter().map(|s| s.parse()).collect::<Result<_, Error>>()?,
        "countermeasure" => {
            for s in &items {
                Countermeasure::by_name(s)?;
            }
            spec.countermeasures = items.iter().map(|s| s.to_string()).collect();
        }
        _ => return Err(usage(format!("unknown grid axis `{axis}`"))),
    }
    Ok(())
}

fn ablate_cmd(ctx: &Context, grid: &[String], jobs: usize, no_clean: bool) -> Outcome<PathBuf> {
    let mut spec = ctx.experiment().matrix.clone();
    for g in grid {
        apply_grid(&mut spec, g)?;
    }
    if let Some(s) = ctx.seed {
        if grid.iter().any(|g| g.starts_with("seed=")) {
            return Err(usage("--seed conflicts with --grid seed=..."));
        }
        spec.seeds = vec![s];
    }
    if no_clean {
        spec.clean = false;
    }
    let lab = ctx.lab()?;
    let plan = ExperimentPlan::from_spec("ablate", &spec, &lab.config, ctx.out.clone())?;
    let out = run_matrix(&lab, &plan, MatrixOptions { jobs, save_images: true })?;
    let rows: Vec<_> = out.rows.iter().map(|r| r.1.clone()).collect();
    let summary = summarize(&rows);
    for s in &summary {
        println!(
            "{:<24} {:<20} eta {:<5} n {} {:<15} FR {:.3} FS {:.3} FID {:.3} ({} runs)",
            s.attack_mode, s.subset, s.eta, s.n_perturbed, s.method, s.fr, s.fs, s.fid, s.runs
        );
    }
    let results = json!({
        "computed": out.computed,
        "skipped": out.skipped,
        "failures": out.failures,
        "summary": summary,
    });
    let artifacts = vec![out.csv.clone()];
    let path = ctx.finish(&(&lab.config, &plan), artifacts, results)?;
    if !out.failures.is_empty() {
        return Err(Failure {
            code: EXIT_RUNTIME,
            kind: "cells".into(),
            message: format!("{} of {} cells failed; see errors.jsonl", out.failures.len(), out.computed),
        });
    }
    Ok(path)
}

fn gradcheck_cmd(ctx: &Context) -> Outcome<PathBuf> {
    let report = run_gradient_suite().map_err(Error::from)?;
    for r in &report.results {
        println!("{:<28} {:.3e} {}", r.name, r.max_rel_error, if r.passed { "ok" } else { "FAILED" });
    }
    let path = ctx.finish(&json!({"tolerance": caat_core::verify::TOLERANCE}), Vec::new(), serde_json::to_value(&report)?)?;
    if !report.all_passed() {
        let bad: Vec<_> = report.results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        return Err(Failure { code: EXIT_RUNTIME, kind: "gradcheck".into(), message: format!("failing gradients: {bad:?}") });
    }
    Ok(path)
}

fn report_cmd(ctx: &Context, dir: &Path) -> Outcome<PathBuf> {
    let sidecars = load_sidecars(dir)?;
    let timing = timing_report(&sidecars.iter().map(|(_, s)| s.clone()).collect::<Vec<_>>())?;
    for r in &timing.rows {
        println!("{:<15} N={:<5} runs {:<3} mean {:.2}s backward {:.0}", r.mode.as_str(), r.steps, r.runs, r.mean_seconds, r.mean_backward);
    }
    for (n, ratio) in &timing.caat_over_separated {
        println!("caat / separated wall-clock at N={n}: {ratio:.2}");
    }
    let csv = dir.join(METRICS_FILE);
    let summary = if csv.exists() { Some(summarize(&read_rows(&csv)?)) } else { None };
    let artifacts = sidecars.into_iter().map(|(p, _)| p).collect();
    ctx.finish(&json!({"dir": dir}), artifacts, json!({"timing": timing, "summary": summary}))
}
