//! Acceptance run: every criterion on the desk profile, one PASS/FAIL line
//! each. Failed criteria exit non-zero only with `CAAT_ACCEPTANCE_STRICT=1`.
//!
//! Outputs go to `$CAAT_OUT` or `<workspace>/target/acceptance`; the
//! pretrained checkpoint is cached there by config digest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use caat_core::attack::{attack, AttackConfig, AttackMode};
use caat_core::diffusion::loss::NoiseDraw;
use caat_core::diffusion::params::ParamSubset;
use caat_core::diffusion::schedule::NoiseSchedule;
use caat_core::experiment::manifest::output_root;
use caat_core::experiment::matrix::{median, MetricRow};
use caat_core::experiment::timing::timing_report;
use caat_core::experiment::*;
use caat_core::finetune::FineTuneMethod;
use caat_core::metrics::{fid_from_features, fr_proxy, fs_proxy, Countermeasure};
use caat_core::tensor::Tensor;
use caat_core::verify::{run_gradient_suite, TOLERANCE};

struct Verdicts {
    lines: Vec<(usize, bool, String)>,
    measured: BTreeMap<String, serde_json::Value>,
}

impl Verdicts {
    fn record(&mut self, n: usize, pass: bool, what: String) {
        println!("{} criterion {n:>2}: {what}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((n, pass, what));
    }
}

fn main() {
    let start = Instant::now();
    let root = output_root(None, &Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"));
    let matrix_dir = root.join("matrix");
    if matrix_dir.exists() {
        std::fs::remove_dir_all(&matrix_dir).expect("clear previous matrix");
    }
    let mut v = Verdicts { lines: Vec::new(), measured: BTreeMap::new() };

    gradient_suite(&mut v);
    forward_statistics(&mut v);
    metric_oracles(&mut v);

    let prep = Instant::now();
    let lab = Lab::prepare(LabConfig::desk(), Some(&root.join("cache"))).expect("lab");
    let prep_s = prep.elapsed().as_secs_f64();
    println!("lab ready in {prep_s:.0}s (extractor accuracy {:.3})", lab.extractor.heldout_accuracy);
    v.measured.insert("lab_seconds".into(), json!(prep_s));

    let all = Matrices::run(&lab, &matrix_dir, &mut v);
    freezing_and_budget(&lab, &all, &mut v);
    efficacy(&all, prep_s, &mut v);
    budget_monotonicity(&all, &mut v);
    count_monotonicity(&all, &mut v);
    subset_sensitivity(&all, &mut v);
    backward_accounting(&lab, &matrix_dir, &mut v);
    robustness(&all, &mut v);
    determinism(&lab, &all, &mut v);

    v.lines.sort_by_key(|l| l.0);
    let failed: Vec<usize> = v.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    let summary = json!({
        "criteria": v.lines.iter().map(|(n, p, w)| json!({"criterion": n, "pass": p, "detail": w})).collect::<Vec<_>>(),
        "measured": v.measured,
        "seconds": start.elapsed().as_secs_f64(),
    });
    std::fs::write(root.join("acceptance.json"), serde_json::to_vec_pretty(&summary).unwrap()).unwrap();
    println!("acceptance: {}/{} criteria pass in {:.0}s", v.lines.len() - failed.len(), v.lines.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        // Reported, not fatal, so the rest of the workspace suite still runs.
        if std::env::var_os("CAAT_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}

fn gradient_suite(v: &mut Verdicts) {
    let r = run_gradient_suite().expect("gradient suite runs");
    let bad: Vec<_> = r.results.iter().filter(|x| !x.passed).map(|x| x.name).collect();
    v.measured.insert("gradient_worst".into(), json!(r.worst()));
    v.record(
        1,
        bad.is_empty() && r.seconds < 60.0,
        format!("{} gradients, worst rel error {:.2e} (< {TOLERANCE:.0e}), {:.1}s (< 60s), failing {bad:?}", r.results.len(), r.worst(), r.seconds),
    );
}

/// Per-element mean and variance of `x_t` over 10^4 noise draws against
/// `sqrt(ab) x0` and `1 - ab`, each within three standard errors.
fn forward_statistics(v: &mut Verdicts) {
    let sched = NoiseSchedule::linear(100, 5e-4, 0.1).unwrap();
    let n = 10_000;
    let x0 = Tensor::new(vec![1, 1, 2, 2], vec![-0.8f64, -0.1, 0.4, 0.9]).unwrap();
    let mut worst = 0.0f64;
    for t in [0, sched.len() / 2, sched.len() - 1] {
        let ab = sched.alpha_bar[t];
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let draw = NoiseDraw::<f64>::sample(x0.dims(), sched.len(), &mut rng);
            let xt = sched.q_sample(&x0, t, &draw.eps).unwrap();
            for (i, &x) in xt.data().iter().enumerate() {
                sum[i] += x;
                sq[i] += x * x;
            }
        }
        for i in 0..4 {
            let mean = sum[i] / n as f64;
            let var = (sq[i] - n as f64 * mean * mean) / (n - 1) as f64;
            let (want_mean, want_var) = (ab.sqrt() * x0.data()[i], 1.0 - ab);
            let se_mean = (want_var / n as f64).sqrt();
            let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
            worst = worst.max((mean - want_mean).abs() / se_mean).max((var - want_var).abs() / se_var);
        }
    }
    v.record(2, worst <= 3.0, format!("worst deviation {worst:.2} standard errors over t in {{0, T/2, T-1}} (<= 3)"));
}

fn metric_oracles(v: &mut Verdicts) {
    let (d, n) = (32, 4000);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = Normal::new(0.0, 0.5).unwrap();
    let shift: Vec<f64> = (0..d).map(|i| if i % 2 == 0 { 0.5 } else { -0.25 }).collect();
    let a = Tensor::from_fn(&[n, d], |_| z.sample(&mut rng) as f32);
    let b = Tensor::from_fn(&[n, d], |i| (shift[i % d] + z.sample(&mut rng)) as f32);
    let want: f64 = shift.iter().map(|s| s * s).sum();
    let got = fid_from_features(&a, &b).unwrap();
    let rel = (got - want).abs() / want;

    let corpus = caat_core::dataset::build_corpus(0, 4, 24, 16);
    let ext = caat_core::metrics::FeatureExtractor::train(&corpus.images, &corpus.labels, &Default::default()).unwrap();
    let one = corpus.class_images(0).unwrap().slice_outer(0, 1).unwrap();
    let imgs = caat_core::dataset::concat_batches(&[one.clone(), one.clone(), one.clone(), one]);
    let fs = fs_proxy(&imgs, &imgs, &ext).unwrap();
    let fr = fr_proxy(&corpus.images, &ext, 1.0 + 1e-9).unwrap();
    v.record(
        11,
        rel <= 0.02 && (fs - 1.0).abs() <= 1e-6 && fr == 0.0,
        format!("mean-shift FID {got:.4} vs {want:.4} ({:.2}% <= 2%), FS(A,A) = {fs:.7}, FR at tau>1 = {fr}", rel * 100.0),
    );
}

/// Every matrix of the run, sharing one output directory so overlapping
/// cells are computed once.
struct Matrices {
    table: MatrixOutcome,
    budgets: MatrixOutcome,
    counts: MatrixOutcome,
    subsets: MatrixOutcome,
    defenses: MatrixOutcome,
    table_seconds: f64,
}

impl Matrices {
    fn run(lab: &Lab, dir: &Path, v: &mut Verdicts) -> Self {
        let full = vec![FineTuneMethod::FullFinetune];
        let run = |name: &str, spec: MatrixSpec| {
            let plan = ExperimentPlan::from_spec(name, &spec, &lab.config, dir.to_path_buf()).unwrap();
            let t = Instant::now();
            let out = run_matrix(lab, &plan, MatrixOptions::default()).unwrap();
            println!("matrix `{name}`: {} computed, {} reused, {} failed in {:.0}s", out.computed, out.skipped, out.failures.len(), t.elapsed().as_secs_f64());
            for f in &out.failures {
                println!("  failure {}: {}", f.run_id, f.message);
            }
            (out, t.elapsed().as_secs_f64())
        };
        let (table, table_seconds) = run("table", MatrixSpec::default());
        let (budgets, _) = run("budgets", MatrixSpec { etas: vec![0.05, 0.10, 0.15], clean: false, ..MatrixSpec::default() });
        let (counts, _) = run("counts", MatrixSpec { perturbed: vec![0, 1, 2, 3, 4], clean: false, ..MatrixSpec::default() });
        let (subsets, _) = run("subsets", MatrixSpec { modes: vec![AttackMode::Caat, AttackMode::StaticPgd], clean: false, methods: full.clone(), ..MatrixSpec::default() });
        let cms = Countermeasure::NAMES.iter().map(|s| s.to_string()).collect();
        let (defenses, _) = run("defenses", MatrixSpec { countermeasures: cms, methods: full, ..MatrixSpec::default() });
        for s in summarize(&table.rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>()) {
            println!("  {:>6} {:>15}: FR {:.3} FS {:.3} FID {:.3}", s.attack_mode, s.method, s.fr, s.fs, s.fid);
        }
        v.measured.insert("table_seconds".into(), json!(table_seconds));
        Self { table, budgets, counts, subsets, defenses, table_seconds }
    }
}

fn medians(out: &MatrixOutcome, pred: impl Fn(&Cell) -> bool) -> Option<(f64, f64)> {
    let rows: Vec<&MetricRow> = out.row(pred).collect();
    if rows.is_empty() {
        return None;
    }
    let fid = median(&rows.iter().map(|r| r.fid).collect::<Vec<_>>());
    let fs = median(&rows.iter().map(|r| r.fs).collect::<Vec<_>>());
    Some((fid, fs))
}

fn is_caat(c: &Cell) -> bool {
    c.attack.mode == Some(AttackMode::Caat) && c.attack.countermeasure.is_none()
}

/// Re-runs the attacks of the default matrix and checks budget, range and
/// byte-identity of every parameter outside the co-trained subset.
fn freezing_and_budget(lab: &Lab, all: &Matrices, v: &mut Verdicts) {
    let mut checked = 0;
    let mut bad = Vec::new();
    let attacked: Vec<_> = all.table.rows.iter().map(|r| r.0).filter(|c| c.attack.mode.is_some()).collect();
    let mut seen = Vec::new();
    for c in attacked {
        let key = c.attack_key();
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        let subject = lab.subject(c.subject).unwrap();
        let cfg = c.attack.attack_config(&lab.config.attack, c.seed).unwrap();
        let out = attack(&lab.net, &lab.vocab, &subject.clean, &lab.theta, &cfg, &lab.sched).unwrap();
        let linf = subject.clean.zip_map(&out.perturbed, |a, b| (a - b).abs()).unwrap().max_abs() as f64;
        let in_range = out.perturbed.data().iter().all(|x| (0.0..=1.0).contains(x));
        let frozen_ok = lab.theta.iter().filter(|(n, _)| !cfg.co_train_subset.contains(n)).all(|(n, t)| {
            let u = out.params.get(n).unwrap();
            t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
        let moved = lab.theta.changed_names(&out.params).iter().all(|n| cfg.co_train_subset.contains(n));
        checked += 1;
        if !(linf <= cfg.eta + 1e-7 && in_range && frozen_ok && moved) {
            bad.push((c.seed, linf, in_range, frozen_ok));
        }
    }
    let failures = [&all.table, &all.budgets, &all.counts, &all.subsets, &all.defenses].iter().map(|m| m.failures.len()).sum::<usize>();
    v.record(3, bad.is_empty() && checked > 0 && failures == 0, format!("{checked} default-matrix attacks re-checked, violations {bad:?}, matrix attack failures {failures}"));
}

fn efficacy(all: &Matrices, prep_s: f64, v: &mut Verdicts) {
    let mut ok = true;
    let mut parts = Vec::new();
    for m in FineTuneMethod::ALL {
        let clean = medians(&all.table, |c| c.method == m && c.attack.mode.is_none()).unwrap();
        let caat = medians(&all.table, |c| c.method == m && is_caat(c)).unwrap();
        let pass = caat.0 >= 1.2 * clean.0 && caat.1 < clean.1;
        ok &= pass;
        parts.push(format!("{m}: FID {:.2}->{:.2} (x{:.2}) FS {:.3}->{:.3}{}", clean.0, caat.0, caat.0 / clean.0, clean.1, caat.1, if pass { "" } else { " [miss]" }));
        v.measured.insert(format!("table.{m}"), json!({"clean_fid": clean.0, "caat_fid": caat.0, "clean_fs": clean.1, "caat_fs": caat.1}));
        if m == FineTuneMethod::FullFinetune {
            println!("clean full fine-tune FS {:.3} ({} 0.5 sanity bound)", clean.1, if clean.1 > 0.5 { "above" } else { "below" });
        }
    }
    let total = prep_s + all.table_seconds;
    ok &= total < 7200.0;
    v.record(4, ok, format!("{}; lab + matrix {total:.0}s (< 7200s)", parts.join("; ")));
}

fn budget_monotonicity(all: &Matrices, v: &mut Verdicts) {
    let mut good = 0;
    let mut parts = Vec::new();
    for m in FineTuneMethod::ALL {
        let f: Vec<f64> = [0.05, 0.10, 0.15]
            .iter()
            .map(|&e| medians(&all.budgets, |c| c.method == m && is_caat(c) && (c.attack.eta - e).abs() < 1e-12).unwrap().0)
            .collect();
        let mono = f.windows(2).all(|w| w[1] >= w[0]);
        good += mono as usize;
        parts.push(format!("{m}: {:.2} / {:.2} / {:.2}", f[0], f[1], f[2]));
    }
    v.record(5, good >= 2, format!("median FID over eta 0.05/0.10/0.15 non-decreasing for {good}/3 methods ({})", parts.join("; ")));
}

/// Spearman correlation with average ranks for ties.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    cov / (sx * sy)
}

fn count_monotonicity(all: &Matrices, v: &mut Verdicts) {
    let mut ok = true;
    let mut parts = Vec::new();
    for m in FineTuneMethod::ALL {
        let f: Vec<f64> = (0..=4).map(|k| medians(&all.counts, |c| c.method == m && is_caat(c) && c.attack.n_perturbed == k).unwrap().0).collect();
        let rho = spearman(&[0.0, 1.0, 2.0, 3.0, 4.0], &f);
        let pass = f[4] > f[0] && rho > 0.0;
        ok &= pass;
        parts.push(format!("{m}: {} rho {rho:.2}", f.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/")));
    }
    v.record(6, ok, format!("median FID over 0..4 perturbed images: {}", parts.join("; ")));
}

fn subset_sensitivity(all: &Matrices, v: &mut Verdicts) {
    let kv = medians(&all.subsets, |c| c.attack.subset == ParamSubset::KvCrossAttention).unwrap().0;
    let none = medians(&all.subsets, |c| c.attack.subset == ParamSubset::None).unwrap().0;
    v.record(7, kv >= none, format!("full fine-tune median FID: kv co-trained {kv:.3} vs static {none:.3}"));
}

fn backward_accounting(lab: &Lab, dir: &Path, v: &mut Verdicts) {
    let subject = lab.subject(lab.config.subjects.ids[0]).unwrap();
    let run = |mode: AttackMode, steps: usize| {
        let cfg = AttackConfig { mode, steps, ..lab.config.attack.clone() };
        let cfg = AttackConfig { co_train_subset: AttackConfig::for_mode(mode).co_train_subset, ..cfg };
        let out = attack(&lab.net, &lab.vocab, &subject.clean, &lab.theta, &cfg, &lab.sched).unwrap();
        let sub: PathBuf = dir.join("timing").join(format!("{mode}-{steps}"));
        caat_core::attack::write_outputs(&out, &cfg, &sub).unwrap();
        out.trace
    };
    let n = lab.config.attack.steps;
    let caat = run(AttackMode::Caat, n);
    let sep = run(AttackMode::Separated, n);
    let short = run(AttackMode::Caat, 100);
    let sidecars: Vec<_> = caat_core::experiment::timing::load_sidecars(dir).unwrap().into_iter().map(|(_, s)| s).collect();
    let report = timing_report(&sidecars);
    let ratio = caat.seconds / sep.seconds;
    let counts_ok = caat.backward_passes == n && sep.backward_passes == 2 * n && report.is_ok();
    v.measured.insert("caat_seconds".into(), json!(caat.seconds));
    v.measured.insert("separated_seconds".into(), json!(sep.seconds));
    println!(
        "caat N=250 {:.1}s (< 300s), N=100 {:.1}s (monotone: {})",
        caat.seconds,
        short.seconds,
        short.seconds < caat.seconds
    );
    v.record(
        8,
        counts_ok && ratio <= 0.6,
        format!(
            "backward passes caat {} (N={n}), separated {} (2N={}), {} manifests consistent: {}; wall-clock {:.1}s vs {:.1}s, ratio {ratio:.2} (<= 0.6)",
            caat.backward_passes,
            sep.backward_passes,
            2 * n,
            sidecars.len(),
            report.is_ok(),
            caat.seconds,
            sep.seconds
        ),
    );
}

fn robustness(all: &Matrices, v: &mut Verdicts) {
    let clean = medians(&all.defenses, |c| c.attack.mode.is_none()).unwrap().0;
    let mut survived = 0;
    let mut parts = Vec::new();
    for cm in Countermeasure::defaults() {
        let f = medians(&all.defenses, |c| c.attack.countermeasure.map(|x| x.name()) == Some(cm.name())).unwrap().0;
        survived += (f > clean) as usize;
        parts.push(format!("{} {f:.2}", cm.name()));
    }
    v.record(9, survived >= 3, format!("{survived}/4 countermeasures keep full fine-tune FID above clean {clean:.2} ({})", parts.join(", ")));
}

fn determinism(lab: &Lab, all: &Matrices, v: &mut Verdicts) {
    let (cell, row) = all.table.rows.iter().find(|(c, _)| c.method == FineTuneMethod::KvOnly && is_caat(c)).expect("kv cell");
    let again = run_single(lab, cell).unwrap();
    let same = row.same_result(&again) && row.fid.to_bits() == again.fid.to_bits();
    v.record(10, same, format!("cell {} re-run: FID {} vs {}, FS {} vs {}", row.run_id, row.fid, again.fid, row.fs, again.fs));
}
