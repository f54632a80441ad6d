//! Runs every cell of a plan: attack (or clean pass-through), fine-tune,
//! generate, evaluate. Rows go to a CSV that is rewritten atomically after
//! each cell, so an interrupted run never leaves a partial row and a rerun
//! skips every run id already present.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::attack::{attack, write_outputs, AttackOutcome};
use crate::dataset::{concat_batches, save_grid};
use crate::error::{Error, Result};
use crate::experiment::lab::{digest, Lab, Subject};
use crate::experiment::plan::{Cell, ExperimentPlan};
use crate::finetune::{finetune, generate_subject};
use crate::metrics::{apply_countermeasure, evaluate};
use crate::tensor::Tensor;

pub const CSV_COLUMNS: [&str; 11] =
    ["run_id", "attack_mode", "subset", "eta", "n_perturbed", "method", "FR", "FS", "FID", "seconds", "backward_count"];
pub const METRICS_FILE: &str = "metrics.csv";
pub const ERRORS_FILE: &str = "errors.jsonl";
pub const ATTACKS_DIR: &str = "attacks";

/// Generation seeds are kept apart from fine-tuning seeds.
const GENERATION_SALT: u64 = 0x9e37_79b9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub attack_mode: String,
    pub subset: String,
    pub eta: f64,
    pub n_perturbed: usize,
    pub method: String,
    #[serde(rename = "FR")]
    pub fr: f64,
    #[serde(rename = "FS")]
    pub fs: f64,
    #[serde(rename = "FID")]
    pub fid: f64,
    pub seconds: f64,
    pub backward_count: usize,
}

impl MetricRow {
    /// Equality of every column except wall-clock.
    pub fn same_result(&self, other: &Self) -> bool {
        Self { seconds: 0.0, ..self.clone() } == Self { seconds: 0.0, ..other.clone() }
    }
}

/// Reads rows from `path`; a missing file is an empty table.
pub fn read_rows(path: &Path) -> Result<Vec<MetricRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect();
    if header != CSV_COLUMNS {
        return Err(Error::Report(format!("{} has columns {header:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

/// Replaces `path` with `rows` via a temporary file and a rename.
pub fn write_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp).map_err(|e| csv_error(&tmp, e))?;
        if rows.is_empty() {
            w.write_record(CSV_COLUMNS).map_err(|e| csv_error(&tmp, e))?;
        }
        for row in rows {
            w.serialize(row).map_err(|e| csv_error(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Report(format!("{}: {e}", path.display()))
}

/// Serializes appends from all workers.
struct Appender {
    path: PathBuf,
    rows: Mutex<Vec<MetricRow>>,
}

impl Appender {
    fn push(&self, row: MetricRow) -> Result<()> {
        let mut rows = self.rows.lock().expect("appender poisoned");
        rows.push(row);
        write_rows(&self.path, &rows)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellFailure {
    pub run_id: String,
    pub cell: Cell,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy)]
pub struct MatrixOptions {
    pub jobs: usize,
    /// Writes a grid of each cell's generated images.
    pub save_images: bool,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        Self { jobs: 1, save_images: true }
    }
}

#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    /// Plan cells with a row, in plan order.
    pub rows: Vec<(Cell, MetricRow)>,
    pub computed: usize,
    pub skipped: usize,
    pub failures: Vec<CellFailure>,
    pub csv: PathBuf,
}

impl MatrixOutcome {
    pub fn row(&self, pred: impl Fn(&Cell) -> bool) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(move |(c, _)| pred(c)).map(|(_, r)| r)
    }
}

/// Attack run shared by the cells of one group.
struct SharedAttack {
    outcome: AttackOutcome,
}

/// Runs the attack of `cells[0]` if any cell needs perturbed images, then
/// every cell. Returns one result per cell.
fn run_group(lab: &Lab, cells: &[Cell], out: Option<&Path>, save_images: bool) -> Vec<Result<MetricRow>> {
    let fingerprint = lab.fingerprint();
    let subject = match lab.subject(cells[0].subject) {
        Ok(s) => s,
        Err(e) => return cells.iter().map(|_| Err(Error::Config(e.to_string()))).collect(),
    };
    let shared = if cells.iter().any(|c| c.attack.mode.is_some() && c.attack.n_perturbed > 0) {
        let cfg = cells[0].attack.attack_config(&lab.config.attack, cells[0].seed).expect("attacked cell");
        let run = attack(&lab.net, &lab.vocab, &subject.clean, &lab.theta, &cfg, &lab.sched).and_then(|outcome| {
            check_budget(&subject.clean, &outcome.perturbed, cfg.eta)?;
            if let Some(out) = out {
                let key = digest(&(&fingerprint, cells[0].attack_key()));
                write_outputs(&outcome, &cfg, &out.join(ATTACKS_DIR).join(key))?;
            }
            Ok(outcome)
        });
        match run {
            Ok(outcome) => Some(SharedAttack { outcome }),
            Err(e) => {
                let (kind, msg) = (e.kind(), e.to_string());
                return cells.iter().map(|_| Err(Error::Attack { step: 0, msg: format!("{kind}: {msg}") })).collect();
            }
        }
    } else {
        None
    };
    cells
        .iter()
        .map(|cell| {
            let start = Instant::now();
            let mut row = run_cell(lab, cell, &subject, shared.as_ref(), &fingerprint, out.filter(|_| save_images))?;
            row.seconds += start.elapsed().as_secs_f64();
            Ok(row)
        })
        .collect()
}

/// `x'` stays in `[0, 1]` and within `eta` of `x` in every pixel.
pub fn check_budget(clean: &Tensor<f32>, perturbed: &Tensor<f32>, eta: f64) -> Result<()> {
    let linf = clean.zip_map(perturbed, |a, b| (a - b).abs())?.max_abs() as f64;
    if linf > eta + 1e-7 {
        return Err(Error::Attack { step: 0, msg: format!("perturbation {linf} exceeds budget {eta}") });
    }
    if perturbed.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Attack { step: 0, msg: "perturbed image leaves [0, 1]".into() });
    }
    Ok(())
}

fn published(subject: &Subject, cell: &Cell, shared: Option<&SharedAttack>) -> Result<Tensor<f32>> {
    let k = cell.attack.n_perturbed;
    let n = subject.clean.dims()[0];
    let images = match shared {
        Some(s) if k > 0 => {
            let mut parts = vec![s.outcome.perturbed.slice_outer(0, k)?];
            if k < n {
                parts.push(subject.clean.slice_outer(k, n)?);
            }
            concat_batches(&parts)
        }
        _ => subject.clean.clone(),
    };
    match cell.attack.countermeasure {
        Some(cm) => apply_countermeasure(&images, cm, cell.seed),
        None => Ok(images),
    }
}

fn run_cell(
    lab: &Lab,
    cell: &Cell,
    subject: &Subject,
    shared: Option<&SharedAttack>,
    fingerprint: &str,
    image_dir: Option<&Path>,
) -> Result<MetricRow> {
    let images = published(subject, cell, shared)?;
    let cfg = lab.config.finetune.config(cell.method, cell.seed);
    let model = finetune(&lab.net, &lab.vocab, &images, &lab.theta, &cfg, &lab.sched)?;
    let generated = generate_subject(
        &lab.net,
        &model,
        &cfg.prompt,
        lab.config.generated,
        cell.seed ^ GENERATION_SALT,
        &lab.sched,
        lab.config.sampler,
    )?;
    let run_id = cell.run_id(fingerprint);
    if let Some(dir) = image_dir {
        save_grid(&generated, 8, &dir.join("cells").join(format!("{run_id}.png")))?;
    }
    let (fr, fs, fid) = evaluate(&generated, &subject.clean, &subject.references, &lab.extractor)?;
    let attacked = shared.filter(|_| cell.attack.n_perturbed > 0);
    Ok(MetricRow {
        run_id,
        attack_mode: cell.attack.label(),
        subset: cell.attack.subset.as_str().to_string(),
        eta: cell.attack.eta,
        n_perturbed: cell.attack.n_perturbed,
        method: cell.method.as_str().to_string(),
        fr,
        fs,
        fid,
        seconds: attacked.map_or(0.0, |s| s.outcome.trace.seconds),
        backward_count: attacked.map_or(0, |s| s.outcome.trace.backward_passes),
    })
}

/// Runs one cell from scratch without touching the disk.
pub fn run_single(lab: &Lab, cell: &Cell) -> Result<MetricRow> {
    run_group(lab, std::slice::from_ref(cell), None, false).pop().expect("one result")
}

/// Cells sharing an attack form one job; clean cells are their own jobs.
fn jobs(cells: Vec<Cell>) -> Vec<Vec<Cell>> {
    let mut groups: Vec<Vec<Cell>> = Vec::new();
    let mut index: HashMap<_, usize> = HashMap::new();
    for c in cells {
        match c.attack_key() {
            Some(key) => match index.get(&key) {
                Some(&i) => groups[i].push(c),
                None => {
                    index.insert(key, groups.len());
                    groups.push(vec![c]);
                }
            },
            None => groups.push(vec![c]),
        }
    }
    groups
}

/// Runs every cell of `plan` that has no row yet, `opts.jobs` groups at a
/// time. Stage failures are logged to `errors.jsonl` and leave the cell
/// without a row; the matrix continues.
pub fn run_matrix(lab: &Lab, plan: &ExperimentPlan, opts: MatrixOptions) -> Result<MatrixOutcome> {
    plan.validate(&lab.config)?;
    fs::create_dir_all(&plan.out).map_err(|e| Error::io(&plan.out, e))?;
    let csv = plan.out.join(METRICS_FILE);
    let existing = read_rows(&csv)?;
    let done: HashSet<String> = existing.iter().map(|r| r.run_id.clone()).collect();
    let fingerprint = lab.fingerprint();

    let cells = plan.cells();
    let pending: Vec<Cell> = cells.iter().filter(|c| !done.contains(&c.run_id(&fingerprint))).copied().collect();
    let skipped = cells.len() - pending.len();
    info!("plan `{}`: {} cells, {} already done", plan.name, cells.len(), skipped);

    let groups = jobs(pending);
    let appender = Appender { path: csv.clone(), rows: Mutex::new(existing) };
    let failures = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let computed = AtomicUsize::new(0);
    let errors_path = plan.out.join(ERRORS_FILE);
    let worker = || -> Result<()> {
        loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(group) = groups.get(i) else { return Ok(()) };
            for (cell, res) in group.iter().zip(run_group(lab, group, Some(&plan.out), opts.save_images)) {
                computed.fetch_add(1, Ordering::SeqCst);
                match res {
                    Ok(row) => {
                        info!("{} {} {} seed {}: FID {:.3} FS {:.3}", row.run_id, row.attack_mode, row.method, cell.seed, row.fid, row.fs);
                        appender.push(row)?;
                    }
                    Err(e) => {
                        let f = CellFailure { run_id: cell.run_id(&fingerprint), cell: *cell, kind: e.kind().into(), message: e.to_string() };
                        warn!("cell {} failed: {}", f.run_id, f.message);
                        append_line(&errors_path, &serde_json::to_string(&f)?)?;
                        failures.lock().expect("failures poisoned").push(f);
                    }
                }
            }
        }
    };
    let jobs = opts.jobs.max(1).min(groups.len().max(1));
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs).map(|_| s.spawn(&worker)).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect::<Result<Vec<_>>>()
    })?;

    // Plan rows in plan order, then rows from other plans sharing the file.
    let mut all: BTreeMap<String, MetricRow> =
        appender.rows.into_inner().expect("appender poisoned").into_iter().map(|r| (r.run_id.clone(), r)).collect();
    let mut rows = Vec::new();
    let mut ordered = Vec::new();
    for c in &cells {
        if let Some(r) = all.remove(&c.run_id(&fingerprint)) {
            ordered.push(r.clone());
            rows.push((*c, r));
        }
    }
    ordered.extend(all.into_values());
    write_rows(&csv, &ordered)?;
    Ok(MatrixOutcome {
        rows,
        computed: computed.into_inner(),
        skipped,
        failures: failures.into_inner().expect("failures poisoned"),
        csv,
    })
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Medians over seeds and subjects of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub attack_mode: String,
    pub subset: String,
    pub eta: f64,
    pub n_perturbed: usize,
    pub method: String,
    #[serde(rename = "FR")]
    pub fr: f64,
    #[serde(rename = "FS")]
    pub fs: f64,
    #[serde(rename = "FID")]
    pub fid: f64,
    pub runs: usize,
}

/// Groups rows by everything but run id and timing, in first-seen order.
pub fn summarize(rows: &[MetricRow]) -> Vec<Summary> {
    let mut order: Vec<(String, String, u64, usize, String)> = Vec::new();
    let mut groups: HashMap<_, Vec<&MetricRow>> = HashMap::new();
    for r in rows {
        let key = (r.attack_mode.clone(), r.subset.clone(), r.eta.to_bits(), r.n_perturbed, r.method.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let col = |f: fn(&MetricRow) -> f64| median(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            Summary {
                attack_mode: key.0.clone(),
                subset: key.1.clone(),
                eta: f64::from_bits(key.2),
                n_perturbed: key.3,
                method: key.4.clone(),
                fr: col(|r| r.fr),
                fs: col(|r| r.fs),
                fid: col(|r| r.fid),
                runs: g.len(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, fid: f64) -> MetricRow {
        MetricRow {
            run_id: id.into(),
            attack_mode: "caat".into(),
            subset: "kv_cross_attention".into(),
            eta: 0.1,
            n_perturbed: 4,
            method: "kv_only".into(),
            fr: 0.5,
            fs: 0.25,
            fid,
            seconds: 1.5,
            backward_count: 250,
        }
    }

    #[test]
    fn csv_round_trips_with_fixed_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(METRICS_FILE);
        write_rows(&p, &[]).unwrap();
        assert!(read_rows(&p).unwrap().is_empty());
        let rows = vec![row("a", 1.0 / 3.0), row("b", 2.0)];
        write_rows(&p, &rows).unwrap();
        assert_eq!(read_rows(&p).unwrap(), rows);
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert!(!p.with_extension("csv.tmp").exists());
    }

    #[test]
    fn foreign_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(METRICS_FILE);
        fs::write(&p, "a,b\n1,2\n").unwrap();
        assert_eq!(read_rows(&p).unwrap_err().kind(), "report");
    }

    #[test]
    fn timing_is_ignored_when_comparing_results() {
        let a = row("a", 1.0);
        let b = MetricRow { seconds: 9.0, ..a.clone() };
        assert!(a.same_result(&b));
        assert!(!a.same_result(&MetricRow { fid: 1.5, ..a.clone() }));
    }

    #[test]
    fn budget_check_catches_overshoot_and_range() {
        let x = Tensor::full(&[1, 1, 2, 2], 0.5f32);
        assert!(check_budget(&x, &x.map(|v| v + 0.1), 0.1).is_ok());
        assert!(check_budget(&x, &x.map(|v| v + 0.11), 0.1).is_err());
        let edge = Tensor::full(&[1, 1, 2, 2], 0.95f32);
        assert!(check_budget(&edge, &edge.map(|v| v + 0.08), 0.1).is_err());
    }

    #[test]
    fn medians_group_over_seeds() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let mut rows = vec![row("a", 1.0), row("b", 5.0), row("c", 2.0)];
        rows.push(MetricRow { method: "full_finetune".into(), ..row("d", 7.0) });
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].fid, s[0].runs), (2.0, 3));
        assert_eq!((s[1].method.as_str(), s[1].fid), ("full_finetune", 7.0));
    }
}
