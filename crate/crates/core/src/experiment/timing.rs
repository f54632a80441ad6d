//! Wall-clock and backward-pass accounting over attack sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackMode, AttackSidecar};
use crate::error::{Error, Result};

/// Backward passes an attack of `steps` must take.
pub fn expected_backward(mode: AttackMode, steps: usize) -> usize {
    match mode {
        AttackMode::Separated => 2 * steps,
        _ => steps,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub mode: AttackMode,
    pub steps: usize,
    pub runs: usize,
    pub mean_seconds: f64,
    pub mean_backward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
    /// Mean caat over mean separated wall-clock at each shared step count.
    pub caat_over_separated: Vec<(usize, f64)>,
}

/// Every `attack.json` below `dir`, sorted by path.
pub fn load_sidecars(dir: &Path) -> Result<Vec<(PathBuf, AttackSidecar)>> {
    let mut found = Vec::new();
    collect(dir, &mut found)?;
    found.sort();
    if found.is_empty() {
        return Err(Error::Report(format!("no attack manifests under {}", dir.display())));
    }
    found
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let s = serde_json::from_str(&text).map_err(|e| Error::Report(format!("{}: {e}", p.display())))?;
            Ok((p, s))
        })
        .collect()
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "attack.json") {
            out.push(path);
        }
    }
    Ok(())
}

/// Per-mode means. Fails if any run's backward count differs from
/// [`expected_backward`].
pub fn timing_report(runs: &[AttackSidecar]) -> Result<TimingReport> {
    if runs.is_empty() {
        return Err(Error::Report("no attack runs to report".into()));
    }
    let mut rows: Vec<TimingRow> = Vec::new();
    for s in runs {
        let want = expected_backward(s.config.mode, s.config.steps);
        if s.backward_passes != want {
            return Err(Error::Report(format!(
                "{} with {} steps took {} backward passes, expected {want}",
                s.config.mode, s.config.steps, s.backward_passes
            )));
        }
        match rows.iter_mut().find(|r| r.mode == s.config.mode && r.steps == s.config.steps) {
            Some(r) => {
                r.mean_seconds += s.seconds;
                r.mean_backward += s.backward_passes as f64;
                r.runs += 1;
            }
            None => rows.push(TimingRow {
                mode: s.config.mode,
                steps: s.config.steps,
                runs: 1,
                mean_seconds: s.seconds,
                mean_backward: s.backward_passes as f64,
            }),
        }
    }
    for r in &mut rows {
        r.mean_seconds /= r.runs as f64;
        r.mean_backward /= r.runs as f64;
    }
    rows.sort_by_key(|r| (r.mode.as_str(), r.steps));
    let caat_over_separated = rows
        .iter()
        .filter(|r| r.mode == AttackMode::Caat)
        .filter_map(|c| {
            rows.iter()
                .find(|s| s.mode == AttackMode::Separated && s.steps == c.steps)
                .map(|s| (c.steps, c.mean_seconds / s.mean_seconds))
        })
        .collect();
    Ok(TimingReport { rows, caat_over_separated })
}
