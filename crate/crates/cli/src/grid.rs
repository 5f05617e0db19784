//! Ablation grids: a base config, a list of labelled override cells and a
//! seed list. Each (cell, seed) run is a separate `sckan train` process.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use sckan_core::metrics::MeanStd;
use sckan_core::trainer::RunMetrics;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub name: String,
    /// Flat [`RunConfig`] keys shared by every cell; `run_dir` and `seed`
    /// are filled in per run.
    #[serde(default)]
    pub base: Map<String, Value>,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub label: String,
    #[serde(default)]
    pub set: Map<String, Value>,
}

/// One fully resolved run of the grid.
#[derive(Debug, Clone)]
pub struct PlannedRun {
    pub cell: usize,
    pub seed: u64,
    pub config: RunConfig,
    pub config_path: PathBuf,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read grid {}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Config { path: e.path().to_string(), message: e.into_inner().to_string() })
    }

    /// Resolves and validates every run before anything executes, so a bad
    /// cell fails the whole grid up front with exit code 2.
    pub fn plan(&self, out: &Path, corpus: Option<&Path>) -> Result<Vec<PlannedRun>, CliError> {
        if self.cells.is_empty() || self.seeds.is_empty() {
            return Err(CliError::Usage("grid has no cells or no seeds".into()));
        }
        let mut labels: Vec<&str> = self.cells.iter().map(|c| c.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) || labels.iter().any(|l| !safe_label(l)) {
            return Err(CliError::Usage("cell labels must be unique and use [A-Za-z0-9._-]".into()));
        }
        let mut runs = Vec::new();
        for (ci, cell) in self.cells.iter().enumerate() {
            for &seed in &self.seeds {
                let mut doc = self.base.clone();
                doc.extend(cell.set.clone());
                let run_dir = out.join("runs").join(&cell.label).join(format!("seed_{seed}"));
                doc.insert("seed".into(), seed.into());
                doc.insert("run_dir".into(), run_dir.to_string_lossy().into_owned().into());
                if let Some(c) = corpus {
                    doc.insert("corpus".into(), c.to_string_lossy().into_owned().into());
                }
                let config = RunConfig::from_value(Value::Object(doc)).map_err(|e| match e {
                    CliError::Config { path, message } => {
                        CliError::Config { path: format!("cells[{ci}] ({}).{path}", cell.label), message }
                    }
                    other => other,
                })?;
                let config_path = out.join("configs").join(format!("{}__seed_{seed}.json", cell.label));
                runs.push(PlannedRun { cell: ci, seed, config, config_path });
            }
        }
        Ok(runs)
    }
}

fn safe_label(l: &str) -> bool {
    !l.is_empty() && l.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOutcome {
    pub cell: String,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub exit_code: Option<i32>,
    /// Last stderr line of a failed run.
    pub error: Option<String>,
    pub test_dice: Option<f64>,
    pub test_jaccard: Option<f64>,
    pub test_hd95: Option<f64>,
    pub test_asd: Option<f64>,
    pub l_dice: Option<f64>,
    pub u_dice: Option<f64>,
    pub gap: Option<f64>,
}

impl RunOutcome {
    pub fn succeeded(&self) -> bool {
        self.exit_code == Some(0) && self.test_dice.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSummary {
    pub label: String,
    pub runs: usize,
    pub failed: usize,
    pub dice: Option<MeanStd>,
    pub jaccard: Option<MeanStd>,
    pub hd95: Option<MeanStd>,
    pub asd: Option<MeanStd>,
    pub l_dice: Option<MeanStd>,
    pub u_dice: Option<MeanStd>,
    pub gap: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridReport {
    pub name: String,
    /// Surface distances are in voxels.
    pub units: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSummary>,
    pub runs: Vec<RunOutcome>,
}

pub const REPORT_CSV_HEADER: &str = "cell,runs,failed,dice_mean,dice_std,jaccard_mean,jaccard_std,hd95_mean,hd95_std,\
asd_mean,asd_std,l_dice_mean,l_dice_std,u_dice_mean,u_dice_std,gap_mean,gap_std";

/// Thread cap from `SCKAN_THREADS`, else the machine's parallelism.
pub fn grid_threads() -> usize {
    std::env::var("SCKAN_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn outcome(run: &PlannedRun, label: &str, exit_code: Option<i32>, error: Option<String>) -> RunOutcome {
    let mut o = RunOutcome {
        cell: label.to_string(),
        seed: run.seed,
        run_dir: run.config.run_dir.clone(),
        exit_code,
        error,
        test_dice: None,
        test_jaccard: None,
        test_hd95: None,
        test_asd: None,
        l_dice: None,
        u_dice: None,
        gap: None,
    };
    if exit_code != Some(0) {
        return o;
    }
    let metrics =
        fs::read_to_string(run.config.run_dir.join("metrics.json")).ok().and_then(|t| serde_json::from_str::<RunMetrics>(&t).ok());
    match metrics {
        Some(m) => {
            o.test_dice = m.test.dice.map(|s| s.mean);
            o.test_jaccard = m.test.jaccard.map(|s| s.mean);
            o.test_hd95 = m.test.hd95.map(|s| s.mean);
            o.test_asd = m.test.asd.map(|s| s.mean);
            o.l_dice = Some(m.gap.l_dice);
            o.u_dice = Some(m.gap.u_dice);
            o.gap = Some(m.gap.gap);
        }
        None => o.error = Some("metrics.json missing or unreadable".into()),
    }
    o
}

/// Executes `runs` with at most `threads` concurrent child processes of
/// `exe`. Failures are recorded, never fatal.
pub fn execute(exe: &Path, spec: &GridSpec, runs: &[PlannedRun], threads: usize) -> Result<Vec<RunOutcome>, CliError> {
    for r in runs {
        if let Some(dir) = r.config_path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&r.config_path, r.config.to_json())?;
    }
    let queue = Mutex::new(runs.iter().enumerate().collect::<VecDeque<_>>());
    let results = Mutex::new(vec![None; runs.len()]);
    std::thread::scope(|s| {
        for _ in 0..threads.max(1).min(runs.len()) {
            s.spawn(|| loop {
                let Some((i, run)) = queue.lock().expect("queue").pop_front() else { break };
                let label = &spec.cells[run.cell].label;
                eprintln!("[grid] {label} seed {} ...", run.seed);
                let res = Command::new(exe).arg("train").arg("--config").arg(&run.config_path).output();
                let o = match res {
                    Ok(out) => {
                        let err =
                            (!out.status.success()).then(|| String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("").to_string());
                        outcome(run, label, out.status.code(), err)
                    }
                    Err(e) => outcome(run, label, None, Some(format!("spawn failed: {e}"))),
                };
                eprintln!(
                    "[grid] {label} seed {} -> {}",
                    run.seed,
                    if o.succeeded() { format!("dice {:.4}", o.test_dice.unwrap_or(f64::NAN)) } else { "FAILED".into() }
                );
                results.lock().expect("results")[i] = Some(o);
            });
        }
    });
    Ok(results.into_inner().expect("results").into_iter().map(|o| o.expect("every run finishes")).collect())
}

pub fn summarize(spec: &GridSpec, outcomes: Vec<RunOutcome>) -> GridReport {
    let cells = spec
        .cells
        .iter()
        .map(|c| {
            let mine: Vec<&RunOutcome> = outcomes.iter().filter(|o| o.cell == c.label).collect();
            let ok: Vec<&&RunOutcome> = mine.iter().filter(|o| o.succeeded()).collect();
            let col = |f: fn(&RunOutcome) -> Option<f64>| MeanStd::of(&ok.iter().filter_map(|o| f(o)).collect::<Vec<_>>());
            CellSummary {
                label: c.label.clone(),
                runs: mine.len(),
                failed: mine.len() - ok.len(),
                dice: col(|o| o.test_dice),
                jaccard: col(|o| o.test_jaccard),
                hd95: col(|o| o.test_hd95),
                asd: col(|o| o.test_asd),
                l_dice: col(|o| o.l_dice),
                u_dice: col(|o| o.u_dice),
                gap: col(|o| o.gap),
            }
        })
        .collect();
    GridReport { name: spec.name.clone(), units: "voxel".into(), seeds: spec.seeds.clone(), cells, runs: outcomes }
}

fn csv_pair(m: Option<MeanStd>) -> String {
    m.map(|m| format!("{:.6},{:.6}", m.mean, m.std)).unwrap_or_else(|| ",".into())
}

fn md_cell(m: Option<MeanStd>) -> String {
    m.map(|m| m.to_string()).unwrap_or_else(|| "–".into())
}

impl GridReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_CSV_HEADER}\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                c.label,
                c.runs,
                c.failed,
                csv_pair(c.dice),
                csv_pair(c.jaccard),
                csv_pair(c.hd95),
                csv_pair(c.asd),
                csv_pair(c.l_dice),
                csv_pair(c.u_dice),
                csv_pair(c.gap)
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        if !self.name.is_empty() {
            let _ = writeln!(out, "## {}\n", self.name);
        }
        let _ = writeln!(out, "Mean ± sample std over seeds {:?}; HD95/ASD in voxels.\n", self.seeds);
        out.push_str("| cell | runs | failed | Dice | Jaccard | HD95 | ASD | L-Dice | U-Dice | L-U gap |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                c.label,
                c.runs,
                c.failed,
                md_cell(c.dice),
                md_cell(c.jaccard),
                md_cell(c.hd95),
                md_cell(c.asd),
                md_cell(c.l_dice),
                md_cell(c.u_dice),
                md_cell(c.gap)
            );
        }
        let failed: Vec<&RunOutcome> = self.runs.iter().filter(|r| !r.succeeded()).collect();
        if !failed.is_empty() {
            out.push_str("\nFailed runs:\n\n");
            for r in failed {
                let _ = writeln!(out, "- {} seed {}: exit {:?}: {}", r.cell, r.seed, r.exit_code, r.error.as_deref().unwrap_or(""));
            }
        }
        out
    }

    pub fn write(&self, out: &Path) -> Result<(), CliError> {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.csv"), self.to_csv())?;
        fs::write(out.join("report.md"), self.to_markdown())?;
        fs::write(out.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
