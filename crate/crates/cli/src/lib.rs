//! Plumbing behind the `sckan` binary: run configs, ablation grids and the
//! command implementations.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use sckan_core::backbone::SegNetParams;
use sckan_core::checkpoint;
use sckan_core::data::{generate_corpus, Corpus, Role};
use sckan_core::metrics::{cases_csv, summarize, MetricSummary};
use sckan_core::numerics::Rng;
use sckan_core::trainer::{evaluate_cases, train_to_dir, RunMetrics};
use sckan_core::verify::{run_suite, Suite, SuiteReport, DEFAULT_SEEDS, TOLERANCE};
use sckan_core::volume::Dims;

pub mod config;
pub mod grid;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("{0} of {1} grid runs failed")]
    GridFailures(usize, usize),

    #[error(transparent)]
    Core(sckan_core::error::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<sckan_core::error::Error> for CliError {
    fn from(e: sckan_core::error::Error) -> Self {
        use sckan_core::error::Error as E;
        match e {
            E::NonFinite(m) => CliError::Numerical(m),
            E::Config { path, message } => CliError::Config { path, message },
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    /// 0 success, 1 failure, 2 config/usage error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Numerical(_) => 3,
            _ => 1,
        }
    }
}

/// `48` or `48,48,32`.
pub fn parse_shape(s: &str) -> Result<Dims, String> {
    let parts: Vec<usize> =
        s.split([',', 'x']).map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad shape `{s}`: {e}"))).collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n, n, n]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(format!("shape `{s}` must have 1 or 3 entries")),
    }
}

pub fn gen_data(out: &Path, seed: u64, count: usize, shape: Dims, labeled_fraction: f64, test_fraction: f64) -> Result<(), CliError> {
    if shape.iter().any(|&d| d < 16) {
        return Err(CliError::Usage("every shape entry must be >= 16".into()));
    }
    if count < 3 {
        return Err(CliError::Usage("--count must be >= 3".into()));
    }
    let m = generate_corpus(out, seed, count, shape, labeled_fraction, test_fraction)?;
    println!(
        "wrote {} phantoms to {} (labeled {}, unlabeled {}, test {})",
        m.entries.len(),
        out.display(),
        m.ids(Role::Labeled).len(),
        m.ids(Role::Unlabeled).len(),
        m.ids(Role::Test).len()
    );
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<Corpus, CliError> {
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::Usage(format!("no corpus at {} (run gen-data first)", dir.display())));
    }
    Ok(Corpus::load(dir)?)
}

fn print_summary(label: &str, s: &MetricSummary) {
    let f = |m: Option<sckan_core::metrics::MeanStd>| m.map(|m| m.to_string()).unwrap_or_else(|| "n/a".into());
    println!(
        "{label}: {} cases  dice {}  jaccard {}  hd95 {}  asd {} ({})",
        s.cases,
        f(s.dice),
        f(s.jaccard),
        f(s.hd95),
        f(s.asd),
        s.units
    );
}

pub fn train(config: &Path, run_dir: Option<PathBuf>) -> Result<RunMetrics, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(d) = run_dir {
        cfg.run_dir = d;
    }
    let corpus = load_corpus(&cfg.corpus)?;
    cfg.check_manifest(&corpus.manifest)?;
    fs::create_dir_all(&cfg.run_dir)?;
    fs::write(cfg.run_dir.join("config.json"), cfg.to_json())?;
    let metrics = train_to_dir(&cfg.train_config(), &corpus, &cfg.run_dir)?;
    print_summary("test", &metrics.test);
    println!(
        "L-Dice {:.4}  U-Dice {:.4}  L-U gap {:+.4}  -> {}",
        metrics.gap.l_dice,
        metrics.gap.u_dice,
        metrics.gap.gap,
        cfg.run_dir.display()
    );
    Ok(metrics)
}

/// Re-evaluates a finished run's student network.
pub fn eval(run_dir: &Path, corpus: Option<PathBuf>, roles: &[Role]) -> Result<MetricSummary, CliError> {
    let cfg = RunConfig::load(&run_dir.join("config.json"))?;
    let corpus = load_corpus(corpus.as_deref().unwrap_or(&cfg.corpus))?;
    let records = checkpoint::read(&run_dir.join("model.sckp"))?;
    // Shapes only; every value is overwritten from the checkpoint.
    let mut student = SegNetParams::init(cfg.tap, &mut Rng::new(0));
    let names: Vec<String> = student.named_tensors().into_iter().map(|(n, _)| n).collect();
    checkpoint::restore(&records, names.into_iter().zip(student.tensors_mut()).collect())?;
    let cases = evaluate_cases(&student, &corpus, roles)?;
    fs::write(run_dir.join("eval_cases.csv"), cases_csv(&cases))?;
    let summary = summarize(&cases);
    fs::write(run_dir.join("eval.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    print_summary("eval", &summary);
    Ok(summary)
}

pub fn gradcheck(suites: &[Suite], seeds: usize) -> Result<Vec<SuiteReport>, CliError> {
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for &suite in suites {
        let r = run_suite(suite, seeds)?;
        let mut ops: Vec<&str> = r.checks.iter().map(|c| c.op).collect();
        ops.dedup();
        ops.sort_unstable();
        ops.dedup();
        for op in ops {
            let checks: Vec<_> = r.checks.iter().filter(|c| c.op == op).collect();
            let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
            let bad: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
            if bad.is_empty() {
                println!("PASS {}::{op}  seeds {}  max rel err {worst:.2e}", suite.name(), checks.len());
            } else {
                let (param, err) = bad[0].failures.first().cloned().unwrap_or_default();
                println!(
                    "FAIL {}::{op}  {}/{} seeds  first: seed {} param `{param}` rel err {err:.3e} (tol {TOLERANCE:e})",
                    suite.name(),
                    bad.len(),
                    checks.len(),
                    bad[0].seed
                );
                failed.push(format!("{}::{op} (param `{param}`, rel err {err:.3e})", suite.name()));
            }
        }
        println!("{}: {:.1}s", suite.name(), r.seconds);
        reports.push(r);
    }
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

pub const DEFAULT_GRADCHECK_SEEDS: usize = DEFAULT_SEEDS;

pub fn ablate(grid_path: &Path, out: &Path, corpus: Option<&Path>) -> Result<grid::GridReport, CliError> {
    let spec = grid::GridSpec::load(grid_path)?;
    let runs = spec.plan(out, corpus)?;
    let exe = std::env::current_exe()?;
    let threads = grid::grid_threads();
    eprintln!("[grid] {} runs, {} at a time", runs.len(), threads);
    let outcomes = grid::execute(&exe, &spec, &runs, threads)?;
    let report = grid::summarize(&spec, outcomes);
    report.write(out)?;
    print!("{}", report.to_markdown());
    let failed = report.runs.iter().filter(|r| !r.succeeded()).count();
    if failed > 0 {
        return Err(CliError::GridFailures(failed, report.runs.len()));
    }
    Ok(report)
}
