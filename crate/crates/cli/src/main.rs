use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sckan_cli::{parse_shape, CliError, DEFAULT_GRADCHECK_SEEDS};
use sckan_core::data::{Role, DEFAULT_LABELED_FRACTION, DEFAULT_TEST_FRACTION};
use sckan_core::verify::Suite;
use sckan_core::volume::Dims;

#[derive(Parser)]
#[command(name = "sckan", version, about = "Semi-supervised 3D segmentation with structural-consensus prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom corpus and its split manifest.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// `N` for a cube or `X,Y,Z`.
        #[arg(long, default_value = "48", value_parser = parse_shape)]
        shape: Dims,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LABELED_FRACTION)]
        labeled_fraction: f64,
        #[arg(long, default_value_t = DEFAULT_TEST_FRACTION)]
        test_fraction: f64,
    },
    /// Train from a JSON run config; writes logs, checkpoint and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `run_dir` from the config.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Re-evaluate a finished run directory.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
        /// Overrides the corpus recorded in the run config.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Run an ablation grid and emit CSV/markdown/JSON reports.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Defaults to `ablation/<grid file stem>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `corpus` for every cell.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: Module,
        #[arg(long, default_value_t = DEFAULT_GRADCHECK_SEEDS)]
        seeds: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Test,
    Labeled,
    Unlabeled,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Module {
    All,
    Kan,
    Backbone,
    Pcc,
    Ckaf,
    Trainer,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { seed, count, shape, out, labeled_fraction, test_fraction } => {
            sckan_cli::gen_data(&out, seed, count, shape, labeled_fraction, test_fraction)
        }
        Command::Train { config, run_dir } => sckan_cli::train(&config, run_dir).map(drop),
        Command::Eval { run_dir, corpus, split } => {
            let roles = match split {
                Split::Test => vec![Role::Test],
                Split::Labeled => vec![Role::Labeled],
                Split::Unlabeled => vec![Role::Unlabeled],
                Split::All => vec![Role::Labeled, Role::Unlabeled, Role::Test],
            };
            sckan_cli::eval(&run_dir, corpus, &roles).map(drop)
        }
        Command::Ablate { grid, out, corpus } => {
            let out = out.unwrap_or_else(|| PathBuf::from("ablation").join(grid.file_stem().unwrap_or_default()));
            sckan_cli::ablate(&grid, &out, corpus.as_deref()).map(drop)
        }
        Command::Gradcheck { module, seeds } => {
            if seeds == 0 {
                return Err(CliError::Usage("--seeds must be >= 1".into()));
            }
            let suites: Vec<Suite> = match module {
                Module::All => Suite::ALL.to_vec(),
                Module::Kan => vec![Suite::Kan],
                Module::Backbone => vec![Suite::Backbone],
                Module::Pcc => vec![Suite::Pcc],
                Module::Ckaf => vec![Suite::Ckaf],
                Module::Trainer => vec![Suite::Trainer],
            };
            sckan_cli::gradcheck(&suites, seeds).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
