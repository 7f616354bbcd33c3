use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use grcl_bench::error::{CliError, Result};
use grcl_bench::run::{summarize, summary_table, tracing_from_env};
use grcl_bench::{cmd_gen_data, cmd_report, cmd_run, ExperimentConfig};
use grcl_core::gradproj::{feasibility_tolerance, project, ConstraintSet, ConstraintTag};
use grcl_core::model::FlatGradient;
use grcl_core::trainer::{select_lambda, Method, LAMBDA_GRID};

#[derive(Parser)]
#[command(name = "grcl", version, about = "Continual domain adaptation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one CSV per domain of a generated sequence.
    GenData {
        /// Config file; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset seed; the first configured seed when omitted.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every configured (method, seed) cell.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarize a results directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Where the plot CSVs go; the input directory when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid-search the multi-task weight on each configured seed.
    SelectLambda {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Candidate weights; the built-in grid when omitted.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Project a gradient read from CSV: first line the proposal, each
    /// further line one constraint gradient.
    Project {
        input: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        ridge: f64,
    },
}

fn load(config: Option<&Path>) -> Result<ExperimentConfig> {
    match config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn read_vectors(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| CliError::Config {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = load(config.as_deref())?;
            if !cfg.data_files.is_empty() {
                return Err(CliError::InvalidConfig(
                    "gen-data needs a generated benchmark, not data_files".into(),
                ));
            }
            let seed = seed.unwrap_or(cfg.seeds[0]);
            for p in cmd_gen_data(&cfg, seed, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Run { config, out, jobs } => {
            let cfg = load(config.as_deref())?;
            let cells = cmd_run(&cfg, &out, jobs, tracing_from_env())?;
            let failed: Vec<_> = cells.iter().filter(|c| c.result.is_err()).collect();
            for c in &failed {
                eprintln!("{} seed {}: {}", c.method, c.seed, c.result.as_ref().unwrap_err());
            }
            print!("{}", summary_table(&summarize(&cfg.methods, &cells)));
            if !failed.is_empty() {
                return Err(CliError::CellsFailed {
                    failed: failed.len(),
                    total: cells.len(),
                });
            }
        }
        Command::Report { input, out } => {
            let out = out.unwrap_or_else(|| input.clone());
            let report = cmd_report(&input, &out)?;
            for p in &report.failed_cells {
                eprintln!("skipped failed cell {}", p.display());
            }
            print!("{}", report.table);
        }
        Command::SelectLambda { config, grid } => {
            let cfg = load(config.as_deref())?;
            let grid = if grid.is_empty() { LAMBDA_GRID.to_vec() } else { grid };
            for &seed in &cfg.seeds {
                let data = grcl_bench::run::datasets_for(&cfg, seed)?;
                let train = grcl_core::trainer::TrainConfig {
                    seed,
                    ..cfg.train_for(Method::MultiTask)
                };
                let (best, scores) = select_lambda(&cfg.model_spec(), &data, &train, &grid)?;
                let scores: Vec<String> = scores.iter().map(|(l, s)| format!("{l}:{s:.4}")).collect();
                println!("seed {seed}: best {best} ({})", scores.join(" "));
            }
        }
        Command::Project { input, ridge } => {
            let mut rows = read_vectors(&input)?.into_iter();
            let proposed = rows
                .next()
                .ok_or_else(|| CliError::InvalidConfig(format!("{}: empty", input.display())))?;
            let mut cs = ConstraintSet::new(FlatGradient::new(proposed));
            for (i, r) in rows.enumerate() {
                cs.push(ConstraintTag::Memory(i as u32 + 1), FlatGradient::new(r));
            }
            let r = project(&cs, ridge, feasibility_tolerance(&cs.proposed))?;
            let json = serde_json::json!({
                "projected": r.projected.to_vec(),
                "multipliers": r.multipliers,
                "active": r.active,
                "violated": r.violated,
                "distortion": r.distortion,
            });
            println!("{json}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
