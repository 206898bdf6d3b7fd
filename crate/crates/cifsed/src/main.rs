use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use cifsed::config::ExperimentConfig;
use cifsed::runner::{self, RunOptions};
use cifsed::{persist, report, selftest};

#[derive(Parser)]
#[command(version, about = "Class-incremental few-shot event detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML, or JSON by extension). Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Run with this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.run.seeds = vec![seed];
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Split the data and write per-seed session manifests.
    Prepare(Common),
    /// Train the shared base model of every seed.
    Pretrain(Common),
    /// Run the full experiment and emit reports.
    Run {
        #[command(flatten)]
        common: Common,
        /// Reuse (and fill) base models from this directory.
        #[arg(long)]
        base_cache: Option<PathBuf>,
        /// Dump emission and transition scores of one evaluation episode.
        #[arg(long)]
        dump_scores: bool,
    },
    /// Re-render report files from a stored runreport.json.
    Report {
        /// Path to runreport.json.
        report: PathBuf,
        /// Where to write the files (defaults to the report's directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the CRF enumeration oracle and the gradient checks.
    Selftest {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the default config as TOML.
    DefaultConfig,
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run_selftest(trials: usize, seed: u64) -> bool {
    let oracle = selftest::crf_oracle(trials, seed);
    println!(
        "crf oracle: {} trials, |log Z| err {:.2e}, marginal err {:.2e}, viterbi mismatches {} ({:.2?}) {}",
        oracle.trials,
        oracle.max_log_z_error,
        oracle.max_marginal_error,
        oracle.viterbi_mismatches,
        oracle.elapsed,
        if oracle.passed() { "ok" } else { "FAILED" }
    );
    let mut ok = oracle.passed();
    for check in selftest::gradient_checks(seed) {
        println!(
            "gradient {:<34} {:>4} entries, max rel err {:.2e} {}",
            check.name,
            check.entries,
            check.max_rel_error,
            if check.passed() { "ok" } else { "FAILED" }
        );
        ok &= check.passed();
    }
    ok
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Prepare(common) => {
            let cfg = common.load()?;
            print_paths(&runner::prepare(&cfg, &common.out_dir)?);
        }
        Command::Pretrain(common) => {
            let cfg = common.load()?;
            print_paths(&runner::pretrain(&cfg, &common.out_dir.join("base"))?);
        }
        Command::Run {
            common,
            base_cache,
            dump_scores,
        } => {
            let cfg = common.load()?;
            let outcome = runner::execute(
                &cfg,
                &RunOptions {
                    out_dir: common.out_dir.clone(),
                    base_cache,
                    dump_scores,
                },
            )?;
            print!("{}", report::markdown_table(&outcome.report));
            println!("\nresults in {}", outcome.dir.display());
        }
        Command::Report { report: path, out_dir } => {
            let stored = persist::load_report(&path)?;
            let dir = out_dir.unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());
            let written = report::emit(&stored, &dir).with_context(|| format!("writing into {}", dir.display()))?;
            print_paths(&written);
        }
        Command::Selftest { trials, seed } => {
            if !run_selftest(trials, seed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()),
    }
    Ok(ExitCode::SUCCESS)
}
