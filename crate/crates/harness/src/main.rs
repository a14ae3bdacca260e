use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reward_transfer::estimators::Method;
use rt_harness::certify::certify;
use rt_harness::grid::run_grid;
use rt_harness::summary::{plot_data_path, summarize_file};
use rt_harness::{ExperimentConfig, HarnessError, Profile, Result};

#[derive(Parser)]
#[command(name = "rtx", version, about = "Reward transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment grid and summarize it.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        profile: Option<Profile>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        root_seed: Option<u64>,
        /// Comma-separated subset of modular, coupled, coupled_offset.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Check the population certificates; fails if any hard check fails.
    Certify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        profile: Option<Profile>,
        /// Report file; defaults to `<out_dir>/certificates.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Flip the sign of the profiling correction (mutation check).
        #[arg(long)]
        inject_wrong_sign: bool,
    },
    /// Aggregate a results file into means, deviations and improvements.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured environment as JSON.
    GenEnv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        profile: Option<Profile>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            profile,
            out_dir,
            root_seed,
            methods,
            beta,
        } => {
            let mut cfg = ExperimentConfig::load(&config, profile)?;
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            if let Some(s) = root_seed {
                cfg.root_seed = s;
            }
            if let Some(m) = methods {
                cfg.methods = m;
            }
            if let Some(b) = beta {
                cfg.optim.beta = b;
            }
            cfg.validate()?;
            let out = run_grid(&cfg)?;
            println!(
                "{} rows ({} failed) -> {}",
                out.rows,
                out.failures,
                out.results.display()
            );
            println!("timings -> {}", out.timings.display());
            let summary = cfg.out_dir.join("summary.csv");
            match summarize_file(&out.results, &summary) {
                Ok(_) => println!("summary -> {}", summary.display()),
                Err(e) => eprintln!("summary skipped: {e}"),
            }
            Ok(())
        }
        Command::Certify {
            config,
            profile,
            out,
            inject_wrong_sign,
        } => {
            let cfg = ExperimentConfig::load(&config, profile)?;
            let outcome = certify(&cfg, if inject_wrong_sign { -1.0 } else { 1.0 })?;
            let path = out.unwrap_or_else(|| cfg.out_dir.join("certificates.json"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&path, outcome.to_json()?)?;
            let failures = outcome.report.failures();
            for c in &failures {
                println!(
                    "FAIL {} lhs={:e} rhs={:e} tol={:e}",
                    c.name, c.lhs, c.rhs, c.tol
                );
            }
            println!(
                "{} checks, {} failed -> {}",
                outcome.report.checks.len(),
                failures.len(),
                path.display()
            );
            if failures.is_empty() {
                Ok(())
            } else {
                Err(HarnessError::CertificatesFailed(failures.len()))
            }
        }
        Command::Summarize { input, out } => {
            let rows = summarize_file(&input, &out)?;
            println!("{} groups -> {}", rows.len(), out.display());
            println!("plot data -> {}", plot_data_path(&out).display());
            Ok(())
        }
        Command::GenEnv {
            config,
            profile,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config, profile)?;
            let env = cfg.env.build()?;
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&out, env.to_json()?)?;
            println!(
                "{} states, {} actions, tau_b = {}, tv_avg = {} -> {}",
                env.p1.n_states(),
                env.p1.n_actions(),
                env.tau_b,
                env.tv_avg,
                out.display()
            );
            Ok(())
        }
    }
}
