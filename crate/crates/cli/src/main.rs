use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use inhoc::attribution::XaiMethod;
use inhoc::report::{compare_runs, generate_datasets, run_experiment};
use inhoc::{Error, ExperimentConfig, Mode};

#[derive(Parser)]
#[command(name = "inhoc", version, about = "Explanation-guided federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        xai: Option<XaiMethod>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Align the rounds.csv of several runs and print loss/confidence deltas.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
    },
    /// Dump the synthetic per-CL datasets without training.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Io { .. } | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            mode,
            xai,
            seed,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.federation.mode = m;
            }
            if let Some(x) = xai {
                cfg.federation.xai_method = x;
            }
            if let Some(s) = seed {
                cfg.federation.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let run = run_experiment(&cfg)?;
            for t in &run.timing {
                println!(
                    "{} converged at round {} after {:.3}s",
                    t.slice, t.convergence_round, t.time_to_convergence_s
                );
            }
            println!("artifacts written to {}", run.dir.display());
        }
        Command::Compare { dirs } => {
            let cmp = compare_runs(&dirs)?;
            print!("{}", cmp.to_csv()?);
        }
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("data"));
            let files = generate_datasets(&cfg, &out)?;
            println!("wrote {} datasets under {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
