use std::path::PathBuf;
use std::process::ExitCode;

use bmsfed_cli::compare::comparison_csv;
use bmsfed_cli::runner::{load_config, run_dir_name};
use bmsfed_cli::{compare_methods, run_experiment, CliError};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bmsfed",
    version,
    about = "Balanced modality selection federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv and summary.json.
    Run {
        config: PathBuf,
        /// Output root; the run goes to <out>/<label>-seed<seed>/.
        #[arg(long, env = "BMSFED_OUT_DIR", default_value = "bmsfed-out")]
        out: PathBuf,
    },
    /// Run several method configs over several seeds and tabulate
    /// median/IQR of the final accuracies.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, env = "BMSFED_OUT_DIR", default_value = "bmsfed-out")]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let dir = out.join(run_dir_name(&cfg));
            let run = run_experiment(&cfg, &dir)?;
            let last = run.last();
            println!(
                "{}: round {} acc_multi {:.4} acc_uni_a {:.4} acc_uni_i {:.4} -> {}",
                cfg.label,
                last.round,
                last.acc_multi,
                last.acc_uni_a,
                last.acc_uni_i,
                dir.display()
            );
        }
        Command::Compare { configs, seeds, out } => {
            let configs = configs.iter().map(|p| load_config(p)).collect::<Result<Vec<_>, _>>()?;
            let rows = compare_methods(&configs, &seeds, Some(&out))?;
            print!("{}", comparison_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
