use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedssd::commands::{self, Overrides};
use fedssd::config::RunSpec;
use fedssd_core::federation::Mode;
use fedssd_core::gradcheck::{DEFAULT_CONFIGS, DEFAULT_SEED};

#[derive(Parser)]
#[command(name = "fedssd", version, about = "Federated unsupervised representation learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct SpecArgs {
    /// Run specification (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed; overrides `federation.seed`. TOML integers are
    /// signed, hence the upper bound.
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,
}

impl SpecArgs {
    fn load(&self, mode: Option<Mode>) -> fedssd::Result<RunSpec> {
        let overrides = Overrides { out: self.out.clone(), seed: self.seed, mode };
        Ok(overrides.apply(RunSpec::load(&self.config)?))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Run {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_CONFIGS)]
        configs: usize,
    },
    /// Print per-client class histograms and label entropies.
    PartitionStats {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Run the same spec under several modes and tabulate final metrics.
    Compare {
        #[command(flatten)]
        spec: SpecArgs,
        /// Comma-separated, e.g. `align_uniform,ssd`.
        #[arg(long, value_delimiter = ',', value_parser = parse_mode, required = true)]
        modes: Vec<Mode>,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode {s:?}; expected one of {}", names.join(", "))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> fedssd::Result<ExitCode> {
    match command {
        Command::Run { spec, mode } => {
            let spec = spec.load(mode)?;
            let out = commands::run(&spec)?;
            let r = out.report.primary();
            println!(
                "{}: {} rounds, neg_uniformity {:.4}, effective_rank {:.3}, linear probe {:.4} -> {}",
                out.report.mode.name(),
                out.logs.len(),
                r.neg_uniformity,
                r.effective_rank,
                r.linear_probe_accuracy,
                out.out_dir.display()
            );
        }
        Command::Gradcheck { seed, configs } => {
            let report = commands::gradcheck(seed, configs)?;
            print!("{}", commands::render_gradcheck(&report));
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::PartitionStats { spec } => {
            let spec = spec.load(None)?;
            print!("{}", commands::render_partition_stats(&commands::partition_stats(&spec)?));
        }
        Command::Compare { spec, modes } => {
            let spec = spec.load(None)?;
            let fractions = spec.evaluation.probe_fractions.clone();
            let rows = commands::compare(&spec, &modes)?;
            print!("{}", commands::comparison_csv(&rows, &fractions));
        }
    }
    Ok(ExitCode::SUCCESS)
}
