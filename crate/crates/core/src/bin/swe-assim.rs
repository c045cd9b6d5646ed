use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use swe_assim::io::{self, Invocation};
use swe_assim::{ControlKind, Error};

#[derive(Parser)]
#[command(name = "swe-assim", version, about = "Variational data assimilation for the 1D shallow-water equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the parallel sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Also run the brute-force finite-difference comparison (sensitivity only).
    #[arg(long, global = true)]
    oracle: bool,
    /// Control being estimated (overrides the config).
    #[arg(long, global = true, value_enum)]
    kind: Option<Kind>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Integrate the truth and write snapshots plus the mass diagnostic.
    Forward,
    /// Twin experiment: recover the control from synthetic observations.
    Assimilate,
    /// First- and second-order Taylor-remainder sweeps.
    Kappa,
    /// Gradient, Hessian-vector product and symmetry checks.
    HvpCheck,
    /// Sensitivity of a response to every observation.
    Sensitivity,
}

#[derive(ValueEnum, Clone, Copy)]
enum Kind {
    Ic,
    Bathymetry,
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut inv = match &cli.config {
        Some(path) => Invocation::load(path)?,
        None => Invocation::from_config(io::RunConfig::default())?,
    };
    if let Some(out) = &cli.out {
        inv.out_dir = out.clone();
    }
    if let Some(kind) = cli.kind {
        inv.kind = match kind {
            Kind::Ic => ControlKind::InitialCondition,
            Kind::Bathymetry => ControlKind::Bathymetry,
        };
    }
    inv.oracle = cli.oracle;
    match cli.command {
        Command::Forward => io::cmd_forward(&inv),
        Command::Assimilate => io::cmd_assimilate(&inv),
        Command::Kappa => io::cmd_kappa(&inv),
        Command::HvpCheck => io::cmd_hvp_check(&inv),
        Command::Sensitivity => io::cmd_sensitivity(&inv),
    }
    .map(|_| ())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SWE_ASSIM_LOG", "warn")).init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        log::warn!("could not size the thread pool: {e}");
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
