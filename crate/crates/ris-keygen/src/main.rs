use std::path::PathBuf;

use clap::{Parser, Subcommand};

use ris_keygen::experiments::{
    init_thread_pool, run_all, sweep, write_csv, ScenarioConfig, SweepVar,
};

/// Secret-key-rate benchmark runner for RIS-assisted key generation.
#[derive(Parser)]
#[command(name = "ris-keygen", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured algorithm at the config's operating point.
    Run {
        /// Scenario config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's Monte Carlo trial count.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Sweep one parameter over a grid, running all configured algorithms
    /// at every grid point.
    Sweep {
        /// Scenario config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Swept variable: pt (dBm), m (elements), dr (spacing in
        /// wavelengths), or k (Rician factor, dB). Falls back to the
        /// config's `run.sweep_var`.
        #[arg(long)]
        var: Option<String>,
        /// Comma-separated grid values. Falls back to `run.sweep_grid`.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's Monte Carlo trial count.
        #[arg(long)]
        trials: Option<usize>,
    },
}

fn load(config: &PathBuf, seed: Option<u64>, trials: Option<usize>) -> ris_keygen::Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(config)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if let Some(t) = trials {
        cfg.run.trials = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> ris_keygen::Result<()> {
    match cli.cmd {
        Command::Run { config, out, seed, trials } => {
            let cfg = load(&config, seed, trials)?;
            let rows = run_all(&cfg)?;
            write_csv(&out, &rows)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Sweep { config, var, grid, out, seed, trials } => {
            let cfg = load(&config, seed, trials)?;
            let var = match var.or_else(|| cfg.run.sweep_var.clone()) {
                Some(v) => SweepVar::parse(&v)?,
                None => {
                    return Err(ris_keygen::Error::Config(
                        "no sweep variable: pass --var or set run.sweep_var".into(),
                    ))
                }
            };
            let grid = if grid.is_empty() { cfg.run.sweep_grid.clone() } else { grid };
            if grid.is_empty() {
                return Err(ris_keygen::Error::Config(
                    "no sweep grid: pass --grid or set run.sweep_grid".into(),
                ));
            }
            let rows = sweep(&cfg, var, &grid)?;
            write_csv(&out, &rows)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    init_thread_pool();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
