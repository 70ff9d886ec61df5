use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cffl::config::{ExperimentConfig, GameBackend, OracleKind, Strategy};
use cffl::experiment::{
    compare_strategies, generate_datasets, run_coalition_game, run_experiment, run_training,
    write_comparison_csv, write_manifest, write_overhead, COMPARISON_FILE, OVERHEAD_FILE,
    ROUNDS_FILE,
};

#[derive(Parser, Debug)]
#[command(
    name = "cffl",
    version,
    about = "Coalition-guided federated channel estimation experiments"
)]
struct Cli {
    /// Experiment config (TOML). Built-in desk-scale defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long, global = true, value_enum)]
    oracle: Option<OracleArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write per-user and server pilot datasets.
    Generate,
    /// Train one group of all users with FL, or HFL when enabled.
    Train,
    /// Coalition formation only.
    Game,
    /// Full run: formation, NMSE sweep, correlation and overhead tables.
    Cffl,
    /// Communication overhead table.
    Overhead,
    /// Mean ± std NMSE per strategy and SNR over seeds.
    Compare {
        /// Comma-separated strategy names; defaults to the config list.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum BackendArg {
    Dqn,
    Qmix,
    Switch,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum OracleArg {
    Fl,
    Surrogate,
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("CFFL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("CFFL_THREADS={raw:?} is not a count"))?;
    if n == 0 {
        bail!("CFFL_THREADS must be positive");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(b) = cli.backend {
        cfg.backend = match b {
            BackendArg::Dqn => GameBackend::Dqn,
            BackendArg::Qmix => GameBackend::Qmix,
            BackendArg::Switch => GameBackend::Switch,
        };
    }
    if let Some(o) = cli.oracle {
        cfg.oracle = match o {
            OracleArg::Fl => OracleKind::Fl,
            OracleArg::Surrogate => OracleKind::Surrogate,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    let cfg = load_config(cli)?;
    let out = cfg.output_dir.clone();
    match &cli.command {
        Command::Generate => {
            let files = generate_datasets(&cfg, &out)?;
            println!("wrote {} datasets to {}", files.len(), out.display());
        }
        Command::Train => {
            let rows = run_training(&cfg, &out)?;
            write_manifest(&out, &cfg, &[ROUNDS_FILE])?;
            if let Some(last) = rows.last() {
                let mean = last.member_nmse.iter().sum::<f64>() / last.member_nmse.len() as f64;
                println!("{} rounds, final mean NMSE {mean:.6e}", rows.len());
            }
        }
        Command::Game => {
            let f = run_coalition_game(&cfg, &out)?;
            println!("partition {:?}", f.partition.canonical_groups());
        }
        Command::Cffl => {
            let s = run_experiment(&cfg, &out)?;
            println!("partition {:?}", s.partition.canonical_groups());
            for r in &s.nmse {
                println!(
                    "snr {:>6} dB  NMSE {:.6e} ({:.2} dB)",
                    r.snr_db, r.mean_nmse, r.nmse_db
                );
            }
        }
        Command::Overhead => {
            for (name, o) in write_overhead(&cfg, &out)? {
                println!(
                    "{name:<9} per_round {} per_epoch {} total {}",
                    o.per_round, o.per_epoch, o.total
                );
            }
            write_manifest(&out, &cfg, &[OVERHEAD_FILE])?;
        }
        Command::Compare { strategies } => {
            let list = if strategies.is_empty() {
                cfg.compare.strategies.clone()
            } else {
                strategies
                    .iter()
                    .map(|s| Strategy::parse(s))
                    .collect::<cffl::Result<Vec<_>>>()?
            };
            let rows = compare_strategies(&cfg, &list)?;
            std::fs::create_dir_all(&out)?;
            write_comparison_csv(&out.join(COMPARISON_FILE), &rows)?;
            write_manifest(&out, &cfg, &[COMPARISON_FILE])?;
            for r in &rows {
                println!(
                    "{:<12} snr {:>6}  NMSE {:.6e} ± {:.2e}",
                    r.strategy.name(),
                    r.snr_db,
                    r.mean_nmse,
                    r.std_nmse
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
