use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddmt_core::config::{Mode, RunConfig};
use ddmt_core::pipeline::{self, BUNDLE_FILE};
use ddmt_core::Error;

/// Masked-attention diffusion anomaly detection for multivariate time series.
#[derive(Parser, Debug)]
#[command(name = "ddmt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "ddmt-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write `model.bundle`.
    Train(Common),
    /// Score the test series with a bundle and write the report.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Bundle to load (default: `<out>/model.bundle`).
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Run all four modes over the ablation seeds plus the configured sweeps.
    Ablate(Common),
    /// Write the synthetic benchmark as CSV files.
    Synth(Common),
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(common.config.as_deref(), std::env::vars())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn write_echo(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let path = out.join("config.txt");
    std::fs::write(&path, cfg.echo()).map_err(|e| Error::Io { path, source: e })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            write_echo(&cfg, &common.out)?;
            let path = pipeline::run_train(&cfg, &common.out, &mut log)?;
            println!("bundle written to {}", path.display());
        }
        Command::Detect { common, bundle } => {
            let cfg = load_config(&common)?;
            let bundle = bundle.unwrap_or_else(|| common.out.join(BUNDLE_FILE));
            let report = pipeline::run_detect(&cfg, &bundle, &common.out)?;
            write_echo(&cfg, &common.out)?;
            print!("{}", report.summary_text(&cfg).lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect::<String>());
            print!("{}", report.timings_text());
        }
        Command::Ablate(common) => {
            let cfg = load_config(&common)?;
            let outcome = pipeline::run_ablation_and_sweeps(&cfg, &mut log)?;
            for path in pipeline::write_ablation(&cfg, &outcome, &common.out)? {
                println!("wrote {}", path.display());
            }
            for mode in Mode::ALL {
                match outcome.mean_f1(mode) {
                    Some(f1) => println!("{mode:<12} mean f1 {f1:.4}"),
                    None => println!("{mode:<12} no successful runs"),
                }
            }
        }
        Command::Synth(common) => {
            let cfg = load_config(&common)?;
            for path in pipeline::run_synth(&cfg, &common.out)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
