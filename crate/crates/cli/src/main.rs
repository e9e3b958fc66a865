//! `noisefed` — config-driven runner for noise-infusion experiments.
//!
//! Subcommands:
//!   run <config>        execute an experiment config (TOML) or a previous
//!                       run's manifest.json; outputs land in the config's
//!                       output_dir
//!   count <spec>        print trainable/non-trainable/total parameter
//!                       counts for a built-in preset or a spec TOML file
//!   export-figs <dir>   render PGM figures for a finished run directory
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config/spec error.
//! NOISEFED_THREADS caps the worker pool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use noisefed_core::error::Error;
use noisefed_core::experiments;
use noisefed_core::par;
use noisefed_core::spec::{preset, ModelSpec};

#[derive(Parser)]
#[command(
    name = "noisefed",
    version,
    about = "Noise-infusion training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config (TOML) or manifest (JSON) file.
    Run { config: PathBuf },
    /// Print parameter counts for a model spec (preset name or TOML path).
    Count { spec: String },
    /// Export figures (perturbation grid, feature maps) for a run directory.
    ExportFigs { run_dir: PathBuf },
}

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    par::configure_threads_from_env();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => {
            let cfg = match experiments::load_config(&config) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("config error: {e}");
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            match experiments::execute(&cfg) {
                Ok(summary) => {
                    println!(
                        "wrote {} files to {}",
                        summary.files.len(),
                        summary.output_dir.display()
                    );
                    for file in &summary.files {
                        println!("  {}", file.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("run failed: {e}");
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
        }
        Command::Count { spec } => match resolve_spec(&spec) {
            Ok(model_spec) => match model_spec.count_parameters() {
                Ok(counts) => {
                    println!(
                        "{}: trainable={} non_trainable={} total={}",
                        model_spec.name, counts.trainable, counts.non_trainable, counts.total
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("count failed: {e}");
                    ExitCode::from(EXIT_CONFIG)
                }
            },
            Err(e) => {
                eprintln!("spec error: {e}");
                ExitCode::from(EXIT_CONFIG)
            }
        },
        Command::ExportFigs { run_dir } => match experiments::export_figs(&run_dir) {
            Ok(files) => {
                println!("wrote {} figures under {}", files.len(), run_dir.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                let code = match e {
                    Error::Config(_) | Error::InvalidSpec(_) => EXIT_CONFIG,
                    _ => EXIT_RUNTIME,
                };
                eprintln!("export failed: {e}");
                ExitCode::from(code)
            }
        },
    }
}

fn resolve_spec(name_or_path: &str) -> Result<ModelSpec, Error> {
    if let Some(spec) = preset(name_or_path) {
        return Ok(spec);
    }
    let path = PathBuf::from(name_or_path);
    if path.exists() {
        let text = std::fs::read_to_string(&path)?;
        let spec = ModelSpec::from_toml(&text)?;
        spec.validate()?;
        return Ok(spec);
    }
    Err(Error::InvalidSpec(format!(
        "'{name_or_path}' is neither a preset (model1, model2, model3, model_s) nor a spec file"
    )))
}
