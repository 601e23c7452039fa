use std::path::PathBuf;
use std::process::ExitCode;

use bslab::config::ExperimentConfig;
use bslab::output::{export, output_root, run_config, sweep, ExportFormat};
use bslab::verify::{run_suite, SUITES};
use bslab::CliResult;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bslab", version, about = "Spectra of singular perturbations of elliptic operators")]
struct Cli {
    /// Output root; defaults to $BSLAB_OUTPUT_ROOT or ./bslab-output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every task of a TOML config.
    Run { config: PathBuf },
    /// Run a config once per value of a dotted scalar field.
    Sweep {
        config: PathBuf,
        /// Dotted path such as `operator.t` or `weights.v2.value`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Run a verification suite.
    Verify {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
        suite: String,
        /// Use the full-size randomized draws.
        #[arg(long)]
        full: bool,
    },
    /// Print the fit table of a finished run.
    Export {
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

fn dispatch(cli: Cli) -> CliResult<bool> {
    let root = cli.out.unwrap_or_else(output_root);
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let run = run_config(&cfg, &root)?;
            for w in &run.manifest.warnings {
                eprintln!("warning: {w}");
            }
            for r in &run.manifest.t_raises {
                eprintln!("t raised from {} to {} (margin {:.3e})", r.from, r.to, r.margin);
            }
            for task in &run.summary.tasks {
                for s in &task.spectra {
                    match &s.fit {
                        Some(f) => println!(
                            "{} {}: theta_hat={:.4} coeff_hat={:.4e} r2={:.4}",
                            task.task, s.name, f.theta, f.coefficient, f.r_squared
                        ),
                        None => println!("{} {}: no fit", task.task, s.name),
                    }
                }
            }
            println!("{}{}", run.dir.join("manifest.json").display(), if run.reused { " (reused)" } else { "" });
            Ok(true)
        }
        Command::Sweep { config, axis, values } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = sweep(&cfg, &axis, &values, &root)?;
            println!("{}", out.csv.display());
            Ok(true)
        }
        Command::Verify { suite, full } => {
            let rep = run_suite(&suite, full)?;
            for c in &rep.checks {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(rep.passed())
        }
        Command::Export { manifest, format } => {
            let f = match format {
                Format::Csv => ExportFormat::Csv,
                Format::Json => ExportFormat::Json,
            };
            print!("{}", export(&manifest, f)?);
            Ok(true)
        }
    }
}

/// OpenBLAS picks its kernels when the library loads, before `main` runs.
const CORETYPE_ENV: &str = "OPENBLAS_CORETYPE";

/// Re-runs the process with Haswell kernels pinned unless the caller chose kernels.
/// The auto-detected AVX-512 kernels return wrong factorizations on some virtual CPUs.
fn pin_blas_kernels() -> Option<ExitCode> {
    if std::env::var_os(CORETYPE_ENV).is_some() {
        return None;
    }
    let exe = std::env::current_exe().ok()?;
    let status =
        std::process::Command::new(exe).args(std::env::args_os().skip(1)).env(CORETYPE_ENV, "Haswell").status().ok()?;
    Some(status.code().map_or(ExitCode::FAILURE, |c| ExitCode::from(c as u8)))
}

fn main() -> ExitCode {
    if let Some(code) = pin_blas_kernels() {
        return code;
    }
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
