//! Command-line interface.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use localist_core::dial::{preset, preset_values};
use localist_core::Preset;

use crate::artifacts::write_run;
use crate::error::{CliError, EXIT_CRITERION, EXIT_OK};
use crate::report;
use crate::scenarios;
use crate::spec::ExperimentSpec;

pub const OUT_ENV: &str = "LOCALIST_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "localist", version, about = "Localist attention experiments")]
pub struct Args {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the scenario described by a spec file.
    Run {
        spec: PathBuf,
        /// Override the spec's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: `$LOCALIST_OUT/<name>` or `runs/<name>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the summary of a finished run.
    Report { dir: PathBuf },
    /// Inspect the named locality presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum PresetAction {
    /// One line per preset.
    List,
    /// Every resolved field of one preset, as TOML.
    Show { name: String },
}

/// `--out`, then the spec's `output_dir`, then `$LOCALIST_OUT/<name>`.
pub fn output_dir(spec: &ExperimentSpec, out: Option<&Path>) -> PathBuf {
    if let Some(o) = out {
        return o.to_path_buf();
    }
    if let Some(o) = &spec.output_dir {
        return o.clone();
    }
    let root = std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    root.join(&spec.name)
}

/// Runs a spec and writes its directory. Returns the exit code.
pub fn run_spec(spec: &ExperimentSpec, dir: &Path) -> Result<i32, CliError> {
    let outcome = scenarios::run(spec)?;
    write_run(dir, spec, &outcome)?;
    for c in &outcome.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.criterion, c.detail);
    }
    println!("wrote {}", dir.display());
    Ok(if outcome.passed() { EXIT_OK } else { EXIT_CRITERION })
}

fn presets_list() -> String {
    let mut s = String::from("name         lambda  delta  tau   theta_block  theta_llm\n");
    for p in Preset::ALL {
        let (lambda, delta, tau, tb, tl) = preset_values(p);
        s.push_str(&format!("{:<12} {lambda:<7} {delta:<6} {tau:<5} {tb:<12} {tl}\n", p.name()));
    }
    s
}

fn dispatch(args: Args) -> Result<i32, CliError> {
    match args.command {
        Command::Run { spec, seed, out } => {
            let mut s = ExperimentSpec::load(&spec)?;
            if let Some(seed) = seed {
                s = s.with_seed(seed);
            }
            let dir = output_dir(&s, out.as_deref());
            run_spec(&s, &dir)
        }
        Command::Report { dir } => {
            let r = report::load(&dir)?;
            print!("{}", report::render(&r));
            Ok(if r.passed() { EXIT_OK } else { EXIT_CRITERION })
        }
        Command::Presets { action } => {
            match action {
                PresetAction::List => print!("{}", presets_list()),
                PresetAction::Show { name } => {
                    let d = preset(&name).map_err(|e| CliError::Usage(e.to_string()))?;
                    print!("{}", toml::to_string(&d).map_err(|e| CliError::Artifact(e.to_string()))?);
                }
            }
            Ok(EXIT_OK)
        }
    }
}

/// Parses `argv` and runs the command, mapping errors to exit codes.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { crate::error::EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
