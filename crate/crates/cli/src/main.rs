use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use impulse_core::scenario::{gallery, gallery_entry, list_presets, RunOutput, Scenario, Table};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Exit code when a run completes but its certificate or check fails.
const EXIT_FAILED_CHECK: u8 = 2;

#[derive(Parser)]
#[command(name = "impulse", version, about = "Run impulsive ODE scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        scenario: PathBuf,
        /// Output directory (default: $IMPULSE_OUT_DIR/<name> or out/<name>).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Override the integration tolerance.
        #[arg(long)]
        tol: Option<f64>,
        /// Override the number of fast-time steps per jump.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run bundled scenarios and compare with their declared outcome.
    Gallery {
        /// Scenario name; see `impulse presets`.
        name: Option<String>,
        #[arg(long, conflicts_with = "name")]
        all: bool,
        /// Parent directory for the per-scenario outputs.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// List shape presets and bundled scenarios.
    Presets,
}

#[derive(Serialize)]
struct Manifest<'a> {
    scenario: &'a str,
    source: String,
    sha256: String,
    version: &'static str,
    task: &'static str,
    passed: bool,
    expected: bool,
    tol: f64,
    jump_steps: usize,
    wall_time_s: f64,
    files: Vec<String>,
}

fn default_root(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os("IMPULSE_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_table(dir: &Path, table: &Table) -> Result<()> {
    let path = dir.join(&table.name);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(&table.header)?;
    for row in &table.rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Runs one scenario and writes its artifacts into `dir`.
fn execute(source: &str, origin: String, dir: &Path, tol: Option<f64>, steps: Option<usize>) -> Result<RunOutput> {
    let started = Instant::now();
    let scenario = Scenario::from_json(source)
        .with_context(|| format!("loading {origin}"))?
        .with_overrides(tol, steps);
    let out = scenario.run().with_context(|| format!("running {origin}"))?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut files = Vec::new();
    for table in &out.tables {
        write_table(dir, table)?;
        files.push(table.name.clone());
    }
    write_json(&dir.join("report.json"), &out.report)?;
    files.push("report.json".into());
    for (name, doc) in &out.documents {
        write_json(&dir.join(name), doc)?;
        files.push(name.clone());
    }
    let manifest = Manifest {
        scenario: &out.name,
        source: origin,
        sha256: format!("{:x}", Sha256::digest(source.as_bytes())),
        version: env!("CARGO_PKG_VERSION"),
        task: out.task,
        passed: out.passed,
        expected: out.as_expected(),
        tol: scenario.opts.tol,
        jump_steps: scenario.opts.jump_steps,
        wall_time_s: started.elapsed().as_secs_f64(),
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(out)
}

fn status(out: &RunOutput) -> &'static str {
    if out.passed {
        "pass"
    } else {
        "fail"
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            scenario,
            out,
            tol,
            steps,
        } => {
            let source = fs::read_to_string(&scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let stem = scenario
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("scenario")
                .to_string();
            let dir = out.unwrap_or_else(|| default_root(None).join(&stem));
            let res = execute(&source, scenario.display().to_string(), &dir, tol, steps)?;
            println!("{} [{}] {} -> {}", res.name, res.task, status(&res), dir.display());
            Ok(if res.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILED_CHECK)
            })
        }
        Command::Gallery { name, all, out } => {
            let root = default_root(out);
            let entries: Vec<_> = match (name, all) {
                (Some(n), _) => vec![gallery_entry(&n).with_context(|| format!("no bundled scenario named `{n}`"))?],
                (None, true) => gallery().iter().collect(),
                (None, false) => bail!("give a scenario name or --all"),
            };
            let results: Vec<Result<RunOutput>> = entries
                .par_iter()
                .map(|e| execute(e.source, format!("gallery:{}", e.name), &root.join(e.name), None, None))
                .collect();
            let mut all_expected = true;
            for (entry, res) in entries.iter().zip(results) {
                let res = res?;
                let expected = res.as_expected();
                all_expected &= expected;
                println!(
                    "{:<30} {:<10} {} ({})",
                    entry.name,
                    res.task,
                    status(&res),
                    if expected { "as expected" } else { "UNEXPECTED" }
                );
            }
            Ok(if all_expected {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILED_CHECK)
            })
        }
        Command::Presets => {
            let presets = list_presets();
            println!("shapes:");
            for (name, integral) in &presets.shapes {
                println!("  {name:<8} integral {integral:.12}");
            }
            println!("scenarios:");
            for name in &presets.scenarios {
                println!("  {name}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
