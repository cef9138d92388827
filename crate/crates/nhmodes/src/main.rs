use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use nhmodes::error::{Error, Result};
use nhmodes::pipeline::{self, RunReport, Stage};
use nhmodes::scenario::{load_scenario, Format};

#[derive(Parser)]
#[command(name = "nhmodes", version, about = "Non-Hermitean resonator modes, Petermann factors, Fock algebra and atom decay")]
struct Cli {
    /// Scenario file (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `output.directory` of the scenario
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `solve.seed`
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Solve and store the biorthonormal mode basis
    Modes,
    /// Overlap matrices and Petermann factors
    Petermann,
    /// Operator identities, Hamiltonians and eigenstates in the truncated Fock space
    FockVerify,
    /// Boundary coupling integrals against an external mode family
    Surface,
    /// Excited-state decay of a two-level atom
    Decay,
    /// Runs the selected stages
    Run {
        /// `all` or a comma list of modes,algebra,fock,surface,decay
        #[arg(long, default_value = "all")]
        stages: String,
    },
    /// Rewrites a stored report.json as JSON or CSV tables
    Export {
        /// Path of report.json
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: ExportFormat,
    },
}

fn run(cli: Cli) -> Result<bool> {
    if let Command::Export { report, format } = &cli.command {
        let r = pipeline::load_report(report)?;
        let out = cli.out.clone().unwrap_or_else(|| report.parent().unwrap_or(Path::new(".")).to_path_buf());
        let f = match format {
            ExportFormat::Json => Format::Json,
            ExportFormat::Csv => Format::Csv,
        };
        for p in pipeline::export_results(&r, &out, f)? {
            println!("{}", p.display());
        }
        return Ok(true);
    }
    let config = cli.config.as_ref().ok_or_else(|| Error::Validation {
        key: "--config".into(),
        reason: "a scenario file is required".into(),
    })?;
    let mut scenario = load_scenario(config)?;
    if let Some(seed) = cli.seed {
        scenario.solve.seed = seed;
    }
    let base = config.parent().unwrap_or(Path::new("."));
    let stages = match &cli.command {
        Command::Modes => vec![Stage::Modes],
        Command::Petermann => vec![Stage::Algebra],
        Command::FockVerify => vec![Stage::Fock],
        Command::Surface => vec![Stage::Surface],
        Command::Decay => vec![Stage::Decay],
        Command::Run { stages } => pipeline::parse_stages(stages)?,
        Command::Export { .. } => unreachable!(),
    };
    let out = cli.out.clone().unwrap_or_else(|| base.join(&scenario.output.directory));
    let report = pipeline::run_pipeline(&scenario, &stages, base, &out)?;
    summarize(&report, &out);
    Ok(report.passed())
}

fn summarize(r: &RunReport, out: &Path) {
    for o in &r.outcomes {
        let status = match (&o.message, o.hard_failures.is_empty()) {
            (Some(m), _) => format!("error: {m}"),
            (None, true) => "ok".to_string(),
            (None, false) => format!("{} invariant(s) violated", o.hard_failures.len()),
        };
        println!("{:<8} {status}", o.stage.to_string());
        for f in &o.hard_failures {
            println!("         {f}");
        }
    }
    if let Some(a) = &r.algebra {
        for p in &a.petermann {
            println!("mode {:>2}  |γ|² = {:.6}  K = {:.6}", p.theta, p.gamma_abs_sq, p.k);
        }
    }
    if let Some(d) = &r.decay {
        for run in &d.runs {
            println!(
                "{:<8} Γ_fit = {:.6}  Γ_markov = {:.6}  ratio = {:.4}",
                run.label, run.fit.rate, run.markov.gamma_e, run.ratio_to_first
            );
        }
    }
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    println!("results in {}", out.display());
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
