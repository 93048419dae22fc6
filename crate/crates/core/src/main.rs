use clap::{Parser, Subcommand};
use driftscale::config::RunConfig;
use driftscale::pipeline::{self, StageSet};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "driftscale",
    version,
    about = "Upscaling toolkit for diffusion with strong nonlinear drift on perforated periodic media"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the data-assumption checks and report every check with evidence.
    Validate { config: PathBuf },
    /// Run the pipeline stages and write artifacts.
    Run {
        config: PathBuf,
        /// Comma-separated subset of cell,tensors,macro,micro,sweep,properties.
        #[arg(long)]
        stages: Option<String>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override for sampled checks.
        #[arg(long)]
        seed: Option<u64>,
        /// Dump assembled operators in MatrixMarket format.
        #[arg(long)]
        dump_matrices: bool,
    },
    /// Run the fine-grid reference solves used to mint frozen test values.
    Oracle {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = RunConfig::load(&config).map_err(|e| e.to_string())?;
            match driftscale::config::validate(&cfg) {
                Ok(report) => {
                    for (name, ok, evidence) in &report.checks {
                        println!("{} {:8} {}", if *ok { "PASS" } else { "FAIL" }, name, evidence);
                    }
                    for w in &report.warnings {
                        println!("WARN          {w}");
                    }
                    println!("validation passed");
                    Ok(())
                }
                Err(e) => Err(e.to_string()),
            }
        }
        Command::Run {
            config,
            stages,
            out,
            seed,
            dump_matrices,
        } => {
            let cfg = RunConfig::load(&config).map_err(|e| e.to_string())?;
            let stage_set = match stages {
                None => StageSet::all(),
                Some(spec) => StageSet::parse(&spec)?,
            };
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
            let artifacts = pipeline::run(&cfg, stage_set, &out_dir, seed, dump_matrices)
                .map_err(|e| e.to_string())?;
            if let Some(a) = artifacts.fixed_point_a {
                println!("fixed-point drift average: {a:.12}");
            }
            if let Some(t) = &artifacts.tensors {
                println!(
                    "effective drift: [{:.12}, {:.12}]",
                    t.b_star[0], t.b_star[1]
                );
            }
            if let Some(table) = &artifacts.micro_table {
                for row in &table.rows {
                    println!(
                        "eps = {:>8.5}  e0 = {:.6e}  e1 = {:.6e}",
                        row.epsilon, row.error_order0, row.error_order1
                    );
                }
            }
            println!("manifest: {}", artifacts.manifest_path.display());
            Ok(())
        }
        Command::Oracle { config, out } => {
            let cfg = RunConfig::load(&config).map_err(|e| e.to_string())?;
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
            pipeline::run_oracle(&cfg, &out_dir).map_err(|e| e.to_string())?;
            println!("oracle report: {}", out_dir.join("oracle_report.json").display());
            Ok(())
        }
    }
}
