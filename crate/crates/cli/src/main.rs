use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowiar::checkpoint::Checkpoint;
use flowiar::envs::EnvVersion;
use flowiar::error::{Error, Result};
use flowiar::harness::{self, Ablation, ExperimentSpec, XAxis};

#[derive(Parser)]
#[command(name = "flowiar", version, about = "Flow policies with invalid-action rejection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment spec.
    Train {
        spec: PathBuf,
        /// Dotted override, e.g. `--set train.lr=0.001`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on fixed evaluation seeds.
    Evaluate {
        checkpoint: PathBuf,
        /// Refuse to run unless the checkpoint was trained on this environment.
        #[arg(long)]
        env: Option<String>,
        #[arg(long, default_value_t = 10)]
        n_episodes: usize,
        /// Seeds whose initial states get a 200-draw action histogram.
        #[arg(long = "probe-seed")]
        probe_seeds: Vec<u64>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plot a metric across runs. Each directory is one labelled group.
    Plot {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "steps")]
        x_axis: String,
        #[arg(long, default_value = "mean_return")]
        y: String,
        /// Plot the running maximum.
        #[arg(long)]
        best_till_now: bool,
        /// Output path without extension.
        #[arg(long, default_value = "plot")]
        out: PathBuf,
    },
    /// Run a paired ablation from a base spec.
    Ablate {
        name: String,
        spec: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check an experiment spec, or an ERA graph file with `--era`.
    ValidateConfig {
        path: PathBuf,
        #[arg(long)]
        era: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { spec, overrides } => {
            let spec = ExperimentSpec::load(&spec, &overrides)?;
            for out in harness::train_all(&spec)? {
                let last = out.records.last().map_or(f64::NAN, |r| r.mean_return);
                println!("seed {}: final mean return {last:.3} -> {}", out.seed, out.dir.display());
            }
        }
        Command::Evaluate { checkpoint, env, n_episodes, probe_seeds, out } => {
            let env = env.map(|e| e.parse::<EnvVersion>()).transpose()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let report = harness::evaluate_checkpoint(&ck, env, n_episodes, &probe_seeds)?;
            let json = serde_json::to_string_pretty(&report).expect("report serialises");
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
            eprintln!("mean return {:.3} ± {:.3} over {n_episodes} episodes", report.mean_return, report.std_return);
        }
        Command::Plot { runs, x_axis, y, best_till_now, out } => {
            let x: XAxis = x_axis.parse()?;
            let groups = runs
                .iter()
                .map(|d| Ok((d.display().to_string(), harness::collect_runs(d)?)))
                .collect::<Result<Vec<_>>>()?;
            let files = harness::plot(&groups, x, &y, best_till_now, &out)?;
            println!("{}\n{}\n{}", files.svg.display(), files.data.display(), files.summary.display());
        }
        Command::Ablate { name, spec, overrides } => {
            let which: Ablation = name.parse()?;
            let spec = ExperimentSpec::load(&spec, &overrides)?;
            for arm in harness::ablate(which, &spec)? {
                println!(
                    "{}: final return {:.3}, valid fraction {:.3} -> {:.3}, {} seed(s) starved",
                    arm.label, arm.final_return, arm.first_valid_fraction, arm.final_valid_fraction, arm.starved_seeds
                );
            }
        }
        Command::ValidateConfig { path, era } => println!("ok: {}", harness::validate_file(&path, era)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                ref v if harness::is_validation_error(v) => ExitCode::from(2),
                Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
