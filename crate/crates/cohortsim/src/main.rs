use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use cohortsim::experiment::gen_cohort;
use cohortsim::{run_experiment, ExperimentConfig, SimError, TypeMix};

#[derive(Debug, Parser)]
#[command(
    name = "cohortsim",
    about = "Synthetic-cohort experiments against CoachMe"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the closed-loop experiment and write a JSON report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep the event log here instead of in memory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Write a synthetic cohort as JSON.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Active,Neutral,Passive weights.
        #[arg(long, default_value = "1,1,1")]
        mix: String,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("cohortsim: [{}] {e}", e.code());
            ExitCode::from(2)
        }
    }
}

fn parse_mix(raw: &str) -> Result<TypeMix, SimError> {
    let parts: Vec<f64> = raw
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| SimError::BadMix(format!("{raw:?}: {e}")))?;
    match parts[..] {
        [active, neutral, passive] => Ok(TypeMix {
            active,
            neutral,
            passive,
        }),
        _ => Err(SimError::BadMix(format!("{raw:?}: expected three weights"))),
    }
}

fn confusion_path(out: &Path) -> PathBuf {
    out.with_extension("confusion.txt")
}

fn run(cli: Cli) -> Result<bool, SimError> {
    match cli.cmd {
        Cmd::Run {
            config,
            out,
            data_dir,
        } => {
            let started = Instant::now();
            let cfg = ExperimentConfig::from_json(&std::fs::read_to_string(&config)?)?;
            let outcome = run_experiment(&cfg, data_dir.as_deref())?;
            let report = &outcome.report;
            std::fs::write(&out, report.to_json())?;
            let mut text = String::from("post-model\n");
            text += &report.post_model.confusion.to_text();
            text += "\nthreshold oracle\n";
            text += &report.oracle.confusion.to_text();
            std::fs::write(confusion_path(&out), text)?;
            for a in &report.assertions {
                let tag = if a.passed { "PASS" } else { "FAIL" };
                eprintln!("[{tag}] {}: {}", a.name, a.detail);
            }
            eprintln!(
                "post-model accuracy {:.4}, oracle {:.4}, {} events, {} ms",
                report.post_model.accuracy,
                report.oracle.accuracy,
                report.delivery.events,
                started.elapsed().as_millis()
            );
            Ok(report.passed)
        }
        Cmd::Gen { n, seed, out, mix } => {
            let cohort = gen_cohort(n, parse_mix(&mix)?, seed)?;
            let mut json = serde_json::to_string_pretty(&cohort).expect("cohort serializes");
            json.push('\n');
            std::fs::write(out, json)?;
            Ok(true)
        }
    }
}
