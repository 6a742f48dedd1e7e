use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fmba::evaluate::{run_eval_ate, run_eval_depth};
use fmba::solve::run_solve;
use fmba::synthgen::run_synthgen;
use fmba::train_demo::run_train_demo;
use fmba::{exit_code, RunConfig};
use fmba_core::io::write_json;
use fmba_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fmba", version, about = "Feature-metric bundle adjustment pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Synthgen(Common),
    /// Run the BA layer on every tracklet of a dataset.
    Solve(Common),
    /// Median-scaled depth metrics of a solve output.
    EvalDepth(Common),
    /// Snippet ATE of a solve output.
    EvalAte(Common),
    /// Train the feature network and damping MLP end to end.
    TrainDemo(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory, overriding the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Solve output to evaluate, overriding the config.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output = Some(o.clone());
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = Some(d.clone());
        }
        if let Some(p) = &self.predictions {
            cfg.eval.predictions = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_report<T: Serialize>(cfg: &RunConfig, name: &str, report: &T) -> Result<()> {
    let out = cfg.output_dir()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(name), report)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::invalid(e.to_string()))?;
    println!("{json}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthgen(c) => {
            let cfg = c.config()?;
            let summary = run_synthgen(&cfg)?;
            println!("{}", serde_json::to_string(&summary).map_err(|e| Error::invalid(e.to_string()))?);
        }
        Command::Solve(c) => {
            let cfg = c.config()?;
            let manifest = run_solve(&cfg)?;
            println!("solved {} tracklets", manifest.tracklets.len());
        }
        Command::EvalDepth(c) => {
            let cfg = c.config()?;
            let report = run_eval_depth(&cfg)?;
            write_report(&cfg, "eval_depth.json", &report)?;
        }
        Command::EvalAte(c) => {
            let cfg = c.config()?;
            let report = run_eval_ate(&cfg)?;
            write_report(&cfg, "eval_ate.json", &report)?;
        }
        Command::TrainDemo(c) => {
            let cfg = c.config()?;
            let report = run_train_demo(&cfg)?;
            println!(
                "loss {:.6} -> {:.6} (ratio {:.3}) over {} steps",
                report.initial, report.last, report.ratio, report.steps
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
