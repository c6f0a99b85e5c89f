//! `lvio` command line: `simulate`, `run` and `eval`.
//!
//! Exit codes: 0 success, 1 input error, 2 numerical failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use super::dataset::{load_trajectory, Dataset};
use super::eval::{evaluate_ate, AteMode};
use super::pipeline::{export, run_pipeline, Ablation, PipelineConfig};
use super::scene::SceneConfig;
use super::simulate::generate_scene;
use super::{ingest, HarnessError};
use crate::util::fmt_sig;

#[derive(Debug, Parser)]
#[command(name = "lvio", version, about = "LiDAR-visual-inertial estimation on synthetic planar scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the estimator on a dataset directory and export its results.
    Run {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's measurement selection.
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
    },
    /// Score an estimated trajectory file against ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "paper", value_parser = parse_mode)]
        mode: AteMode,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<AteMode, String> {
    match s {
        "paper" => Ok(AteMode::Paper),
        "rmse" => Ok(AteMode::Rmse),
        other => Err(format!("unknown mode {other:?} (expected paper or rmse)")),
    }
}

/// Execute a parsed command, returning the summary line for stdout.
pub fn execute(cmd: &Command) -> Result<String, HarnessError> {
    match cmd {
        Command::Simulate { config, seed, out } => {
            let cfg = SceneConfig::load(config)?;
            let data: Dataset = generate_scene(&cfg, *seed)?;
            data.write(out)?;
            Ok(format!(
                "images {} scans {} imu {} out {}",
                data.images.len(),
                data.scans.len(),
                data.imu.len(),
                out.display()
            ))
        }
        Command::Run {
            data,
            config,
            out,
            ablation,
        } => {
            let mut cfg = PipelineConfig::load(config)?;
            if let Some(a) = ablation {
                cfg.ablation = *a;
            }
            let data = ingest(data)?;
            let result = run_pipeline(&data, &cfg)?;
            let report = evaluate_ate(&result.trajectory, &data.ground_truth, AteMode::Paper)?;
            export(&result, Some(&report), out)?;
            if let Some(why) = &result.truncated {
                log::warn!("run truncated: {why}");
            }
            Ok(format!(
                "frames {} map_points {} centroids {} ablation {} ate {}",
                result.trajectory.len(),
                result.map_points.len(),
                result.centroids.len(),
                cfg.ablation.as_str(),
                fmt_sig(report.ate)
            ))
        }
        Command::Eval { est, gt, mode } => {
            let est = load_trajectory(est)?;
            let gt = load_trajectory(gt)?;
            let r = evaluate_ate(&est, &gt, *mode)?;
            Ok(format!(
                "ate {} mode {} matched {} length {}",
                fmt_sig(r.ate),
                r.mode.as_str(),
                r.errors.len(),
                fmt_sig(r.length)
            ))
        }
    }
}

/// Parse `args` (including the program name), run, print, and return the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(line) => {
            println!("{line}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
