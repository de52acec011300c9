use clap::{Parser, Subcommand};
use lesionbench::runner::{self, ExperimentConfig, Failure, Layout, Report};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "lesionbench", version, about = "Unsupervised lesion detection benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated detector names to keep.
    #[arg(long, value_delimiter = ',')]
    detectors: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets.
    Synth(Common),
    /// Crop, normalize and resize every split.
    Preprocess(Common),
    /// Fit detectors (reusing checkpoints by content hash).
    Train(Common),
    /// Write difference maps for the test split.
    Score(Common),
    /// Compute metrics, ROC files and the report.
    Eval(Common),
    /// Render panels and ROC overlays from the report.
    Plot(Common),
    /// All stages.
    Run(Common),
}

fn load(c: &Common) -> lesionbench::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(names) = &c.detectors {
        cfg.select_detectors(names)?;
    }
    let out = c.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    cfg.out = Some(out.clone());
    cfg.validate()?;
    Ok((cfg, out))
}

fn finish(failures: &[Failure]) -> ExitCode {
    for f in failures {
        let who = f.detector.as_deref().map(|d| format!("{}/{d}", f.dataset)).unwrap_or_else(|| f.dataset.clone());
        eprintln!("failed: {} {who}: {}", f.stage, f.error);
    }
    if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn print_rows(report: &Report) {
    println!("{:<14} {:<16} {:>7} {:>7} {:>7}", "dataset", "detector", "AUC", "mDSC", "t*");
    for r in &report.rows {
        println!("{:<14} {:<16} {:>7.4} {:>7.4} {:>7.4}", r.dataset, r.detector, r.auc, r.mdsc, r.threshold);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = (|| -> lesionbench::Result<Vec<Failure>> {
        Ok(match &cli.command {
            Command::Synth(c) | Command::Preprocess(c) | Command::Train(c) | Command::Score(c) => {
                let (cfg, out) = load(c)?;
                std::fs::create_dir_all(&out)?;
                let layout = Layout::new(&out);
                match &cli.command {
                    Command::Synth(_) => runner::synth(&cfg, &layout),
                    Command::Preprocess(_) => runner::preprocess(&cfg, &layout),
                    Command::Train(_) => runner::train(&cfg, &layout),
                    _ => runner::score(&cfg, &layout),
                }
            }
            Command::Eval(c) => {
                let (cfg, out) = load(c)?;
                let report = runner::evaluate(&cfg, &Layout::new(&out))?;
                print_rows(&report);
                report.failures
            }
            Command::Plot(c) => {
                let (cfg, out) = load(c)?;
                let report = Report::load(&Layout::new(&out).report())?;
                let written = runner::emit_plots(&report, &out, cfg.report.max_panels)?;
                println!("{} images written to {}", written.len(), Layout::new(&out).plots().display());
                Vec::new()
            }
            Command::Run(c) => {
                let (cfg, out) = load(c)?;
                let report = runner::run(&cfg, &out)?;
                print_rows(&report);
                report.failures
            }
        })
    })();
    match result {
        Ok(failures) => finish(&failures),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
