//! Command-line driver for the experiment lifecycle.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
//! `run` additionally exits 3 when any evaluation invariant check fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use futseg_core::error::Error;
use futseg_core::evaluation::ModelVariant;
use futseg_core::pipeline::{JobFilter, Pipeline, RunReport, SampleQuery};
use futseg_core::reporting::SummaryReport;

#[derive(Parser)]
#[command(
    name = "futseg",
    version,
    about = "Learn and evaluate a distribution of plausible future lesion appearances"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic longitudinal dataset described by the config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Overwrite an existing non-empty dataset directory.
        #[arg(long)]
        force: bool,
        /// Override the config's global seed (captured config reflects it).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train all folds and variants, then evaluate and report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Train only this fold (skips evaluation).
        #[arg(long)]
        fold: Option<usize>,
        /// Train only this variant: ours | upper | lower (skips evaluation).
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate existing checkpoints and write records and summaries.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode a queried future for one case from a trained checkpoint.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "case-id")]
        case_id: String,
        /// Target whole-tumor volume as a factor of the current volume.
        #[arg(long = "volume-factor", conflicts_with = "latent")]
        volume_factor: Option<f64>,
        /// Comma-separated latent offset in units of prior sigma, e.g. "0,1,-2".
        #[arg(long)]
        latent: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Regenerate summary tables and figures from existing records.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn error_exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Argument(_) => 1,
        Error::Data(_) | Error::Io { .. } | Error::Shape { .. } | Error::Report(_) => 2,
        Error::Numerical(_) | Error::Stats(_) => 3,
    }
}

fn load_pipeline(config: &PathBuf, seed: Option<u64>) -> Result<Pipeline, Error> {
    match seed {
        None => Pipeline::new(config),
        Some(seed) => {
            let (mut cfg, _) = futseg_core::config::ExperimentConfig::load(config)?;
            cfg.seed = seed;
            Pipeline::from_config(cfg)
        }
    }
}

fn parse_variant(name: &str) -> Result<ModelVariant, Error> {
    match name {
        "ours" => Ok(ModelVariant::Ours),
        "upper" => Ok(ModelVariant::Upper),
        "lower" => Ok(ModelVariant::Lower),
        other => Err(Error::Argument(format!(
            "unknown variant '{other}'; expected ours, upper, or lower"
        ))),
    }
}

fn parse_latent(text: &str) -> Result<Vec<f64>, Error> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Argument(format!("invalid latent component '{s}'")))
        })
        .collect()
}

fn print_summary(summary: &SummaryReport) {
    println!(
        "stratification: large <= {:.4} (n={}), mean change {:.4}, moderate n={}, small n={}{}",
        summary.large_threshold,
        summary.n_large,
        summary.mean_change,
        summary.n_moderate,
        summary.n_small,
        if summary.degenerate_stratification { " [degenerate]" } else { "" }
    );
    for row in &summary.medians {
        println!(
            "median {:<9} {:<6} {:<18} = {:.4}  (n={})",
            row.group.to_string(),
            row.variant.to_string(),
            row.metric.to_string(),
            row.median,
            row.n
        );
    }
    for row in &summary.p_values {
        println!(
            "p {:<9} {:<18} {:<14} = {:.5}",
            row.group.to_string(),
            row.metric.to_string(),
            row.comparison,
            row.p_value
        );
    }
}

fn print_run_report(report: &RunReport) {
    for job in &report.trained {
        println!("trained  {job}");
    }
    for job in &report.skipped {
        println!("skipped  {job} (checkpoint complete)");
    }
    if !report.evaluated {
        println!("evaluation not run (restricted job filter or missing checkpoints)");
        return;
    }
    println!("evaluated {} cases", report.n_eval_cases);
    if let Some(path) = &report.records_path {
        println!("records: {}", path.display());
    }
    if let Some(summary) = &report.summary {
        print_summary(summary);
    }
    for check in &report.checks {
        println!(
            "check {} {:<45} {}",
            if check.passed { "PASS" } else { "FAIL" },
            check.name,
            check.details
        );
    }
}

fn execute(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Generate { config, force, seed } => {
            let pipeline = load_pipeline(&config, seed)?;
            let manifest = pipeline.generate(force)?;
            println!(
                "wrote {} subjects ({} timepoints each) to {}",
                manifest.n_subjects(),
                manifest.params.timepoints_per_subject,
                pipeline.config.dataset_path().display()
            );
            Ok(true)
        }
        Command::Run { config, fold, variant, seed } => {
            let pipeline = load_pipeline(&config, seed)?;
            let filter = JobFilter {
                fold,
                variant: variant.as_deref().map(parse_variant).transpose()?,
            };
            let report = pipeline.run(&filter)?;
            print_run_report(&report);
            Ok(!report.evaluated || report.all_checks_passed)
        }
        Command::Evaluate { config, seed } => {
            let pipeline = load_pipeline(&config, seed)?;
            let report = pipeline.evaluate()?;
            print_run_report(&report);
            Ok(report.all_checks_passed)
        }
        Command::Sample { config, checkpoint, case_id, volume_factor, latent, seed } => {
            let pipeline = load_pipeline(&config, seed)?;
            let query = match (volume_factor, latent) {
                (Some(f), None) => SampleQuery::VolumeFactor(f),
                (None, Some(text)) => SampleQuery::Latent(parse_latent(&text)?),
                _ => {
                    return Err(Error::Argument(
                        "pass exactly one of --volume-factor or --latent".into(),
                    ))
                }
            };
            let report = pipeline.sample(&checkpoint, &case_id, &query)?;
            println!("case {} ({} model)", report.case_id, report.variant);
            println!("current whole-tumor volume: {} voxels", report.current_volume);
            if let Some(requested) = report.requested_volume {
                println!("requested volume: {requested} voxels");
            }
            println!("achieved volume:  {} voxels", report.achieved_volume);
            if let Some(offset) = &report.chosen_offset {
                println!("chosen grid offset: {offset:?}");
            }
            println!("segmentation: {}", report.segmentation_file);
            println!("overlay:      {}", report.overlay_file);
            Ok(true)
        }
        Command::Report { config, seed } => {
            let pipeline = load_pipeline(&config, seed)?;
            let summary = pipeline.report()?;
            print_summary(&summary);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // help/version requests are successes, everything else is usage
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("evaluation invariant checks failed");
            ExitCode::from(3)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(error_exit_code(&err))
        }
    }
}
