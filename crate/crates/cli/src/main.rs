//! `drstage`: reproducible diabetic-retinopathy staging runs from the
//! command line. Subcommands wire manifest ingestion, fine-tuning,
//! evaluation, explainability, and report rendering; one master seed fans
//! out to the named substreams of each component.

mod commands;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "drstage",
    version,
    about = "Diabetic retinopathy staging pipeline"
)]
struct Cli {
    /// Run configuration document (JSON); flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config document.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config document.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate manifests, apply the exclusion rules, and write filtered
    /// manifests plus a per-rule exclusion summary.
    Ingest {
        /// Manifest CSV paths (repeatable).
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Run a fine-tuning experiment described by the config document.
    Train,
    /// Evaluate a checkpoint on a manifest and write the report files.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Bootstrap resample count; 0 disables interval estimation.
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
    },
    /// Write rollout heatmaps for one image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Which heatmaps to write.
        #[arg(long, default_value = "both", value_parser = ["both", "gradrollout", "rollout"])]
        method: String,
        /// Fraction of update-matrix entries zeroed in grad-rollout.
        #[arg(long, default_value_t = 0.10)]
        drop_fraction: f64,
        /// Overlay blend weight.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Render a stored evaluation report as a text summary, optionally
    /// testing significance against another run's resample distribution.
    Report {
        /// Run directory containing report.json.
        #[arg(long, conflicts_with = "report")]
        run: Option<PathBuf>,
        /// Path of a report.json.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Another run directory to compare against (Mann-Whitney U over the
        /// per-resample metric values).
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Metric compared when --compare is given.
        #[arg(long, default_value = "mse")]
        metric: String,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let globals = commands::Globals {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Ingest { manifests } => commands::ingest(&globals, &manifests),
        Command::Train => commands::train(&globals),
        Command::Evaluate {
            checkpoint,
            manifest,
            bootstrap,
        } => commands::evaluate(&globals, &checkpoint, &manifest, bootstrap),
        Command::Explain {
            checkpoint,
            image,
            method,
            drop_fraction,
            alpha,
        } => commands::explain(&globals, &checkpoint, &image, &method, drop_fraction, alpha),
        Command::Report {
            run,
            report,
            compare,
            metric,
        } => commands::report(run.as_deref(), report.as_deref(), compare.as_deref(), &metric),
    }
}
