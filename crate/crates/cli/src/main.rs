//! `shiftcal` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or validation
//! error. Progress goes to stdout; machine-readable results go to files
//! only. All randomness flows from explicit seeds.

mod commands;
mod manifest;
mod pipeline;

use clap::{Parser, Subcommand};
use shiftcal_core::Error as CoreError;

#[derive(Parser)]
#[command(
    name = "shiftcal",
    version,
    about = "Uncertainty quantification for regression under distribution shift"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a spec JSON.
    GenSynth {
        /// Synthetic spec JSON file.
        #[arg(long)]
        spec: String,
        /// Output corpus JSONL path.
        #[arg(long)]
        out: String,
    },
    /// Partition a corpus into subject-disjoint train/val/calib/test splits.
    Split {
        #[arg(long)]
        data: String,
        /// Comma-separated fractions train,val,calib,test summing to 1.
        #[arg(long, default_value = "0.7,0.1,0.1,0.1")]
        fractions: String,
        #[arg(long)]
        seed: u64,
        /// Output splits manifest JSON.
        #[arg(long)]
        out: String,
    },
    /// Train a model (or seed set / ensemble) per a train config JSON.
    Train {
        #[arg(long)]
        data: String,
        #[arg(long)]
        splits: String,
        /// JSON with "backbone", "train", and optional "mode"/"k"/"seeds".
        #[arg(long)]
        config: String,
        /// Output checkpoint directory.
        #[arg(long)]
        out: String,
    },
    /// Produce predictive distributions for a split or whole corpus.
    Predict {
        /// Checkpoint directory, or comma-separated list for ensembles.
        #[arg(long)]
        ckpt: String,
        /// "mcd" or "ensemble".
        #[arg(long)]
        mode: String,
        /// MC-dropout passes.
        #[arg(long, default_value_t = shiftcal_core::uq::DEFAULT_MC_PASSES)]
        t: usize,
        #[arg(long)]
        data: String,
        /// Optional splits manifest; with --split selects one split.
        #[arg(long)]
        splits: Option<String>,
        /// Split name (train/val/calib/test); "all" or omitted = whole file.
        #[arg(long, default_value = "all")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: String,
    },
    /// Fit a recalibrator on calibration predictions.
    Recalibrate {
        /// cp | ts | ir
        #[arg(long)]
        method: String,
        #[arg(long)]
        calib: String,
        #[arg(long)]
        out: String,
    },
    /// Apply a fitted recalibrator to predictions.
    Apply {
        #[arg(long)]
        recal: String,
        #[arg(long)]
        preds: String,
        #[arg(long)]
        out: String,
    },
    /// Evaluate predictions: MAE, interval scores, bootstrap CIs.
    Evaluate {
        #[arg(long)]
        preds: String,
        #[arg(long, default_value = "method")]
        method_id: String,
        #[arg(long, default_value_t = 1000)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: String,
    },
    /// Earth mover's distance between the label distributions of two corpora.
    Emd {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long)]
        out: String,
    },
    /// Tiered statistical comparison of several prediction sets.
    Compare {
        /// Repeated name=preds.csv pairs.
        #[arg(long = "preds", required = true)]
        preds: Vec<String>,
        /// mae | summary
        #[arg(long, default_value = "summary")]
        metric: String,
        #[arg(long, default_value = "id")]
        slice: String,
        #[arg(long, default_value_t = 1000)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output tier table JSON.
        #[arg(long)]
        out: String,
        /// Optional flat CSV mirror of the tier table.
        #[arg(long)]
        csv: Option<String>,
    },
    /// Merge evaluation reports and tier tables into one flat CSV.
    Report {
        /// Comma-separated evaluation report JSONs (slice=path entries).
        #[arg(long, default_value = "")]
        reports: String,
        /// Comma-separated tier table JSONs.
        #[arg(long, default_value = "")]
        tiers: String,
        #[arg(long)]
        out: String,
    },
    /// Run the full pipeline from one config JSON.
    Pipeline {
        #[arg(long)]
        config: String,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth { spec, out } => commands::gen_synth(&spec, &out),
        Command::Split {
            data,
            fractions,
            seed,
            out,
        } => commands::split(&data, &fractions, seed, &out),
        Command::Train {
            data,
            splits,
            config,
            out,
        } => commands::train(&data, &splits, &config, &out),
        Command::Predict {
            ckpt,
            mode,
            t,
            data,
            splits,
            split,
            seed,
            out,
        } => commands::predict(&ckpt, &mode, t, &data, splits.as_deref(), &split, seed, &out),
        Command::Recalibrate { method, calib, out } => {
            commands::recalibrate(&method, &calib, &out)
        }
        Command::Apply { recal, preds, out } => commands::apply(&recal, &preds, &out),
        Command::Evaluate {
            preds,
            method_id,
            replicates,
            seed,
            out,
        } => commands::evaluate(&preds, &method_id, replicates, seed, &out),
        Command::Emd { a, b, out } => commands::emd(&a, &b, &out),
        Command::Compare {
            preds,
            metric,
            slice,
            replicates,
            seed,
            out,
            csv,
        } => commands::compare(&preds, &metric, &slice, replicates, seed, &out, csv.as_deref()),
        Command::Report { reports, tiers, out } => commands::report(&reports, &tiers, &out),
        Command::Pipeline { config } => pipeline::run(&config),
    };
    match result {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<CoreError>()
                .map_or_else(|| classify_anyhow(&err), classify_core);
            std::process::exit(code);
        }
    }
}

fn classify_core(err: &CoreError) -> i32 {
    if err.is_usage() {
        2
    } else {
        1
    }
}

fn classify_anyhow(err: &anyhow::Error) -> i32 {
    // missing inputs and malformed configs are usage errors
    if err.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::NotFound)
    }) {
        2
    } else if err.to_string().starts_with("config:") {
        2
    } else {
        1
    }
}
