use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdgp::experiments::{
    build_template, diagnose, ingest_csv, run_experiment, standardize_split, synthetic_dataset,
    write_atomic, Dataset, ExperimentConfig, ModelKind,
};
use cdgp::moments::mc_sample_composite;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cdgp",
    version,
    about = "Conditional deep GP regression on time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model on the training split and write results and plot data.
    Fit {
        /// CSV with header `t,y`.
        #[arg(long)]
        data: PathBuf,
        /// se | mixture | sese | cdgp2 | cdgp3
        #[arg(long)]
        model: ModelKind,
        /// Flat TOML experiment config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Learn hyperdata inputs too.
        #[arg(long)]
        optimize_z: bool,
        /// Store the wall-clock runtime in results.json (breaks byte-identical reruns).
        #[arg(long)]
        record_runtime: bool,
    },
    /// Gradient, sampling, PSD and heavy-tail checks; prints a JSON report.
    Diagnose {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model to check (overrides the config; default cdgp2).
        #[arg(long)]
        model: Option<ModelKind>,
        /// Series to build the template from; a small synthetic series otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Draw prior samples of the composite process at the training inputs.
    Sample {
        /// Flat TOML experiment config describing the model.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output CSV (stdout if absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> cdgp::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_data(path: Option<&Path>) -> cdgp::Result<Dataset> {
    match path {
        Some(p) => {
            let ing = ingest_csv(p)?;
            if ing.dropped > 0 {
                eprintln!(
                    "warning: dropped {} malformed rows from {}",
                    ing.dropped,
                    p.display()
                );
            }
            Ok(ing.dataset)
        }
        None => Ok(synthetic_dataset()),
    }
}

fn run(cli: Cli) -> cdgp::Result<bool> {
    match cli.command {
        Command::Fit {
            data,
            model,
            config,
            seed,
            out,
            optimize_z,
            record_runtime,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.model = model;
            cfg.optimize_z |= optimize_z;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let ds = load_data(Some(&data))?;
            let output = run_experiment(&cfg, &ds)?;
            let files = output.write(&out, record_runtime)?;
            let r = &output.results;
            println!(
                "{} on {}: logML {:.4} (restart {}), test RMSE {}",
                r.model,
                r.dataset,
                r.logml,
                r.best_restart,
                r.test_rmse.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(true)
        }
        Command::Diagnose {
            config,
            model,
            data,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            match model {
                Some(m) => cfg.model = m,
                None if config.is_none() => cfg.model = ModelKind::Cdgp2,
                None => {}
            }
            let ds = load_data(data.as_deref())?;
            let report = diagnose(&cfg, &ds)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(report.passed)
        }
        Command::Sample {
            model,
            n,
            seed,
            data,
            out,
        } => {
            let cfg = ExperimentConfig::load(&model)?;
            let ds = load_data(data.as_deref())?;
            let split = standardize_split(&ds, cfg.split_fraction, cfg.time_rescale)?;
            let x = split.x_train();
            let stack = build_template(&cfg, &x, &ds.name)?;
            let samples = mc_sample_composite(&stack, &x, n, seed)?;
            let mut body = split
                .train
                .t
                .iter()
                .map(|t| format!("t={t}"))
                .collect::<Vec<_>>()
                .join(",");
            body.push('\n');
            for row in samples.row_iter() {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                body.push_str(&line.join(","));
                body.push('\n');
            }
            match out {
                Some(p) => write_atomic(&p, body.as_bytes())?,
                None => std::io::stdout().write_all(body.as_bytes())?,
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
