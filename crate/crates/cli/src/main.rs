//! Command-line driver: data generation, training, evaluation, feature export
//! and ablation sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccl::clustering::FeatureLayer;
use ccl::harness::train::write_metrics_csv;
use ccl::harness::{
    evaluate, export_embeddings, generate_synthetic, run_sweep, train, Checkpoint, DatasetBundle,
    Sweep, TrainConfig,
};
use ccl::scoring::ScoreKind;
use ccl::{CclError, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ccl",
    version,
    about = "Cluster-aware contrastive OOD detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Key-value config file; `--set` entries take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        config.apply_overrides(&self.overrides)?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write `checkpoint.bin` and `metrics.csv`.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Bundle directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a bundle with a trained checkpoint and write the reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        score: Option<ScoreKind>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        layer: Option<FeatureLayer>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one layer's features for every set as CSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "embedding")]
        layer: FeatureLayer,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a named ablation sweep: losses, layer, update, centers or scores.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        sweep: Sweep,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn bundle_for(data: Option<&Path>, config: &TrainConfig) -> Result<DatasetBundle> {
    match data {
        Some(dir) => DatasetBundle::load(dir),
        None => generate_synthetic(&config.data, config.seed),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let config = config.resolve()?;
            let bundle = generate_synthetic(&config.data, config.seed)?;
            bundle.save(&out)?;
            log::info!("wrote bundle to {}", out.display());
        }
        Command::Train { config, data, out } => {
            let config = config.resolve()?;
            let bundle = bundle_for(data.as_deref(), &config)?;
            let outcome = train(&config, &bundle)?;
            fs::create_dir_all(&out)?;
            write_metrics_csv(&out.join("metrics.csv"), &config, &outcome.metrics)?;
            Checkpoint {
                config,
                model: outcome.model,
                clusters: outcome.clusters,
            }
            .save(&out.join("checkpoint.bin"))?;
            log::info!("refits at epochs {:?}", outcome.refit_epochs);
        }
        Command::Eval {
            checkpoint,
            data,
            score,
            k,
            layer,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let c = &ckpt.config;
            let bundle = bundle_for(data.as_deref(), c)?;
            let report = evaluate(
                &ckpt.model,
                &bundle,
                score.unwrap_or(c.score_kind),
                k.unwrap_or(c.k_top),
                layer.unwrap_or(c.score_layer),
                &c.short_hash(),
            )?;
            report.write(&out)?;
            print!("{}", report.summary_csv());
        }
        Command::Export {
            checkpoint,
            data,
            layer,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let bundle = bundle_for(data.as_deref(), &ckpt.config)?;
            export_embeddings(&ckpt.model, &bundle, layer, &out)?;
        }
        Command::Ablate {
            config,
            sweep,
            seeds,
            out,
        } => {
            let config = config.resolve()?;
            if seeds == 0 {
                return Err(CclError::Config("need at least one seed".into()));
            }
            let result = run_sweep(&config, sweep, &(0..seeds).collect::<Vec<_>>())?;
            for kind in [ScoreKind::Cos, ScoreKind::Var] {
                println!("score {kind}\n{}", result.table(kind));
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("runs.csv"), result.runs_csv())?;
                fs::write(dir.join("summary.csv"), result.summary_csv())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
