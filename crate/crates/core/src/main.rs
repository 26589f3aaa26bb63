use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use unidps::commands::{ablation_json, cmd_ablate, cmd_eval, cmd_fit, cmd_gen, cmd_gradcheck, EvalSource};
use unidps::config::ExperimentConfig;

/// Depth-aware panoptic segmentation on synthetic scenes.
#[derive(Parser, Debug)]
#[command(name = "unidps", version)]
struct Cli {
    /// JSON experiment configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for scene-parallel work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset.
    Fit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.bin`.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint or exported predictions against a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint file or a `fit` output directory.
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory with one `panoptic.png`/`meta.json`/`depth.png` set per scene.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the variant tables.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Gen { out } => {
            let m = cmd_gen(&cfg, &out, cli.jobs)?;
            println!("wrote {} scenes to {}", m.scenes.len(), out.display());
        }
        Command::Fit { dataset, out, resume } => {
            let r = cmd_fit(&cfg, &dataset, &out, cli.jobs, resume)?;
            match r.log.last() {
                Some(l) => println!("step {} total loss {:.6}", l.step, l.loss.total),
                None => println!("no steps run"),
            }
        }
        Command::Eval {
            dataset,
            checkpoint,
            predictions,
            out,
        } => {
            let source = match (checkpoint, predictions) {
                (Some(c), None) => EvalSource::Checkpoint(c),
                (None, Some(p)) => EvalSource::Predictions(p),
                _ => bail!("give exactly one of --checkpoint and --predictions"),
            };
            let r = cmd_eval(&cfg, &dataset, &source, out.as_deref(), cli.jobs)?;
            print_json(&r.to_json()["aggregate"]);
        }
        Command::Gradcheck { out } => {
            let r = cmd_gradcheck(&cfg, out.as_deref())?;
            for t in &r.terms {
                println!(
                    "{:<8} worst rel err {:.3e}  checked {:>4}  skipped {:>3}  {}",
                    t.term,
                    t.worst_rel_error,
                    t.checked,
                    t.skipped,
                    if t.passed { "ok" } else { "FAIL" }
                );
            }
            if !r.passed {
                eprintln!("gradient check failed");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Ablate { dataset, out } => {
            let r = cmd_ablate(&cfg, &dataset, &out, cli.jobs)?;
            print_json(&ablation_json(&r));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UNIDPS_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
