//! Command-line front end: training runs, checkpoint evaluation,
//! interpolation manifests, and plot rendering.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metadreamer::{EnvId, Error, ProbeConfig, Result, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "metadreamer", version, about = "Meta-RL with latent-space imagination")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full training loop and write artifacts.
    Train(ConfigArgs),
    /// Train only the task encoder and world model; imagination and
    /// policy updates are skipped.
    TrainWorldmodel(ConfigArgs),
    /// Score a trained checkpoint with the metric suite.
    Eval(EvalArgs),
    /// Compose interpolated tasks from a checkpoint and emit their
    /// manifest.
    Interpolate(InterpolateArgs),
    /// Render traversal heatmaps, rollout profiles, and a learning
    /// curve from a checkpoint and its metric logs.
    Plot(PlotArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Environment picking the default configuration.
    #[arg(long, default_value = "nav2d")]
    env: String,
    /// Key-value config file; an `env` key inside it wins over --env.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, repeatable: --set seed=3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => TrainConfig::from_kv_text(&std::fs::read_to_string(path)?)?,
            None => TrainConfig::default_for(EnvId::parse(&self.env)?),
        };
        for kv in &self.overrides {
            let Some((key, value)) = kv.split_once('=') else {
                return Err(Error::Config(format!(
                    "--set wants KEY=VALUE, got `{kv}`"
                )));
            };
            config.apply_override(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint file written by a training run.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to write the metric CSV; defaults to report.csv next to
    /// the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the fast training-time probe instead of the full one.
    #[arg(long)]
    quick: bool,
}

#[derive(Args)]
struct InterpolateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint file written by a training run.
    #[arg(long)]
    checkpoint: PathBuf,
    /// How many tasks to compose; defaults to the config value.
    #[arg(long)]
    count: Option<usize>,
    /// Where to write the manifest; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint file written by a training run.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory; defaults to plots/ next to the checkpoint.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Metric CSVs feeding the learning curve, one per seed; defaults
    /// to metrics.csv next to the checkpoint.
    #[arg(long = "metrics", value_name = "CSV")]
    metrics: Vec<PathBuf>,
}

fn run_train(args: &ConfigArgs, worldmodel_only: bool) -> Result<()> {
    let mut config = args.load()?;
    if worldmodel_only {
        config.policy_steps = 0;
        config.enable_ir = false;
        config.enable_i = false;
    }
    let mut trainer = Trainer::new(config)?;
    let artifacts = trainer.run_with(|log| {
        println!(
            "iter {:>4}  elbo {:>11.4}  critic {:>9.4}  actor {:>9.4}  \
             probe {:>5.1}%  return {:>9.3}  gate {}",
            log.iteration,
            log.elbo.total,
            log.critic_loss,
            log.actor_loss,
            log.disentanglement,
            log.mean_return,
            if log.gate_open { "open" } else { "shut" },
        );
    })?;
    println!("artifacts in {}", artifacts.out_dir.display());
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let config = args.config.load()?;
    let mut trainer = Trainer::load(config, &args.checkpoint)?;
    let probe = if args.quick {
        ProbeConfig::quick(
            trainer.config().probe_pairs,
            trainer.config().probe_rollout_len,
        )
    } else {
        ProbeConfig::full(trainer.config().probe_rollout_len)
    };
    let report = trainer.evaluate(&probe)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.checkpoint.with_file_name("report.csv"));
    std::fs::write(&out, report.to_csv())?;
    print!("{}", report.summary());
    println!("report written to {}", out.display());
    Ok(())
}

fn run_interpolate(args: &InterpolateArgs) -> Result<()> {
    let config = args.config.load()?;
    let mut trainer = Trainer::load(config, &args.checkpoint)?;
    let manifest = trainer.interpolate_manifest(args.count)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &manifest)?;
            println!("manifest written to {}", path.display());
        }
        None => print!("{manifest}"),
    }
    Ok(())
}

/// The mean_return column of a training metric log.
fn returns_column(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::Artifact(format!("missing metric log {}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Artifact(format!("{} is empty", path.display())))?;
    let column = header
        .split(',')
        .position(|c| c == "mean_return")
        .ok_or_else(|| {
            Error::Artifact(format!("{} has no mean_return column", path.display()))
        })?;
    lines
        .map(|line| {
            let cell = line.split(',').nth(column).ok_or_else(|| {
                Error::Artifact(format!("short row in {}", path.display()))
            })?;
            cell.parse::<f64>()
                .map_err(|_| Error::Artifact(format!("bad number `{cell}` in {}", path.display())))
        })
        .collect()
}

fn run_plot(args: &PlotArgs) -> Result<()> {
    let config = args.config.load()?;
    let mut trainer = Trainer::load(config, &args.checkpoint)?;
    let beside = |name: &str| args.checkpoint.with_file_name(name);
    let out_dir = args.out_dir.clone().unwrap_or_else(|| beside("plots"));
    let metric_files = if args.metrics.is_empty() {
        vec![beside("metrics.csv")]
    } else {
        args.metrics.clone()
    };
    let per_seed: Vec<Vec<f64>> = metric_files
        .iter()
        .map(|p| returns_column(p))
        .collect::<Result<_>>()?;
    for path in trainer.emit_plots(&out_dir, &per_seed)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => run_train(args, false),
        Command::TrainWorldmodel(args) => run_train(args, true),
        Command::Eval(args) => run_eval(args),
        Command::Interpolate(args) => run_interpolate(args),
        Command::Plot(args) => run_plot(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_tree_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_apply_on_top_of_env_defaults() {
        let args = ConfigArgs {
            env: "cartpole".into(),
            config: None,
            overrides: vec!["seed=9".into(), "beta = 2.5".into()],
        };
        let config = args.load().unwrap();
        assert_eq!(config.env, EnvId::CartPole);
        assert_eq!(config.seed, 9);
        assert_eq!(config.beta, 2.5);
    }

    #[test]
    fn malformed_overrides_are_config_errors() {
        let args = ConfigArgs {
            env: "nav2d".into(),
            config: None,
            overrides: vec!["seed".into()],
        };
        assert!(matches!(args.load(), Err(Error::Config(_))));

        let args = ConfigArgs {
            env: "atlantis".into(),
            config: None,
            overrides: vec![],
        };
        assert_eq!(args.load().unwrap_err().exit_code(), 2);
    }
}
