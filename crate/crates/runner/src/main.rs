use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentrl::numcore::Checkpoint;
use latentrl_runner::config::OUTPUT_DIR_ENV;
use latentrl_runner::pipeline::checkpoint_policy;
use latentrl_runner::{export_plot_data, inspect, run, ConfigSources, ExperimentConfig, Result, RunError};

#[derive(Parser)]
#[command(name = "latentrl", version, about = "Latent flow policy RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every verb that resolves a config. Precedence, lowest
/// first: defaults, `--config`, the output-directory environment variable,
/// then the flags below.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// TOML experiment config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `seed`
    #[arg(long)]
    seed: Option<u64>,
    /// `output_dir` (also settable through LATENTRL_OUTPUT_DIR)
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// `stages`, comma separated: sft,rl,rl-baseline,eval
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
    /// `rl.steps`
    #[arg(long)]
    rl_steps: Option<usize>,
    /// `baseline.steps`
    #[arg(long)]
    baseline_steps: Option<usize>,
    /// Any other key, as `dotted.key=value` (repeatable).
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigFlags {
    fn sources(&self) -> Result<ConfigSources> {
        let mut overrides = Vec::new();
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        if let Some(stages) = &self.stages {
            let quoted: Vec<String> = stages.iter().map(|s| format!("\"{}\"", s.trim())).collect();
            overrides.push(("stages".into(), format!("[{}]", quoted.join(","))));
        }
        if let Some(n) = self.rl_steps {
            overrides.push(("rl.steps".into(), n.to_string()));
        }
        if let Some(n) = self.baseline_steps {
            overrides.push(("baseline.steps".into(), n.to_string()));
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| RunError::Config(format!("`--set {kv}` is not KEY=VALUE")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(dir) = &self.output_dir {
            overrides.push(("output_dir".into(), toml_string(&dir.display().to_string())));
        }
        Ok(ConfigSources {
            file: self.config.clone(),
            env_output_dir: std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from),
            overrides,
        })
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured stages.
    Run(ConfigFlags),
    /// Evaluate a checkpoint (latent model or baseline) without training.
    Eval {
        /// Checkpoint written by an earlier run.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Write CSV plot data from a run directory.
    Export {
        #[arg(long)]
        run_dir: PathBuf,
        /// Defaults to `<run-dir>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint's metadata and per-slice norms.
    InspectCheckpoint { path: PathBuf },
    /// Print the fully resolved config as TOML.
    InspectConfig(ConfigFlags),
}

fn execute(cli: Cli) -> Result<()> {
    let mut progress = |line: &str| eprintln!("{line}");
    match cli.command {
        Command::Run(flags) => {
            let cfg = ExperimentConfig::resolve(&flags.sources()?)?;
            let outcome = run(&cfg, &mut progress)?;
            println!("{}", outcome.dir.display());
        }
        Command::Eval { checkpoint, flags } => {
            let mut sources = flags.sources()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let key = match checkpoint_policy(&ckpt) {
                Some("ar") => "baseline.init_checkpoint",
                Some("ladi") => "init_checkpoint",
                other => {
                    return Err(RunError::Config(format!(
                        "{}: unknown checkpoint policy {other:?}",
                        checkpoint.display()
                    )))
                }
            };
            sources.overrides.push(("stages".into(), "[\"eval\"]".into()));
            sources
                .overrides
                .push((key.into(), toml_string(&checkpoint.display().to_string())));
            let cfg = ExperimentConfig::resolve(&sources)?;
            let outcome = run(&cfg, &mut progress)?;
            for s in &outcome.summaries {
                println!("{}", serde_json::to_string(s).map_err(|e| RunError::Config(e.to_string()))?);
            }
        }
        Command::Export { run_dir, out } => {
            let out = out.unwrap_or_else(|| run_dir.join("plots"));
            for p in export_plot_data(&run_dir, &out)? {
                println!("{}", p.display());
            }
        }
        Command::InspectCheckpoint { path } => print!("{}", inspect::describe_checkpoint(&path)?),
        Command::InspectConfig(flags) => print!("{}", ExperimentConfig::resolve(&flags.sources()?)?.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
