use std::path::PathBuf;
use std::process::ExitCode;

use action_guidance::harness::{evaluate, parse_config, run_experiment};
use clap::{Parser, Subcommand};
use gridrts::TaskId;

#[derive(Parser)]
#[command(name = "action-guidance", version, about = "Train and evaluate action-guided PPO agents on gridrts tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run; settings resolve as strategy defaults, then --config, then flags.
    Train {
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        strategy: Option<String>,
        /// Skip a policy's update when its reward stream is all zero in the batch.
        #[arg(long)]
        plo: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        total_timesteps: Option<u64>,
        #[arg(long)]
        shift: Option<u64>,
        #[arg(long)]
        adaptation: Option<u64>,
        #[arg(long)]
        epsilon_end: Option<f64>,
        /// Parent directory for the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Flat `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Any other setting, as `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Roll out a checkpoint's main policy and report its sparse return.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: TaskId,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Train {
            task,
            strategy,
            plo,
            seed,
            total_timesteps,
            shift,
            adaptation,
            epsilon_end,
            out,
            config,
            set,
            resume,
            quiet,
        } => {
            let mut overrides = Vec::new();
            for kv in &set {
                let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
                overrides.push((k.to_string(), v.to_string()));
            }
            let mut flag = |k: &str, v: Option<String>| {
                if let Some(v) = v {
                    overrides.push((k.to_string(), v));
                }
            };
            flag("task", task);
            flag("strategy", strategy);
            flag("plo", plo.then(|| "true".to_string()));
            flag("seed", seed.map(|v| v.to_string()));
            flag("total_timesteps", total_timesteps.map(|v| v.to_string()));
            flag("shift", shift.map(|v| v.to_string()));
            flag("adaptation", adaptation.map(|v| v.to_string()));
            flag("epsilon_end", epsilon_end.map(|v| v.to_string()));
            flag("out_dir", out.map(|p| p.display().to_string()));
            let cfg = parse_config(config.as_deref(), &overrides)?;
            let updates = cfg.num_updates();
            let outputs = run_experiment(cfg, resume.as_deref(), |row| {
                if !quiet && (row.update % 10 == 0 || row.update == updates) {
                    eprintln!(
                        "update {}/{} step {} eps {:.3} trailing sparse {:.3} ({:.0}s)",
                        row.update, updates, row.global_step, row.epsilon, row.trailing_reward_sparse, row.wall_seconds
                    );
                }
            })?;
            println!("{}", serde_json::to_string_pretty(&outputs)?);
        }
        Command::Evaluate { checkpoint, task, episodes, seed } => {
            let r = evaluate(&checkpoint, task, episodes, seed)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
