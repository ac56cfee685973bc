use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ardm_dpo::experiment::{report, ExperimentConfig, Run, Stage, StageStatus, PRESETS};
use clap::{Args, Parser, Subcommand};

/// Autoregressive diffusion over continuous tokens, aligned with pairwise
/// preferences. Every stage reads and writes a run directory.
#[derive(Parser, Debug)]
#[command(name = "ardm-dpo", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Built-in preset to start from (base, task-a, task-b, smoke).
    #[arg(long, global = true, conflicts_with = "config")]
    preset: Option<String>,
    /// TOML config file; may `extends = "<preset>"`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set dpo.optimizer.lr=5e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Recompute stages even when their outputs are up to date.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the base model to the data process.
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Mine best/worst preference pairs from base-model candidates.
    GenPrefs {
        /// Reward preset: task-a (token variance) or task-b (oracle likelihood).
        #[arg(long)]
        reward: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        /// Number of pairs to mine.
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Align the base model on the mined pairs.
    Dpo {
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Rejection-sampling fine-tuning baseline.
    Raft {
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Best-of-K baseline on the evaluation prompts.
    Bok {
        #[arg(long, num_args = 1..)]
        k: Vec<usize>,
    },
    /// Score every model in the run on the held-out prompts.
    Eval,
    /// Write table.txt and summary.json for the run.
    Report,
    /// Run every stage in order, then report.
    All,
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::Pretrain { .. } => Stage::Pretrain,
            Command::GenPrefs { .. } => Stage::GenPrefs,
            Command::Dpo { .. } => Stage::Dpo,
            Command::Raft { .. } => Stage::Raft,
            Command::Bok { .. } => Stage::Bok,
            Command::Eval => Stage::Eval,
            Command::All => Stage::All,
            Command::Report => return None,
        })
    }

    /// Subcommand flags as config overrides.
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut set = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                out.push(format!("{key}={v}"));
            }
        };
        match self {
            Command::Pretrain { steps } => set("pretrain.steps", steps.map(|v| v.to_string())),
            Command::GenPrefs { k, pairs, .. } => {
                set("mining.k", k.map(|v| v.to_string()));
                set("mining.pairs", pairs.map(|v| v.to_string()));
            }
            Command::Dpo {
                beta,
                steps,
                eval_every,
            } => {
                set("dpo.beta", beta.map(float));
                set("dpo.steps", steps.map(|v| v.to_string()));
                set("dpo.eval_every", eval_every.map(|v| v.to_string()));
            }
            Command::Raft { iters, k } => {
                set("raft.iterations", iters.map(|v| v.to_string()));
                set("raft.iteration.k", k.map(|v| v.to_string()));
            }
            Command::Bok { k } if !k.is_empty() => {
                let list: Vec<String> = k.iter().map(usize::to_string).collect();
                set("bok.ks", Some(format!("[{}]", list.join(", "))));
            }
            _ => {}
        }
        out
    }
}

fn float(v: f64) -> String {
    let s = v.to_string();
    if s.contains(['.', 'e', 'i', 'n']) {
        s
    } else {
        format!("{s}.0")
    }
}

fn config_text(global: &Global) -> Result<String> {
    if let Some(path) = &global.config {
        return std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()));
    }
    if let Some(name) = &global.preset {
        let cfg = ExperimentConfig::preset(name)
            .with_context(|| format!("unknown preset `{name}`; known presets: {}", PRESETS.join(", ")))?;
        return Ok(cfg.to_toml()?);
    }
    let stored = global.out.join("config.toml");
    if stored.exists() {
        return std::fs::read_to_string(&stored).with_context(|| format!("reading {}", stored.display()));
    }
    Ok(ExperimentConfig::preset("task-a").expect("builtin preset").to_toml()?)
}

fn resolve(global: &Global, command: &Command) -> Result<ExperimentConfig> {
    let mut overrides = global.overrides.clone();
    if let Some(seed) = global.seed {
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend(command.overrides());
    let mut cfg = ExperimentConfig::from_toml_with(&config_text(global)?, &overrides)?;
    if let Command::GenPrefs {
        reward: Some(name),
        k,
        pairs,
    } = command
    {
        let task = match name.as_str() {
            "task-a" | "task-b" => ExperimentConfig::preset(name).expect("builtin preset"),
            other => bail!("unknown reward `{other}`; use task-a or task-b"),
        };
        cfg.reward = task.reward;
        cfg.mining = task.mining;
        cfg.mining.k = k.unwrap_or(cfg.mining.k);
        cfg.mining.pairs = pairs.unwrap_or(cfg.mining.pairs);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn print_report(dir: &Path) -> Result<()> {
    let rep = report(dir)?;
    print!("{}", rep.render_text());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let Some(stage) = cli.command.stage() else {
        return print_report(&cli.global.out);
    };
    let cfg = resolve(&cli.global, &cli.command)?;
    let run = Run::open(cfg, &cli.global.out)
        .with_context(|| format!("opening run directory {}", cli.global.out.display()))?;
    eprintln!("run {} config_hash={}", run.dir.display(), run.config_hash());
    let statuses = run.run(stage, cli.global.force, &mut |line| eprintln!("{line}"))?;
    let ran = statuses.iter().filter(|(_, s)| *s == StageStatus::Ran).count();
    eprintln!("{ran} stage(s) ran, {} up to date", statuses.len() - ran);
    if stage == Stage::All {
        print_report(&cli.global.out)?;
    }
    Ok(())
}
