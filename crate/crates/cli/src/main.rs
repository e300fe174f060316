use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relaxgrad::harness::{run_rl, run_toy, run_vae, RlRunConfig, Settings, ToyConfig, VaeRunConfig};
use relaxgrad::Error;

/// Gradient-estimator experiments: toy Bernoulli problem, discrete VAEs and policy gradients.
///
/// Settings come from command-line flags, then the `--config` file (flat key=value lines),
/// then built-in defaults. Traces are written as CSV under `--out` (default `results`).
#[derive(Parser)]
#[command(name = "relaxgrad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimize E[(b - t)²] over a single Bernoulli parameter.
    Toy(ToyArgs),
    /// Train a linear discrete VAE on binary data.
    Vae(VaeArgs),
    /// Train a policy with A2C, LAX or RELAX gradients.
    Rl(RlArgs),
}

#[derive(Args)]
struct Common {
    /// Flat key=value file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// Surrogate step size as a multiple of --lr.
    #[arg(long)]
    cv_lr_scale: Option<String>,
    /// One seed, a list `0,3,7` or a range `0..5`.
    #[arg(long, alias = "seed")]
    seeds: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct ToyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
}

#[derive(Args)]
struct VaeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    layers: Option<String>,
    /// Whitespace-separated 0/1 rows; synthetic noisy-OR data when omitted.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    valid_frac: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    latent: Option<String>,
    #[arg(long)]
    eval_samples: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    probe_samples: Option<String>,
    #[arg(long)]
    data_seed: Option<String>,
}

#[derive(Args)]
struct RlArgs {
    #[command(flatten)]
    common: Common,
    /// cartpole or bandit.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    entropy: Option<String>,
    #[arg(long)]
    episodes: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    /// Comma-separated hidden widths.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    probe_every: Option<String>,
    #[arg(long)]
    probe_episodes: Option<String>,
    #[arg(long)]
    value_baseline: bool,
    #[arg(long)]
    stop_when_solved: bool,
}

fn put(s: &mut Settings, key: &str, v: &Option<String>) {
    if let Some(v) = v {
        s.set(key, v.as_str());
    }
}

fn layered(common: &Common, mut cli: Settings) -> relaxgrad::Result<Settings> {
    put(&mut cli, "estimator", &common.estimator);
    put(&mut cli, "lr", &common.lr);
    put(&mut cli, "cv_lr_scale", &common.cv_lr_scale);
    put(&mut cli, "seeds", &common.seeds);
    put(&mut cli, "out", &common.out);
    let mut s = Settings::layered(common.config.as_deref(), &cli)?;
    if s.get("out").is_none() {
        s.set("out", "results");
    }
    Ok(s)
}

fn run(cli: Cli) -> relaxgrad::Result<String> {
    let mut s = Settings::new();
    match cli.command {
        Command::Toy(a) => {
            put(&mut s, "target", &a.target);
            put(&mut s, "iters", &a.iters);
            put(&mut s, "window", &a.window);
            put(&mut s, "threshold", &a.threshold);
            let cfg = ToyConfig::from_settings(&layered(&a.common, s)?)?;
            Ok(run_toy(&cfg)?.summary)
        }
        Command::Vae(a) => {
            put(&mut s, "layers", &a.layers);
            put(&mut s, "data", &a.data);
            put(&mut s, "valid_frac", &a.valid_frac);
            put(&mut s, "batch", &a.batch);
            put(&mut s, "epochs", &a.epochs);
            put(&mut s, "latent", &a.latent);
            put(&mut s, "eval_samples", &a.eval_samples);
            put(&mut s, "window", &a.window);
            put(&mut s, "probe_samples", &a.probe_samples);
            put(&mut s, "data_seed", &a.data_seed);
            let cfg = VaeRunConfig::from_settings(&layered(&a.common, s)?)?;
            Ok(run_vae(&cfg)?.summary)
        }
        Command::Rl(a) => {
            put(&mut s, "env", &a.env);
            put(&mut s, "gamma", &a.gamma);
            put(&mut s, "entropy", &a.entropy);
            put(&mut s, "episodes", &a.episodes);
            put(&mut s, "batch", &a.batch);
            put(&mut s, "hidden", &a.hidden);
            put(&mut s, "probe_every", &a.probe_every);
            put(&mut s, "probe_episodes", &a.probe_episodes);
            if a.value_baseline {
                s.set("value_baseline", "true");
            }
            if a.stop_when_solved {
                s.set("stop_when_solved", "true");
            }
            let cfg = RlRunConfig::from_settings(&layered(&a.common, s)?)?;
            Ok(run_rl(&cfg)?.summary)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Divergence { .. } => 3,
                _ => 1,
            })
        }
    }
}
