//! Experiment drivers: seeded RNG streams, layered configuration and CSV traces.

mod config;
mod output;


use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{parse_seeds, EnvName, RlRunConfig, Settings, ToyConfig, VaeRunConfig};
pub use output::{aggregate, cell, read_csv, CsvLog};

use crate::error::{Error, Result};
use crate::estimators::{run_lax_loop_with, DiscreteProblem, EstimatorConfig, EstimatorKind, LaxConfig};
use crate::rl::{CartPole, Env, GaussianBandit, RlConfig, RlRow};
use crate::surrogate::{rebar_surrogate, Activation, Mlp, Relaxation, StructuredSurrogate, Surrogate};
use crate::vae::{train_vae_with, BinaryDataset, LinearVae, NoisyOr, VaeConfig};

/// Independent generator families derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamId {
    Train = 0,
    Probe = 1,
    Init = 2,
    Data = 3,
    Eval = 4,
}

/// ChaCha8 keyed by `seed`, with the stream id selecting a disjoint keystream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub id: StreamId,
}

impl RngStream {
    pub fn new(seed: u64, id: StreamId) -> Self {
        Self { seed, id }
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.id as u64);
        r
    }
}

pub fn stream(seed: u64, id: StreamId) -> ChaCha8Rng {
    RngStream::new(seed, id).rng()
}

/// Per-seed outcomes of a driver plus its one-line summary.
#[derive(Clone, Debug)]
pub struct Report<T> {
    pub outcomes: Vec<T>,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

fn seed_file(out: &Path, stem: &str, seed: u64) -> PathBuf {
    out.join(format!("{stem}_seed{seed}.csv"))
}

fn open_log(out: Option<&Path>, stem: &str, seed: u64, header: &[&str]) -> Result<Option<CsvLog>> {
    out.map(|o| CsvLog::create(&seed_file(o, stem, seed), header)).transpose()
}

fn write(log: &mut Option<CsvLog>, fields: &[String]) -> Result<()> {
    match log {
        Some(l) => l.row(fields),
        None => Ok(()),
    }
}

fn settle<T>(log: Option<CsvLog>, res: Result<T>, files: &mut Vec<PathBuf>) -> Result<T> {
    let Some(mut log) = log else {
        return res;
    };
    files.push(log.path().to_path_buf());
    let res = log.note_divergence(res);
    log.finish()?;
    res
}

fn aggregate_into(out: Option<&Path>, stem: &str, seeds: &[u64], files: &mut Vec<PathBuf>) -> Result<()> {
    if let (Some(o), true) = (out, seeds.len() > 1) {
        let inputs: Vec<PathBuf> = seeds.iter().map(|&s| seed_file(o, stem, s)).collect();
        let path = o.join(format!("{stem}_aggregate.csv"));
        aggregate(&inputs, &path)?;
        files.push(path);
    }
    Ok(())
}

fn fmt_opt<T: std::fmt::Display>(x: &Option<T>) -> String {
    x.as_ref().map_or_else(|| "-".into(), T::to_string)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Control variate used by the toy driver: none, `η·f(σ_λ(z))`, or that plus a small tanh net.
pub fn toy_surrogate<R: Rng + ?Sized>(kind: EstimatorKind, rng: &mut R) -> Result<Surrogate> {
    match kind {
        EstimatorKind::Reinforce => Ok(Surrogate::None),
        EstimatorKind::Rebar => Ok(Surrogate::Structured(rebar_surrogate(Relaxation::Sigmoid, 0.5, 1.0)?)),
        EstimatorKind::Relax => {
            let mut net = Mlp::new(&[1, 10, 1], Activation::Tanh)?;
            net.init_params(rng);
            Ok(Surrogate::Structured(StructuredSurrogate::new(
                Relaxation::Sigmoid,
                0.5,
                None,
                Some(net),
            )?))
        }
        k => Err(Error::Config(format!(
            "unknown estimator '{k}' (valid: reinforce, rebar, relax)"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyOutcome {
    pub seed: u64,
    pub final_loss: f64,
    pub final_prob: f64,
    pub best_loss: f64,
    /// First step whose exact loss is below the configured threshold.
    pub steps_to_threshold: Option<usize>,
    pub final_log_var: Option<f64>,
}

pub const TOY_COLUMNS: [&str; 5] = ["step", "loss_exact", "theta_prob", "grad", "grad_log_var_window"];

pub fn run_toy(config: &ToyConfig) -> Result<Report<ToyOutcome>> {
    let problem = DiscreteProblem::quadratic(1, config.target);
    let stem = format!("toy_{}", config.estimator);
    let out = config.out.as_deref();
    let mut outcomes = Vec::new();
    let mut files = Vec::new();

    for &seed in &config.seeds {
        let surrogate = toy_surrogate(config.estimator, &mut stream(seed, StreamId::Init))?;
        let mut lax = LaxConfig::new(EstimatorConfig::new(config.estimator, surrogate), config.lr, vec![0.0]);
        lax.cv_lr_scale = config.cv_lr_scale;
        lax.window = config.window;
        lax.validate(&problem)?;

        let mut log = open_log(out, &stem, seed, &TOY_COLUMNS)?;
        let mut o = ToyOutcome {
            seed,
            final_loss: f64::NAN,
            final_prob: f64::NAN,
            best_loss: f64::INFINITY,
            steps_to_threshold: None,
            final_log_var: None,
        };
        let res = run_lax_loop_with(&lax, &problem, config.iters, &mut stream(seed, StreamId::Train), &mut |r| {
            o.final_loss = r.loss_exact;
            o.final_prob = r.probs[0];
            o.best_loss = o.best_loss.min(r.loss_exact);
            o.final_log_var = r.grad_log_var;
            if o.steps_to_threshold.is_none() && r.loss_exact < config.threshold {
                o.steps_to_threshold = Some(r.step);
            }
            write(
                &mut log,
                &[
                    r.step.to_string(),
                    cell(Some(r.loss_exact)),
                    cell(Some(r.probs[0])),
                    cell(Some(r.grad[0])),
                    cell(r.grad_log_var),
                ],
            )
        });
        settle(log, res, &mut files)?;
        outcomes.push(o);
    }
    aggregate_into(out, &stem, &config.seeds, &mut files)?;

    let reached: Vec<String> = outcomes.iter().map(|o| fmt_opt(&o.steps_to_threshold)).collect();
    let summary = format!(
        "toy {}: seeds={} best_loss={:.6} final_log_var={} steps_to_{}=[{}]",
        config.estimator,
        outcomes.len(),
        outcomes.iter().map(|o| o.best_loss).fold(f64::INFINITY, f64::min),
        fmt_opt(&mean(outcomes.iter().filter_map(|o| o.final_log_var)).map(|v| format!("{v:.3}"))),
        config.threshold,
        reached.join(","),
    );
    Ok(Report {
        outcomes,
        summary,
        files,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeOutcome {
    pub seed: u64,
    pub initial_train_elbo: f64,
    pub final_train_elbo: f64,
    pub best_valid_elbo: f64,
    pub final_log_var: Option<f64>,
    /// End-of-training encoder-gradient log-variance on the first minibatch.
    pub probe_log_var: Option<f64>,
    /// Mean exact data log-likelihood of the training set (synthetic data only).
    pub bound_proxy: Option<f64>,
    pub steps: usize,
}

pub const VAE_COLUMNS: [&str; 5] = ["epoch", "step", "train_elbo", "valid_elbo", "grad_log_var"];

/// Dataset for a VAE run: the file at `config.data`, or noisy-OR samples from `data_seed`.
pub fn vae_dataset(config: &VaeRunConfig) -> Result<(BinaryDataset, Option<f64>)> {
    match &config.data {
        Some(p) => Ok((BinaryDataset::load(p, config.valid_frac)?, None)),
        None => {
            let mut r = stream(config.data_seed, StreamId::Data);
            let gen = NoisyOr::random(config.dim, config.causes, &mut r);
            let data = gen.dataset(config.n_train, config.n_valid, &mut r);
            let proxy = gen.mean_log_prob(&data.train);
            Ok((data, Some(proxy)))
        }
    }
}

pub fn run_vae(config: &VaeRunConfig) -> Result<Report<VaeOutcome>> {
    let (data, bound_proxy) = vae_dataset(config)?;
    let mut vc = VaeConfig::new(config.estimator);
    vc.lr = config.lr;
    vc.cv_lr_scale = config.cv_lr_scale;
    vc.batch = config.batch;
    vc.epochs = config.epochs;
    vc.eval_samples = config.eval_samples;
    vc.window = config.window;
    vc.validate()?;
    let stem = format!("vae_{}_l{}", config.estimator, config.layers);
    let out = config.out.as_deref();
    let mut outcomes = Vec::new();
    let mut files = Vec::new();

    for &seed in &config.seeds {
        let mut model = LinearVae::new(config.layers, data.d, config.latent).map_err(|e| match e {
            Error::Contract(m) => Error::Config(m),
            e => e,
        })?;
        model.init(&mut stream(seed, StreamId::Init), Some(&data.train_mean()));
        let mut log = open_log(out, &stem, seed, &VAE_COLUMNS)?;
        let mut best_valid = f64::NEG_INFINITY;
        let mut last: Option<(f64, Option<f64>, usize)> = None;
        let res = train_vae_with(
            &mut model,
            &data,
            &vc,
            &mut stream(seed, StreamId::Train),
            &mut stream(seed, StreamId::Eval),
            &mut |r| {
                best_valid = best_valid.max(r.valid_elbo);
                last = Some((r.train_elbo, r.grad_log_var, r.step));
                write(
                    &mut log,
                    &[
                        r.epoch.to_string(),
                        r.step.to_string(),
                        cell(Some(r.train_elbo)),
                        cell(Some(r.valid_elbo)),
                        cell(r.grad_log_var),
                    ],
                )
            },
        );
        let trace = settle(log, res, &mut files)?;
        let probe_log_var = if config.probe_samples >= 2 {
            let n = config.batch.min(data.train.len());
            let xs: Vec<&[f64]> = data.train[..n].iter().map(Vec::as_slice).collect();
            Some(model.probe_log_variance(
                config.estimator,
                trace.surrogate.as_ref(),
                vc.direct_dependence,
                &xs,
                config.probe_samples,
                &mut stream(seed, StreamId::Probe),
            )?)
        } else {
            None
        };
        let (final_train, final_log_var, steps) = last.unwrap_or((trace.initial_train_elbo, None, 0));
        outcomes.push(VaeOutcome {
            seed,
            initial_train_elbo: trace.initial_train_elbo,
            final_train_elbo: final_train,
            best_valid_elbo: best_valid.max(trace.initial_valid_elbo),
            final_log_var,
            probe_log_var,
            bound_proxy,
            steps,
        });
    }
    aggregate_into(out, &stem, &config.seeds, &mut files)?;

    let summary = format!(
        "vae {} layers={}: seeds={} best_valid_elbo={:.3} final_train_elbo={:.3} probe_log_var={} steps={}",
        config.estimator,
        config.layers,
        outcomes.len(),
        outcomes.iter().map(|o| o.best_valid_elbo).fold(f64::NEG_INFINITY, f64::max),
        mean(outcomes.iter().map(|o| o.final_train_elbo)).unwrap_or(f64::NAN),
        fmt_opt(&mean(outcomes.iter().filter_map(|o| o.probe_log_var)).map(|v| format!("{v:.3}"))),
        outcomes.first().map_or(0, |o| o.steps),
    );
    Ok(Report {
        outcomes,
        summary,
        files,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlOutcome {
    pub seed: u64,
    pub solved_at: Option<usize>,
    pub episodes: usize,
    /// Mean over the run's variance probes.
    pub mean_probe: Option<f64>,
    /// Largest 100-episode trailing mean reward.
    pub best_trailing_reward: f64,
}

pub const RL_COLUMNS: [&str; 3] = ["episode", "reward", "solved_flag"];
pub const PROBE_COLUMNS: [&str; 2] = ["episode", "mean_log_variance"];

impl RlRunConfig {
    pub fn env(&self) -> Env {
        match self.env {
            EnvName::CartPole => Env::CartPole(CartPole::new()),
            EnvName::Bandit => Env::Bandit(GaussianBandit::new(self.bandit_target)),
        }
    }

    pub fn rl_config(&self) -> RlConfig {
        let mut c = RlConfig::new(self.estimator);
        c.gamma = self.gamma;
        c.entropy_weight = self.entropy;
        c.lr = self.lr;
        c.cv_lr_scale = self.cv_lr_scale;
        c.episodes = self.episodes;
        c.batch = self.batch;
        c.hidden = self.hidden.clone();
        c.value_baseline = self.value_baseline;
        c.probe_every = self.probe_every;
        c.probe_episodes = self.probe_episodes;
        c.stop_when_solved = self.stop_when_solved;
        c
    }
}

pub fn run_rl(config: &RlRunConfig) -> Result<Report<RlOutcome>> {
    let env = config.env();
    let rc = config.rl_config();
    rc.validate(&env)?;
    let stem = format!("rl_{}_{}", config.estimator, env_label(config.env));
    let probe_stem = format!("{stem}_probe");
    let out = config.out.as_deref();
    let mut outcomes = Vec::new();
    let mut files = Vec::new();

    for &seed in &config.seeds {
        let (mut policy, mut critic) = rc.agent(&env, &mut stream(seed, StreamId::Init))?;
        let mut log = open_log(out, &stem, seed, &RL_COLUMNS)?;
        let mut probe_log = match rc.probe_every {
            0 => None,
            _ => open_log(out, &probe_stem, seed, &PROBE_COLUMNS)?,
        };
        let mut recent = std::collections::VecDeque::new();
        let mut best = f64::NEG_INFINITY;
        let res = crate::rl::train_rl_with(
            &env,
            &mut policy,
            &mut critic,
            &rc,
            &mut stream(seed, StreamId::Train),
            &mut stream(seed, StreamId::Probe),
            &mut |row| match row {
                RlRow::Episode(e) => {
                    recent.push_back(e.reward);
                    if recent.len() > 100 {
                        recent.pop_front();
                    }
                    best = best.max(recent.iter().sum::<f64>() / recent.len() as f64);
                    write(
                        &mut log,
                        &[e.episode.to_string(), cell(Some(e.reward)), u8::from(e.solved).to_string()],
                    )
                }
                RlRow::Probe(p) => write(
                    &mut probe_log,
                    &[p.episode.to_string(), cell(Some(p.mean_log_variance))],
                ),
            },
        );
        let res = settle(probe_log, res, &mut files);
        let trace = settle(log, res, &mut files)?;
        outcomes.push(RlOutcome {
            seed,
            solved_at: trace.solved_at,
            episodes: trace.episodes.len(),
            mean_probe: trace.mean_probe(),
            best_trailing_reward: best,
        });
    }
    aggregate_into(out, &stem, &config.seeds, &mut files)?;
    if rc.probe_every > 0 {
        aggregate_into(out, &probe_stem, &config.seeds, &mut files)?;
    }

    let solved: Vec<String> = outcomes.iter().map(|o| fmt_opt(&o.solved_at)).collect();
    let summary = format!(
        "rl {} {}: seeds={} solved={}/{} episodes_to_solve=[{}] best_trailing_reward={:.1} mean_probe={}",
        config.estimator,
        env_label(config.env),
        outcomes.len(),
        outcomes.iter().filter(|o| o.solved_at.is_some()).count(),
        outcomes.len(),
        solved.join(","),
        outcomes.iter().map(|o| o.best_trailing_reward).fold(f64::NEG_INFINITY, f64::max),
        fmt_opt(&mean(outcomes.iter().filter_map(|o| o.mean_probe)).map(|v| format!("{v:.3}"))),
    );
    Ok(Report {
        outcomes,
        summary,
        files,
    })
}

fn env_label(e: EnvName) -> &'static str {
    match e {
        EnvName::CartPole => "cartpole",
        EnvName::Bandit => "bandit",
    }
}
