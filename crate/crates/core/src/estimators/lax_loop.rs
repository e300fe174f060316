//! Joint optimization of θ and the surrogate φ on a discrete objective.

use rand::Rng;

use super::{dlax, reinforce, relax, variance_grad, EstimatorConfig, EstimatorKind, GradEstimate};
use crate::distributions::{one_hot, Family, RelaxedSample};
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Tape, Var};
use crate::optim::{OptKind, OptState};
use crate::stats::WindowVariance;
use crate::surrogate::{flatten, Surrogate, SurrogateVars};

/// Largest `|θᵢ|` tolerated before a run counts as diverged.
pub const THETA_GUARD: f64 = 1e6;

/// `E_{p(b|θ)}[f(b)]` for a Bernoulli vector or a single categorical, `θ` in logit space.
pub struct DiscreteProblem {
    pub family: Family,
    pub dim: usize,
    pub f: Box<dyn Fn(&[f64]) -> f64>,
    /// `f` on relaxed inputs, used by structured surrogates.
    pub f_graph: Box<dyn Fn(&mut Tape, Var) -> Var>,
}

impl DiscreteProblem {
    /// `f(b) = Σᵢ (bᵢ - t)²` over `dim` Bernoulli bits.
    pub fn quadratic(dim: usize, t: f64) -> Self {
        Self {
            family: Family::Bernoulli,
            dim,
            f: Box::new(move |b| b.iter().map(|x| (x - t).powi(2)).sum()),
            f_graph: Box::new(move |tape, x| {
                let d = tape.shift(x, -t);
                let d = tape.square(d);
                tape.sum(d)
            }),
        }
    }

    /// `f(b) = ⟨b, w⟩` for a one-hot `b`.
    pub fn categorical_linear(w: Vec<f64>) -> Self {
        let dim = w.len();
        let wf = w.clone();
        Self {
            family: Family::Categorical,
            dim,
            f: Box::new(move |b| b.iter().zip(&wf).map(|(x, y)| x * y).sum()),
            f_graph: Box::new(move |tape, x| {
                let w = tape.constant(&w);
                tape.dot(x, w)
            }),
        }
    }

    /// Every outcome with its probability.
    pub fn outcomes(&self, logits: &[f64]) -> Vec<(Vec<f64>, f64)> {
        match self.family {
            Family::Bernoulli => {
                assert!(self.dim <= 20, "too many outcomes to enumerate");
                let p: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
                (0..1usize << self.dim)
                    .map(|mask| {
                        let b: Vec<f64> = (0..self.dim).map(|i| ((mask >> i) & 1) as f64).collect();
                        let pr = b
                            .iter()
                            .zip(&p)
                            .map(|(&bi, &pi)| if bi == 1.0 { pi } else { 1.0 - pi })
                            .product();
                        (b, pr)
                    })
                    .collect()
            }
            Family::Categorical => {
                let lse = crate::graph::logsumexp(logits);
                (0..self.dim)
                    .map(|i| (one_hot(self.dim, i), (logits[i] - lse).exp()))
                    .collect()
            }
        }
    }

    pub fn exact_loss(&self, logits: &[f64]) -> f64 {
        self.outcomes(logits).iter().map(|(b, p)| p * (self.f)(b)).sum()
    }

    /// `∂/∂logits E[f(b)]` by enumeration.
    pub fn exact_grad(&self, logits: &[f64]) -> Vec<f64> {
        let outcomes = self.outcomes(logits);
        let mut g = vec![0.0; self.dim];
        match self.family {
            Family::Bernoulli => {
                let p: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
                for (b, pr) in &outcomes {
                    let fb = (self.f)(b);
                    for i in 0..self.dim {
                        g[i] += pr * fb * (b[i] - p[i]);
                    }
                }
            }
            Family::Categorical => {
                let mean = self.exact_loss(logits);
                for (i, (b, pr)) in outcomes.iter().enumerate() {
                    g[i] = pr * ((self.f)(b) - mean);
                }
            }
        }
        g
    }

    pub fn probs(&self, logits: &[f64]) -> Vec<f64> {
        match self.family {
            Family::Bernoulli => logits.iter().map(|&l| sigmoid(l)).collect(),
            Family::Categorical => self.outcomes(logits).into_iter().map(|(_, p)| p).collect(),
        }
    }
}

/// Handles of one estimate built by [`discrete_estimate`].
pub struct DiscreteEstimate {
    pub est: GradEstimate,
    pub theta: Var,
    pub phi: SurrogateVars,
}

/// Registers θ (logits) and φ on `tape` and builds one estimate from `sample`.
pub fn discrete_estimate(
    tape: &mut Tape,
    kind: EstimatorKind,
    problem: &DiscreteProblem,
    surrogate: &Surrogate,
    theta: &[f64],
    sample: &RelaxedSample,
) -> Result<DiscreteEstimate> {
    let family = problem.family;
    let theta_var = tape.param(theta);
    let phi = surrogate.register(tape);
    let fb = (problem.f)(&sample.b);
    let f_graph = &*problem.f_graph;
    let est = {
        let phi = &phi;
        let mut c = |t: &mut Tape, x: Var| surrogate.build(t, phi, x, f_graph);
        match kind {
            EstimatorKind::Reinforce => {
                let logp = family.log_prob_hard(tape, theta_var, &sample.b)?;
                reinforce(tape, theta_var, fb, logp)?
            }
            EstimatorKind::Dlax => dlax(tape, theta_var, theta_var, family, fb, sample, &mut c)?,
            EstimatorKind::Relax | EstimatorKind::Rebar => {
                relax(tape, theta_var, theta_var, family, fb, sample, &mut c)?
            }
            k => return Err(Error::Config(format!("{k} needs a reparameterizable distribution"))),
        }
    };
    Ok(DiscreteEstimate {
        est,
        theta: theta_var,
        phi,
    })
}

/// Step sizes and estimator for [`run_lax_loop`].
#[derive(Clone, Debug)]
pub struct LaxConfig {
    pub estimator: EstimatorConfig,
    pub optimizer: OptKind,
    /// θ step size.
    pub lr: f64,
    /// φ step size as a multiple of `lr`.
    pub cv_lr_scale: f64,
    pub theta_init: Vec<f64>,
    /// Trailing window for the gradient log-variance column.
    pub window: usize,
}

impl LaxConfig {
    pub fn new(estimator: EstimatorConfig, lr: f64, theta_init: Vec<f64>) -> Self {
        Self {
            estimator,
            optimizer: OptKind::Adam,
            lr,
            cv_lr_scale: 1.0,
            theta_init,
            window: 500,
        }
    }

    pub fn validate(&self, problem: &DiscreteProblem) -> Result<()> {
        self.estimator.validate(true)?;
        if !(self.lr > 0.0) || !(self.cv_lr_scale > 0.0) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        if self.theta_init.len() != problem.dim {
            return Err(Error::Config(format!(
                "theta has {} entries, problem needs {}",
                self.theta_init.len(),
                problem.dim
            )));
        }
        if self.window < 2 {
            return Err(Error::Config("variance window must be at least 2".into()));
        }
        Ok(())
    }
}

/// One row of the loop trace, taken before the update of that step.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss_exact: f64,
    pub probs: Vec<f64>,
    pub grad: Vec<f64>,
    /// `None` until the window holds two estimates.
    pub grad_log_var: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct LaxTrace {
    pub rows: Vec<TraceRow>,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

pub fn run_lax_loop<R: Rng + ?Sized>(
    config: &LaxConfig,
    problem: &DiscreteProblem,
    iters: usize,
    rng: &mut R,
) -> Result<LaxTrace> {
    let mut rows = Vec::with_capacity(iters);
    let mut trace = run_lax_loop_with(config, problem, iters, rng, &mut |row| {
        rows.push(row.clone());
        Ok(())
    })?;
    trace.rows = rows;
    Ok(trace)
}

/// Like [`run_lax_loop`] but hands each row to `on_row` instead of storing it.
pub fn run_lax_loop_with<R: Rng + ?Sized>(
    config: &LaxConfig,
    problem: &DiscreteProblem,
    iters: usize,
    rng: &mut R,
    on_row: &mut dyn FnMut(&TraceRow) -> Result<()>,
) -> Result<LaxTrace> {
    config.validate(problem)?;
    let mut surrogate = config.estimator.surrogate.clone();
    let mut theta = config.theta_init.clone();
    let mut phi = surrogate.params();
    let mut theta_opt = OptState::new(config.optimizer, config.lr);
    let mut phi_opt = OptState::new(config.optimizer, config.lr * config.cv_lr_scale);
    let mut window = WindowVariance::new(config.window);
    let mut tape = Tape::new();
    let family = problem.family;

    for step in 0..iters {
        tape.clear();
        let sample = family.sample(&theta, rng);
        let DiscreteEstimate { est, phi: vars, .. } =
            discrete_estimate(&mut tape, config.estimator.kind, problem, &surrogate, &theta, &sample)?;

        window.push(&est.g_theta);
        let row = TraceRow {
            step,
            loss_exact: problem.exact_loss(&theta),
            probs: problem.probs(&theta),
            grad: est.g_theta.clone(),
            grad_log_var: window.mean_log_variance(),
        };
        on_row(&row)?;

        let diverged = |reason: String| Error::Divergence { step, reason };
        if !phi.is_empty() {
            let mut g = flatten(&variance_grad(&tape, &est, &vars.all())?);
            surrogate.add_weight_decay(&mut g);
            phi_opt.step(&mut phi, &g).map_err(|e| match e {
                Error::Divergence { reason, .. } => diverged(reason),
                e => e,
            })?;
            surrogate.set_params(&phi);
        }
        theta_opt.step(&mut theta, &est.g_theta).map_err(|e| match e {
            Error::Divergence { reason, .. } => diverged(reason),
            e => e,
        })?;
        if let Some(x) = theta.iter().chain(&phi).find(|x| !x.is_finite() || x.abs() > THETA_GUARD) {
            return Err(diverged(format!("parameter reached {x}")));
        }
    }

    Ok(LaxTrace {
        rows: Vec::new(),
        theta,
        phi,
    })
}
