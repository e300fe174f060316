//! Policy-gradient estimators for episodic tasks: A2C, LAX-RL and RELAX-RL.
//!
//! Each estimator builds one episode's gradient on a tape with the policy
//! parameters as a single flat leaf θ and the critic as a flat leaf φ, so the
//! variance objective `∂ĝ²/∂φ` comes from the same graph.

mod env;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

pub use env::{Action, ActionSpace, CartPole, EnumeratedPath, Env, GaussianBandit, TabularMdp, Transition};

use crate::distributions::{gaussian_log_prob, gaussian_reparam_sample, one_hot, Family, RelaxedSample};
use crate::error::{contract, Error, Result};
use crate::estimators::{variance_grad, GradEstimate, THETA_GUARD};
use crate::graph::{logsumexp, Tape, Var};
use crate::optim::{OptKind, OptState};
use crate::stats::{mean_log_variance, RunningStats};
use crate::surrogate::{Activation, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RlKind {
    A2c,
    LaxRl,
    RelaxRl,
}

impl RlKind {
    pub const ALL: [RlKind; 3] = [RlKind::A2c, RlKind::LaxRl, RlKind::RelaxRl];

    pub fn name(self) -> &'static str {
        match self {
            RlKind::A2c => "a2c",
            RlKind::LaxRl => "lax",
            RlKind::RelaxRl => "relax",
        }
    }
}

impl fmt::Display for RlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RlKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a2c" => Ok(RlKind::A2c),
            "lax" | "lax-rl" => Ok(RlKind::LaxRl),
            "relax" | "relax-rl" => Ok(RlKind::RelaxRl),
            other => Err(Error::Config(format!(
                "unknown RL estimator '{other}' (valid: a2c, lax, relax)"
            ))),
        }
    }
}

/// `G_t = Σ_{t' ≥ t} γ^{t'-t} r_{t'}`, for `γ ∈ (0, 1]`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for t in (0..rewards.len()).rev() {
        g = rewards[t] + gamma * g;
        out[t] = g;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyHead {
    Categorical,
    /// Mean from the network, state-independent log standard deviation.
    Gaussian,
}

/// `π(a|s, θ)`; θ is the network parameters followed by `log_std` for Gaussian heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub net: Mlp,
    pub head: PolicyHead,
    pub log_std: Vec<f64>,
}

/// Noise behind one action, kept so estimators can rebuild the sample on a tape.
#[derive(Clone, Debug, PartialEq)]
pub enum Noise {
    None,
    Relaxed(RelaxedSample),
    Gaussian(Vec<f64>),
}

impl Policy {
    /// ReLU hidden layers with zeroed parameters.
    pub fn new(obs_dim: usize, hidden: &[usize], space: ActionSpace) -> Result<Self> {
        let (out, head) = match space {
            ActionSpace::Discrete(k) if k >= 2 => (k, PolicyHead::Categorical),
            ActionSpace::Discrete(k) => return contract(format!("a categorical policy needs at least 2 actions, got {k}")),
            ActionSpace::Continuous(d) => (d, PolicyHead::Gaussian),
        };
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(out);
        let net = Mlp::new(&sizes, Activation::Relu)?;
        let log_std = match head {
            PolicyHead::Categorical => Vec::new(),
            PolicyHead::Gaussian => vec![0.0; out],
        };
        Ok(Self { net, head, log_std })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.net.init_params(rng);
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params() + self.log_std.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.net.params.clone();
        p.extend_from_slice(&self.log_std);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let n = self.net.num_params();
        self.net.params.copy_from_slice(&p[..n]);
        self.log_std.copy_from_slice(&p[n..]);
    }

    pub fn num_actions(&self) -> usize {
        self.net.output_size()
    }

    /// Action probabilities of a categorical head.
    pub fn probs(&self, s: &[f64]) -> Result<Vec<f64>> {
        if self.head != PolicyHead::Categorical {
            return contract("probabilities are defined for categorical policies only");
        }
        let l = self.net.eval(s)?;
        let lse = logsumexp(&l);
        Ok(l.iter().map(|x| (x - lse).exp()).collect())
    }

    pub fn act(&self, s: &[f64], rng: &mut dyn RngCore) -> Result<(Action, Noise)> {
        let h = self.net.eval(s)?;
        match self.head {
            PolicyHead::Categorical => {
                let sample = Family::Categorical.sample(&h, rng);
                Ok((Action::Discrete(sample.category()), Noise::Relaxed(sample)))
            }
            PolicyHead::Gaussian => {
                let eps: Vec<f64> = h.iter().map(|_| rng.sample(StandardNormal)).collect();
                let a = h
                    .iter()
                    .zip(&self.log_std)
                    .zip(&eps)
                    .map(|((m, s), e)| m + s.exp() * e)
                    .collect();
                Ok((Action::Continuous(a), Noise::Gaussian(eps)))
            }
        }
    }

    /// Logits or mean at state `s`.
    pub fn head_node(&self, tape: &mut Tape, theta: Var, s: &[f64]) -> Result<Var> {
        let x = tape.constant(s);
        self.net.forward_flat(tape, theta, 0, x)
    }

    /// Log standard deviations, stored after the network weights in `theta`.
    pub fn log_std_node(&self, tape: &mut Tape, theta: Var) -> Var {
        tape.slice(theta, self.net.num_params(), self.log_std.len())
    }

    fn log_prob_node(&self, tape: &mut Tape, theta: Var, head: Var, a: &Action) -> Result<Var> {
        match (self.head, a) {
            (PolicyHead::Categorical, Action::Discrete(i)) => {
                if *i >= self.num_actions() {
                    return contract(format!("action {i} out of range"));
                }
                Family::Categorical.log_prob_hard(tape, head, &one_hot(self.num_actions(), *i))
            }
            (PolicyHead::Gaussian, Action::Continuous(x)) => {
                if x.len() != self.log_std.len() {
                    return contract("action dimension does not match the policy");
                }
                let ls = self.log_std_node(tape, theta);
                let x = tape.constant(x);
                Ok(gaussian_log_prob(tape, head, ls, x))
            }
            _ => contract("action type does not match the policy head"),
        }
    }

    pub fn log_prob(&self, s: &[f64], a: &Action) -> Result<f64> {
        let mut tape = Tape::new();
        let theta = tape.constant(&self.params());
        let head = self.head_node(&mut tape, theta, s)?;
        let lp = self.log_prob_node(&mut tape, theta, head, a)?;
        Ok(tape.scalar_value(lp))
    }

    /// `∂ log π(a|s)/∂θ`.
    pub fn log_prob_grad(&self, s: &[f64], a: &Action) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let theta = tape.param(&self.params());
        let head = self.head_node(&mut tape, theta, s)?;
        let lp = self.log_prob_node(&mut tape, theta, head, a)?;
        Ok(tape.backward_wrt(lp, &[theta])?.remove(0))
    }
}

/// Control variate `ĉ(x, s) + V(s)` and/or a state-value baseline.
///
/// For A2C only `v` is used. For LAX-RL and RELAX-RL `c` takes the action or
/// relaxed sample concatenated with the state; `v` is optional. Flat layout:
/// `c` parameters, then `v` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub c: Option<Mlp>,
    pub v: Option<Mlp>,
}

impl Critic {
    pub fn none() -> Self {
        Self { c: None, v: None }
    }

    pub fn value(obs_dim: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self {
            c: None,
            v: Some(net(obs_dim, hidden)?),
        })
    }

    pub fn surrogate(input_dim: usize, obs_dim: usize, hidden: &[usize], with_value: bool) -> Result<Self> {
        Ok(Self {
            c: Some(net(input_dim + obs_dim, hidden)?),
            v: if with_value { Some(net(obs_dim, hidden)?) } else { None },
        })
    }

    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for m in self.c.iter_mut().chain(self.v.iter_mut()) {
            m.init_params(rng);
        }
    }

    fn c_len(&self) -> usize {
        self.c.as_ref().map_or(0, Mlp::num_params)
    }

    pub fn num_params(&self) -> usize {
        self.c_len() + self.v.as_ref().map_or(0, Mlp::num_params)
    }

    pub fn params(&self) -> Vec<f64> {
        self.c.iter().chain(&self.v).flat_map(|m| m.params.iter().copied()).collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let n = self.c_len();
        if let Some(c) = &mut self.c {
            c.params.copy_from_slice(&p[..n]);
        }
        if let Some(v) = &mut self.v {
            v.params.copy_from_slice(&p[n..]);
        }
    }

    /// All critic parameters as one leaf; `None` when there are none.
    pub fn register(&self, tape: &mut Tape) -> Option<Var> {
        (self.num_params() > 0).then(|| tape.param(&self.params()))
    }

    fn v_node(&self, tape: &mut Tape, phi: Option<Var>, s: &[f64]) -> Result<Option<Var>> {
        match (&self.v, phi) {
            (Some(v), Some(phi)) => {
                let x = tape.constant(s);
                Ok(Some(v.forward_flat(tape, phi, self.c_len(), x)?))
            }
            _ => Ok(None),
        }
    }

    /// `ĉ(concat(x, s)) + V(s)`, or zero without a surrogate.
    pub fn c_node(&self, tape: &mut Tape, phi: Option<Var>, x: Var, s: &[f64]) -> Result<Var> {
        let out = match (&self.c, phi) {
            (Some(c), Some(phi)) => {
                let sv = tape.constant(s);
                let input = tape.concat(x, sv);
                c.forward_flat(tape, phi, 0, input)?
            }
            _ => tape.scalar(0.0),
        };
        Ok(match self.v_node(tape, phi, s)? {
            Some(v) => tape.add(out, v),
            None => out,
        })
    }
}

fn net(input: usize, hidden: &[usize]) -> Result<Mlp> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    Mlp::new(&sizes, Activation::Relu)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub action: Action,
    pub noise: Noise,
    pub reward: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Checks `H(z_t) = H(z̃_t) = a_t` for every relaxed step.
    pub fn check(&self) -> Result<()> {
        for (t, s) in self.steps.iter().enumerate() {
            if let (Noise::Relaxed(r), Action::Discrete(a)) = (&s.noise, &s.action) {
                Family::Categorical.check(r)?;
                if r.category() != *a {
                    return contract(format!("step {t}: relaxed sample disagrees with action {a}"));
                }
            }
        }
        Ok(())
    }
}

/// Runs one episode to completion.
pub fn rollout(env: &mut Env, policy: &Policy, rng: &mut dyn RngCore) -> Result<Trajectory> {
    let mut steps = Vec::new();
    let mut s = env.reset(rng);
    loop {
        let (action, noise) = policy.act(&s, rng)?;
        let tr = env.step(&action, rng)?;
        steps.push(Step {
            state: s,
            action,
            noise,
            reward: tr.reward,
        });
        if tr.done {
            return Ok(Trajectory { steps });
        }
        s = tr.obs;
    }
}

/// One episode's estimate and the tape handles it was built from.
#[derive(Clone, Debug)]
pub struct RlEstimate {
    /// Policy gradient of the expected return (ascent direction), without the entropy bonus.
    pub est: GradEstimate,
    pub theta: Var,
    pub phi: Option<Var>,
    heads: Vec<Var>,
}

/// `Σ_t ∂log π(a_t|s_t)/∂θ · [G_t - V(s_t)]`.
pub fn a2c_grad(tape: &mut Tape, policy: &Policy, critic: &Critic, traj: &Trajectory, gamma: f64) -> Result<RlEstimate> {
    if critic.c.is_some() {
        return contract("the A2C baseline must depend on the state only");
    }
    let theta = tape.param(&policy.params());
    let phi = critic.register(tape);
    let returns = discounted_returns(&traj.rewards(), gamma);
    let mut seeds = Vec::with_capacity(traj.len());
    let mut heads = Vec::with_capacity(traj.len());
    for (step, &g) in traj.steps.iter().zip(&returns) {
        let head = policy.head_node(tape, theta, &step.state)?;
        let logp = policy.log_prob_node(tape, theta, head, &step.action)?;
        let gv = tape.scalar(g);
        let seed = match critic.v_node(tape, phi, &step.state)? {
            Some(v) => tape.sub(gv, v),
            None => gv,
        };
        seeds.push((logp, seed));
        heads.push(head);
    }
    let score = tape.vjp(&seeds, theta)?;
    let est = GradEstimate::assemble(tape, score, None)?;
    Ok(RlEstimate { est, theta, phi, heads })
}

/// `Σ_t ∂log π(a_t|s_t)/∂θ · [G_t - c(a_t, s_t)] + ∂c(a(ε_t, s_t, θ), s_t)/∂θ`.
pub fn lax_rl_grad(tape: &mut Tape, policy: &Policy, critic: &Critic, traj: &Trajectory, gamma: f64) -> Result<RlEstimate> {
    if policy.head != PolicyHead::Gaussian {
        return contract("lax-rl needs a reparameterizable policy; use relax-rl for discrete actions");
    }
    let theta = tape.param(&policy.params());
    let phi = critic.register(tape);
    let returns = discounted_returns(&traj.rewards(), gamma);
    let mut score_seeds = Vec::with_capacity(traj.len());
    let mut path_outs = Vec::with_capacity(traj.len());
    let mut heads = Vec::with_capacity(traj.len());
    for (t, (step, &g)) in traj.steps.iter().zip(&returns).enumerate() {
        let Noise::Gaussian(eps) = &step.noise else {
            return contract(format!("step {t} has no stored Gaussian noise"));
        };
        let mean = policy.head_node(tape, theta, &step.state)?;
        let ls = policy.log_std_node(tape, theta);
        let a = gaussian_reparam_sample(tape, mean, ls, eps);
        let a_fixed = tape.stop_gradient(a);
        let logp = gaussian_log_prob(tape, mean, ls, a_fixed);
        let c = critic.c_node(tape, phi, a, &step.state)?;
        let gv = tape.scalar(g);
        let seed = tape.sub(gv, c);
        score_seeds.push((logp, seed));
        path_outs.push(c);
        heads.push(mean);
    }
    let score = tape.vjp(&score_seeds, theta)?;
    let one = tape.scalar(1.0);
    let path_seeds: Vec<(Var, Var)> = path_outs.into_iter().map(|c| (c, one)).collect();
    let path = tape.vjp(&path_seeds, theta)?;
    let est = GradEstimate::assemble(tape, score, Some(path))?;
    Ok(RlEstimate { est, theta, phi, heads })
}

/// `Σ_t ∂log π(a_t|s_t)/∂θ · [G_t - c(z̃_t, s_t)] - ∂c(z̃_t, s_t)/∂θ + ∂c(z_t, s_t)/∂θ`.
pub fn relax_rl_grad(tape: &mut Tape, policy: &Policy, critic: &Critic, traj: &Trajectory, gamma: f64) -> Result<RlEstimate> {
    if policy.head != PolicyHead::Categorical {
        return contract("relax-rl needs a categorical policy");
    }
    let family = Family::Categorical;
    let theta = tape.param(&policy.params());
    let phi = critic.register(tape);
    let returns = discounted_returns(&traj.rewards(), gamma);
    let mut score_seeds = Vec::with_capacity(traj.len());
    let mut path_seeds = Vec::with_capacity(2 * traj.len());
    let mut heads = Vec::with_capacity(traj.len());
    let one = tape.scalar(1.0);
    let minus_one = tape.scalar(-1.0);
    for (t, (step, &g)) in traj.steps.iter().zip(&returns).enumerate() {
        let (Noise::Relaxed(sample), Action::Discrete(a)) = (&step.noise, &step.action) else {
            return contract(format!("step {t} has no stored relaxed sample"));
        };
        family.check(sample)?;
        if sample.category() != *a {
            return contract(format!("step {t}: relaxed sample disagrees with action {a}"));
        }
        let logits = policy.head_node(tape, theta, &step.state)?;
        let z = family.relaxed_node(tape, logits, &sample.u);
        let zt = family.conditional_node(tape, logits, &sample.b, &sample.v);
        if family.hard(tape.value(z)) != sample.b || family.hard(tape.value(zt)) != sample.b {
            return contract(format!("step {t}: rebuilt relaxed sample disagrees with action {a}"));
        }
        let logp = family.log_prob_hard(tape, logits, &sample.b)?;
        let cz = critic.c_node(tape, phi, z, &step.state)?;
        let czt = critic.c_node(tape, phi, zt, &step.state)?;
        let gv = tape.scalar(g);
        let seed = tape.sub(gv, czt);
        score_seeds.push((logp, seed));
        path_seeds.push((cz, one));
        path_seeds.push((czt, minus_one));
        heads.push(logits);
    }
    let score = tape.vjp(&score_seeds, theta)?;
    let path = tape.vjp(&path_seeds, theta)?;
    let est = GradEstimate::assemble(tape, score, Some(path))?;
    Ok(RlEstimate { est, theta, phi, heads })
}

pub fn rl_grad(
    tape: &mut Tape,
    kind: RlKind,
    policy: &Policy,
    critic: &Critic,
    traj: &Trajectory,
    gamma: f64,
) -> Result<RlEstimate> {
    match kind {
        RlKind::A2c => a2c_grad(tape, policy, critic, traj, gamma),
        RlKind::LaxRl => lax_rl_grad(tape, policy, critic, traj, gamma),
        RlKind::RelaxRl => relax_rl_grad(tape, policy, critic, traj, gamma),
    }
}

/// Exact `∂/∂θ Σ_t H(π(·|s_t))` over the visited states of an estimate.
pub fn entropy_grad(tape: &mut Tape, policy: &Policy, est: &RlEstimate) -> Result<Vec<f64>> {
    let mut total: Option<Var> = None;
    for &head in &est.heads {
        let h = match policy.head {
            PolicyHead::Categorical => {
                let ls = tape.log_softmax(head);
                let p = tape.exp(ls);
                let pl = tape.mul(p, ls);
                let s = tape.sum(pl);
                tape.neg(s)
            }
            // The constant ½ log(2πe) per coordinate drops out of the gradient.
            PolicyHead::Gaussian => {
                let ls = policy.log_std_node(tape, est.theta);
                tape.sum(ls)
            }
        };
        total = Some(match total {
            Some(t) => tape.add(t, h),
            None => h,
        });
    }
    match total {
        Some(t) => Ok(tape.backward_wrt(t, &[est.theta])?.remove(0)),
        None => Ok(vec![0.0; policy.num_params()]),
    }
}

/// `∂/∂φ` of the mean squared error `(G_t - V(s_t))²`; zero outside the `V` block.
pub fn value_grad(critic: &Critic, traj: &Trajectory, gamma: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let Some(phi) = critic.register(&mut tape) else {
        return Ok(Vec::new());
    };
    if critic.v.is_none() || traj.is_empty() {
        return Ok(vec![0.0; critic.num_params()]);
    }
    let returns = discounted_returns(&traj.rewards(), gamma);
    let mut total: Option<Var> = None;
    for (step, &g) in traj.steps.iter().zip(&returns) {
        let v = critic.v_node(&mut tape, Some(phi), &step.state)?.expect("value head present");
        let d = tape.shift(v, -g);
        let sq = tape.square(d);
        total = Some(match total {
            Some(t) => tape.add(t, sq),
            None => sq,
        });
    }
    let loss = tape.scale(total.expect("non-empty"), 1.0 / traj.len() as f64);
    Ok(tape.backward_wrt(loss, &[phi])?.remove(0))
}

/// Mean over policy parameters of the floored log sample variance of the
/// estimator over `n` fresh episodes. Policy and critic stay fixed.
pub fn variance_probe(
    env: &Env,
    kind: RlKind,
    policy: &Policy,
    critic: &Critic,
    gamma: f64,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if n < 2 {
        return contract(format!("variance probe needs at least 2 episodes, got {n}"));
    }
    let mut env = env.clone();
    let mut tape = Tape::new();
    let mut stats = RunningStats::new(policy.num_params());
    for _ in 0..n {
        let traj = rollout(&mut env, policy, rng)?;
        tape.clear();
        let est = rl_grad(&mut tape, kind, policy, critic, &traj, gamma)?;
        stats.push(&est.est.g_theta);
    }
    Ok(mean_log_variance(&stats.variance()))
}

fn path_terms(policy: &Policy, mdp: &TabularMdp, path: &EnumeratedPath, gamma: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let returns = discounted_returns(&path.rewards, gamma);
    let mut p = path.env_prob;
    let mut score = vec![0.0; policy.num_params()];
    for (&(s, a), g) in path.pairs.iter().zip(&returns) {
        let obs = mdp.obs(s);
        let action = Action::Discrete(a);
        p *= policy.log_prob(&obs, &action)?.exp();
        for (acc, d) in score.iter_mut().zip(policy.log_prob_grad(&obs, &action)?) {
            *acc += d * g;
        }
    }
    Ok((p, score, returns))
}

/// `E[Σ_t γ^t r_t]` by enumerating trajectories.
pub fn expected_return(mdp: &TabularMdp, policy: &Policy, gamma: f64) -> Result<f64> {
    mdp.enumerate().iter().try_fold(0.0, |acc, path| {
        let (p, _, _) = path_terms(policy, mdp, path, gamma)?;
        let ret: f64 = path.rewards.iter().enumerate().map(|(t, r)| gamma.powi(t as i32) * r).sum();
        Ok(acc + p * ret)
    })
}

/// `E[Σ_t ∂log π(a_t|s_t)/∂θ · G_t]` by enumerating trajectories: the mean of
/// every estimator here. With `γ = 1` it is `∂/∂θ E[Σ_t r_t]`.
pub fn exact_policy_gradient(mdp: &TabularMdp, policy: &Policy, gamma: f64) -> Result<Vec<f64>> {
    let mut g = vec![0.0; policy.num_params()];
    for path in mdp.enumerate() {
        let (p, score, _) = path_terms(policy, mdp, &path, gamma)?;
        for (acc, s) in g.iter_mut().zip(score) {
            *acc += p * s;
        }
    }
    Ok(g)
}

/// The enumerated paths of `mdp` as trajectories without stored noise, with their probabilities.
pub fn enumerated_trajectories(mdp: &TabularMdp, policy: &Policy) -> Result<Vec<(Trajectory, f64)>> {
    mdp.enumerate()
        .iter()
        .map(|path| {
            let (p, _, _) = path_terms(policy, mdp, path, 1.0)?;
            let steps = path
                .pairs
                .iter()
                .zip(&path.rewards)
                .map(|(&(s, a), &r)| Step {
                    state: mdp.obs(s),
                    action: Action::Discrete(a),
                    noise: Noise::None,
                    reward: r,
                })
                .collect();
            Ok((Trajectory { steps }, p))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlConfig {
    pub kind: RlKind,
    pub gamma: f64,
    pub entropy_weight: f64,
    pub optimizer: OptKind,
    pub lr: f64,
    /// Critic step size as a multiple of `lr`.
    pub cv_lr_scale: f64,
    /// Episodes averaged per update.
    pub batch: usize,
    pub episodes: usize,
    pub hidden: Vec<usize>,
    /// Adds a state-value term to the LAX-RL / RELAX-RL surrogate.
    pub value_baseline: bool,
    /// Probe after every this many episodes; 0 disables probing.
    pub probe_every: usize,
    pub probe_episodes: usize,
    pub stop_when_solved: bool,
}

impl RlConfig {
    pub fn new(kind: RlKind) -> Self {
        Self {
            kind,
            gamma: 0.99,
            entropy_weight: 0.01,
            optimizer: OptKind::RmsProp,
            lr: 0.01,
            cv_lr_scale: 1.0,
            batch: 1,
            episodes: 1000,
            hidden: vec![10, 10],
            value_baseline: false,
            probe_every: 10,
            probe_episodes: 100,
            stop_when_solved: false,
        }
    }

    pub fn validate(&self, env: &Env) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return err(format!("discount {} not in (0, 1]", self.gamma));
        }
        if !(self.entropy_weight >= 0.0) {
            return err("entropy weight must be non-negative".into());
        }
        if !(self.lr > 0.0) || !(self.cv_lr_scale > 0.0) {
            return err("step sizes must be positive".into());
        }
        if self.batch == 0 {
            return err("batch must be at least 1 episode".into());
        }
        if self.probe_every > 0 && self.probe_episodes < 2 {
            return err("variance probe needs at least 2 episodes".into());
        }
        match (self.kind, env.action_space()) {
            (RlKind::LaxRl, ActionSpace::Discrete(_)) => err("lax needs continuous actions; use relax".into()),
            (RlKind::RelaxRl, ActionSpace::Continuous(_)) => err("relax needs discrete actions; use lax".into()),
            _ => Ok(()),
        }
    }

    /// Fresh policy and critic for `env`, Glorot-initialized.
    pub fn agent<R: Rng + ?Sized>(&self, env: &Env, rng: &mut R) -> Result<(Policy, Critic)> {
        self.validate(env)?;
        let obs = env.obs_dim();
        let space = env.action_space();
        let mut policy = Policy::new(obs, &self.hidden, space)?;
        policy.init(rng);
        let input = match space {
            ActionSpace::Discrete(k) => k,
            ActionSpace::Continuous(d) => d,
        };
        let mut critic = match self.kind {
            RlKind::A2c => Critic::value(obs, &self.hidden)?,
            _ => Critic::surrogate(input, obs, &self.hidden, self.value_baseline)?,
        };
        critic.init(rng);
        Ok((policy, critic))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRow {
    pub episode: usize,
    pub reward: f64,
    /// Trailing-window mean reward is above the environment's threshold.
    pub solved: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub episode: usize,
    pub mean_log_variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RlRow {
    Episode(EpisodeRow),
    Probe(ProbeRow),
}

#[derive(Clone, Debug)]
pub struct RlTrace {
    pub episodes: Vec<EpisodeRow>,
    pub probes: Vec<ProbeRow>,
    /// First episode at which the solve criterion held.
    pub solved_at: Option<usize>,
}

impl RlTrace {
    pub fn mean_probe(&self) -> Option<f64> {
        (!self.probes.is_empty())
            .then(|| self.probes.iter().map(|p| p.mean_log_variance).sum::<f64>() / self.probes.len() as f64)
    }
}

pub fn train_rl(
    env: &Env,
    policy: &mut Policy,
    critic: &mut Critic,
    config: &RlConfig,
    rng: &mut dyn RngCore,
    probe_rng: &mut dyn RngCore,
) -> Result<RlTrace> {
    train_rl_with(env, policy, critic, config, rng, probe_rng, &mut |_| Ok(()))
}

/// Like [`train_rl`], also handing each row to `on_row` as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn train_rl_with(
    env: &Env,
    policy: &mut Policy,
    critic: &mut Critic,
    config: &RlConfig,
    rng: &mut dyn RngCore,
    probe_rng: &mut dyn RngCore,
    on_row: &mut dyn FnMut(&RlRow) -> Result<()>,
) -> Result<RlTrace> {
    config.validate(env)?;
    let mut env = env.clone();
    let mut theta = policy.params();
    let mut phi = critic.params();
    let mut theta_opt = OptState::new(config.optimizer, config.lr);
    let mut phi_opt = OptState::new(config.optimizer, config.lr * config.cv_lr_scale);
    let mut g_theta = vec![0.0; theta.len()];
    let mut g_phi = vec![0.0; phi.len()];
    let mut in_batch = 0;
    let criterion = env.solve_criterion();
    let mut recent: VecDeque<f64> = VecDeque::new();
    let mut trace = RlTrace {
        episodes: Vec::new(),
        probes: Vec::new(),
        solved_at: None,
    };
    let mut tape = Tape::new();
    let c_len = critic.c_len();

    for episode in 0..config.episodes {
        let diverged = |reason: String| Error::Divergence { step: episode, reason };
        let traj = rollout(&mut env, policy, rng)?;
        tape.clear();
        let est = rl_grad(&mut tape, config.kind, policy, critic, &traj, config.gamma).map_err(|e| match e {
            Error::Numerical { node } => diverged(format!("non-finite gradient at node {node}")),
            e => e,
        })?;
        let ent = entropy_grad(&mut tape, policy, &est)?;
        for ((g, e), h) in g_theta.iter_mut().zip(&est.est.g_theta).zip(&ent) {
            *g -= e + config.entropy_weight * h;
        }
        if let Some(phi_var) = est.phi {
            let mut gp = match config.kind {
                RlKind::A2c => vec![0.0; phi.len()],
                _ => variance_grad(&tape, &est.est, &[phi_var])?.remove(0),
            };
            if critic.v.is_some() {
                let gv = value_grad(critic, &traj, config.gamma)?;
                gp[c_len..].copy_from_slice(&gv[c_len..]);
            }
            for (a, b) in g_phi.iter_mut().zip(&gp) {
                *a += b;
            }
        }
        in_batch += 1;
        if in_batch == config.batch {
            let scale = 1.0 / in_batch as f64;
            g_theta.iter_mut().chain(g_phi.iter_mut()).for_each(|g| *g *= scale);
            let relabel = |e: Error| match e {
                Error::Divergence { reason, .. } => diverged(reason),
                e => e,
            };
            theta_opt.step(&mut theta, &g_theta).map_err(relabel)?;
            if !phi.is_empty() {
                phi_opt.step(&mut phi, &g_phi).map_err(relabel)?;
            }
            if let Some(x) = theta.iter().chain(&phi).find(|x| !x.is_finite() || x.abs() > THETA_GUARD) {
                return Err(diverged(format!("parameter reached {x}")));
            }
            policy.set_params(&theta);
            critic.set_params(&phi);
            g_theta.fill(0.0);
            g_phi.fill(0.0);
            in_batch = 0;
        }

        let reward = traj.total_reward();
        let solved = match criterion {
            Some((threshold, window)) => {
                recent.push_back(reward);
                if recent.len() > window {
                    recent.pop_front();
                }
                recent.len() == window && recent.iter().sum::<f64>() / window as f64 > threshold
            }
            None => false,
        };
        if solved && trace.solved_at.is_none() {
            trace.solved_at = Some(episode);
        }
        let row = EpisodeRow { episode, reward, solved };
        on_row(&RlRow::Episode(row.clone()))?;
        trace.episodes.push(row);

        if config.probe_every > 0 && (episode + 1) % config.probe_every == 0 {
            let v = variance_probe(&env, config.kind, policy, critic, config.gamma, config.probe_episodes, probe_rng)?;
            let row = ProbeRow {
                episode,
                mean_log_variance: v,
            };
            on_row(&RlRow::Probe(row.clone()))?;
            trace.probes.push(row);
        }
        if solved && config.stop_when_solved {
            break;
        }
    }
    Ok(trace)
}
