//! Episodic environments: cart-pole, a one-step Gaussian bandit, and small tabular MDPs.

use rand::{Rng, RngCore};

use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Classic cart-pole with Euler integration.
#[derive(Clone, Debug, PartialEq)]
pub struct CartPole {
    /// `[x, ẋ, angle, angular velocity]`.
    pub state: [f64; 4],
    pub steps: usize,
    pub max_steps: usize,
    done: bool,
}

const GRAVITY: f64 = 9.8;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const TOTAL_MASS: f64 = CART_MASS + POLE_MASS;
const HALF_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = POLE_MASS * HALF_LENGTH;
const FORCE: f64 = 10.0;
const DT: f64 = 0.02;
const X_LIMIT: f64 = 2.4;
const ANGLE_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;

impl Default for CartPole {
    fn default() -> Self {
        Self::new()
    }
}

impl CartPole {
    pub fn new() -> Self {
        Self {
            state: [0.0; 4],
            steps: 0,
            max_steps: 500,
            done: false,
        }
    }

    pub fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        for s in &mut self.state {
            *s = rng.random_range(-0.05..0.05);
        }
        self.steps = 0;
        self.done = false;
        self.state.to_vec()
    }

    /// Action 1 pushes right, 0 pushes left.
    pub fn step(&mut self, action: usize) -> Result<Transition> {
        if action > 1 {
            return contract(format!("cart-pole action {action} not in {{0, 1}}"));
        }
        if self.done {
            return contract("step called on a finished episode");
        }
        let [x, x_dot, th, th_dot] = self.state;
        let force = if action == 1 { FORCE } else { -FORCE };
        let (sin, cos) = th.sin_cos();
        let temp = (force + POLE_MASS_LENGTH * th_dot * th_dot * sin) / TOTAL_MASS;
        let th_acc =
            (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * th_acc * cos / TOTAL_MASS;
        self.state = [x + DT * x_dot, x_dot + DT * x_acc, th + DT * th_dot, th_dot + DT * th_acc];
        self.steps += 1;
        let [x, _, th, _] = self.state;
        self.done = x.abs() > X_LIMIT || th.abs() > ANGLE_LIMIT || self.steps >= self.max_steps;
        Ok(Transition {
            obs: self.state.to_vec(),
            reward: 1.0,
            done: self.done,
        })
    }
}

/// One step, constant observation `[1]`, reward `-(a - target)²`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBandit {
    pub target: f64,
    pub reward_scale: f64,
}

impl GaussianBandit {
    pub fn new(target: f64) -> Self {
        Self {
            target,
            reward_scale: 1.0,
        }
    }

    pub fn reward(&self, a: f64) -> f64 {
        -self.reward_scale * (a - self.target).powi(2)
    }
}

/// Finite MDP with one-hot observations and a fixed horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub init: Vec<f64>,
    /// `P(s' | s, a)` at `[(s * n_actions + a) * n_states + s']`.
    pub transitions: Vec<f64>,
    /// `r(s, a)` at `[s * n_actions + a]`.
    pub rewards: Vec<f64>,
    state: usize,
    t: usize,
}

/// One enumerated trajectory of a [`TabularMdp`].
#[derive(Clone, Debug, PartialEq)]
pub struct EnumeratedPath {
    pub pairs: Vec<(usize, usize)>,
    pub rewards: Vec<f64>,
    /// Probability from the initial and transition distributions only.
    pub env_prob: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        horizon: usize,
        init: Vec<f64>,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || horizon == 0 {
            return contract("tabular MDP needs states, actions and a positive horizon");
        }
        if init.len() != n_states
            || transitions.len() != n_states * n_actions * n_states
            || rewards.len() != n_states * n_actions
        {
            return contract("tabular MDP table sizes do not match");
        }
        let is_dist = |p: &[f64]| p.iter().all(|&x| x >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-12;
        if !is_dist(&init) || !transitions.chunks(n_states).all(is_dist) {
            return contract("tabular MDP rows must be probability distributions");
        }
        Ok(Self {
            n_states,
            n_actions,
            horizon,
            init,
            transitions,
            rewards,
            state: 0,
            t: 0,
        })
    }

    /// Single state, horizon 1.
    pub fn bandit(rewards: Vec<f64>) -> Result<Self> {
        let k = rewards.len();
        Self::new(1, k, 1, vec![1.0], vec![1.0; k], rewards)
    }

    /// Two states, two actions, horizon 2, uniform start: 16 trajectories.
    pub fn two_state() -> Self {
        Self::new(
            2,
            2,
            2,
            vec![0.5, 0.5],
            vec![0.8, 0.2, 0.3, 0.7, 0.6, 0.4, 0.1, 0.9],
            vec![1.0, 0.0, -0.5, 2.0],
        )
        .expect("valid tables")
    }

    pub fn obs(&self, s: usize) -> Vec<f64> {
        let mut o = vec![0.0; self.n_states];
        o[s] = 1.0;
        o
    }

    fn draw(p: &[f64], rng: &mut dyn RngCore) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
    }

    fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let o = (s * self.n_actions + a) * self.n_states;
        &self.transitions[o..o + self.n_states]
    }

    pub fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.state = Self::draw(&self.init, rng);
        self.t = 0;
        self.obs(self.state)
    }

    pub fn step(&mut self, action: usize, rng: &mut dyn RngCore) -> Result<Transition> {
        if action >= self.n_actions {
            return contract(format!("action {action} out of range for {} actions", self.n_actions));
        }
        if self.t >= self.horizon {
            return contract("step called on a finished episode");
        }
        let reward = self.rewards[self.state * self.n_actions + action];
        self.t += 1;
        let done = self.t == self.horizon;
        if !done {
            self.state = Self::draw(self.next_dist(self.state, action), rng);
        }
        Ok(Transition {
            obs: self.obs(self.state),
            reward,
            done,
        })
    }

    /// Every state-action path of full length with nonzero environment probability.
    pub fn enumerate(&self) -> Vec<EnumeratedPath> {
        let mut out = Vec::new();
        for s in 0..self.n_states {
            if self.init[s] > 0.0 {
                self.extend(vec![], vec![], self.init[s], s, &mut out);
            }
        }
        out
    }

    fn extend(&self, pairs: Vec<(usize, usize)>, rewards: Vec<f64>, p: f64, s: usize, out: &mut Vec<EnumeratedPath>) {
        for a in 0..self.n_actions {
            let mut pairs = pairs.clone();
            let mut rewards = rewards.clone();
            pairs.push((s, a));
            rewards.push(self.rewards[s * self.n_actions + a]);
            if pairs.len() == self.horizon {
                out.push(EnumeratedPath {
                    pairs,
                    rewards,
                    env_prob: p,
                });
            } else {
                for (s2, &q) in self.next_dist(s, a).iter().enumerate() {
                    if q > 0.0 {
                        self.extend(pairs.clone(), rewards.clone(), p * q, s2, out);
                    }
                }
            }
        }
    }
}

/// The environments a policy can be trained on.
#[derive(Clone, Debug, PartialEq)]
pub enum Env {
    CartPole(CartPole),
    Bandit(GaussianBandit),
    Tabular(TabularMdp),
}

impl Env {
    pub fn obs_dim(&self) -> usize {
        match self {
            Env::CartPole(_) => 4,
            Env::Bandit(_) => 1,
            Env::Tabular(m) => m.n_states,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            Env::CartPole(_) => ActionSpace::Discrete(2),
            Env::Bandit(_) => ActionSpace::Continuous(1),
            Env::Tabular(m) => ActionSpace::Discrete(m.n_actions),
        }
    }

    /// `(threshold, window)`: solved once the trailing mean reward exceeds the threshold.
    pub fn solve_criterion(&self) -> Option<(f64, usize)> {
        match self {
            Env::CartPole(_) => Some((195.0, 100)),
            _ => None,
        }
    }

    pub fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        match self {
            Env::CartPole(c) => c.reset(rng),
            Env::Bandit(_) => vec![1.0],
            Env::Tabular(m) => m.reset(rng),
        }
    }

    pub fn step(&mut self, action: &Action, rng: &mut dyn RngCore) -> Result<Transition> {
        match (self, action) {
            (Env::CartPole(c), Action::Discrete(a)) => c.step(*a),
            (Env::Tabular(m), Action::Discrete(a)) => m.step(*a, rng),
            (Env::Bandit(b), Action::Continuous(a)) => {
                if a.len() != 1 {
                    return contract("bandit action must be one-dimensional");
                }
                Ok(Transition {
                    obs: vec![1.0],
                    reward: b.reward(a[0]),
                    done: true,
                })
            }
            _ => contract("action type does not match the environment"),
        }
    }
}
