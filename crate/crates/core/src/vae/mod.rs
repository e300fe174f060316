//! Linear variational autoencoders with one or two layers of Bernoulli latents.
//!
//! One layer: `q(b₁|x) = σ(W_q x + β_q)`, `p(x|b₁) = σ(W_p b₁ + β_p)`, learned
//! prior `p(b₁) = σ(π)`. Two layers add `q(b₂|b₁)`, `p(b₁|b₂)` and move the
//! prior to `b₂`.
//!
//! Training minimizes `-ELBO`. Decoder and prior gradients are exact at the
//! sampled `b`. Encoder gradients are estimated per layer with respect to that
//! layer's logits `a` (REINFORCE, REBAR or RELAX, plus the explicit
//! `∂(-ELBO)/∂a` at fixed `b`) and chained to the weights as `ĝ_a ⊗ input`.
//! The per-example variance objective is therefore `Σ_layers (‖input‖² + 1) ‖ĝ_a‖²`.

mod data;

pub use data::{check_binary, format_examples, parse_examples, BinaryDataset, NoisyOr};

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::distributions::{Family, RelaxedSample};
use crate::error::{contract, Error, Result};
use crate::estimators::{
    direct_dependence_correction, reinforce, relax, EstimatorKind, GradEstimate, THETA_GUARD,
};
use crate::graph::{sigmoid, softplus, Tape, Var};
use crate::optim::{OptKind, OptState};
use crate::stats::{mean_log_variance, RunningStats, WindowVariance};
use crate::surrogate::{flatten, Activation, Mlp, Relaxation, StructuredSurrogate, StructuredVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    EncW(usize),
    EncB(usize),
    DecW(usize),
    DecB(usize),
    Prior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearVae {
    layers: usize,
    d: usize,
    l: usize,
    /// Flat parameters: per layer `W_q, β_q, W_p, β_p`, then the prior logits.
    pub params: Vec<f64>,
}

/// Registered leaves of a [`LinearVae`].
#[derive(Clone, Debug)]
pub struct VaeVars {
    pub enc_w: Vec<Var>,
    pub enc_b: Vec<Var>,
    pub dec_w: Vec<Var>,
    pub dec_b: Vec<Var>,
    pub prior: Var,
}

impl VaeVars {
    fn decoder_and_prior(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for i in 0..self.dec_w.len() {
            v.push(self.dec_w[i]);
            v.push(self.dec_b[i]);
        }
        v.push(self.prior);
        v
    }
}

/// `Σ y·l - softplus(l)`: Bernoulli log-mass of `y` under logits `l`; `y` may be relaxed.
pub fn bernoulli_ll(y: &[f64], logits: &[f64]) -> f64 {
    y.iter().zip(logits).map(|(&y, &l)| y * l - softplus(l)).sum()
}

fn bernoulli_ll_node(tape: &mut Tape, y: Var, logits: Var) -> Var {
    let yl = tape.dot(y, logits);
    let sp = tape.softplus(logits);
    let s = tape.sum(sp);
    tape.sub(yl, s)
}

fn affine_value(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(i, &bi)| bi + w[i * x.len()..(i + 1) * x.len()].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

impl LinearVae {
    /// Zero-initialized model with `d` visible units and `l` latents per layer.
    pub fn new(layers: usize, d: usize, l: usize) -> Result<Self> {
        if !(1..=2).contains(&layers) {
            return Err(Error::Config(format!("layers must be 1 or 2, got {layers}")));
        }
        if d == 0 || l == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        let mut m = Self {
            layers,
            d,
            l,
            params: Vec::new(),
        };
        m.params = vec![0.0; m.range(Part::Prior).end];
        Ok(m)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn data_dim(&self) -> usize {
        self.d
    }

    pub fn latent_dim(&self) -> usize {
        self.l
    }

    fn input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.d
        } else {
            self.l
        }
    }

    fn len_of(&self, part: Part) -> usize {
        match part {
            Part::EncW(i) => self.l * self.input_dim(i),
            Part::EncB(_) => self.l,
            Part::DecW(i) => self.input_dim(i) * self.l,
            Part::DecB(i) => self.input_dim(i),
            Part::Prior => self.l,
        }
    }

    fn range(&self, part: Part) -> Range<usize> {
        let mut off = 0;
        for i in 0..self.layers {
            for p in [Part::EncW(i), Part::EncB(i), Part::DecW(i), Part::DecB(i)] {
                let n = self.len_of(p);
                if p == part {
                    return off..off + n;
                }
                off += n;
            }
        }
        off..off + self.l
    }

    fn get(&self, part: Part) -> &[f64] {
        &self.params[self.range(part)]
    }

    /// Number of encoder parameters (the estimated part of the gradient).
    pub fn num_encoder_params(&self) -> usize {
        (0..self.layers)
            .map(|i| self.len_of(Part::EncW(i)) + self.len_of(Part::EncB(i)))
            .sum()
    }

    /// Small uniform weights; the visible bias starts at the logit of `data_mean`.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R, data_mean: Option<&[f64]>) {
        for i in 0..self.layers {
            for p in [Part::EncW(i), Part::DecW(i)] {
                let r = self.range(p);
                let scale = (1.0 / self.input_dim(i).max(self.l) as f64).sqrt();
                for w in &mut self.params[r] {
                    *w = rng.random_range(-scale..scale);
                }
            }
        }
        if let Some(m) = data_mean {
            let r = self.range(Part::DecB(0));
            for (b, &p) in self.params[r].iter_mut().zip(m) {
                let p = p.clamp(0.01, 0.99);
                *b = (p / (1.0 - p)).ln();
            }
        }
    }

    pub fn register(&self, tape: &mut Tape) -> VaeVars {
        let (mut enc_w, mut enc_b, mut dec_w, mut dec_b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..self.layers {
            enc_w.push(tape.param(self.get(Part::EncW(i))));
            enc_b.push(tape.param(self.get(Part::EncB(i))));
            dec_w.push(tape.param(self.get(Part::DecW(i))));
            dec_b.push(tape.param(self.get(Part::DecB(i))));
        }
        let prior = tape.param(self.get(Part::Prior));
        VaeVars {
            enc_w,
            enc_b,
            dec_w,
            dec_b,
            prior,
        }
    }

    /// Encoder logits of layer `layer` given its input.
    pub fn encoder_logits(&self, layer: usize, input: &[f64]) -> Vec<f64> {
        affine_value(self.get(Part::EncW(layer)), self.get(Part::EncB(layer)), input)
    }

    /// Single-sample ELBO `log p(x, b) - log q(b|x)` at latents `b` (one vector per layer).
    pub fn elbo_value(&self, x: &[f64], b: &[Vec<f64>]) -> Result<f64> {
        check_binary(x)?;
        if x.len() != self.d || b.len() != self.layers {
            return contract("ELBO input has the wrong shape");
        }
        let mut total = 0.0;
        let mut input = x;
        for (i, bi) in b.iter().enumerate() {
            let a = self.encoder_logits(i, input);
            total -= bernoulli_ll(bi, &a);
            let lp = affine_value(self.get(Part::DecW(i)), self.get(Part::DecB(i)), bi);
            total += bernoulli_ll(input, &lp);
            input = bi;
        }
        total += bernoulli_ll(input, self.get(Part::Prior));
        Ok(total)
    }

    /// Hard latents drawn from `q`.
    pub fn sample_latents<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.layers);
        for i in 0..self.layers {
            let a = self.encoder_logits(i, out.last().map_or(x, |v| v));
            out.push(a.iter().map(|&ai| if rng.random::<f64>() < sigmoid(ai) { 1.0 } else { 0.0 }).collect());
        }
        out
    }

    /// Mean single-sample ELBO over `xs`, `samples` draws each.
    pub fn mean_elbo<R: Rng + ?Sized>(&self, xs: &[Vec<f64>], samples: usize, rng: &mut R) -> Result<f64> {
        let mut total = 0.0;
        for x in xs {
            for _ in 0..samples {
                let b = self.sample_latents(x, rng);
                total += self.elbo_value(x, &b)?;
            }
        }
        Ok(total / (xs.len() * samples) as f64)
    }

    /// All latent configurations with their `q` probability and ELBO; only for tiny models.
    fn enumerate(&self, x: &[f64]) -> Result<Vec<(f64, f64)>> {
        let bits = self.l * self.layers;
        if bits > 16 {
            return contract("too many latent configurations to enumerate");
        }
        let mut out = Vec::with_capacity(1 << bits);
        for mask in 0..1usize << bits {
            let b: Vec<Vec<f64>> = (0..self.layers)
                .map(|i| (0..self.l).map(|j| ((mask >> (i * self.l + j)) & 1) as f64).collect())
                .collect();
            let mut lq = 0.0;
            let mut input = x;
            for (i, bi) in b.iter().enumerate() {
                lq += bernoulli_ll(bi, &self.encoder_logits(i, input));
                input = bi;
            }
            out.push((lq.exp(), self.elbo_value(x, &b)?));
        }
        Ok(out)
    }

    /// `E_q[ELBO]` by enumeration.
    pub fn expected_elbo(&self, x: &[f64]) -> Result<f64> {
        Ok(self.enumerate(x)?.iter().map(|(q, e)| q * e).sum())
    }

    /// `log p(x)` by enumeration.
    pub fn log_marginal(&self, x: &[f64]) -> Result<f64> {
        // ELBO + log q = log p(x, b).
        let mut terms = Vec::new();
        for (q, e) in self.enumerate(x)? {
            terms.push(e + q.ln());
        }
        Ok(crate::graph::logsumexp(&terms))
    }

    /// ELBO as a node. `b` holds one latent node per layer; encoder logits are
    /// computed from `vars`.
    pub fn elbo(&self, tape: &mut Tape, vars: &VaeVars, x: &[f64], b: &[Var]) -> Result<Var> {
        check_binary(x)?;
        if x.len() != self.d || b.len() != self.layers {
            return contract("ELBO input has the wrong shape");
        }
        let xv = tape.constant(x);
        let mut logits = Vec::with_capacity(self.layers);
        let mut input = xv;
        for (i, &bi) in b.iter().enumerate() {
            logits.push(tape.affine(vars.enc_w[i], input, vars.enc_b[i]));
            input = bi;
        }
        Ok(self.elbo_with_logits(tape, vars, xv, b, &logits))
    }

    fn elbo_with_logits(&self, tape: &mut Tape, vars: &VaeVars, x: Var, b: &[Var], enc_logits: &[Var]) -> Var {
        let mut total = tape.scalar(0.0);
        let mut input = x;
        for i in 0..self.layers {
            let lq = bernoulli_ll_node(tape, b[i], enc_logits[i]);
            total = tape.sub(total, lq);
            let lp_logits = tape.affine(vars.dec_w[i], b[i], vars.dec_b[i]);
            let lp = bernoulli_ll_node(tape, input, lp_logits);
            total = tape.add(total, lp);
            input = b[i];
        }
        let prior = bernoulli_ll_node(tape, input, vars.prior);
        tape.add(total, prior)
    }
}

/// Estimator and optimizer settings for [`train_vae`].
#[derive(Clone, Debug)]
pub struct VaeConfig {
    pub kind: EstimatorKind,
    pub lr: f64,
    pub cv_lr_scale: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Initial temperature of the relaxation.
    pub lambda: f64,
    /// Hidden widths of the RELAX residual network.
    pub residual_hidden: Vec<usize>,
    pub weight_decay: f64,
    /// Posterior draws per example when evaluating ELBOs.
    pub eval_samples: usize,
    pub direct_dependence: bool,
    /// Trailing window (in steps) for the gradient log-variance column.
    pub window: usize,
}

impl VaeConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        Self {
            kind,
            lr: 1e-3,
            cv_lr_scale: 10.0,
            batch: 24,
            epochs: 10,
            lambda: 0.5,
            residual_hidden: vec![50, 50],
            weight_decay: 1e-3,
            eval_samples: 10,
            direct_dependence: true,
            window: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.kind, EstimatorKind::Reinforce | EstimatorKind::Rebar | EstimatorKind::Relax) {
            return Err(Error::Config(format!(
                "vae supports reinforce, rebar and relax, not {}",
                self.kind
            )));
        }
        if !(self.lr > 0.0) || !(self.cv_lr_scale > 0.0) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        if self.batch == 0 || self.eval_samples == 0 {
            return Err(Error::Config("batch and eval samples must be at least 1".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.window < 2 {
            return Err(Error::Config("variance window must be at least 2".into()));
        }
        Ok(())
    }

    /// Control variate for this estimator; `None` for REINFORCE.
    pub fn surrogate<R: Rng + ?Sized>(&self, model: &LinearVae, rng: &mut R) -> Result<Option<StructuredSurrogate>> {
        match self.kind {
            EstimatorKind::Reinforce => Ok(None),
            EstimatorKind::Rebar => {
                Ok(Some(StructuredSurrogate::new(Relaxation::Sigmoid, self.lambda, Some(1.0), None)?))
            }
            _ => {
                let mut sizes = vec![model.l * model.layers];
                sizes.extend(&self.residual_hidden);
                sizes.push(1);
                let mut r = Mlp::new(&sizes, Activation::Relu)?.with_weight_decay(self.weight_decay);
                r.init_params(rng);
                // Start from the plain relaxation.
                let n = r.num_params();
                let last = sizes[sizes.len() - 2] + 1;
                r.params[n - last..].iter_mut().for_each(|w| *w = 0.0);
                Ok(Some(StructuredSurrogate::new(Relaxation::Sigmoid, self.lambda, None, Some(r))?))
            }
        }
    }
}

/// Gradients from one minibatch.
#[derive(Clone, Debug)]
pub struct BatchGrad {
    /// Gradient of mean `-ELBO` with respect to all model parameters.
    pub model: Vec<f64>,
    /// Mean `∂ĝ²/∂φ`.
    pub phi: Vec<f64>,
    /// Mean single-sample ELBO at the drawn latents.
    pub elbo: f64,
}

fn control(
    tape: &mut Tape,
    s: &StructuredSurrogate,
    sv: &StructuredVars,
    f_relaxed: Var,
    residual_input: Var,
) -> Result<Var> {
    let mut c = f_relaxed;
    if let Some(eta) = sv.eta {
        c = tape.mul(c, eta);
    }
    if let Some(r) = &s.residual {
        let out = r.forward(tape, &sv.residual, residual_input)?;
        c = tape.add(c, out);
    }
    Ok(c)
}

struct ExampleGrad {
    /// `ĝ_a` per layer.
    g_a: Vec<Vec<f64>>,
    /// Per-layer encoder inputs (x, then b₁).
    inputs: Vec<Vec<f64>>,
    /// Exact gradient of `-ELBO` w.r.t. decoder weights/biases and prior, in layout order.
    dec: Vec<Vec<f64>>,
    phi: Vec<f64>,
    /// `Σ_layers (‖input‖² + 1) ‖ĝ_a‖²`.
    #[cfg_attr(not(test), allow(dead_code))]
    g_sq: f64,
    elbo: f64,
}

impl LinearVae {
    /// One estimate for one example from explicit joint draws (one per layer).
    fn example_grad(
        &self,
        tape: &mut Tape,
        kind: EstimatorKind,
        surrogate: Option<&StructuredSurrogate>,
        direct_dependence: bool,
        x: &[f64],
        samples: &[RelaxedSample],
    ) -> Result<ExampleGrad> {
        tape.clear();
        let vars = self.register(tape);
        let sv = surrogate.map(|s| s.register(tape));
        let xv = tape.constant(x);
        let mut inputs = vec![x.to_vec()];
        let mut a_vars = Vec::new();
        let mut b_vars = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let a = self.encoder_logits(i, &inputs[i]);
            a_vars.push(tape.param(&a));
            b_vars.push(tape.constant(&s.b));
            if i + 1 < self.layers {
                inputs.push(s.b.clone());
            }
        }
        let elbo = self.elbo_with_logits(tape, &vars, xv, &b_vars, &a_vars);
        let f_node = tape.neg(elbo);
        let fb = tape.scalar_value(f_node);

        let mut ests: Vec<GradEstimate> = Vec::with_capacity(self.layers);
        for i in 0..self.layers {
            let est = match (kind, surrogate, &sv) {
                (EstimatorKind::Reinforce, _, _) => {
                    let logp = Family::Bernoulli.log_prob_hard(tape, a_vars[i], &samples[i].b)?;
                    reinforce(tape, a_vars[i], fb, logp)?
                }
                (_, Some(s), Some(sv)) => {
                    let mut c = |t: &mut Tape, z: Var| -> Result<Var> {
                        let y = s.relax(t, sv, z);
                        if self.layers == 1 {
                            let e = self.elbo_with_logits(t, &vars, xv, &[y], &a_vars);
                            let f = t.neg(e);
                            control(t, s, sv, f, z)
                        } else if i == 0 {
                            let a2 = t.affine(vars.enc_w[1], y, vars.enc_b[1]);
                            let z2 = Family::Bernoulli.relaxed_node(t, a2, &samples[1].u);
                            let y2 = s.relax(t, sv, z2);
                            let e = self.elbo_with_logits(t, &vars, xv, &[y, y2], &[a_vars[0], a2]);
                            let f = t.neg(e);
                            let rin = t.concat(z, z2);
                            control(t, s, sv, f, rin)
                        } else {
                            let e = self.elbo_with_logits(t, &vars, xv, &[b_vars[0], y], &a_vars);
                            let f = t.neg(e);
                            let z1 = t.constant(&samples[0].z);
                            let rin = t.concat(z1, z);
                            control(t, s, sv, f, rin)
                        }
                    };
                    relax(tape, a_vars[i], a_vars[i], Family::Bernoulli, fb, &samples[i], &mut c)?
                }
                _ => return contract(format!("{kind} needs a surrogate")),
            };
            ests.push(est);
        }
        if direct_dependence {
            let df = tape.backward_wrt(f_node, &a_vars)?;
            for (est, d) in ests.iter_mut().zip(&df) {
                *est = direct_dependence_correction(tape, est, d)?;
            }
        }

        let mut g_sq = tape.scalar(0.0);
        for (est, input) in ests.iter().zip(&inputs) {
            let w = tape.scale(est.g_sq, sq_norm(input) + 1.0);
            g_sq = tape.add(g_sq, w);
        }
        let phi = match &sv {
            Some(sv) => flatten(&tape.backward_wrt(g_sq, &sv.all())?),
            None => Vec::new(),
        };
        let dec = tape.backward_wrt(f_node, &vars.decoder_and_prior())?;
        Ok(ExampleGrad {
            g_a: ests.into_iter().map(|e| e.g_theta).collect(),
            inputs,
            dec,
            phi,
            g_sq: tape.scalar_value(g_sq),
            elbo: -fb,
        })
    }

    fn draw<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<RelaxedSample> {
        let mut out: Vec<RelaxedSample> = Vec::with_capacity(self.layers);
        for i in 0..self.layers {
            let a = self.encoder_logits(i, out.last().map_or(x, |s| &s.b));
            out.push(Family::Bernoulli.sample(&a, rng));
        }
        out
    }

    /// Gradient of mean `-ELBO` over `xs` plus the surrogate's variance gradient.
    pub fn batch_gradient<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        kind: EstimatorKind,
        surrogate: Option<&StructuredSurrogate>,
        direct_dependence: bool,
        xs: &[&[f64]],
        rng: &mut R,
    ) -> Result<BatchGrad> {
        let mut model = vec![0.0; self.params.len()];
        let mut phi = vec![0.0; surrogate.map_or(0, StructuredSurrogate::num_params)];
        let mut elbo = 0.0;
        let n = xs.len() as f64;
        for x in xs {
            check_binary(x)?;
            let samples = self.draw(x, rng);
            let g = self.example_grad(tape, kind, surrogate, direct_dependence, x, &samples)?;
            for i in 0..self.layers {
                let rw = self.range(Part::EncW(i));
                let rb = self.range(Part::EncB(i));
                let input = &g.inputs[i];
                for (r, &ga) in g.g_a[i].iter().enumerate() {
                    model[rb.start + r] += ga / n;
                    let row = &mut model[rw.start + r * input.len()..rw.start + (r + 1) * input.len()];
                    for (m, &xi) in row.iter_mut().zip(input) {
                        *m += ga * xi / n;
                    }
                }
            }
            let mut parts = Vec::new();
            for i in 0..self.layers {
                parts.push(self.range(Part::DecW(i)));
                parts.push(self.range(Part::DecB(i)));
            }
            parts.push(self.range(Part::Prior));
            for (r, gd) in parts.into_iter().zip(&g.dec) {
                for (m, v) in model[r].iter_mut().zip(gd) {
                    *m += v / n;
                }
            }
            for (p, v) in phi.iter_mut().zip(&g.phi) {
                *p += v / n;
            }
            elbo += g.elbo / n;
        }
        Ok(BatchGrad { model, phi, elbo })
    }

    /// Encoder-gradient estimates of one slice of the model gradient.
    fn encoder_part(&self, g: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_encoder_params());
        for i in 0..self.layers {
            out.extend_from_slice(&g[self.range(Part::EncW(i))]);
            out.extend_from_slice(&g[self.range(Part::EncB(i))]);
        }
        out
    }

    /// Mean floored log-variance of the encoder gradient over `n` batch estimates.
    pub fn probe_log_variance<R: Rng + ?Sized>(
        &self,
        kind: EstimatorKind,
        surrogate: Option<&StructuredSurrogate>,
        direct_dependence: bool,
        xs: &[&[f64]],
        n: usize,
        rng: &mut R,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let mut stats = RunningStats::new(self.num_encoder_params());
        for _ in 0..n {
            let g = self.batch_gradient(&mut tape, kind, surrogate, direct_dependence, xs, rng)?;
            stats.push(&self.encoder_part(&g.model));
        }
        Ok(mean_log_variance(&stats.variance()))
    }
}

/// One trace row, written after each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeRow {
    pub epoch: usize,
    pub step: usize,
    pub train_elbo: f64,
    pub valid_elbo: f64,
    /// `None` until two steps have run.
    pub grad_log_var: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct VaeTrace {
    pub rows: Vec<VaeRow>,
    pub initial_train_elbo: f64,
    pub initial_valid_elbo: f64,
    pub surrogate: Option<StructuredSurrogate>,
}

pub fn train_vae<R: Rng + ?Sized>(
    model: &mut LinearVae,
    data: &BinaryDataset,
    config: &VaeConfig,
    rng: &mut R,
    eval_rng: &mut R,
) -> Result<VaeTrace> {
    let mut rows = Vec::new();
    let mut t = train_vae_with(model, data, config, rng, eval_rng, &mut |r| {
        rows.push(r.clone());
        Ok(())
    })?;
    t.rows = rows;
    Ok(t)
}

fn eval_split<R: Rng + ?Sized>(model: &LinearVae, xs: &[Vec<f64>], samples: usize, rng: &mut R) -> Result<f64> {
    model.mean_elbo(xs, samples, rng)
}

/// Like [`train_vae`] but hands each row to `on_row` instead of storing it.
/// The surrogate is initialized from `rng` before the first step.
pub fn train_vae_with<R: Rng + ?Sized>(
    model: &mut LinearVae,
    data: &BinaryDataset,
    config: &VaeConfig,
    rng: &mut R,
    eval_rng: &mut R,
    on_row: &mut dyn FnMut(&VaeRow) -> Result<()>,
) -> Result<VaeTrace> {
    config.validate()?;
    if data.d != model.d {
        return Err(Error::Config(format!(
            "data has dimension {}, model expects {}",
            data.d, model.d
        )));
    }
    if data.valid.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut surrogate = config.surrogate(model, rng)?;
    let initial_train_elbo = eval_split(model, &data.train, config.eval_samples, eval_rng)?;
    let initial_valid_elbo = eval_split(model, &data.valid, config.eval_samples, eval_rng)?;
    let mut theta_opt = OptState::new(OptKind::Adam, config.lr);
    let mut phi_opt = OptState::new(OptKind::Adam, config.lr * config.cv_lr_scale);
    let mut phi = surrogate.as_ref().map_or_else(Vec::new, StructuredSurrogate::params);
    let mut window = WindowVariance::new(config.window);
    let mut tape = Tape::new();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| data.train[i].as_slice()).collect();
            let diverged = |reason: String| Error::Divergence { step, reason };
            let g = model.batch_gradient(
                &mut tape,
                config.kind,
                surrogate.as_ref(),
                config.direct_dependence,
                &xs,
                rng,
            )?;
            if !g.elbo.is_finite() {
                return Err(diverged("non-finite ELBO".into()));
            }
            window.push(&model.encoder_part(&g.model));
            if let Some(s) = &mut surrogate {
                let mut gp = g.phi.clone();
                s.add_weight_decay(&mut gp);
                phi_opt.step(&mut phi, &gp).map_err(|e| relabel(e, step))?;
                s.set_params(&phi);
            }
            theta_opt.step(&mut model.params, &g.model).map_err(|e| relabel(e, step))?;
            if let Some(x) = model.params.iter().chain(&phi).find(|x| !x.is_finite() || x.abs() > THETA_GUARD) {
                return Err(diverged(format!("parameter reached {x}")));
            }
            step += 1;
        }
        let row = VaeRow {
            epoch,
            step,
            train_elbo: eval_split(model, &data.train, config.eval_samples, eval_rng)?,
            valid_elbo: eval_split(model, &data.valid, config.eval_samples, eval_rng)?,
            grad_log_var: window.mean_log_variance(),
        };
        on_row(&row)?;
    }
    Ok(VaeTrace {
        rows: Vec::new(),
        initial_train_elbo,
        initial_valid_elbo,
        surrogate,
    })
}

fn relabel(e: Error, step: usize) -> Error {
    match e {
        Error::Divergence { reason, .. } => Error::Divergence { step, reason },
        e => e,
    }
}
