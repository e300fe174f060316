//! Bernoulli, categorical and diagonal Gaussian distributions.
//!
//! Discrete families come with a continuous relaxation `z ~ p(z|θ)` and a hard
//! map `b = H(z)`:
//!
//! * Bernoulli: logistic `z = logit + log(u/(1-u))`, `H(z) = 1[z > 0]`.
//! * Categorical: Gumbel `z = log θ - log(-log u)`, `H(z) = argmax z`.
//!
//! `z̃ ~ p(z|b,θ)` is drawn by truncating the noise so that `H(z̃) = b` always.
//! Every sampler exists twice: as plain `f64` code and as graph builders that
//! keep the dependence on the logits. Both evaluate the same floating-point
//! operations in the same order, so a value-level draw and its graph
//! counterpart agree bit for bit.

use rand::Rng;

use crate::error::{contract, Result};
use crate::graph::{argmax, log1p_clamped, logsumexp, sigmoid, softplus, Tape, Var, LOG_EPS};

/// Uniform draws are clamped to `[NOISE_EPS, 1 - NOISE_EPS]`.
pub const NOISE_EPS: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Clamp one uniform draw; rejects values outside `[0, 1]` or NaN.
pub fn clamp_noise(u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return contract(format!("uniform noise {u} outside (0, 1)"));
    }
    Ok(u.clamp(NOISE_EPS, 1.0 - NOISE_EPS))
}

fn clamp_all(u: &[f64]) -> Result<Vec<f64>> {
    u.iter().map(|&x| clamp_noise(x)).collect()
}

/// `n` clamped uniform draws.
pub fn uniform_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.random::<f64>().clamp(NOISE_EPS, 1.0 - NOISE_EPS))
        .collect()
}

#[inline]
fn logit(u: f64) -> f64 {
    u.ln() - (-u).ln_1p()
}

#[inline]
fn gumbel(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Bernoulli hard map; `z = 0` maps to 0.
pub fn heaviside(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect()
}

pub fn one_hot(k: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

fn check_bits(b: &[f64], d: usize) -> Result<()> {
    if b.len() != d {
        return contract(format!("expected {d} bits, got {}", b.len()));
    }
    if b.iter().any(|&x| x != 0.0 && x != 1.0) {
        return contract("Bernoulli value outside {0, 1}");
    }
    Ok(())
}

fn check_one_hot(b: &[f64], k: usize) -> Result<usize> {
    if b.len() != k {
        return contract(format!("expected one-hot of length {k}, got {}", b.len()));
    }
    let ones = b.iter().filter(|&&x| x == 1.0).count();
    let zeros = b.iter().filter(|&&x| x == 0.0).count();
    if ones != 1 || zeros != k - 1 {
        return contract("categorical value is not one-hot");
    }
    Ok(argmax(b))
}

/// Independent Bernoulli variables parameterized by logits.
#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliVector {
    logits: Vec<f64>,
}

impl BernoulliVector {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() || logits.iter().any(|x| !x.is_finite()) {
            return contract("Bernoulli logits must be non-empty and finite");
        }
        Ok(Self { logits })
    }

    /// From probabilities, clamped to `[1e-12, 1 - 1e-12]`.
    pub fn from_probs(p: &[f64]) -> Result<Self> {
        let logits = p
            .iter()
            .map(|&x| {
                let x = x.clamp(LOG_EPS, 1.0 - LOG_EPS);
                x.ln() - (-x).ln_1p()
            })
            .collect();
        Self::new(logits)
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&a| sigmoid(a)).collect()
    }

    pub fn dim(&self) -> usize {
        self.logits.len()
    }

    /// `(z, b)` from uniform noise `u`.
    pub fn relaxed_sample(&self, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if u.len() != self.dim() {
            return contract("noise length does not match dimension");
        }
        let u = clamp_all(u)?;
        let z: Vec<f64> = self.logits.iter().zip(&u).map(|(a, &u)| a + logit(u)).collect();
        let b = heaviside(&z);
        Ok((z, b))
    }

    /// `z̃ ~ p(z | b, θ)` from uniform noise `v`.
    pub fn conditional_relaxed(&self, b: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_bits(b, self.dim())?;
        if v.len() != self.dim() {
            return contract("noise length does not match dimension");
        }
        let v = clamp_all(v)?;
        Ok(self
            .logits
            .iter()
            .zip(b)
            .zip(&v)
            .map(|((&a, &bi), &vi)| {
                let (sgn, k) = bernoulli_cond_consts(bi, vi);
                let x = a * sgn;
                let l1 = log1p_clamped(-(sigmoid(x) * k));
                let lk = k.max(LOG_EPS).ln();
                let ls = -softplus(-x);
                let t = ((l1 - lk) - ls) * sgn;
                a + t
            })
            .collect())
    }

    pub fn log_prob(&self, b: &[f64]) -> Result<f64> {
        check_bits(b, self.dim())?;
        Ok(self
            .logits
            .iter()
            .zip(b)
            .map(|(&a, &bi)| -softplus(-(a * if bi == 1.0 { 1.0 } else { -1.0 })))
            .sum())
    }

    /// Logistic density of a relaxed value.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.logits
            .iter()
            .zip(z)
            .map(|(&a, &z)| {
                let d = z - a;
                -d - 2.0 * softplus(-d)
            })
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> RelaxedSample {
        Family::Bernoulli.sample(&self.logits, rng)
    }
}

/// Sign and truncation factor for the Bernoulli conditional sampler.
#[inline]
fn bernoulli_cond_consts(b: f64, v: f64) -> (f64, f64) {
    if b == 1.0 {
        (1.0, 1.0 - v)
    } else {
        (-1.0, v)
    }
}

/// Categorical distribution parameterized by logits.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalDist {
    logits: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.len() < 2 || logits.iter().any(|x| !x.is_finite()) {
            return contract("categorical logits need k >= 2 finite entries");
        }
        Ok(Self { logits })
    }

    /// From probabilities, clamped below at `1e-12`.
    pub fn from_probs(p: &[f64]) -> Result<Self> {
        Self::new(p.iter().map(|&x| x.max(LOG_EPS).ln()).collect())
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn probs(&self) -> Vec<f64> {
        let lse = logsumexp(&self.logits);
        self.logits.iter().map(|&a| (a - lse).exp()).collect()
    }

    /// `(z, b)` with `b` the winning index.
    pub fn relaxed_sample(&self, u: &[f64]) -> Result<(Vec<f64>, usize)> {
        if u.len() != self.k() {
            return contract("noise length does not match category count");
        }
        let u = clamp_all(u)?;
        let lse = logsumexp(&self.logits);
        let z: Vec<f64> = self
            .logits
            .iter()
            .zip(&u)
            .map(|(&a, &u)| (a - lse) + gumbel(u))
            .collect();
        let b = argmax(&z);
        Ok((z, b))
    }

    /// `z̃ ~ p(z | b, θ)`: the winner's Gumbel is drawn freely, the others truncated below it.
    pub fn conditional_relaxed(&self, b: usize, v: &[f64]) -> Result<Vec<f64>> {
        let k = self.k();
        if b >= k {
            return contract(format!("category {b} out of range for k = {k}"));
        }
        if v.len() != k {
            return contract("noise length does not match category count");
        }
        let v = clamp_all(v)?;
        let (masked, eb) = categorical_cond_consts(b, &v);
        let lse = logsumexp(&self.logits);
        Ok(self
            .logits
            .iter()
            .zip(&masked)
            .map(|(&a, &me)| {
                let inv = (-(a - lse)).exp();
                let inner = inv * me + eb;
                -inner.max(LOG_EPS).ln()
            })
            .collect())
    }

    pub fn log_prob(&self, b: usize) -> Result<f64> {
        if b >= self.k() {
            return contract(format!("category {b} out of range"));
        }
        Ok(self.logits[b] - logsumexp(&self.logits))
    }

    /// Product of Gumbel densities with locations `log θ_i`.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let lse = logsumexp(&self.logits);
        self.logits
            .iter()
            .zip(z)
            .map(|(&a, &z)| {
                let d = z - (a - lse);
                -d - (-d).exp()
            })
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> RelaxedSample {
        Family::Categorical.sample(&self.logits, rng)
    }
}

/// `(-log v_i` for `i != b`, 0 at `b)` and `-log v_b`.
fn categorical_cond_consts(b: usize, v: &[f64]) -> (Vec<f64>, f64) {
    let masked = v
        .iter()
        .enumerate()
        .map(|(i, &x)| if i == b { 0.0 } else { -x.ln() })
        .collect();
    (masked, -v[b].ln())
}

/// Diagonal Gaussian with per-coordinate log standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() || mean.is_empty() {
            return contract("mean and log_std must have the same positive length");
        }
        Ok(Self { mean, log_std })
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|s| s.exp()).collect()
    }

    pub fn reparam(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(eps)
            .map(|((m, s), e)| m + s.exp() * e)
            .collect()
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(x)
            .map(|((m, s), x)| {
                let r = (x - m) * (-s).exp();
                -0.5 * r * r - s - 0.5 * LN_2PI
            })
            .sum()
    }
}

/// `mean + exp(log_std) * eps`, differentiable in both parameters.
pub fn gaussian_reparam_sample(tape: &mut Tape, mean: Var, log_std: Var, eps: &[f64]) -> Var {
    let std = tape.exp(log_std);
    let e = tape.constant(eps);
    let scaled = tape.mul(std, e);
    tape.add(mean, scaled)
}

/// Diagonal Gaussian log density of node `x`.
pub fn gaussian_log_prob(tape: &mut Tape, mean: Var, log_std: Var, x: Var) -> Var {
    let n = tape.len_of(x).max(tape.len_of(mean));
    let d = tape.sub(x, mean);
    let ns = tape.neg(log_std);
    let inv = tape.exp(ns);
    let r = tape.mul(d, inv);
    let r2 = tape.square(r);
    let r2 = tape.scale(r2, -0.5);
    let t = tape.sub(r2, log_std);
    let s = tape.sum(t);
    tape.shift(s, -0.5 * LN_2PI * n as f64)
}

/// One joint draw `(u, v) -> (z, b, z̃)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedSample {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub z: Vec<f64>,
    /// Bits for Bernoulli, one-hot for categorical.
    pub b: Vec<f64>,
    pub z_tilde: Vec<f64>,
}

impl RelaxedSample {
    /// Winning index of a categorical sample.
    pub fn category(&self) -> usize {
        argmax(&self.b)
    }
}

/// Discrete families with a relaxation and a conditional sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Bernoulli,
    Categorical,
}

impl Family {
    /// `H(z)`: bits, or a one-hot of the argmax.
    pub fn hard(self, z: &[f64]) -> Vec<f64> {
        match self {
            Family::Bernoulli => heaviside(z),
            Family::Categorical => one_hot(z.len(), argmax(z)),
        }
    }

    /// Full joint draw from explicit noise.
    pub fn from_noise(self, logits: &[f64], u: &[f64], v: &[f64]) -> Result<RelaxedSample> {
        let (z, b, z_tilde) = match self {
            Family::Bernoulli => {
                let d = BernoulliVector::new(logits.to_vec())?;
                let (z, b) = d.relaxed_sample(u)?;
                let zt = d.conditional_relaxed(&b, v)?;
                (z, b, zt)
            }
            Family::Categorical => {
                let d = CategoricalDist::new(logits.to_vec())?;
                let (z, i) = d.relaxed_sample(u)?;
                let zt = d.conditional_relaxed(i, v)?;
                (z, one_hot(logits.len(), i), zt)
            }
        };
        Ok(RelaxedSample {
            u: clamp_all(u)?,
            v: clamp_all(v)?,
            z,
            b,
            z_tilde,
        })
    }

    pub fn sample<R: Rng + ?Sized>(self, logits: &[f64], rng: &mut R) -> RelaxedSample {
        let n = logits.len();
        let u = uniform_noise(rng, n);
        let v = uniform_noise(rng, n);
        self.from_noise(logits, &u, &v)
            .expect("logits validated by caller")
    }

    /// Rejects samples whose relaxed values disagree with `b`.
    pub fn check(self, s: &RelaxedSample) -> Result<()> {
        if self.hard(&s.z) != s.b {
            return contract("corrupt sample: H(z) != b");
        }
        if self.hard(&s.z_tilde) != s.b {
            return contract("corrupt sample: H(z_tilde) != b");
        }
        Ok(())
    }

    /// Graph node for `z` given noise `u`; differentiable in `logits`.
    pub fn relaxed_node(self, tape: &mut Tape, logits: Var, u: &[f64]) -> Var {
        match self {
            Family::Bernoulli => {
                let l: Vec<f64> = u.iter().map(|&u| logit(u)).collect();
                let l = tape.constant(&l);
                tape.add(logits, l)
            }
            Family::Categorical => {
                let g: Vec<f64> = u.iter().map(|&u| gumbel(u)).collect();
                let ls = tape.log_softmax(logits);
                let g = tape.constant(&g);
                tape.add(ls, g)
            }
        }
    }

    /// Graph node for `z̃ ~ p(z | b, θ)` given noise `v`; differentiable in `logits`.
    pub fn conditional_node(self, tape: &mut Tape, logits: Var, b: &[f64], v: &[f64]) -> Var {
        match self {
            Family::Bernoulli => {
                let (sgn, k): (Vec<f64>, Vec<f64>) = b
                    .iter()
                    .zip(v)
                    .map(|(&bi, &vi)| bernoulli_cond_consts(bi, vi))
                    .unzip();
                let lk: Vec<f64> = k.iter().map(|k| k.max(LOG_EPS).ln()).collect();
                let sgn = tape.constant(&sgn);
                let k = tape.constant(&k);
                let lk = tape.constant(&lk);
                let x = tape.mul(logits, sgn);
                let s = tape.sigmoid(x);
                let ks = tape.mul(s, k);
                let nks = tape.neg(ks);
                let l1 = tape.log1p(nks);
                let ls = tape.log_sigmoid(x);
                let t = tape.sub(l1, lk);
                let t = tape.sub(t, ls);
                let t = tape.mul(t, sgn);
                tape.add(logits, t)
            }
            Family::Categorical => {
                let (masked, eb) = categorical_cond_consts(argmax(b), v);
                let ls = tape.log_softmax(logits);
                let nls = tape.neg(ls);
                let inv = tape.exp(nls);
                let m = tape.constant(&masked);
                let p = tape.mul(inv, m);
                let eb = tape.scalar(eb);
                let inner = tape.add(p, eb);
                let lg = tape.log(inner);
                tape.neg(lg)
            }
        }
    }

    /// `log p(b | θ)` as a graph expression.
    pub fn log_prob_hard(self, tape: &mut Tape, logits: Var, b: &[f64]) -> Result<Var> {
        let n = tape.len_of(logits);
        match self {
            Family::Bernoulli => {
                check_bits(b, n)?;
                let sgn: Vec<f64> = b.iter().map(|&x| if x == 1.0 { 1.0 } else { -1.0 }).collect();
                let sgn = tape.constant(&sgn);
                let x = tape.mul(logits, sgn);
                let ls = tape.log_sigmoid(x);
                Ok(tape.sum(ls))
            }
            Family::Categorical => {
                let i = check_one_hot(b, n)?;
                let ls = tape.log_softmax(logits);
                Ok(tape.slice(ls, i, 1))
            }
        }
    }

    /// `log p(z | θ)` of a relaxed value as a graph expression.
    pub fn log_prob_relaxed(self, tape: &mut Tape, logits: Var, z: Var) -> Var {
        match self {
            Family::Bernoulli => {
                let d = tape.sub(z, logits);
                let nd = tape.neg(d);
                let sp = tape.softplus(nd);
                let sp2 = tape.scale(sp, 2.0);
                let r = tape.sub(nd, sp2);
                tape.sum(r)
            }
            Family::Categorical => {
                let mu = tape.log_softmax(logits);
                let d = tape.sub(z, mu);
                let nd = tape.neg(d);
                let e = tape.exp(nd);
                let r = tape.sub(nd, e);
                tape.sum(r)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_two_sample, mean, std_err};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn bernoulli_relaxed_examples() {
        let d = BernoulliVector::from_probs(&[0.5]).unwrap();
        let (z, b) = d.relaxed_sample(&[0.5]).unwrap();
        assert_eq!(z, vec![0.0]);
        assert_eq!(b, vec![0.0]);

        let d = BernoulliVector::from_probs(&[0.8]).unwrap();
        let (z, b) = d.relaxed_sample(&[0.5]).unwrap();
        assert!((z[0] - 4f64.ln()).abs() < 1e-12);
        assert_eq!(b, vec![1.0]);
    }

    #[test]
    fn noise_outside_unit_interval_is_rejected() {
        let d = BernoulliVector::from_probs(&[0.5]).unwrap();
        assert!(d.relaxed_sample(&[1.5]).is_err());
        assert!(d.relaxed_sample(&[f64::NAN]).is_err());
        // Endpoints are clamped, not rejected.
        let (z, _) = d.relaxed_sample(&[0.0]).unwrap();
        assert!(z[0].is_finite());
    }

    #[test]
    fn bernoulli_mean_matches_probability() {
        let d = BernoulliVector::from_probs(&[0.5]).unwrap();
        let mut r = rng(1);
        let bs: Vec<f64> = (0..100_000).map(|_| d.sample(&mut r).b[0]).collect();
        assert!((mean(&bs) - 0.5).abs() < 3.0 * std_err(&bs));
    }

    #[test]
    fn bernoulli_conditional_examples() {
        let d = BernoulliVector::from_probs(&[0.5]).unwrap();
        let z1 = d.conditional_relaxed(&[1.0], &[0.5]).unwrap()[0];
        assert!((z1 - 3f64.ln()).abs() < 1e-12);
        let z0 = d.conditional_relaxed(&[0.0], &[0.5]).unwrap()[0];
        assert!((z0 + 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_conditional_matches_textbook_form() {
        // v' = v(1-θ) for b = 0, vθ + (1-θ) for b = 1; z̃ = logit θ + logit v'.
        let mut r = rng(2);
        for _ in 0..1000 {
            let theta: f64 = r.random_range(0.02..0.98);
            let v: f64 = r.random_range(0.01..0.99);
            let d = BernoulliVector::from_probs(&[theta]).unwrap();
            for b in [0.0, 1.0] {
                let vp = if b == 1.0 { v * theta + (1.0 - theta) } else { v * (1.0 - theta) };
                let expect = (theta / (1.0 - theta)).ln() + (vp / (1.0 - vp)).ln();
                let got = d.conditional_relaxed(&[b], &[v]).unwrap()[0];
                assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn bernoulli_conditional_marginal_matches_unconditional() {
        let d = BernoulliVector::from_probs(&[0.3]).unwrap();
        let mut r = rng(3);
        let n = 100_000;
        let mut direct = Vec::with_capacity(n);
        let mut cond = Vec::with_capacity(n);
        for _ in 0..n {
            let s = d.sample(&mut r);
            direct.push(s.z[0]);
            // Independent b, then z̃ | b.
            let b = if r.random::<f64>() < 0.3 { 1.0 } else { 0.0 };
            let v = uniform_noise(&mut r, 1);
            cond.push(d.conditional_relaxed(&[b], &v).unwrap()[0]);
        }
        assert!(ks_two_sample(&direct, &cond) < 0.02);
    }

    #[test]
    fn categorical_relaxed_example() {
        let d = CategoricalDist::new(vec![0.0; 3]).unwrap();
        let (z, b) = d.relaxed_sample(&[0.5, 0.9, 0.1]).unwrap();
        let l3 = (1.0f64 / 3.0).ln();
        let expect = [l3 + 0.366_512_920_6, l3 + 2.250_367_327_2, l3 - 0.834_032_445_2];
        for (a, e) in z.iter().zip(expect) {
            assert!((a - e).abs() < 1e-9, "{a} vs {e}");
        }
        assert_eq!(b, 1);
    }

    #[test]
    fn two_categories_reduce_to_bernoulli() {
        let theta1 = 0.3;
        let d = CategoricalDist::from_probs(&[1.0 - theta1, theta1]).unwrap();
        let mut r = rng(4);
        let hits: Vec<f64> = (0..100_000)
            .map(|_| if d.sample(&mut r).category() == 1 { 1.0 } else { 0.0 })
            .collect();
        assert!((mean(&hits) - theta1).abs() < 3.0 * std_err(&hits));
    }

    #[test]
    fn degenerate_categorical_always_picks_mass() {
        let d = CategoricalDist::from_probs(&[1.0, 0.0, 0.0]).unwrap();
        let mut r = rng(5);
        let zeros = (0..10_000).filter(|_| d.sample(&mut r).category() == 0).count();
        assert!(zeros as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn categorical_conditional_example() {
        let d = CategoricalDist::new(vec![0.0, 0.0]).unwrap();
        let z = d.conditional_relaxed(0, &[0.5, 0.5]).unwrap();
        assert!((z[0] - (-(2f64.ln()).ln())).abs() < 1e-12);
        assert!((z[1] - (-(3.0 * 2f64.ln()).ln())).abs() < 1e-12);
        assert_eq!(argmax(&z), 0);
    }

    #[test]
    fn categorical_conditional_marginal_matches_unconditional() {
        let mut r = rng(6);
        let logits: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let d = CategoricalDist::new(logits).unwrap();
        let probs = d.probs();
        let n = 100_000;
        let mut direct = vec![Vec::with_capacity(n); 4];
        let mut cond = vec![Vec::with_capacity(n); 4];
        for _ in 0..n {
            let s = d.sample(&mut r);
            let mut x: f64 = r.random();
            let mut b = 0;
            while b < 3 && x >= probs[b] {
                x -= probs[b];
                b += 1;
            }
            let v = uniform_noise(&mut r, 4);
            let zt = d.conditional_relaxed(b, &v).unwrap();
            for i in 0..4 {
                direct[i].push(s.z[i]);
                cond[i].push(zt[i]);
            }
        }
        for i in 0..4 {
            assert!(ks_two_sample(&direct[i], &cond[i]) < 0.02, "coordinate {i}");
        }
    }

    #[test]
    fn log_prob_examples() {
        let d = BernoulliVector::from_probs(&[0.5]).unwrap();
        assert!((d.log_prob(&[1.0]).unwrap() + 2f64.ln()).abs() < 1e-12);
        assert!(d.log_prob(&[0.5]).is_err());
        let c = CategoricalDist::new(vec![0.0; 4]).unwrap();
        assert!((c.log_prob(2).unwrap() - 0.25f64.ln()).abs() < 1e-12);
        assert!(c.log_prob(4).is_err());
        let g = DiagonalGaussian::new(vec![0.0], vec![0.0]).unwrap();
        assert!((g.log_prob(&[0.0]) + 0.918_938_533_204_672_7).abs() < 1e-12);

        let mut t = Tape::new();
        let a = t.param(&[0.0; 4]);
        assert!(Family::Categorical.log_prob_hard(&mut t, a, &[0.0, 1.0, 1.0, 0.0]).is_err());
        let lp = Family::Categorical
            .log_prob_hard(&mut t, a, &[0.0, 0.0, 1.0, 0.0])
            .unwrap();
        assert!((t.scalar_value(lp) - 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_reparam_examples() {
        let mut t = Tape::new();
        let m = t.param(&[2.0]);
        let s = t.param(&[3f64.ln()]);
        let a = gaussian_reparam_sample(&mut t, m, s, &[1.0]);
        assert!((t.scalar_value(a) - 5.0).abs() < 1e-12);
        let g = t.backward(a).unwrap();
        assert_eq!(g.wrt(m), &[1.0]);
        assert!((g.wrt(s)[0] - 3.0).abs() < 1e-12);

        let mut t = Tape::new();
        let m = t.param(&[0.0]);
        let s = t.param(&[0.0]);
        let a = gaussian_reparam_sample(&mut t, m, s, &[0.0]);
        assert_eq!(t.scalar_value(a), 0.0);
    }

    #[test]
    fn graph_and_value_samplers_agree_bitwise() {
        let mut r = rng(7);
        for fam in [Family::Bernoulli, Family::Categorical] {
            for _ in 0..2000 {
                let logits: Vec<f64> = (0..3).map(|_| r.random_range(-4.0..4.0)).collect();
                let s = fam.sample(&logits, &mut r);
                fam.check(&s).unwrap();
                let mut t = Tape::new();
                let a = t.param(&logits);
                let z = fam.relaxed_node(&mut t, a, &s.u);
                let zt = fam.conditional_node(&mut t, a, &s.b, &s.v);
                assert_eq!(t.value(z), s.z.as_slice());
                assert_eq!(t.value(zt), s.z_tilde.as_slice());
            }
        }
    }

    #[test]
    fn graph_log_densities_match_value_level() {
        let mut r = rng(8);
        let logits: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        for fam in [Family::Bernoulli, Family::Categorical] {
            let s = fam.sample(&logits, &mut r);
            let mut t = Tape::new();
            let a = t.param(&logits);
            let z = t.constant(&s.z);
            let lz = fam.log_prob_relaxed(&mut t, a, z);
            let lb = fam.log_prob_hard(&mut t, a, &s.b).unwrap();
            let (vz, vb) = match fam {
                Family::Bernoulli => {
                    let d = BernoulliVector::new(logits.clone()).unwrap();
                    (d.log_density(&s.z), d.log_prob(&s.b).unwrap())
                }
                Family::Categorical => {
                    let d = CategoricalDist::new(logits.clone()).unwrap();
                    (d.log_density(&s.z), d.log_prob(s.category()).unwrap())
                }
            };
            assert!((t.scalar_value(lz) - vz).abs() < 1e-12);
            assert!((t.scalar_value(lb) - vb).abs() < 1e-12);
        }
    }

    #[test]
    fn relaxed_densities_integrate_to_one() {
        // Logistic: trapezoid over a wide grid.
        let d = BernoulliVector::new(vec![0.7]).unwrap();
        let h = 1e-3;
        let total: f64 = (-40_000..40_000)
            .map(|i| d.log_density(&[i as f64 * h]).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
        // Gumbel marginal of one coordinate.
        let c = CategoricalDist::new(vec![0.3, -0.4]).unwrap();
        let mu = c.logits()[0] - logsumexp(c.logits());
        let total: f64 = (-20_000..60_000)
            .map(|i| {
                let x = i as f64 * h;
                let d = x - mu;
                (-d - (-d).exp()).exp() * h
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    /// Every outcome of `d` Bernoulli bits with its probability.
    fn enumerate_bits(d: usize) -> Vec<Vec<f64>> {
        (0..1usize << d)
            .map(|m| (0..d).map(|i| ((m >> i) & 1) as f64).collect())
            .collect()
    }

    #[test]
    fn score_has_zero_mean_by_enumeration() {
        let mut r = rng(9);
        for d in 1..=8 {
            let logits: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let dist = BernoulliVector::new(logits.clone()).unwrap();
            let mut total = vec![0.0; d];
            for b in enumerate_bits(d) {
                let p = dist.log_prob(&b).unwrap().exp();
                let mut t = Tape::new();
                let a = t.param(&logits);
                let lp = Family::Bernoulli.log_prob_hard(&mut t, a, &b).unwrap();
                let g = t.backward(lp).unwrap();
                for (acc, gi) in total.iter_mut().zip(g.wrt(a)) {
                    *acc += p * gi;
                }
            }
            assert!(total.iter().all(|x| x.abs() < 1e-12), "{total:?}");
        }
        for k in 2..=8 {
            let logits: Vec<f64> = (0..k).map(|_| r.random_range(-2.0..2.0)).collect();
            let dist = CategoricalDist::new(logits.clone()).unwrap();
            let mut total = vec![0.0; k];
            for i in 0..k {
                let p = dist.log_prob(i).unwrap().exp();
                let mut t = Tape::new();
                let a = t.param(&logits);
                let lp = Family::Categorical
                    .log_prob_hard(&mut t, a, &one_hot(k, i))
                    .unwrap();
                let g = t.backward(lp).unwrap();
                for (acc, gi) in total.iter_mut().zip(g.wrt(a)) {
                    *acc += p * gi;
                }
            }
            assert!(total.iter().all(|x| x.abs() < 1e-12), "{total:?}");
        }
    }

    #[test]
    fn score_has_zero_mean_by_monte_carlo() {
        let mut r = rng(10);
        let logits = vec![0.4, -1.1, 0.9];
        for fam in [Family::Bernoulli, Family::Categorical] {
            let mut acc = crate::stats::RunningStats::new(3);
            for _ in 0..20_000 {
                let s = fam.sample(&logits, &mut r);
                let mut t = Tape::new();
                let a = t.param(&logits);
                let lp = fam.log_prob_hard(&mut t, a, &s.b).unwrap();
                acc.push(t.backward(lp).unwrap().wrt(a));
            }
            for (m, se) in acc.mean().iter().zip(acc.std_err()) {
                assert!(m.abs() < 4.0 * se, "{fam:?}: {m} vs se {se}");
            }
        }
    }

    #[test]
    fn log_prob_gradients_match_finite_differences() {
        let logits = [0.4, -1.1, 0.9];
        let h = 1e-5;
        for fam in [Family::Bernoulli, Family::Categorical] {
            let mut r = rng(11);
            let s = fam.sample(&logits, &mut r);
            let eval = |l: &[f64]| {
                let mut t = Tape::new();
                let a = t.param(l);
                let z = t.constant(&s.z);
                let lz = fam.log_prob_relaxed(&mut t, a, z);
                let lb = fam.log_prob_hard(&mut t, a, &s.b).unwrap();
                let y = t.add(lz, lb);
                let g = t.backward(y).unwrap().wrt(a).to_vec();
                (t.scalar_value(y), g)
            };
            let (_, g) = eval(&logits);
            for i in 0..3 {
                let mut lp = logits;
                lp[i] += h;
                let mut lm = logits;
                lm[i] -= h;
                let fd = (eval(&lp).0 - eval(&lm).0) / (2.0 * h);
                assert!((g[i] - fd).abs() / g[i].abs().max(1e-6) < 1e-5, "{fam:?} {i}");
            }
        }
    }

    proptest! {
        #[test]
        fn conditioning_is_exact(
            logits in proptest::collection::vec(-8.0f64..8.0, 1..6),
            seed in 0u64..1000,
        ) {
            let mut r = rng(seed);
            for fam in [Family::Bernoulli, Family::Categorical] {
                if fam == Family::Categorical && logits.len() < 2 {
                    continue;
                }
                let s = fam.sample(&logits, &mut r);
                prop_assert!(fam.check(&s).is_ok());
                // Every possible b, not just the sampled one.
                for i in 0..logits.len() {
                    let b = match fam {
                        Family::Bernoulli => {
                            let mut b = s.b.clone();
                            b[i] = 1.0 - b[i];
                            b
                        }
                        Family::Categorical => one_hot(logits.len(), i),
                    };
                    let mut t = Tape::new();
                    let a = t.constant(&logits);
                    let zt = fam.conditional_node(&mut t, a, &b, &s.v);
                    prop_assert_eq!(fam.hard(t.value(zt)), b);
                }
            }
        }
    }
}
