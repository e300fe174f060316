//! Binary datasets: text format and a noisy-OR generator with a tractable likelihood.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::graph::logsumexp;

/// Binary vectors of a common dimension, split into train and validation sets.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryDataset {
    pub d: usize,
    pub train: Vec<Vec<f64>>,
    pub valid: Vec<Vec<f64>>,
}

pub fn check_binary(x: &[f64]) -> Result<()> {
    match x.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => contract(format!("non-binary value {v} in data")),
        None => Ok(()),
    }
}

/// Parses one example per line, `D` whitespace-separated `0`/`1` tokens.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_examples(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| match t {
                "0" => Ok(0.0),
                "1" => Ok(1.0),
                other => Err(Error::Config(format!("line {}: token '{other}' is not 0 or 1", no + 1))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = out.first() {
            if first.len() != row.len() {
                return Err(Error::Config(format!(
                    "line {}: {} values, expected {}",
                    no + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        out.push(row);
    }
    if out.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    Ok(out)
}

pub fn format_examples(examples: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for x in examples {
        let row: Vec<&str> = x.iter().map(|&v| if v == 1.0 { "1" } else { "0" }).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

impl BinaryDataset {
    pub fn new(train: Vec<Vec<f64>>, valid: Vec<Vec<f64>>) -> Result<Self> {
        let Some(d) = train.first().map(Vec::len) else {
            return contract("training set is empty");
        };
        for x in train.iter().chain(&valid) {
            if x.len() != d {
                return contract(format!("example of length {} in a dataset of dimension {d}", x.len()));
            }
            check_binary(x)?;
        }
        Ok(Self { d, train, valid })
    }

    /// Reads a file and holds out the last `valid_frac` of the lines.
    pub fn load(path: &Path, valid_frac: f64) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut all = parse_examples(&text)?;
        if !(0.0..1.0).contains(&valid_frac) {
            return Err(Error::Config(format!("validation fraction {valid_frac} not in [0, 1)")));
        }
        let n_valid = ((all.len() as f64) * valid_frac).round() as usize;
        let valid = all.split_off(all.len() - n_valid);
        Self::new(all, valid)
    }

    /// Writes train then validation examples.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = self.train.clone();
        all.extend(self.valid.iter().cloned());
        fs::write(path, format_examples(&all))?;
        Ok(())
    }

    pub fn train_mean(&self) -> Vec<f64> {
        let n = self.train.len() as f64;
        (0..self.d)
            .map(|j| self.train.iter().map(|x| x[j]).sum::<f64>() / n)
            .collect()
    }
}

/// `x_d = 1` with probability `1 - (1 - leak) Π_k (1 - w_kd)^{c_k}`, `c_k ~ Bernoulli(prior_k)`.
#[derive(Clone, Debug)]
pub struct NoisyOr {
    pub d: usize,
    pub prior: Vec<f64>,
    /// `k × d`, row-major.
    pub weights: Vec<f64>,
    pub leak: f64,
}

impl NoisyOr {
    /// Each cause lights a random patch of pixels with strength 0.9.
    pub fn random<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> Self {
        let mut weights = vec![0.0; k * d];
        let patch = (d / 4).max(1);
        for c in 0..k {
            let mut idx: Vec<usize> = (0..d).collect();
            idx.shuffle(rng);
            for &j in &idx[..patch] {
                weights[c * d + j] = 0.9;
            }
        }
        let prior = (0..k).map(|_| rng.random_range(0.1..0.4)).collect();
        Self {
            d,
            prior,
            weights,
            leak: 0.02,
        }
    }

    pub fn k(&self) -> usize {
        self.prior.len()
    }

    fn pixel_probs(&self, causes: &[bool]) -> Vec<f64> {
        (0..self.d)
            .map(|j| {
                let off: f64 = causes
                    .iter()
                    .enumerate()
                    .filter(|(_, &on)| on)
                    .map(|(c, _)| 1.0 - self.weights[c * self.d + j])
                    .product();
                1.0 - (1.0 - self.leak) * off
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let causes: Vec<bool> = self.prior.iter().map(|&p| rng.random::<f64>() < p).collect();
        self.pixel_probs(&causes)
            .into_iter()
            .map(|p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
            .collect()
    }

    /// Exact `log p(x)` by enumerating all `2^k` cause patterns.
    pub fn log_prob(&self, x: &[f64]) -> f64 {
        let k = self.k();
        let terms: Vec<f64> = (0..1usize << k)
            .map(|mask| {
                let causes: Vec<bool> = (0..k).map(|c| (mask >> c) & 1 == 1).collect();
                let lp_c: f64 = causes
                    .iter()
                    .zip(&self.prior)
                    .map(|(&on, &p)| if on { p.ln() } else { (1.0 - p).ln() })
                    .sum();
                let lp_x: f64 = self
                    .pixel_probs(&causes)
                    .iter()
                    .zip(x)
                    .map(|(&p, &xi)| if xi == 1.0 { p.ln() } else { (1.0 - p).ln() })
                    .sum();
                lp_c + lp_x
            })
            .collect();
        logsumexp(&terms)
    }

    pub fn dataset<R: Rng + ?Sized>(&self, n_train: usize, n_valid: usize, rng: &mut R) -> BinaryDataset {
        let train = (0..n_train).map(|_| self.sample(rng)).collect();
        let valid = (0..n_valid).map(|_| self.sample(rng)).collect();
        BinaryDataset::new(train, valid).expect("generator output is binary")
    }

    /// Mean exact log-likelihood over a set of examples.
    pub fn mean_log_prob(&self, xs: &[Vec<f64>]) -> f64 {
        xs.iter().map(|x| self.log_prob(x)).sum::<f64>() / xs.len() as f64
    }
}
