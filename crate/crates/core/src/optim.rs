//! SGD, Adam and RMSProp over flat parameter vectors.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptKind {
    Sgd,
    Adam,
    RmsProp,
}

impl FromStr for OptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptKind::Sgd),
            "adam" => Ok(OptKind::Adam),
            "rmsprop" => Ok(OptKind::RmsProp),
            other => Err(Error::Config(format!(
                "unknown optimizer '{other}' (valid: sgd, adam, rmsprop)"
            ))),
        }
    }
}

impl fmt::Display for OptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptKind::Sgd => "sgd",
            OptKind::Adam => "adam",
            OptKind::RmsProp => "rmsprop",
        })
    }
}

/// Optimizer state for one parameter vector. Minimizes.
#[derive(Clone, Debug)]
pub struct OptState {
    pub kind: OptKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub decay: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl OptState {
    pub fn new(kind: OptKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            decay: 0.9,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptKind::Adam, lr)
    }

    pub fn rmsprop(lr: f64) -> Self {
        Self::new(OptKind::RmsProp, lr)
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    /// One descent step. Buffers are sized on first use and fixed afterwards.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "optimizer got {} parameters and {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step: self.t,
                reason: format!("non-finite gradient at coordinate {i}"),
            });
        }
        if self.m.is_empty() && self.v.is_empty() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        } else if self.m.len() != params.len() {
            return Err(Error::Contract("parameter length changed between steps".into()));
        }
        self.t += 1;
        match self.kind {
            OptKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptKind::Adam => {
                let t = self.t as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= self.lr * mh / (vh.sqrt() + self.eps);
                }
            }
            OptKind::RmsProp => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.v) {
                    *v = self.decay * *v + (1.0 - self.decay) * g * g;
                    *p -= self.lr * g / (v.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}
