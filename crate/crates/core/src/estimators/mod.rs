//! Single-sample gradient estimators for `∂/∂θ E_p(b|θ)[f(b)]`.
//!
//! Every estimator records `ĝ` as a node on the caller's tape, built with
//! [`Tape::vjp`], so `ĝ² = Σᵢ ĝᵢ²` can be differentiated again with respect to
//! surrogate parameters φ ([`variance_grad`]). The objective value `f(b)` only
//! ever enters as a constant.
//!
//! `theta` is the leaf the gradient is taken against. Distribution parameters
//! (logits, means) are ordinary nodes computed from it, so the same code
//! serves gradients in logit space and in probability space.

mod lax_loop;

pub use lax_loop::{
    discrete_estimate, run_lax_loop, run_lax_loop_with, DiscreteEstimate, DiscreteProblem, LaxConfig,
    LaxTrace, TraceRow, THETA_GUARD,
};

use std::fmt;
use std::str::FromStr;

use crate::distributions::{Family, RelaxedSample};
use crate::error::{contract, Error, Result};
use crate::graph::{Tape, Var};
use crate::surrogate::Surrogate;

/// Builds `c_φ(x)` on the tape.
pub type SurrogateFn<'a> = dyn FnMut(&mut Tape, Var) -> Result<Var> + 'a;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimatorKind {
    Reinforce,
    Reparam,
    Lax,
    Dlax,
    Relax,
    Rebar,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Reinforce,
        EstimatorKind::Reparam,
        EstimatorKind::Lax,
        EstimatorKind::Dlax,
        EstimatorKind::Relax,
        EstimatorKind::Rebar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Reinforce => "reinforce",
            EstimatorKind::Reparam => "reparam",
            EstimatorKind::Lax => "lax",
            EstimatorKind::Dlax => "dlax",
            EstimatorKind::Relax => "relax",
            EstimatorKind::Rebar => "rebar",
        }
    }

    pub fn needs_discrete(self) -> bool {
        matches!(self, EstimatorKind::Dlax | EstimatorKind::Relax | EstimatorKind::Rebar)
    }

    pub fn needs_reparam(self) -> bool {
        matches!(self, EstimatorKind::Lax | EstimatorKind::Reparam)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown estimator '{s}' (valid: {})",
                    names.join(", ")
                ))
            })
    }
}

/// Estimator choice, its control variate and the direct-dependence flag.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub surrogate: Surrogate,
    pub direct_dependence: bool,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, surrogate: Surrogate) -> Self {
        Self {
            kind,
            surrogate,
            direct_dependence: false,
        }
    }

    /// Checks the estimator against the kind of random variable it will see.
    pub fn validate(&self, discrete: bool) -> Result<()> {
        if self.kind.needs_discrete() && !discrete {
            return Err(Error::Config(format!(
                "{} needs a discrete distribution",
                self.kind
            )));
        }
        if self.kind.needs_reparam() && discrete {
            return Err(Error::Config(format!(
                "{} needs a reparameterizable distribution",
                self.kind
            )));
        }
        let rebar_shaped = matches!(
            &self.surrogate,
            Surrogate::Structured(s) if s.eta.is_some() && s.residual.is_none()
        );
        if self.kind == EstimatorKind::Rebar && !rebar_shaped {
            return Err(Error::Config(
                "rebar needs a surrogate of the form eta * f(relaxed z)".into(),
            ));
        }
        if matches!(self.kind, EstimatorKind::Reinforce | EstimatorKind::Reparam)
            && self.surrogate != Surrogate::None
        {
            return Err(Error::Config(format!("{} takes no surrogate", self.kind)));
        }
        Ok(())
    }
}

/// Per-term decomposition of an estimate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Terms {
    /// Terms multiplying a score `∂ log p / ∂θ`.
    pub score: Vec<f64>,
    /// Pathwise terms through relaxed or reparameterized samples.
    pub reparam: Vec<f64>,
    /// Explicit `∂f(b, θ)/∂θ`.
    pub correction: Vec<f64>,
}

/// One gradient estimate.
#[derive(Clone, Debug)]
pub struct GradEstimate {
    pub g_theta: Vec<f64>,
    /// `ĝ` as a node.
    pub g: Var,
    /// `Σᵢ ĝᵢ²`, differentiable in φ.
    pub g_sq: Var,
    pub terms: Terms,
}

impl GradEstimate {
    pub(crate) fn assemble(tape: &mut Tape, score: Var, reparam: Option<Var>) -> Result<Self> {
        let g = match reparam {
            Some(r) => tape.add(score, r),
            None => score,
        };
        let n = tape.len_of(g);
        let reparam_vals = reparam.map_or_else(|| vec![0.0; n], |r| tape.value(r).to_vec());
        let terms = Terms {
            score: tape.value(score).to_vec(),
            reparam: reparam_vals,
            correction: vec![0.0; n],
        };
        Self::from_node(tape, g, terms)
    }

    fn from_node(tape: &mut Tape, g: Var, terms: Terms) -> Result<Self> {
        let sq = tape.square(g);
        let g_sq = tape.sum(sq);
        let g_theta = tape.value(g).to_vec();
        if g_theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical { node: g.index() });
        }
        Ok(Self {
            g_theta,
            g,
            g_sq,
            terms,
        })
    }

    /// A fixed vector, e.g. a known control-variate mean.
    pub fn constant(tape: &mut Tape, values: &[f64]) -> Result<Self> {
        let g = tape.constant(values);
        let terms = Terms {
            score: values.to_vec(),
            reparam: vec![0.0; values.len()],
            correction: vec![0.0; values.len()],
        };
        Self::from_node(tape, g, terms)
    }

    pub fn len(&self) -> usize {
        self.g_theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g_theta.is_empty()
    }

    pub fn g_sq_value(&self, tape: &Tape) -> f64 {
        tape.scalar_value(self.g_sq)
    }
}

/// `f(b) · ∂ log p(b|θ)/∂θ`.
pub fn reinforce(tape: &mut Tape, theta: Var, f_value: f64, logp: Var) -> Result<GradEstimate> {
    let seed = tape.scalar(f_value);
    let score = tape.vjp(&[(logp, seed)], theta)?;
    GradEstimate::assemble(tape, score, None)
}

/// Pathwise gradient of `f` built on a reparameterized sample.
pub fn reparam(tape: &mut Tape, theta: Var, f: Var) -> Result<GradEstimate> {
    if tape.len_of(f) != 1 {
        return contract("objective must be scalar");
    }
    let one = tape.scalar(1.0);
    let path = tape.vjp(&[(f, one)], theta)?;
    let zero = tape.zeros(tape.len_of(theta));
    GradEstimate::assemble(tape, zero, Some(path))
}

/// `g - cv + cv_mean`, termwise.
pub fn apply_control_variate(
    tape: &mut Tape,
    g: &GradEstimate,
    cv: &GradEstimate,
    cv_mean: &GradEstimate,
) -> Result<GradEstimate> {
    if g.len() != cv.len() || g.len() != cv_mean.len() {
        return contract(format!(
            "control variate lengths differ: {}, {}, {}",
            g.len(),
            cv.len(),
            cv_mean.len()
        ));
    }
    let d = tape.sub(g.g, cv.g);
    let out = tape.add(d, cv_mean.g);
    let comb = |a: &[f64], b: &[f64], c: &[f64]| -> Vec<f64> {
        a.iter().zip(b).zip(c).map(|((a, b), c)| a - b + c).collect()
    };
    let terms = Terms {
        score: comb(&g.terms.score, &cv.terms.score, &cv_mean.terms.score),
        reparam: comb(&g.terms.reparam, &cv.terms.reparam, &cv_mean.terms.reparam),
        correction: comb(&g.terms.correction, &cv.terms.correction, &cv_mean.terms.correction),
    };
    GradEstimate::from_node(tape, out, terms)
}

/// `[f(b) - c(b)] ∂ log p(b|θ)/∂θ + ∂c(b)/∂θ` for a reparameterized `b`.
///
/// `logp_b` must treat `b` as fixed (built on `stop_gradient(b)`), while `b`
/// itself keeps its pathwise dependence on θ.
pub fn lax(
    tape: &mut Tape,
    theta: Var,
    f_value: f64,
    b: Var,
    logp_b: Var,
    c: &mut SurrogateFn<'_>,
) -> Result<GradEstimate> {
    let cb = c(tape, b)?;
    let f = tape.scalar(f_value);
    let seed = tape.sub(f, cb);
    let score = tape.vjp(&[(logp_b, seed)], theta)?;
    let one = tape.scalar(1.0);
    let path = tape.vjp(&[(cb, one)], theta)?;
    GradEstimate::assemble(tape, score, Some(path))
}

/// `f(b) ∂ log p(b)/∂θ - c(z) ∂ log p(z)/∂θ + ∂c(z)/∂θ` with `b = H(z)`.
pub fn dlax(
    tape: &mut Tape,
    theta: Var,
    logits: Var,
    family: Family,
    f_value: f64,
    sample: &RelaxedSample,
    c: &mut SurrogateFn<'_>,
) -> Result<GradEstimate> {
    check_hard(family, &sample.z, &sample.b, "z")?;
    let z = family.relaxed_node(tape, logits, &sample.u);
    check_hard(family, tape.value(z), &sample.b, "z")?;
    let logp_b = family.log_prob_hard(tape, logits, &sample.b)?;
    let z_fixed = tape.stop_gradient(z);
    let logp_z = family.log_prob_relaxed(tape, logits, z_fixed);
    let cz = c(tape, z)?;
    let f = tape.scalar(f_value);
    let neg_cz = tape.neg(cz);
    let score = tape.vjp(&[(logp_b, f), (logp_z, neg_cz)], theta)?;
    let one = tape.scalar(1.0);
    let path = tape.vjp(&[(cz, one)], theta)?;
    GradEstimate::assemble(tape, score, Some(path))
}

/// `[f(b) - c(z̃)] ∂ log p(b)/∂θ + ∂c(z)/∂θ - ∂c(z̃)/∂θ`.
///
/// With `c = η f(σ_λ(·))` this is REBAR.
pub fn relax(
    tape: &mut Tape,
    theta: Var,
    logits: Var,
    family: Family,
    f_value: f64,
    sample: &RelaxedSample,
    c: &mut SurrogateFn<'_>,
) -> Result<GradEstimate> {
    check_hard(family, &sample.z, &sample.b, "z")?;
    check_hard(family, &sample.z_tilde, &sample.b, "z_tilde")?;
    let z = family.relaxed_node(tape, logits, &sample.u);
    let zt = family.conditional_node(tape, logits, &sample.b, &sample.v);
    check_hard(family, tape.value(z), &sample.b, "z")?;
    check_hard(family, tape.value(zt), &sample.b, "z_tilde")?;
    let logp_b = family.log_prob_hard(tape, logits, &sample.b)?;
    let cz = c(tape, z)?;
    let czt = c(tape, zt)?;
    let f = tape.scalar(f_value);
    let seed = tape.sub(f, czt);
    let score = tape.vjp(&[(logp_b, seed)], theta)?;
    let one = tape.scalar(1.0);
    let minus_one = tape.scalar(-1.0);
    let path = tape.vjp(&[(cz, one), (czt, minus_one)], theta)?;
    GradEstimate::assemble(tape, score, Some(path))
}

fn check_hard(family: Family, z: &[f64], b: &[f64], what: &str) -> Result<()> {
    if family.hard(z) != b {
        return contract(format!("corrupt sample: H({what}) != b"));
    }
    Ok(())
}

/// `∂ĝ²/∂φ` for each φ leaf.
pub fn variance_grad(tape: &Tape, g: &GradEstimate, phi: &[Var]) -> Result<Vec<Vec<f64>>> {
    tape.backward_wrt(g.g_sq, phi)
}

/// Adds `∂f(b, θ)/∂θ` (computed with `b` frozen) to an estimate.
pub fn direct_dependence_correction(
    tape: &mut Tape,
    g: &GradEstimate,
    df_dtheta: &[f64],
) -> Result<GradEstimate> {
    if df_dtheta.len() != g.len() {
        return contract(format!(
            "correction has length {}, estimate has {}",
            df_dtheta.len(),
            g.len()
        ));
    }
    let d = tape.constant(df_dtheta);
    let out = tape.add(g.g, d);
    let mut terms = g.terms.clone();
    for (t, d) in terms.correction.iter_mut().zip(df_dtheta) {
        *t += d;
    }
    GradEstimate::from_node(tape, out, terms)
}

#[cfg(test)]
mod tests;
