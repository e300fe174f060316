//! Control-variate surrogates `c_φ`: plain MLPs and the relaxation-plus-residual form.
//!
//! Parameters live in flat `Vec<f64>` buffers outside any tape. Each sample
//! registers them as tape leaves (`register`), builds the forward expression,
//! and reads gradients back in the same flat order.

use rand::Rng;

use crate::error::{contract, Result};
use crate::graph::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

/// Fully connected network; hidden layers share one activation, the output is linear.
///
/// Flat layout per layer: weights `fan_out x fan_in` row-major, then biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Activation,
    pub params: Vec<f64>,
    pub weight_decay: f64,
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`, parameters zeroed.
    pub fn new(sizes: &[usize], hidden: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return contract("an MLP needs at least input and output sizes, all positive");
        }
        let n = sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            hidden,
            params: vec![0.0; n],
            weight_decay: 0.0,
        })
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sizes.windows(2).map(|w| (w[0], w[1]))
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut off = 0;
        let shapes: Vec<_> = self.layer_shapes().collect();
        for (fan_in, fan_out) in shapes {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut self.params[off..off + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound);
            }
            off += fan_in * fan_out;
            self.params[off..off + fan_out].fill(0.0);
            off += fan_out;
        }
    }

    /// One leaf per weight matrix and bias vector, in flat order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        let mut vars = Vec::with_capacity(2 * (self.sizes.len() - 1));
        let mut off = 0;
        for (fan_in, fan_out) in self.layer_shapes() {
            vars.push(tape.param(&self.params[off..off + fan_in * fan_out]));
            off += fan_in * fan_out;
            vars.push(tape.param(&self.params[off..off + fan_out]));
            off += fan_out;
        }
        vars
    }

    /// Same layout as [`Mlp::register`] but as constants (no gradient).
    pub fn register_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        let mut vars = Vec::with_capacity(2 * (self.sizes.len() - 1));
        let mut off = 0;
        for (fan_in, fan_out) in self.layer_shapes() {
            vars.push(tape.constant(&self.params[off..off + fan_in * fan_out]));
            off += fan_in * fan_out;
            vars.push(tape.constant(&self.params[off..off + fan_out]));
            off += fan_out;
        }
        vars
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        if tape.len_of(x) != self.input_size() {
            return contract(format!(
                "MLP input has length {}, expected {}",
                tape.len_of(x),
                self.input_size()
            ));
        }
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for (l, pair) in vars.chunks(2).enumerate() {
            h = tape.affine(pair[0], h, pair[1]);
            if l + 1 < layers {
                h = self.hidden.apply(tape, h);
            }
        }
        Ok(h)
    }

    /// Forward pass with parameters read from `flat[offset..offset + num_params]`.
    pub fn forward_flat(&self, tape: &mut Tape, flat: Var, offset: usize, x: Var) -> Result<Var> {
        if tape.len_of(x) != self.input_size() {
            return contract(format!(
                "MLP input has length {}, expected {}",
                tape.len_of(x),
                self.input_size()
            ));
        }
        let layers = self.sizes.len() - 1;
        let mut h = x;
        let mut off = offset;
        for (l, (fan_in, fan_out)) in self.layer_shapes().enumerate() {
            let w = tape.slice(flat, off, fan_in * fan_out);
            off += fan_in * fan_out;
            let b = tape.slice(flat, off, fan_out);
            off += fan_out;
            h = tape.affine(w, h, b);
            if l + 1 < layers {
                h = self.hidden.apply(tape, h);
            }
        }
        Ok(h)
    }

    /// Plain evaluation without a tape.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_size() {
            return contract("MLP input size mismatch");
        }
        let layers = self.sizes.len() - 1;
        let mut h = x.to_vec();
        let mut off = 0;
        for (l, (fan_in, fan_out)) in self.layer_shapes().enumerate() {
            let w = &self.params[off..off + fan_in * fan_out];
            off += fan_in * fan_out;
            let b = &self.params[off..off + fan_out];
            off += fan_out;
            h = (0..fan_out)
                .map(|i| {
                    let s: f64 = w[i * fan_in..(i + 1) * fan_in]
                        .iter()
                        .zip(&h)
                        .map(|(w, x)| w * x)
                        .sum();
                    let y = s + b[i];
                    if l + 1 < layers {
                        self.hidden.eval(y)
                    } else {
                        y
                    }
                })
                .collect();
        }
        Ok(h)
    }

    /// Adds the weight-decay term `2 * wd * ρ` to a gradient over `params`.
    pub fn add_weight_decay(&self, grad: &mut [f64]) {
        if self.weight_decay > 0.0 {
            for (g, p) in grad.iter_mut().zip(&self.params) {
                *g += 2.0 * self.weight_decay * p;
            }
        }
    }
}

/// Concatenate per-leaf gradients into one flat vector.
pub fn flatten(parts: &[Vec<f64>]) -> Vec<f64> {
    parts.iter().flatten().copied().collect()
}

/// Continuous relaxation of a hard map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// `sigmoid(z / λ)` per coordinate.
    Sigmoid,
    /// `softmax(z / λ)`.
    Softmax,
}

/// `c_φ(z) = η · f(σ_λ(z)) + r_ρ(x)` with `x` usually `z`.
///
/// Trainable entries of φ in flat order: `log λ`, then `η` when trainable,
/// then the residual's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredSurrogate {
    pub relaxation: Relaxation,
    pub log_lambda: f64,
    /// `None` pins η at 1.
    pub eta: Option<f64>,
    pub residual: Option<Mlp>,
}

/// Tape handles of a registered [`StructuredSurrogate`].
#[derive(Clone, Debug)]
pub struct StructuredVars {
    pub log_lambda: Var,
    pub eta: Option<Var>,
    pub residual: Vec<Var>,
}

impl StructuredVars {
    /// All leaves in flat-parameter order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.log_lambda];
        v.extend(self.eta);
        v.extend(&self.residual);
        v
    }
}

impl StructuredSurrogate {
    pub fn new(
        relaxation: Relaxation,
        lambda: f64,
        eta: Option<f64>,
        residual: Option<Mlp>,
    ) -> Result<Self> {
        if !(lambda > 0.0) {
            return contract(format!("temperature must be positive, got {lambda}"));
        }
        if let Some(r) = &residual {
            if r.output_size() != 1 {
                return contract("residual network must have scalar output");
            }
        }
        Ok(Self {
            relaxation,
            log_lambda: lambda.ln(),
            eta,
            residual,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.log_lambda.exp()
    }

    pub fn num_params(&self) -> usize {
        1 + usize::from(self.eta.is_some()) + self.residual.as_ref().map_or(0, Mlp::num_params)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = vec![self.log_lambda];
        p.extend(self.eta);
        if let Some(r) = &self.residual {
            p.extend_from_slice(&r.params);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        self.log_lambda = p[0];
        let mut off = 1;
        if let Some(eta) = &mut self.eta {
            *eta = p[1];
            off = 2;
        }
        if let Some(r) = &mut self.residual {
            r.params.copy_from_slice(&p[off..]);
        }
    }

    pub fn register(&self, tape: &mut Tape) -> StructuredVars {
        StructuredVars {
            log_lambda: tape.param(&[self.log_lambda]),
            eta: self.eta.map(|e| tape.param(&[e])),
            residual: self
                .residual
                .as_ref()
                .map_or_else(Vec::new, |r| r.register(tape)),
        }
    }

    /// `σ_λ(z)`.
    pub fn relax(&self, tape: &mut Tape, vars: &StructuredVars, z: Var) -> Var {
        let nl = tape.neg(vars.log_lambda);
        let inv = tape.exp(nl);
        let scaled = tape.mul(z, inv);
        match self.relaxation {
            Relaxation::Sigmoid => tape.sigmoid(scaled),
            Relaxation::Softmax => tape.softmax(scaled),
        }
    }

    /// `η · f(σ_λ(z)) + r_ρ(residual_input)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &StructuredVars,
        z: Var,
        residual_input: Var,
        f: impl FnOnce(&mut Tape, Var) -> Var,
    ) -> Result<Var> {
        let relaxed = self.relax(tape, vars, z);
        let mut c = f(tape, relaxed);
        if let Some(eta) = vars.eta {
            c = tape.mul(c, eta);
        }
        if let Some(r) = &self.residual {
            let out = r.forward(tape, &vars.residual, residual_input)?;
            c = tape.add(c, out);
        }
        Ok(c)
    }

    /// Adds residual weight decay to a flat φ-gradient.
    pub fn add_weight_decay(&self, grad: &mut [f64]) {
        if let Some(r) = &self.residual {
            let off = 1 + usize::from(self.eta.is_some());
            r.add_weight_decay(&mut grad[off..]);
        }
    }
}

/// `c(z) = η · f(σ_λ(z))`: only η and λ are trainable.
pub fn rebar_surrogate(relaxation: Relaxation, lambda: f64, eta: f64) -> Result<StructuredSurrogate> {
    StructuredSurrogate::new(relaxation, lambda, Some(eta), None)
}

/// Any control variate usable by the estimators.
#[derive(Clone, Debug, PartialEq)]
pub enum Surrogate {
    /// `c ≡ 0`.
    None,
    /// `c(x) = mlp(x)`.
    Mlp(Mlp),
    /// Relaxed objective plus optional residual; the residual reads the same input.
    Structured(StructuredSurrogate),
}

/// Registered leaves of a [`Surrogate`].
#[derive(Clone, Debug)]
pub enum SurrogateVars {
    None,
    Mlp(Vec<Var>),
    Structured(StructuredVars),
}

impl SurrogateVars {
    /// All φ leaves in flat order.
    pub fn all(&self) -> Vec<Var> {
        match self {
            SurrogateVars::None => Vec::new(),
            SurrogateVars::Mlp(v) => v.clone(),
            SurrogateVars::Structured(s) => s.all(),
        }
    }
}

impl Surrogate {
    pub fn num_params(&self) -> usize {
        match self {
            Surrogate::None => 0,
            Surrogate::Mlp(m) => m.num_params(),
            Surrogate::Structured(s) => s.num_params(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Surrogate::None => Vec::new(),
            Surrogate::Mlp(m) => m.params.clone(),
            Surrogate::Structured(s) => s.params(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        match self {
            Surrogate::None => assert!(p.is_empty()),
            Surrogate::Mlp(m) => m.params.copy_from_slice(p),
            Surrogate::Structured(s) => s.set_params(p),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> SurrogateVars {
        match self {
            Surrogate::None => SurrogateVars::None,
            Surrogate::Mlp(m) => SurrogateVars::Mlp(m.register(tape)),
            Surrogate::Structured(s) => SurrogateVars::Structured(s.register(tape)),
        }
    }

    /// `c(x)`; `f` is the objective on relaxed inputs, used only by the structured form.
    pub fn build(
        &self,
        tape: &mut Tape,
        vars: &SurrogateVars,
        x: Var,
        f: &dyn Fn(&mut Tape, Var) -> Var,
    ) -> Result<Var> {
        match (self, vars) {
            (Surrogate::None, _) => Ok(tape.scalar(0.0)),
            (Surrogate::Mlp(m), SurrogateVars::Mlp(v)) => {
                let y = m.forward(tape, v, x)?;
                if tape.len_of(y) != 1 {
                    return contract("surrogate network must have scalar output");
                }
                Ok(y)
            }
            (Surrogate::Structured(s), SurrogateVars::Structured(v)) => s.forward(tape, v, x, x, f),
            _ => contract("surrogate leaves registered for a different surrogate"),
        }
    }

    pub fn add_weight_decay(&self, grad: &mut [f64]) {
        match self {
            Surrogate::None => {}
            Surrogate::Mlp(m) => m.add_weight_decay(grad),
            Surrogate::Structured(s) => s.add_weight_decay(grad),
        }
    }
}
