//! Model classes: linear `⟨θ, x⟩`, wide fully-connected networks in NTK
//! parameterization with a zero-initialized output layer, and the
//! first-order linearization of such a network around its initialization.
//!
//! Every model exposes a flat parameter vector `θ ∈ ℝ^p` through [`Model`],
//! so training and the reference solvers never see layer structure.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GrwError, Result};
use crate::linalg::{dot, norm, Matrix};

const BALL_TOL: f64 = 1e-9;
static WARNED_OUTSIDE_BALL: AtomicBool = AtomicBool::new(false);

fn warn_if_outside_ball(x: &[f64]) {
    if norm(x) > 1.0 + BALL_TOL && !WARNED_OUTSIDE_BALL.swap(true, Ordering::Relaxed) {
        log::warn!(
            "input with L2 norm {:.6} lies outside the unit ball; results are outside the analysed regime",
            norm(x)
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Erf,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Erf => libm::erf(z),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Erf => std::f64::consts::FRAC_2_SQRT_PI * (-z * z).exp(),
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Erf => -2.0 * z * std::f64::consts::FRAC_2_SQRT_PI * (-z * z).exp(),
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Erf => "erf",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = GrwError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "erf" => Ok(Activation::Erf),
            "tanh" => Ok(Activation::Tanh),
            other => Err(invalid(format!("unknown activation {other:?}"))),
        }
    }
}

/// Fully-connected network shape: `d₀ → d₁ → … → d_L → 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub beta: f64,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        beta: f64,
        activation: Activation,
    ) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_widths,
            beta,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// `depth` hidden layers of equal width.
    pub fn uniform(
        input_dim: usize,
        width: usize,
        depth: usize,
        beta: f64,
        activation: Activation,
    ) -> Result<Self> {
        Self::new(input_dim, vec![width; depth], beta, activation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(invalid("input_dim must be at least 1"));
        }
        if self.hidden_widths.is_empty() {
            return Err(invalid("a network needs at least one hidden layer"));
        }
        if self.hidden_widths.contains(&0) {
            return Err(invalid("hidden widths must be at least 1"));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(invalid("beta must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.hidden_widths.len()
    }

    /// `(d₀, d₁, …, d_L, 1)`
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.depth() + 2);
        dims.push(self.input_dim);
        dims.extend(&self.hidden_widths);
        dims.push(1);
        dims
    }

    pub fn layout(&self) -> ParamLayout {
        let dims = self.layer_dims();
        let mut offset = 0;
        let blocks = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let block = LayerBlock {
                    w_offset: offset,
                    fan_out,
                    fan_in,
                    b_offset: offset + fan_out * fan_in,
                };
                offset = block.b_offset + fan_out;
                block
            })
            .collect();
        ParamLayout {
            blocks,
            len: offset,
        }
    }
}

/// Parsed model description: `linear` or `mlp:<d0>:<w>x<L>:<beta>:<erf|tanh>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelSpec {
    Linear,
    Mlp(Architecture),
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::Linear => f.write_str("linear"),
            ModelSpec::Mlp(a) => {
                let w = a.hidden_widths[0];
                write!(
                    f,
                    "mlp:{}:{}x{}:{}:{}",
                    a.input_dim,
                    w,
                    a.depth(),
                    a.beta,
                    a.activation
                )
            }
        }
    }
}

impl FromStr for ModelSpec {
    type Err = GrwError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "linear" {
            return Ok(ModelSpec::Linear);
        }
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || invalid(format!("bad model spec {s:?}"));
        match parts.as_slice() {
            ["mlp", d0, shape, beta, act] => {
                let (w, l) = shape.split_once('x').ok_or_else(bad)?;
                let arch = Architecture::uniform(
                    d0.parse().map_err(|_| bad())?,
                    w.parse().map_err(|_| bad())?,
                    l.parse().map_err(|_| bad())?,
                    beta.parse().map_err(|_| bad())?,
                    act.parse()?,
                )?;
                Ok(ModelSpec::Mlp(arch))
            }
            _ => Err(bad()),
        }
    }
}

/// Location of one layer's `W` (row-major `fan_out × fan_in`) and `b` in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBlock {
    pub w_offset: usize,
    pub fan_out: usize,
    pub fan_in: usize,
    pub b_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub blocks: Vec<LayerBlock>,
    pub len: usize,
}

impl ParamLayout {
    pub fn output_block(&self) -> LayerBlock {
        *self.blocks.last().expect("at least one block")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub flat: Vec<f64>,
    pub layout: ParamLayout,
}

impl ModelParams {
    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let b = self.layout.blocks[layer];
        &self.flat[b.w_offset..b.w_offset + b.fan_out * b.fan_in]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let b = self.layout.blocks[layer];
        &self.flat[b.b_offset..b.b_offset + b.fan_out]
    }
}

/// Standard-normal weights and biases everywhere except the output weights, which start at zero.
pub fn nn_init(arch: &Architecture, seed: u64) -> ModelParams {
    let layout = arch.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat: Vec<f64> = (0..layout.len)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let out = layout.output_block();
    flat[out.w_offset..out.w_offset + out.fan_in].fill(0.0);
    ModelParams { flat, layout }
}

/// Forward pass record: `value = h^{L+1}`, pre-activations `h¹…h^{L+1}`, activations `x¹…x^L`.
#[derive(Debug, Clone)]
pub struct Forward {
    pub value: f64,
    pub preactivations: Vec<Vec<f64>>,
    pub activations: Vec<Vec<f64>>,
}

fn check_input(arch: &Architecture, theta: &[f64], x: &[f64]) -> Result<ParamLayout> {
    if x.len() != arch.input_dim {
        return Err(invalid(format!(
            "input has dimension {}, network expects {}",
            x.len(),
            arch.input_dim
        )));
    }
    let layout = arch.layout();
    if theta.len() != layout.len {
        return Err(invalid(format!(
            "parameter vector has length {}, architecture needs {}",
            theta.len(),
            layout.len
        )));
    }
    warn_if_outside_ball(x);
    Ok(layout)
}

fn forward_flat(arch: &Architecture, layout: &ParamLayout, theta: &[f64], x: &[f64]) -> Forward {
    let mut preactivations = Vec::with_capacity(layout.blocks.len());
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(arch.depth());
    for (l, block) in layout.blocks.iter().enumerate() {
        let input: &[f64] = if l == 0 { x } else { &activations[l - 1] };
        let scale = 1.0 / (block.fan_in as f64).sqrt();
        let h: Vec<f64> = (0..block.fan_out)
            .map(|i| {
                let row = &theta[block.w_offset + i * block.fan_in..][..block.fan_in];
                scale * dot(row, input) + arch.beta * theta[block.b_offset + i]
            })
            .collect();
        if l + 1 < layout.blocks.len() {
            activations.push(h.iter().map(|&z| arch.activation.apply(z)).collect());
        }
        preactivations.push(h);
    }
    let value = preactivations.last().expect("output layer")[0];
    Forward {
        value,
        preactivations,
        activations,
    }
}

pub fn nn_forward(arch: &Architecture, params: &ModelParams, x: &[f64]) -> Result<Forward> {
    let layout = check_input(arch, &params.flat, x)?;
    Ok(forward_flat(arch, &layout, &params.flat, x))
}

/// Writes `∇_θ f(x; θ)` into `grad` and returns `f(x; θ)`.
pub fn nn_value_and_grad(
    arch: &Architecture,
    theta: &[f64],
    x: &[f64],
    grad: &mut [f64],
) -> Result<f64> {
    let layout = check_input(arch, theta, x)?;
    if grad.len() != layout.len {
        return Err(invalid("gradient buffer has the wrong length"));
    }
    let fwd = forward_flat(arch, &layout, theta, x);
    // delta = ∂f/∂h^{l+1}, starting from the scalar output.
    let mut delta = vec![1.0];
    for l in (0..layout.blocks.len()).rev() {
        let block = layout.blocks[l];
        let input: &[f64] = if l == 0 { x } else { &fwd.activations[l - 1] };
        let scale = 1.0 / (block.fan_in as f64).sqrt();
        for (i, &d) in delta.iter().enumerate() {
            let row = &mut grad[block.w_offset + i * block.fan_in..][..block.fan_in];
            for (g, &xin) in row.iter_mut().zip(input) {
                *g = d * xin * scale;
            }
            grad[block.b_offset + i] = arch.beta * d;
        }
        if l > 0 {
            let h_prev = &fwd.preactivations[l - 1];
            let mut next = vec![0.0; block.fan_in];
            for (i, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &theta[block.w_offset + i * block.fan_in..][..block.fan_in];
                for (n, &w) in next.iter_mut().zip(row) {
                    *n += w * d;
                }
            }
            for (n, &h) in next.iter_mut().zip(h_prev) {
                *n *= scale * arch.activation.derivative(h);
            }
            delta = next;
        }
    }
    Ok(fwd.value)
}

pub fn nn_grad(arch: &Architecture, params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; params.len()];
    nn_value_and_grad(arch, &params.flat, x, &mut g)?;
    Ok(g)
}

/// Uniform interface over parameterized scalar predictors `f(x; θ)`.
pub trait Model: Send + Sync {
    fn input_dim(&self) -> usize;
    fn num_params(&self) -> usize;
    /// `θ^(0)`
    fn initial_params(&self) -> &[f64];
    fn predict(&self, theta: &[f64], x: &[f64]) -> Result<f64>;
    /// Writes `∇_θ f(x; θ)` into `grad` and returns `f(x; θ)`.
    fn value_and_grad(&self, theta: &[f64], x: &[f64], grad: &mut [f64]) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub struct LinearModel {
    theta0: Vec<f64>,
}

impl LinearModel {
    pub fn new(theta0: Vec<f64>) -> Self {
        Self { theta0 }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![0.0; dim])
    }
}

impl Model for LinearModel {
    fn input_dim(&self) -> usize {
        self.theta0.len()
    }

    fn num_params(&self) -> usize {
        self.theta0.len()
    }

    fn initial_params(&self) -> &[f64] {
        &self.theta0
    }

    fn predict(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        if theta.len() != x.len() {
            return Err(invalid("linear model: dimension mismatch"));
        }
        Ok(dot(theta, x))
    }

    fn value_and_grad(&self, theta: &[f64], x: &[f64], grad: &mut [f64]) -> Result<f64> {
        if grad.len() != x.len() {
            return Err(invalid("linear model: gradient buffer length"));
        }
        grad.copy_from_slice(x);
        self.predict(theta, x)
    }
}

/// Wide network with its initialization.
#[derive(Debug, Clone)]
pub struct WideNet {
    pub arch: Architecture,
    pub init: ModelParams,
}

impl WideNet {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let init = nn_init(&arch, seed);
        Ok(Self { arch, init })
    }
}

impl Model for WideNet {
    fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn num_params(&self) -> usize {
        self.init.len()
    }

    fn initial_params(&self) -> &[f64] {
        &self.init.flat
    }

    fn predict(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        let layout = check_input(&self.arch, theta, x)?;
        Ok(forward_flat(&self.arch, &layout, theta, x).value)
    }

    fn value_and_grad(&self, theta: &[f64], x: &[f64], grad: &mut [f64]) -> Result<f64> {
        nn_value_and_grad(&self.arch, theta, x, grad)
    }
}

/// Bit pattern of an input vector, used as its cache id.
type InputKey = Vec<u64>;

fn input_key(x: &[f64]) -> InputKey {
    x.iter().map(|v| v.to_bits()).collect()
}

/// `f_lin(x) = f^(0)(x) + ⟨θ − θ^(0), ∇_θ f^(0)(x)⟩` around a network's initialization.
///
/// Outputs and gradients at θ^(0) for the construction inputs are computed
/// once; other inputs are evaluated on demand.
#[derive(Debug, Clone)]
pub struct LinearizedModel {
    net: WideNet,
    cache: HashMap<InputKey, (f64, Vec<f64>)>,
}

impl LinearizedModel {
    /// Linearizes `net`, caching `f^(0)` and `∇f^(0)` for every column of `inputs`.
    pub fn new(net: WideNet, inputs: &Matrix) -> Result<Self> {
        if inputs.rows() != net.arch.input_dim {
            return Err(invalid("linearization inputs have the wrong dimension"));
        }
        let mut cache = HashMap::with_capacity(inputs.cols());
        for j in 0..inputs.cols() {
            let x = inputs.column(j);
            let entry = Self::evaluate(&net, &x)?;
            cache.insert(input_key(&x), entry);
        }
        Ok(Self { net, cache })
    }

    fn evaluate(net: &WideNet, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut g = vec![0.0; net.num_params()];
        let f0 = nn_value_and_grad(&net.arch, &net.init.flat, x, &mut g)?;
        Ok((f0, g))
    }

    pub fn net(&self) -> &WideNet {
        &self.net
    }

    pub fn params0(&self) -> &ModelParams {
        &self.net.init
    }

    /// `(f^(0)(x), ∇_θ f^(0)(x))`
    pub fn initial_output_and_feature(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.cache.get(&input_key(x)) {
            Some((f0, g)) => Ok((*f0, g.clone())),
            None => Self::evaluate(&self.net, x),
        }
    }

    pub fn feature(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.initial_output_and_feature(x)?.1)
    }

    fn with_entry<T>(&self, x: &[f64], f: impl FnOnce(f64, &[f64]) -> T) -> Result<T> {
        match self.cache.get(&input_key(x)) {
            Some((f0, g)) => Ok(f(*f0, g)),
            None => {
                let (f0, g) = Self::evaluate(&self.net, x)?;
                Ok(f(f0, &g))
            }
        }
    }
}

pub fn linearized_forward(lin: &LinearizedModel, theta: &[f64], x: &[f64]) -> Result<f64> {
    lin.predict(theta, x)
}

impl Model for LinearizedModel {
    fn input_dim(&self) -> usize {
        self.net.arch.input_dim
    }

    fn num_params(&self) -> usize {
        self.net.num_params()
    }

    fn initial_params(&self) -> &[f64] {
        &self.net.init.flat
    }

    fn predict(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        if theta.len() != self.num_params() {
            return Err(invalid("linearized model: parameter length mismatch"));
        }
        let theta0 = &self.net.init.flat;
        self.with_entry(x, |f0, g| {
            let shift: f64 = theta
                .iter()
                .zip(theta0)
                .zip(g)
                .map(|((t, t0), gi)| (t - t0) * gi)
                .sum();
            f0 + shift
        })
    }

    fn value_and_grad(&self, theta: &[f64], x: &[f64], grad: &mut [f64]) -> Result<f64> {
        if grad.len() != self.num_params() {
            return Err(invalid("linearized model: gradient buffer length"));
        }
        let theta0 = &self.net.init.flat;
        self.with_entry(x, |f0, g| {
            grad.copy_from_slice(g);
            let shift: f64 = theta
                .iter()
                .zip(theta0)
                .zip(g)
                .map(|((t, t0), gi)| (t - t0) * gi)
                .sum();
            f0 + shift
        })
    }
}

/// `p × n` matrix whose column `i` is `∇_θ f(x_i; θ^(0))`.
pub fn feature_matrix(model: &dyn Model, x: &Matrix) -> Result<Matrix> {
    if x.rows() != model.input_dim() {
        return Err(invalid("feature_matrix: input dimension mismatch"));
    }
    let p = model.num_params();
    let theta0 = model.initial_params();
    let mut cols = Vec::with_capacity(x.cols());
    let mut g = vec![0.0; p];
    for j in 0..x.cols() {
        model.value_and_grad(theta0, &x.column(j), &mut g)?;
        cols.push(g.clone());
    }
    Matrix::from_columns(&cols)
}

/// `f(x_i; θ^(0))` for every column of `x`.
pub fn initial_outputs(model: &dyn Model, x: &Matrix) -> Result<Vec<f64>> {
    let theta0 = model.initial_params();
    (0..x.cols())
        .map(|j| model.predict(theta0, &x.column(j)))
        .collect()
}
