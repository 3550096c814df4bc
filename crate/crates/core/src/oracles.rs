//! Reference solutions training is expected to reach: the min-norm
//! interpolator, the ridge optimum, the hard-margin direction, the limiting
//! and empirical NTK, and DRO-style risks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GrwError, Result};
use crate::linalg::{
    dot, extreme_eigenvalues, gram, min_norm_span_solve, norm, solve_general, solve_spd, Matrix,
};
use crate::models::{Activation, Architecture, Model};
use crate::reweighting::{cvar_support_size, simplex_violation, GroupInfo, SIMPLEX_TOL};

pub const PERCEPTRON_MAX_UPDATES: usize = 1_000_000;
pub const DUAL_MAX_ITERS: usize = 100_000;
/// Largest `n` the subset-enumeration solver accepts.
pub const ENUMERATION_MAX_N: usize = 16;
const MIN_MARGIN: f64 = 1e-12;

/// `θ⁽⁰⁾ + X(XᵀX)⁻¹(Y − f⁽⁰⁾(X))`: the interpolator whose displacement lies in
/// the span of the inputs. Never looks at sample weights.
pub fn min_norm_interpolator(
    x: &Matrix,
    y: &[f64],
    theta0: &[f64],
    f0_at_x: &[f64],
) -> Result<Vec<f64>> {
    let n = x.cols();
    if y.len() != n || f0_at_x.len() != n || theta0.len() != x.rows() {
        return Err(invalid("min_norm_interpolator: dimension mismatch"));
    }
    if x.rows() < n {
        return Err(invalid(format!(
            "min_norm_interpolator needs d ≥ n, got d={} n={n}",
            x.rows()
        )));
    }
    let r: Vec<f64> = y.iter().zip(f0_at_x).map(|(a, b)| a - b).collect();
    let delta = min_norm_span_solve(x, &r)?;
    Ok(theta0.iter().zip(&delta).map(|(a, b)| a + b).collect())
}

fn check_ridge_inputs(
    x: &Matrix,
    y: &[f64],
    q: &[f64],
    mu: f64,
    theta0: &[f64],
    f0: &[f64],
) -> Result<()> {
    let n = x.cols();
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(invalid(format!("ridge needs mu > 0, got {mu}")));
    }
    if y.len() != n || q.len() != n || f0.len() != n || theta0.len() != x.rows() {
        return Err(invalid("ridge_closed_form: dimension mismatch"));
    }
    if simplex_violation(q) > 1e-9 {
        return Err(invalid("ridge weights must lie on the simplex"));
    }
    Ok(())
}

/// Minimizer of `Σ qᵢ ½(⟨θ−θ⁽⁰⁾, xᵢ⟩ − rᵢ)² + (μ/2)‖θ−θ⁽⁰⁾‖²`, `r = Y − f⁽⁰⁾(X)`,
/// through the `n × n` dual system `(XᵀXQ + μI)a = r`, `θ* = θ⁽⁰⁾ + XQa`.
pub fn ridge_closed_form(
    x: &Matrix,
    y: &[f64],
    q: &[f64],
    mu: f64,
    theta0: &[f64],
    f0_at_x: &[f64],
) -> Result<Vec<f64>> {
    check_ridge_inputs(x, y, q, mu, theta0, f0_at_x)?;
    let n = x.cols();
    let g = gram(x)?;
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, g.get(i, j) * q[j] + if i == j { mu } else { 0.0 });
        }
    }
    let r: Vec<f64> = y.iter().zip(f0_at_x).map(|(a, b)| a - b).collect();
    let coef = solve_general(&a, &r)?;
    let qa: Vec<f64> = coef.iter().zip(q).map(|(c, w)| c * w).collect();
    let delta = x.matvec(&qa)?;
    Ok(theta0.iter().zip(&delta).map(|(a, b)| a + b).collect())
}

/// Norm of the ridge stationarity residual `XQ(XᵀΔ − r) + μΔ`.
pub fn ridge_stationarity_residual(
    x: &Matrix,
    y: &[f64],
    q: &[f64],
    mu: f64,
    theta0: &[f64],
    f0_at_x: &[f64],
    theta: &[f64],
) -> Result<f64> {
    check_ridge_inputs(x, y, q, mu, theta0, f0_at_x)?;
    let delta: Vec<f64> = theta.iter().zip(theta0).map(|(a, b)| a - b).collect();
    let fit = x.tr_matvec(&delta)?;
    let wres: Vec<f64> = (0..x.cols())
        .map(|i| q[i] * (fit[i] - (y[i] - f0_at_x[i])))
        .collect();
    let mut out = x.matvec(&wres)?;
    for (o, d) in out.iter_mut().zip(&delta) {
        *o += mu * d;
    }
    Ok(norm(&out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSolution {
    /// Unit vector maximizing the smallest label margin.
    pub direction: Vec<f64>,
    pub margin: f64,
    pub support_set: Vec<usize>,
    /// Dual coefficients: `direction ∝ Σ αᵢ yᵢ xᵢ`, zero off the support.
    pub alphas: Vec<f64>,
}

/// Columns `yᵢxᵢ`.
fn signed_columns(x: &Matrix, y: &[f64]) -> Result<Vec<Vec<f64>>> {
    if y.len() != x.cols() || x.cols() == 0 {
        return Err(invalid("max margin: need one ±1 label per column"));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(invalid("max margin: labels must be -1 or +1"));
    }
    Ok((0..x.cols())
        .map(|i| x.column(i).into_iter().map(|v| v * y[i]).collect())
        .collect())
}

/// Cycles through the samples until a full pass makes no mistake.
pub fn perceptron_separates(z: &[Vec<f64>], max_updates: usize) -> bool {
    let d = z[0].len();
    let mut w = vec![0.0; d];
    let mut updates = 0;
    loop {
        let mut clean = true;
        for zi in z {
            if dot(&w, zi) <= 0.0 {
                clean = false;
                if updates == max_updates {
                    return false;
                }
                for (wk, v) in w.iter_mut().zip(zi) {
                    *wk += v;
                }
                updates += 1;
            }
        }
        if clean {
            return true;
        }
    }
}

fn combine(z: &[Vec<f64>], alphas: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; z[0].len()];
    for (a, zi) in alphas.iter().zip(z) {
        if *a != 0.0 {
            for (wk, v) in w.iter_mut().zip(zi) {
                *wk += a * v;
            }
        }
    }
    w
}

fn solution_from_alphas(z: &[Vec<f64>], alphas: Vec<f64>) -> Result<MarginSolution> {
    let w = combine(z, &alphas);
    let wn = norm(&w);
    if !(wn > 0.0) {
        return Err(GrwError::NotSeparable("zero max-margin vector".into()));
    }
    let direction: Vec<f64> = w.iter().map(|v| v / wn).collect();
    let margin = z
        .iter()
        .map(|zi| dot(&direction, zi))
        .fold(f64::INFINITY, f64::min);
    if margin < MIN_MARGIN {
        return Err(GrwError::NotSeparable(format!(
            "margin {margin:e} is degenerate"
        )));
    }
    let support_set = alphas
        .iter()
        .enumerate()
        .filter(|(_, &a)| a > 0.0)
        .map(|(i, _)| i)
        .collect();
    Ok(MarginSolution {
        direction,
        margin,
        support_set,
        alphas,
    })
}

/// Solves `G_SS α_S = 1` and accepts it if it satisfies the KKT conditions.
fn kkt_polish(g: &Matrix, support: &[usize], tol: f64) -> Option<Vec<f64>> {
    let n = g.rows();
    let m = support.len();
    if m == 0 {
        return None;
    }
    let mut gs = Matrix::zeros(m, m);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            gs.set(a, b, g.get(i, j));
        }
    }
    let sol = solve_spd(&gs, &vec![1.0; m]).ok()?;
    if sol.iter().any(|&a| !(a > 0.0)) {
        return None;
    }
    let mut alphas = vec![0.0; n];
    for (&i, a) in support.iter().zip(sol) {
        alphas[i] = a;
    }
    for i in 0..n {
        let gi: f64 = (0..n).map(|j| g.get(i, j) * alphas[j]).sum();
        if gi < 1.0 - tol {
            return None;
        }
    }
    Some(alphas)
}

/// Hard-margin direction `argmax_{‖θ‖=1} minᵢ yᵢ⟨θ, xᵢ⟩`.
///
/// Separability is checked with a perceptron first. The dual
/// `max Σα − ½‖Σαᵢyᵢxᵢ‖²`, `α ≥ 0`, is solved by projected gradient ascent
/// and then polished on the detected active set.
pub fn max_margin_direction(x: &Matrix, y: &[f64]) -> Result<MarginSolution> {
    let z = signed_columns(x, y)?;
    if !perceptron_separates(&z, PERCEPTRON_MAX_UPDATES) {
        return Err(GrwError::NotSeparable(format!(
            "perceptron made {PERCEPTRON_MAX_UPDATES} updates without separating"
        )));
    }
    let zm = Matrix::from_columns(&z)?;
    let g = gram(&zm)?;
    let n = g.rows();
    let (lmax, _) = extreme_eigenvalues(&g, 1e-12 * g.max_abs())?;
    let step = 1.0 / lmax;
    let mut alpha = vec![0.0; n];
    let mut galpha = vec![0.0; n];
    for _ in 0..DUAL_MAX_ITERS {
        let mut kkt: f64 = 0.0;
        for i in 0..n {
            let grad: f64 = 1.0 - galpha[i];
            kkt = kkt.max(if alpha[i] > 0.0 {
                grad.abs()
            } else {
                grad.max(0.0)
            });
        }
        if kkt <= 1e-13 {
            break;
        }
        for i in 0..n {
            alpha[i] = (alpha[i] + step * (1.0 - galpha[i])).max(0.0);
        }
        for i in 0..n {
            galpha[i] = (0..n).map(|j| g.get(i, j) * alpha[j]).sum();
        }
    }
    let top = alpha.iter().copied().fold(0.0, f64::max);
    let support: Vec<usize> = (0..n).filter(|&i| alpha[i] > 1e-9 * top).collect();
    if let Some(exact) = kkt_polish(&g, &support, 1e-10) {
        return solution_from_alphas(&z, exact);
    }
    log::debug!("max margin: active-set polish rejected, keeping iterative dual");
    for a in alpha.iter_mut() {
        if *a <= 1e-9 * top {
            *a = 0.0;
        }
    }
    solution_from_alphas(&z, alpha)
}

/// Exact solver for small `n`: tries every support subset, solving the
/// equal-margin system and keeping the KKT-feasible candidate of least norm.
pub fn max_margin_by_enumeration(x: &Matrix, y: &[f64]) -> Result<MarginSolution> {
    let z = signed_columns(x, y)?;
    let n = z.len();
    if n > ENUMERATION_MAX_N {
        return Err(invalid(format!(
            "enumeration is limited to n ≤ {ENUMERATION_MAX_N}"
        )));
    }
    let g = gram(&Matrix::from_columns(&z)?)?;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        if let Some(alphas) = kkt_polish(&g, &support, 1e-9) {
            let wn = norm(&combine(&z, &alphas));
            if best.as_ref().is_none_or(|(b, _)| wn < *b) {
                best = Some((wn, alphas));
            }
        }
    }
    match best {
        Some((_, alphas)) => solution_from_alphas(&z, alphas),
        None => Err(GrwError::NotSeparable(
            "no KKT-feasible support subset".into(),
        )),
    }
}

/// Depth, bias scale and activation of the network whose limiting NTK is wanted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub depth: usize,
    pub beta: f64,
    pub activation: Activation,
}

impl KernelSpec {
    pub fn new(depth: usize, beta: f64, activation: Activation) -> Result<Self> {
        if depth == 0 {
            return Err(invalid("kernel depth must be at least 1"));
        }
        if !beta.is_finite() {
            return Err(invalid("beta must be finite"));
        }
        Ok(Self {
            depth,
            beta,
            activation,
        })
    }

    pub fn for_architecture(arch: &Architecture) -> Result<Self> {
        Self::new(arch.depth(), arch.beta, arch.activation)
    }
}

/// `E[erf(u)·erf(v)]` for `(u, v)` centred Gaussian with covariance `[[s11, s12], [s12, s22]]`.
pub fn erf_expectation(s11: f64, s12: f64, s22: f64) -> f64 {
    let denom = ((1.0 + 2.0 * s11) * (1.0 + 2.0 * s22)).sqrt();
    let arg = (2.0 * s12 / denom).clamp(-1.0, 1.0);
    std::f64::consts::FRAC_2_PI * arg.asin()
}

fn first_layer_cov(x: &[f64], xp: &[f64], beta: f64) -> [f64; 3] {
    let d0 = x.len() as f64;
    let b2 = beta * beta;
    [
        dot(x, x) / d0 + b2,
        dot(x, xp) / d0 + b2,
        dot(xp, xp) / d0 + b2,
    ]
}

/// Limiting NTK of the zero-output-initialized network:
/// `Θ(x, x') = E_{f∼GP(Σᴸ)}[σ(f(x))σ(f(x'))] + β²`.
pub fn ntk_limiting_kernel(spec: &KernelSpec, x: &[f64], xp: &[f64]) -> Result<f64> {
    if spec.activation != Activation::Erf {
        return Err(GrwError::Unsupported(format!(
            "closed-form limiting kernel needs erf, got {}",
            spec.activation
        )));
    }
    if spec.depth == 0 {
        return Err(invalid("kernel depth must be at least 1"));
    }
    if x.len() != xp.len() || x.is_empty() {
        return Err(invalid("kernel inputs must share a non-zero dimension"));
    }
    let b2 = spec.beta * spec.beta;
    let [mut s11, mut s12, mut s22] = first_layer_cov(x, xp, spec.beta);
    for _ in 1..spec.depth {
        let n11 = erf_expectation(s11, s11, s11) + b2;
        let n12 = erf_expectation(s11, s12, s22) + b2;
        let n22 = erf_expectation(s22, s22, s22) + b2;
        (s11, s12, s22) = (n11, n12, n22);
    }
    Ok(erf_expectation(s11, s12, s22) + b2)
}

const MC_SHARD: usize = 1 << 16;

/// Monte-Carlo moments `(E[σ(u)²], E[σ(u)σ(v)], E[σ(v)²])`, sharded with
/// deterministic per-shard seeds.
fn mc_moments(act: Activation, cov: [f64; 3], samples: usize, seed: u64) -> [f64; 3] {
    let [s11, s12, s22] = cov;
    let a = s11.max(0.0).sqrt();
    let (c, e) = if a > 0.0 {
        let c = s12 / a;
        (c, (s22 - c * c).max(0.0).sqrt())
    } else {
        (0.0, s22.max(0.0).sqrt())
    };
    let shards = samples.div_ceil(MC_SHARD);
    let sums = (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(s as u64 + 1)),
            );
            let count = MC_SHARD.min(samples - s * MC_SHARD);
            let mut acc = [0.0; 3];
            for _ in 0..count {
                let z1: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                let su = act.apply(a * z1);
                let sv = act.apply(c * z1 + e * z2);
                acc[0] += su * su;
                acc[1] += su * sv;
                acc[2] += sv * sv;
            }
            acc
        })
        .collect::<Vec<_>>();
    let mut total = [0.0; 3];
    for acc in sums {
        for k in 0..3 {
            total[k] += acc[k];
        }
    }
    total.map(|t| t / samples as f64)
}

/// Monte-Carlo version of [`ntk_limiting_kernel`]; works for any activation
/// but is only approximate.
pub fn ntk_limiting_kernel_mc(
    spec: &KernelSpec,
    x: &[f64],
    xp: &[f64],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(invalid("need at least one Monte-Carlo sample"));
    }
    if x.len() != xp.len() || x.is_empty() {
        return Err(invalid("kernel inputs must share a non-zero dimension"));
    }
    let b2 = spec.beta * spec.beta;
    let mut cov = first_layer_cov(x, xp, spec.beta);
    for layer in 1..spec.depth {
        let m = mc_moments(
            spec.activation,
            cov,
            samples,
            seed.wrapping_add(layer as u64 * 7919),
        );
        cov = [m[0] + b2, m[1] + b2, m[2] + b2];
    }
    let m = mc_moments(spec.activation, cov, samples, seed);
    Ok(m[1] + b2)
}

/// Gram matrix of the limiting kernel over the columns of `x`.
pub fn limiting_kernel_gram(spec: &KernelSpec, x: &Matrix) -> Result<Matrix> {
    let cols = x.columns();
    let n = cols.len();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = ntk_limiting_kernel(spec, &cols[i], &cols[j])?;
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    Ok(k)
}

/// `⟨∇_θ f⁽⁰⁾(x), ∇_θ f⁽⁰⁾(x')⟩` at the model's initial parameters.
pub fn empirical_ntk(model: &dyn Model, x: &[f64], xp: &[f64]) -> Result<f64> {
    let theta0 = model.initial_params();
    let mut g1 = vec![0.0; model.num_params()];
    let mut g2 = vec![0.0; model.num_params()];
    model.value_and_grad(theta0, x, &mut g1)?;
    model.value_and_grad(theta0, xp, &mut g2)?;
    Ok(dot(&g1, &g2))
}

/// Empirical NTK Gram over the columns of `x`.
pub fn empirical_ntk_gram(model: &dyn Model, x: &Matrix) -> Result<Matrix> {
    gram(&crate::models::feature_matrix(model, x)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustRisks {
    pub worst_group: f64,
    pub cvar: f64,
    pub balanced: f64,
}

/// Worst-group risk, CVaR at level `alpha`, and the balanced (group-averaged) risk.
pub fn robust_risks(losses: &[f64], groups: &GroupInfo, alpha: f64) -> Result<RobustRisks> {
    if losses.len() != groups.num_samples() {
        return Err(invalid("one loss per sample is required"));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(invalid("losses must be finite"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let means = groups.group_means(losses);
    let worst_group = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let balanced = means.iter().sum::<f64>() / means.len() as f64;
    let m = cvar_support_size(losses.len(), alpha);
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let cvar = sorted[..m].iter().sum::<f64>() / m as f64;
    Ok(RobustRisks {
        worst_group,
        cvar,
        balanced,
    })
}

/// Sanity bound used by callers that pass simplex weights through.
pub fn on_simplex(w: &[f64]) -> bool {
    simplex_violation(w) <= SIMPLEX_TOL
}
