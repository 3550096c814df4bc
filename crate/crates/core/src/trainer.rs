//! Full-batch gradient descent under a sample-weighting scheme, with an
//! optional L2 penalty centred at the initialization:
//!
//! ```text
//! θ ← θ − η [ Σᵢ qᵢ ∂ℓ(f(xᵢ;θ), yᵢ)/∂ŷ · ∇_θ f(xᵢ;θ) + μ (θ − θ⁽⁰⁾) ]
//! ```
//!
//! Dynamic schemes refresh `q` from the losses at the current parameters
//! before each step.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, GrwError, Result};
use crate::linalg::{cosine, distance, dot, extreme_eigenvalues, gram, Matrix, RANK_TOL};
use crate::losses::LossKind;
use crate::models::Model;
use crate::reweighting::{Scheme, WeightState};

pub const DEFAULT_STOP_RISK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub mu: f64,
    pub epochs: u64,
    pub loss: LossKind,
    pub scheme: Scheme,
    /// Stop once the unweighted risk falls to this level.
    pub stop_risk: f64,
    pub record_every: u64,
    pub seed: u64,
    /// Recorded as `theta_gap_ref = ‖θ − reference‖` when set.
    pub reference: Option<Vec<f64>>,
    /// Recorded as `cos_ref = cos(θ − θ⁽⁰⁾, direction_ref)` when set.
    pub direction_ref: Option<Vec<f64>>,
}

impl TrainConfig {
    pub fn new(eta: f64, epochs: u64, loss: LossKind, scheme: Scheme) -> Self {
        Self {
            eta,
            mu: 0.0,
            epochs,
            loss,
            scheme,
            stop_risk: DEFAULT_STOP_RISK,
            record_every: 1,
            seed: 0,
            reference: None,
            direction_ref: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(invalid(format!(
                "learning rate must be positive, got {}",
                self.eta
            )));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(invalid(format!("mu must be non-negative, got {}", self.mu)));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.record_every == 0 {
            return Err(invalid("record_every must be at least 1"));
        }
        if !(self.stop_risk >= 0.0) {
            return Err(invalid("stop_risk must be non-negative"));
        }
        Ok(())
    }
}

/// One recorded epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: u64,
    pub weighted_risk: f64,
    pub risk: f64,
    pub group_risks: Vec<f64>,
    pub theta_gap_ref: Option<f64>,
    /// `‖θ − θ⁽⁰⁾‖`
    pub theta_norm: f64,
    pub cos_ref: Option<f64>,
    /// Total weight carried by each group.
    pub q_groups: Vec<f64>,
    /// Per-sample weights used for the step taken at this epoch.
    #[serde(skip)]
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub num_groups: usize,
    pub config_hash: Option<String>,
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn new(num_groups: usize) -> Self {
        Self {
            num_groups,
            config_hash: None,
            rows: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn weight_history(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.q.clone()).collect()
    }

    pub fn final_risk(&self) -> Option<f64> {
        self.last().map(|r| r.risk)
    }
}

/// What an observer sees at every recorded epoch.
pub struct EpochView<'a> {
    pub model_index: usize,
    pub epoch: u64,
    pub theta: &'a [f64],
    pub theta0: &'a [f64],
    pub weights: &'a WeightState,
    pub losses: &'a [f64],
    pub risk: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: Vec<f64>,
    pub trace: TrainTrace,
    /// Number of gradient steps taken.
    pub steps: u64,
    pub stopped_early: bool,
    /// Worst simplex violation over every weight state used, not just recorded ones.
    pub max_simplex_violation: f64,
}

pub fn train(model: &dyn Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    train_observed(model, data, cfg, &mut |_| Ok(()))
}

pub fn train_observed(
    model: &dyn Model,
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochView<'_>) -> Result<()>,
) -> Result<TrainRun> {
    let mut runs = train_lockstep(&[model], data, cfg, observer)?;
    Ok(runs.pop().expect("one run"))
}

struct RunState<'m> {
    model: &'m dyn Model,
    theta: Vec<f64>,
    grads: Vec<Vec<f64>>,
    losses: Vec<f64>,
    dloss: Vec<f64>,
    trace: TrainTrace,
}

impl RunState<'_> {
    fn evaluate(&mut self, cols: &[Vec<f64>], y: &[f64], loss: LossKind) -> Result<()> {
        for (i, x) in cols.iter().enumerate() {
            let yhat = self
                .model
                .value_and_grad(&self.theta, x, &mut self.grads[i])?;
            self.losses[i] = loss.value_unchecked(yhat, y[i]);
            self.dloss[i] = loss.grad_unchecked(yhat, y[i]);
        }
        Ok(())
    }
}

/// Trains several models on the same data with one shared weight sequence.
///
/// Weights are driven by the losses of `models[0]`; the other models receive
/// exactly the same `q⁽ᵗ⁾` at every step. Early stopping also follows
/// `models[0]`. The observer is called at each recorded epoch for every model.
pub fn train_lockstep(
    models: &[&dyn Model],
    data: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochView<'_>) -> Result<()>,
) -> Result<Vec<TrainRun>> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(invalid("no model to train"));
    }
    let n = data.num_samples();
    let groups = &data.groups;
    for &yi in &data.y {
        cfg.loss.check_label(yi)?;
    }
    data.warn_if_outside_ball();
    let cols = data.x.columns();
    for m in models {
        if m.input_dim() != data.dim() {
            return Err(invalid(format!(
                "model expects inputs of dimension {}, data has {}",
                m.input_dim(),
                data.dim()
            )));
        }
        let p = m.num_params();
        if cfg.reference.as_ref().is_some_and(|r| r.len() != p)
            || cfg.direction_ref.as_ref().is_some_and(|r| r.len() != p)
        {
            return Err(invalid("reference vectors must match the parameter count"));
        }
    }

    let mut states: Vec<RunState<'_>> = models
        .iter()
        .map(|&m| RunState {
            model: m,
            theta: m.initial_params().to_vec(),
            grads: vec![vec![0.0; m.num_params()]; n],
            losses: vec![0.0; n],
            dloss: vec![0.0; n],
            trace: TrainTrace::new(groups.num_groups()),
        })
        .collect();

    let mut weights = cfg.scheme.initial_state(groups)?;
    let mut max_violation = weights.simplex_violation();
    let mut steps = 0u64;
    let mut stopped_early = false;
    let mut t = 0u64;
    loop {
        for s in states.iter_mut() {
            s.evaluate(&cols, &data.y, cfg.loss)?;
        }
        let lead_risk = mean(&states[0].losses);
        if !lead_risk.is_finite() {
            return Err(diverged(t, states.swap_remove(0).trace));
        }
        if cfg.scheme.is_dynamic() {
            weights = cfg.scheme.update(&weights, &states[0].losses, groups)?;
            max_violation = max_violation.max(weights.simplex_violation());
        }

        let finished = t >= cfg.epochs || lead_risk <= cfg.stop_risk;
        if finished && t < cfg.epochs {
            stopped_early = true;
        }
        if finished || t.is_multiple_of(cfg.record_every) {
            for (idx, s) in states.iter_mut().enumerate() {
                let risk = mean(&s.losses);
                if !risk.is_finite() {
                    let trace = std::mem::take(&mut s.trace);
                    return Err(diverged(t, trace));
                }
                let theta0 = s.model.initial_params();
                s.trace.rows.push(trace_row(
                    t, &s.theta, theta0, &weights, &s.losses, data, cfg,
                ));
                observer(&EpochView {
                    model_index: idx,
                    epoch: t,
                    theta: &s.theta,
                    theta0,
                    weights: &weights,
                    losses: &s.losses,
                    risk,
                })?;
            }
        }
        if finished {
            break;
        }

        for s in states.iter_mut() {
            let theta0 = s.model.initial_params();
            let decay = cfg.eta * cfg.mu;
            if decay != 0.0 {
                for (th, t0) in s.theta.iter_mut().zip(theta0) {
                    *th -= decay * (*th - t0);
                }
            }
            for i in 0..n {
                let coeff = cfg.eta * weights.q[i] * s.dloss[i];
                if coeff != 0.0 {
                    for (th, g) in s.theta.iter_mut().zip(&s.grads[i]) {
                        *th -= coeff * g;
                    }
                }
            }
        }
        steps += 1;
        t += 1;
    }

    Ok(states
        .into_iter()
        .map(|s| TrainRun {
            params: s.theta,
            trace: s.trace,
            steps,
            stopped_early,
            max_simplex_violation: max_violation,
        })
        .collect())
}

fn diverged(epoch: u64, trace: TrainTrace) -> GrwError {
    GrwError::Diverged {
        epoch,
        trace: Box::new(trace),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn trace_row(
    epoch: u64,
    theta: &[f64],
    theta0: &[f64],
    weights: &WeightState,
    losses: &[f64],
    data: &Dataset,
    cfg: &TrainConfig,
) -> TraceRow {
    let disp: Vec<f64> = theta.iter().zip(theta0).map(|(a, b)| a - b).collect();
    TraceRow {
        epoch,
        weighted_risk: dot(&weights.q, losses),
        risk: mean(losses),
        group_risks: data.groups.group_means(losses),
        theta_gap_ref: cfg.reference.as_ref().map(|r| distance(theta, r)),
        theta_norm: crate::linalg::norm(&disp),
        cos_ref: cfg.direction_ref.as_ref().map(|d| cosine(&disp, d)),
        q_groups: data.groups.group_sums(&weights.q),
        q: weights.q.clone(),
    }
}

/// Conservative step size `q*·λmin / (4A²)` with `A = Σᵢ‖xᵢ‖²` and `λmin` the
/// smallest eigenvalue of `XᵀX`.
pub fn safe_learning_rate(x: &Matrix, q_star: f64) -> Result<f64> {
    if !(q_star > 0.0 && q_star <= 1.0) {
        return Err(invalid(format!("q* must lie in (0, 1], got {q_star}")));
    }
    let g = gram(x)?;
    let (lambda_max, lambda_min) = extreme_eigenvalues(&g, 1e-14 * g.max_abs().max(1e-300))?;
    if !(lambda_min >= RANK_TOL * lambda_max) || lambda_max <= 0.0 {
        return Err(GrwError::RankDeficient {
            lambda_min,
            lambda_max,
        });
    }
    let a: f64 = (0..g.rows()).map(|i| g.get(i, i)).sum();
    Ok(q_star * lambda_min / (4.0 * a * a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGap {
    pub a: String,
    pub b: String,
    /// `‖θ_a − θ_b‖`
    pub gap: f64,
    /// Cosine between `θ_a − θ⁽⁰⁾` and `θ_b − θ⁽⁰⁾`.
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub pairs: Vec<PairGap>,
    pub final_risks: Vec<(String, f64)>,
}

impl CompareReport {
    pub fn max_gap(&self) -> f64 {
        self.pairs.iter().map(|p| p.gap).fold(0.0, f64::max)
    }
}

/// Pairwise final-parameter gaps and displacement cosines between runs that
/// share the same `θ⁽⁰⁾`.
pub fn compare_runs(
    labels: &[String],
    finals: &[&[f64]],
    traces: &[&TrainTrace],
    theta0: &[f64],
) -> Result<CompareReport> {
    if labels.len() != finals.len() || finals.len() != traces.len() {
        return Err(invalid(
            "compare_runs: labels, finals and traces must align",
        ));
    }
    if finals.iter().any(|f| f.len() != theta0.len()) {
        return Err(invalid("compare_runs: parameter dimensions differ"));
    }
    let disp: Vec<Vec<f64>> = finals
        .iter()
        .map(|f| f.iter().zip(theta0).map(|(a, b)| a - b).collect())
        .collect();
    let mut pairs = Vec::new();
    for i in 0..finals.len() {
        for j in i + 1..finals.len() {
            let c = if disp[i] == disp[j] {
                1.0
            } else {
                cosine(&disp[i], &disp[j])
            };
            pairs.push(PairGap {
                a: labels[i].clone(),
                b: labels[j].clone(),
                gap: distance(finals[i], finals[j]),
                cosine: c,
            });
        }
    }
    let final_risks = labels
        .iter()
        .zip(traces)
        .map(|(l, t)| (l.clone(), t.final_risk().unwrap_or(f64::NAN)))
        .collect();
    Ok(CompareReport { pairs, final_risks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{norm, span_residual};
    use crate::models::LinearModel;
    use crate::reweighting::GroupInfo;

    fn single_sample() -> Dataset {
        Dataset::new(
            Matrix::new(2, 1, vec![1.0, 0.0]).unwrap(),
            vec![2.0],
            GroupInfo::single(1).unwrap(),
            "one point",
            false,
        )
        .unwrap()
    }

    #[test]
    fn scalar_recursion() {
        let data = single_sample();
        let model = LinearModel::zeros(2);
        let mut cfg = TrainConfig::new(0.5, 1, LossKind::Squared, Scheme::Erm);
        cfg.stop_risk = 0.0;
        let run = train(&model, &data, &cfg).unwrap();
        assert_eq!(run.params, vec![1.0, 0.0]);
        assert_eq!(run.steps, 1);

        cfg.epochs = 5;
        let run = train(&model, &data, &cfg).unwrap();
        let risks: Vec<f64> = run.trace.rows.iter().map(|r| r.risk).collect();
        // θ ← θ + ½(2 − θ): residual halves, risk quarters
        assert_eq!(risks[0], 2.0);
        assert_eq!(risks[1], 0.5);
        for w in risks.windows(2) {
            assert!((w[1] / w[0] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn early_stop_and_record_cadence() {
        let data = single_sample();
        let model = LinearModel::zeros(2);
        let mut cfg = TrainConfig::new(0.5, 1000, LossKind::Squared, Scheme::Erm);
        cfg.record_every = 7;
        cfg.stop_risk = 1e-10;
        let run = train(&model, &data, &cfg).unwrap();
        assert!(run.stopped_early);
        let last = run.trace.last().unwrap();
        assert!(last.risk <= 1e-10);
        assert_eq!(last.epoch, run.steps);
        for w in run.trace.rows.windows(2) {
            assert!(w[1].epoch > w[0].epoch);
        }
        assert!(run.trace.rows[..run.trace.rows.len() - 1]
            .iter()
            .all(|r| r.epoch % 7 == 0));
    }

    #[test]
    fn huge_mu_pins_parameters() {
        let data = single_sample();
        let model = LinearModel::zeros(2);
        let eta = 1e-6;
        let mu = 1e6;
        let mut cfg = TrainConfig::new(eta, 200, LossKind::Squared, Scheme::Erm);
        cfg.mu = mu;
        cfg.stop_risk = 0.0;
        let run = train(&model, &data, &cfg).unwrap();
        // contraction 1 − ημ + η‖x‖² per step around a drive of η‖∇‖ = η·2
        let initial_grad = 2.0;
        let bound = initial_grad * eta / (eta * mu - eta);
        assert!(
            norm(&run.params) <= bound + 1e-15,
            "{} > {bound}",
            norm(&run.params)
        );
    }

    #[test]
    fn diverges_with_huge_step() {
        let data = single_sample();
        let model = LinearModel::zeros(2);
        let mut cfg = TrainConfig::new(1e3, 100_000, LossKind::Squared, Scheme::Erm);
        cfg.record_every = 1;
        match train(&model, &data, &cfg) {
            Err(GrwError::Diverged { epoch, trace }) => {
                assert!(epoch > 0);
                assert!(!trace.rows.is_empty());
                assert!(trace.rows.iter().all(|r| r.risk.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_config_and_labels() {
        let data = single_sample();
        let model = LinearModel::zeros(2);
        let cfg = TrainConfig::new(0.0, 10, LossKind::Squared, Scheme::Erm);
        assert!(train(&model, &data, &cfg).is_err());
        let cfg = TrainConfig::new(0.1, 10, LossKind::Logistic, Scheme::Erm);
        assert!(train(&model, &data, &cfg).is_err());
        let cfg = TrainConfig::new(0.1, 10, LossKind::Squared, Scheme::Erm);
        assert!(train(&LinearModel::zeros(3), &data, &cfg).is_err());
    }

    #[test]
    fn displacement_stays_in_span() {
        let x = Matrix::from_columns(&[
            vec![0.5, 0.1, 0.0, 0.2],
            vec![0.0, 0.6, 0.3, -0.1],
            vec![0.2, -0.2, 0.1, 0.7],
        ])
        .unwrap();
        let data = Dataset::new(
            x.clone(),
            vec![1.0, -1.0, 1.0],
            GroupInfo::from_sizes(&[2, 1]).unwrap(),
            "span check",
            true,
        )
        .unwrap();
        let model = LinearModel::new(vec![0.3, -0.2, 0.9, 0.1]);
        for scheme in [
            Scheme::Erm,
            Scheme::Iw,
            Scheme::Gdro { nu: 0.5 },
            Scheme::Cvar { alpha: 0.5 },
        ] {
            for loss in [
                LossKind::Squared,
                LossKind::Logistic,
                LossKind::PolyTailed {
                    alpha: 1.0,
                    beta: 0.0,
                },
            ] {
                let mut cfg = TrainConfig::new(0.5, 300, loss, scheme);
                cfg.record_every = 10;
                train_observed(&model, &data, &cfg, &mut |v| {
                    let d: Vec<f64> = v.theta.iter().zip(v.theta0).map(|(a, b)| a - b).collect();
                    let r = span_residual(&d, &x)?;
                    assert!(
                        r <= 1e-8 * norm(&d).max(f64::MIN_POSITIVE),
                        "{scheme} {loss}: {r}"
                    );
                    assert!(v.weights.simplex_violation() <= 1e-12);
                    Ok(())
                })
                .unwrap();
            }
        }
    }

    #[test]
    fn safe_learning_rate_examples() {
        let eta = safe_learning_rate(&Matrix::identity(2), 1.0).unwrap();
        assert!((eta - 1.0 / 16.0).abs() < 1e-15);
        let x = Matrix::from_columns(&[vec![0.3, 0.1, 0.0], vec![0.1, 0.5, 0.2]]).unwrap();
        let base = safe_learning_rate(&x, 0.5).unwrap();
        let scaled = safe_learning_rate(&x.scaled(3.0), 0.5).unwrap();
        assert!((scaled - base / 9.0).abs() < 1e-12 * base);
        let dup = Matrix::from_columns(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            safe_learning_rate(&dup, 1.0),
            Err(GrwError::RankDeficient { .. })
        ));
    }

    #[test]
    fn compare_identical_runs() {
        let data = single_sample();
        let model = LinearModel::zeros(2);
        let cfg = TrainConfig::new(0.5, 10, LossKind::Squared, Scheme::Erm);
        let a = train(&model, &data, &cfg).unwrap();
        let b = train(&model, &data, &cfg).unwrap();
        let rep = compare_runs(
            &["a".into(), "b".into()],
            &[&a.params, &b.params],
            &[&a.trace, &b.trace],
            &[0.0, 0.0],
        )
        .unwrap();
        assert_eq!(rep.pairs[0].gap, 0.0);
        assert_eq!(rep.pairs[0].cosine, 1.0);
        assert!(compare_runs(&["a".into()], &[&a.params], &[&a.trace], &[0.0]).is_err());
    }
}
